//! Monitoring channel registry and the closed-form response templates that
//! drive the synthetic loss-of-coolant surrogate.

use serde::{Deserialize, Serialize};

use super::BreakLocation;

/// Break sizes are mapped onto `[0, 1]` on a log scale over this reference
/// interval, independent of the range a dataset is drawn from.
pub const REFERENCE_SIZE_CM: (f64, f64) = (0.1, 35.1);

/// Minimum gap between the settled values of a full-sensitivity `Decay`
/// channel at 1 cm and at 30 cm, in template units.
pub const DECAY_SEPARATION: f64 = 0.25;

/// Relative strength of the break-location offset on rates and event timing.
/// Location leaves response depth alone, so depth identifies size alone.
pub const LOCATION_OFFSET: f64 = 0.25;

/// Level shift a full-sensitivity channel develops after the break, signed
/// by location. Size never moves the level away from the initial value.
pub const LOCATION_LEVEL: f64 = 0.15;

/// Time constant of the location level shift.
const LEVEL_TAU_S: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseTemplate {
    Decay,
    LevelDrop,
    StepThenDecay,
    OscillatoryDecay,
    Ramp,
    /// Nominal level throughout; only measurement noise varies.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub index: usize,
    pub node_name: String,
    pub description: String,
    pub response_template: ResponseTemplate,
    pub location_sensitivity: f64,
    pub size_sensitivity: f64,
    /// Physical value corresponding to template level 1.
    pub scale: f64,
}

/// Per-sample perturbation of a template evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub rate: f64,
    pub amplitude: f64,
    pub phase_s: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        rate: 1.0,
        amplitude: 1.0,
        phase_s: 0.0,
    };
}

/// Log-scale position of a break size in the reference interval, clamped to `[0, 1]`.
pub fn size_fraction(size_cm: f64) -> f64 {
    let (lo, hi) = REFERENCE_SIZE_CM;
    ((size_cm / lo).ln() / (hi / lo).ln()).clamp(0.0, 1.0)
}

fn smooth_step(t: f64, at: f64, width: f64) -> f64 {
    1.0 / (1.0 + (-(t - at) / width).exp())
}

impl ChannelSpec {
    fn drives(&self, location: BreakLocation, size_cm: f64) -> (f64, f64) {
        let s = self.size_sensitivity * size_fraction(size_cm);
        let d = self.location_sensitivity * location.sign() * LOCATION_OFFSET;
        (s, d)
    }

    /// Asymptotic level of `Decay` and `OscillatoryDecay` channels.
    pub fn settled_value(&self, location: BreakLocation, size_cm: f64) -> f64 {
        let (s, _) = self.drives(location, size_cm);
        1.0 - (0.15 + 0.75 * s).clamp(0.0, 0.95) + self.level_shift(location)
    }

    fn level_shift(&self, location: BreakLocation) -> f64 {
        self.location_sensitivity * location.sign() * LOCATION_LEVEL
    }

    /// Template response (dimensionless, roughly within `[0, 1]`) at time `t_s`.
    pub fn response(&self, location: BreakLocation, size_cm: f64, t_s: f64, jitter: Jitter) -> f64 {
        let (s, d) = self.drives(location, size_cm);
        let t = (t_s - jitter.phase_s).max(0.0);
        let rate = 0.05 * (0.3 + 2.7 * s) * (1.0 + d) * jitter.rate;
        let depth = (0.15 + 0.75 * s).clamp(0.0, 0.95) * jitter.amplitude;
        let shift = self.level_shift(location) * (1.0 - (-t / LEVEL_TAU_S).exp());
        let base = match self.response_template {
            ResponseTemplate::Decay => {
                let floor = 1.0 - depth;
                floor + (1.0 - floor) * (-rate * t).exp()
            }
            ResponseTemplate::LevelDrop => {
                let injection_at = 60.0 - 40.0 * s + 15.0 * d;
                let recovery = 0.3 * depth * smooth_step(t, injection_at, 2.0);
                1.0 - depth * (1.0 - (-rate * t).exp()) + recovery
            }
            ResponseTemplate::StepThenDecay => {
                let trip_at = 20.0 - 15.0 * s + 5.0 * d;
                let drop = smooth_step(t, trip_at, 1.0);
                let level = 0.5 * (1.0 - depth);
                let after = level * (-rate * (t - trip_at).max(0.0)).exp();
                1.0 - drop * (1.0 - after)
            }
            ResponseTemplate::OscillatoryDecay => {
                let floor = 1.0 - depth;
                let omega = (0.2 + 0.3 * s) * (1.0 + 0.5 * d);
                floor + (1.0 - floor) * (-rate * t).exp() * (omega * t).cos()
            }
            ResponseTemplate::Ramp => {
                let onset = 70.0 - 55.0 * s + 10.0 * d;
                let slope = 0.02 + 0.05 * s;
                let level = 0.4 + 0.6 * depth;
                level * (slope * (t - onset)).clamp(0.0, 1.0) * smooth_step(t, onset, 1.0)
            }
            ResponseTemplate::Constant => 1.0,
        };
        base + shift
    }
}

use ResponseTemplate::*;

const REGISTRY: [(&str, &str, ResponseTemplate, f64, f64, f64); 38] = [
    ("tempf_505010000", "Temperature of main feed water", StepThenDecay, 0.1, 0.6, 230.0),
    ("mflowj_505010000", "Mass flow rate of main feed water", StepThenDecay, 0.1, 0.8, 540.0),
    ("cntrlvar_11", "Water level of steam generator", LevelDrop, 0.2, 0.7, 12.0),
    ("mflowj_566010000", "Mass flow rate of auxiliary feed water", Ramp, 0.1, 0.6, 25.0),
    ("mflowj_537000000", "Mass flow rate of main steam", StepThenDecay, 0.1, 0.7, 560.0),
    ("p_540010000", "Pressure of steam line", Decay, 0.1, 0.5, 6.7e6),
    ("p_850010000", "Pressure of steam busbar", Decay, 0.1, 0.5, 6.5e6),
    ("voidf_811010000", "Water level of SI", LevelDrop, 0.2, 0.8, 1.0),
    ("p_810010000", "Pressure of SI", Decay, 0.2, 0.8, 4.5e6),
    ("mflowj_811010000", "Mass flow rate of LHSI pump", Ramp, 0.3, 1.0, 180.0),
    ("mflowj_806000000", "Mass flow rate of boron injection pump", Ramp, 0.2, 0.9, 40.0),
    ("rktpow", "Avg. power", StepThenDecay, 0.1, 0.5, 3.05e9),
    ("cntrlvar_100", "Maximum average temperature of loops", OscillatoryDecay, 0.5, 0.7, 310.0),
    ("tempf_138010000", "Temperature of reactor core outlet", OscillatoryDecay, 0.4, 0.8, 330.0),
    ("tempf_155010000", "Temperature of the upper head", Decay, 0.3, 0.7, 320.0),
    ("cntrlvar_2", "Water level of pressure vessel", LevelDrop, 0.6, 1.0, 10.0),
    ("p_155010000", "Pressure of reactor coolant", Decay, 0.3, 1.0, 15.5e6),
    ("p_260010000", "Pressure of pressurizer", Decay, 0.3, 1.0, 15.4e6),
    ("cntrlvar_42", "Water level of pressurizer", LevelDrop, 0.4, 0.9, 8.0),
    ("cntrlvar_121", "Mass flow rate of reactor coolant", StepThenDecay, 0.5, 0.8, 1.8e4),
    ("tempf_200010000", "Temperature of the broken loop (1#) hot leg", OscillatoryDecay, 1.0, 0.8, 327.0),
    ("tempf_300010000", "Temperature of hot leg of loop 2#", OscillatoryDecay, 0.3, 0.7, 327.0),
    ("tempf_400010000", "Temperature of hot leg of loop 3#", OscillatoryDecay, 0.3, 0.7, 327.0),
    ("tempf_250010000", "Temperature of the broken loop (1#) cold leg", OscillatoryDecay, 1.0, 0.8, 291.0),
    ("tempf_350010000", "Temperature of cold leg of loop 2#", OscillatoryDecay, 0.3, 0.7, 291.0),
    ("tempf_450010000", "Temperature of cold leg of loop 3#", OscillatoryDecay, 0.3, 0.7, 291.0),
    ("cntrlvar_101", "Avg. temperature of the broken loop (1#)", Decay, 0.8, 0.8, 309.0),
    ("cntrlvar_102", "Avg. temperature of loop 2#", Decay, 0.3, 0.7, 309.0),
    ("cntrlvar_103", "Avg. temperature of loop 3#", Decay, 0.3, 0.7, 309.0),
    ("pmpvel_235", "Pump speed of the broken loop (1#)", Constant, 0.0, 0.0, 155.0),
    ("pmpvel_335", "Pump speed of loop 2#", Constant, 0.0, 0.0, 155.0),
    ("pmpvel_435", "Pump speed of loop 3#", Constant, 0.0, 0.0, 155.0),
    ("tempf_270010000", "Temperature of pressurizer surge tube (node 1)", Decay, 0.4, 0.8, 340.0),
    ("tempf_270050000", "Temperature of pressurizer surge tube (node 5)", Decay, 0.4, 0.7, 342.0),
    ("tempg_260010000", "Gas temperature of pressurizer", Decay, 0.3, 0.8, 345.0),
    ("tempf_262010000", "Liquid temperature of pressurizer", Decay, 0.3, 0.8, 345.0),
    ("tempg_281010000", "Upstream temperature of the safety valve of the pressurizer", OscillatoryDecay, 0.3, 0.6, 120.0),
    ("voidf_200010000", "Water level in the hot leg of the breakout loop", LevelDrop, 1.0, 0.9, 1.0),
];

/// The full 38-channel registry in plant-table order.
pub fn default_registry() -> Vec<ChannelSpec> {
    REGISTRY
        .iter()
        .enumerate()
        .map(|(index, &(name, desc, template, loc, size, scale))| ChannelSpec {
            index,
            node_name: name.to_string(),
            description: desc.to_string(),
            response_template: template,
            location_sensitivity: loc,
            size_sensitivity: size,
            scale,
        })
        .collect()
}

/// Registry indices used by the reduced eight-channel profile. The last two
/// are the label-independent pump-speed channels.
pub const DESK_CHANNELS: [usize; 8] = [1, 2, 15, 16, 20, 23, 29, 30];

/// Subset of the default registry, re-indexed from zero.
pub fn registry_subset(indices: &[usize]) -> Vec<ChannelSpec> {
    let full = default_registry();
    indices
        .iter()
        .enumerate()
        .map(|(i, &src)| ChannelSpec {
            index: i,
            ..full[src].clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_38_unique_names() {
        let reg = default_registry();
        assert_eq!(reg.len(), 38);
        let mut names: Vec<_> = reg.iter().map(|c| c.node_name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 38);
        assert_eq!(reg[16].node_name, "p_155010000");
        assert_eq!(reg[16].description, "Pressure of reactor coolant");
        assert!(reg.iter().all(|c| (0.0..=1.0).contains(&c.location_sensitivity)
            && (0.0..=1.0).contains(&c.size_sensitivity)));
    }

    #[test]
    fn constant_channels_ignore_labels() {
        let reg = default_registry();
        let pump = &reg[29];
        for t in [0.0, 10.0, 55.5, 99.5] {
            let a = pump.response(BreakLocation::ColdLeg, 0.2, t, Jitter::NONE);
            let b = pump.response(BreakLocation::HotLeg, 30.0, t, Jitter::NONE);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn size_fraction_endpoints() {
        assert_eq!(size_fraction(0.1), 0.0);
        assert!((size_fraction(35.1) - 1.0).abs() < 1e-15);
        assert!(size_fraction(1.0) < size_fraction(30.0));
    }
}
