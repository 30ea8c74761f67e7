use std::fs;
use std::io::Write;
use std::path::Path;

use dpae_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::channels::{default_registry, registry_subset, ChannelSpec, Jitter, DESK_CHANNELS, REFERENCE_SIZE_CM};
use super::{BreakLocation, DiagnosisLabel};
use crate::error::{io_err, json_err, Error, Result};
use crate::rng::stream;

/// Test-split values are clipped to this interval after scaling with train statistics.
pub const TEST_CLIP: (f64, f64) = (-0.5, 1.5);

const RATE_JITTER: f64 = 0.03;
const AMPLITUDE_JITTER: f64 = 0.02;
const PHASE_JITTER_S: f64 = 0.5;
const MEASUREMENT_NOISE: f64 = 0.004;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub count: usize,
    pub seed: u64,
    pub size_range_cm: (f64, f64),
    /// Fraction of events assigned to the training split.
    pub split_fraction: f64,
    pub samples: usize,
    pub period_s: f64,
    pub channels: Vec<ChannelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransientSample {
    /// `p × l`: one column per channel.
    pub matrix: Tensor,
    pub label: DiagnosisLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub samples: Vec<TransientSample>,
    pub split: Vec<Split>,
    pub stats: NormStats,
    pub normalized: bool,
}

impl GeneratorConfig {
    /// 356 events over the full 38-channel registry, 200 samples at 1 s.
    pub fn paper(seed: u64) -> Self {
        Self {
            count: 356,
            seed,
            size_range_cm: REFERENCE_SIZE_CM,
            split_fraction: 0.8,
            samples: 200,
            period_s: 1.0,
            channels: default_registry(),
        }
    }

    /// 64 events over eight channels, 80 samples at 1.25 s.
    pub fn desk(seed: u64) -> Self {
        Self {
            count: 64,
            seed,
            size_range_cm: REFERENCE_SIZE_CM,
            split_fraction: 0.8,
            samples: 80,
            period_s: 1.25,
            channels: registry_subset(&DESK_CHANNELS),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range_cm;
        if self.count < 4 {
            return Err(Error::Config(format!("need at least 4 events, got {}", self.count)));
        }
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Config(format!("invalid size range [{lo}, {hi}]")));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        if self.samples == 0 || self.channels.is_empty() || self.period_s <= 0.0 {
            return Err(Error::Config("empty sample grid or channel list".into()));
        }
        Ok(())
    }
}

/// Synthesizes `config.count` events. Locations alternate cold/hot, sizes are
/// log-uniform over the configured range, and every random draw comes from a
/// per-event stream of `config.seed`.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let (lo, hi) = config.size_range_cm;
    let (p, l) = (config.samples, config.channels.len());

    let mut samples = Vec::with_capacity(config.count);
    for event in 0..config.count {
        let mut rng = stream(config.seed, event as u64);
        let location = if event % 2 == 0 {
            BreakLocation::ColdLeg
        } else {
            BreakLocation::HotLeg
        };
        let u: f64 = rng.random();
        let size_cm = (lo * (hi / lo).powf(u)).clamp(lo, hi);

        let mut data = vec![0.0; p * l];
        for (c, spec) in config.channels.iter().enumerate() {
            let jitter = Jitter {
                rate: 1.0 + RATE_JITTER * rng.sample::<f64, _>(StandardNormal),
                amplitude: 1.0 + AMPLITUDE_JITTER * rng.sample::<f64, _>(StandardNormal),
                phase_s: PHASE_JITTER_S * rng.random::<f64>(),
            };
            for t in 0..p {
                let y = spec.response(location, size_cm, t as f64 * config.period_s, jitter);
                let noise = MEASUREMENT_NOISE * rng.sample::<f64, _>(StandardNormal);
                data[t * l + c] = spec.scale * (y + noise);
            }
        }
        samples.push(TransientSample {
            matrix: Tensor::new(vec![p, l], data)?,
            label: DiagnosisLabel { location, size_cm },
        });
    }

    let split = assign_split(config, &samples);
    let stats = train_stats(&samples, &split, l);
    Ok(Dataset {
        config: config.clone(),
        samples,
        split,
        stats,
        normalized: false,
    })
}

/// Stratified by location so both splits keep the cold/hot balance.
fn assign_split(config: &GeneratorConfig, samples: &[TransientSample]) -> Vec<Split> {
    let mut split = vec![Split::Test; samples.len()];
    let mut rng = stream(config.seed, u64::MAX);
    for location in [BreakLocation::ColdLeg, BreakLocation::HotLeg] {
        let mut idx: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label.location == location)
            .collect();
        idx.shuffle(&mut rng);
        // count >= 4 guarantees at least two events per location
        let n_train = ((idx.len() as f64 * config.split_fraction).round() as usize)
            .clamp(1, idx.len() - 1);
        for &i in &idx[..n_train] {
            split[i] = Split::Train;
        }
    }
    split
}

fn train_stats(samples: &[TransientSample], split: &[Split], l: usize) -> NormStats {
    let mut min = vec![f64::INFINITY; l];
    let mut max = vec![f64::NEG_INFINITY; l];
    for (s, _) in samples.iter().zip(split).filter(|(_, &sp)| sp == Split::Train) {
        for row in s.matrix.data().chunks(l) {
            for (c, &v) in row.iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
    }
    NormStats { min, max }
}

impl NormStats {
    fn scale_value(&self, c: usize, v: f64) -> f64 {
        let range = self.max[c] - self.min[c];
        if range > 0.0 {
            (v - self.min[c]) / range
        } else {
            0.5
        }
    }

    /// Maps each channel to `[0, 1]` over the training range; constant channels map to 0.5.
    pub fn normalize(&self, matrix: &Tensor) -> Tensor {
        let l = matrix.cols();
        let mut out = matrix.clone();
        for row in out.data_mut().chunks_mut(l) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.scale_value(c, *v);
            }
        }
        out
    }

    pub fn denormalize(&self, matrix: &Tensor) -> Tensor {
        let l = matrix.cols();
        let mut out = matrix.clone();
        for row in out.data_mut().chunks_mut(l) {
            for (c, v) in row.iter_mut().enumerate() {
                let range = self.max[c] - self.min[c];
                *v = if range > 0.0 {
                    self.min[c] + *v * range
                } else {
                    self.min[c]
                };
            }
        }
        out
    }
}

/// Scales every sample with the training-split statistics; test samples are
/// additionally clipped to [`TEST_CLIP`].
pub fn normalize(dataset: &Dataset) -> Dataset {
    if dataset.normalized {
        return dataset.clone();
    }
    let samples = dataset
        .samples
        .iter()
        .zip(&dataset.split)
        .map(|(s, split)| {
            let mut matrix = dataset.stats.normalize(&s.matrix);
            if *split == Split::Test {
                matrix
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = v.clamp(TEST_CLIP.0, TEST_CLIP.1));
            }
            TransientSample {
                matrix,
                label: s.label,
            }
        })
        .collect();
    Dataset {
        samples,
        normalized: true,
        ..dataset.clone()
    }
}

impl Dataset {
    pub fn channels(&self) -> &[ChannelSpec] {
        &self.config.channels
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.split[i] == split)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    file: String,
    location: BreakLocation,
    size_cm: f64,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    normalized: bool,
    generator: GeneratorConfig,
    normalization: NormStats,
    samples: Vec<SampleEntry>,
    #[serde(default)]
    run: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sample_file(i: usize) -> String {
    format!("samples/event_{i:04}.csv")
}

/// Writes `manifest.json` plus one CSV per event (header = node names).
/// A non-null `run` record is stored in the manifest and as a leading
/// `# run=` comment line in every CSV.
pub fn write_dataset(dataset: &Dataset, dir: &Path, run: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir.join("samples")).map_err(io_err(dir))?;
    let header = dataset
        .channels()
        .iter()
        .map(|c| c.node_name.as_str())
        .collect::<Vec<_>>()
        .join(",");
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, (s, split)) in dataset.samples.iter().zip(&dataset.split).enumerate() {
        let file = sample_file(i);
        let path = dir.join(&file);
        let mut out = String::with_capacity(s.matrix.numel() * 20);
        if !run.is_null() {
            out.push_str(&format!("# run={run}\n"));
        }
        out.push_str(&header);
        out.push('\n');
        let l = s.matrix.cols();
        for row in s.matrix.data().chunks(l) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        fs::write(&path, out).map_err(io_err(&path))?;
        entries.push(SampleEntry {
            file,
            location: s.label.location,
            size_cm: s.label.size_cm,
            split: *split,
        });
    }
    let manifest = Manifest {
        seed: dataset.config.seed,
        normalized: dataset.normalized,
        generator: dataset.config.clone(),
        normalization: dataset.stats.clone(),
        samples: entries,
        run: run.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(json_err(&path))?;
    f.write_all(b"\n").map_err(io_err(&path))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(json_err(&path))?;
    let (p, l) = (manifest.generator.samples, manifest.generator.channels.len());
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut split = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let path = dir.join(&entry.file);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
        let expected: Vec<&str> = manifest
            .generator
            .channels
            .iter()
            .map(|c| c.node_name.as_str())
            .collect();
        if header != expected {
            return Err(Error::Format {
                path,
                msg: "header does not match channel registry".into(),
            });
        }
        let mut data = Vec::with_capacity(p * l);
        for line in lines.filter(|l| !l.is_empty()) {
            for field in line.split(',') {
                data.push(field.trim().parse::<f64>().map_err(|e| Error::Format {
                    path: path.clone(),
                    msg: format!("bad number {field:?}: {e}"),
                })?);
            }
        }
        let matrix = Tensor::new(vec![p, l], data).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        samples.push(TransientSample {
            matrix,
            label: DiagnosisLabel {
                location: entry.location,
                size_cm: entry.size_cm,
            },
        });
        split.push(entry.split);
    }
    Ok(Dataset {
        config: manifest.generator,
        samples,
        split,
        stats: manifest.normalization,
        normalized: manifest.normalized,
    })
}
