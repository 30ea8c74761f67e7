//! Classification, regression and reconstruction metrics.

use dpae_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::mse_loss;

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `None` when no sample was predicted as this class.
    pub fn precision(&self) -> Option<f64> {
        (self.tp + self.fp > 0).then(|| self.tp as f64 / (self.tp + self.fp) as f64)
    }

    /// `None` when no sample belongs to this class.
    pub fn recall(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| self.tp as f64 / (self.tp + self.fn_) as f64)
    }
}

/// Per-class counts from predicted and true class indices.
pub fn confusion_counts(predicted: &[usize], actual: &[usize], classes: usize) -> Result<Vec<ConfusionCounts>> {
    if predicted.len() != actual.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} targets",
            predicted.len(),
            actual.len()
        )));
    }
    if let Some(&bad) = predicted.iter().chain(actual).find(|&&c| c >= classes) {
        return Err(Error::Input(format!("class {bad} out of range for {classes} classes")));
    }
    let mut counts = vec![ConfusionCounts::default(); classes];
    for (&p, &a) in predicted.iter().zip(actual) {
        for (c, k) in counts.iter_mut().enumerate() {
            match (p == c, a == c) {
                (true, true) => k.tp += 1,
                (true, false) => k.fp += 1,
                (false, true) => k.fn_ += 1,
                (false, false) => k.tn += 1,
            }
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub value: f64,
    /// Precision or recall was undefined (or `tp = 0`); `value` is then 0.
    pub degenerate: bool,
}

/// `F1 = 2 / (1/recall + 1/precision)`.
pub fn f1(counts: &ConfusionCounts) -> F1Score {
    match (counts.precision(), counts.recall()) {
        (Some(p), Some(r)) if counts.tp > 0 => F1Score {
            value: 2.0 / (1.0 / r + 1.0 / p),
            degenerate: false,
        },
        _ => F1Score {
            value: 0.0,
            degenerate: true,
        },
    }
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(counts: &[ConfusionCounts]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Input("macro_f1 needs at least one class".into()));
    }
    Ok(counts.iter().map(|c| f1(c).value).sum::<f64>() / counts.len() as f64)
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::Input(format!(
            "rmse needs equal non-empty inputs, got {} and {}",
            predictions.len(),
            targets.len()
        )));
    }
    let sq: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / predictions.len() as f64).sqrt())
}

/// Reported in place of an infinite improvement ratio.
pub const RATIO_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub mse_model: f64,
    pub mse_identity: f64,
    /// `mse_identity / mse_model`, capped at [`RATIO_CAP`].
    pub improvement_ratio: f64,
    pub capped: bool,
}

pub fn reconstruction_report(clean: &Tensor, perturbed: &Tensor, reconstructed: &Tensor) -> Result<ReconstructionReport> {
    let mse_model = mse_loss(clean, reconstructed)?;
    let mse_identity = mse_loss(clean, perturbed)?;
    let (improvement_ratio, capped) = if perturbed == reconstructed {
        (1.0, false)
    } else if mse_model == 0.0 {
        (RATIO_CAP, true)
    } else {
        let r = mse_identity / mse_model;
        (r.min(RATIO_CAP), r > RATIO_CAP)
    };
    Ok(ReconstructionReport {
        mse_model,
        mse_identity,
        improvement_ratio,
        capped,
    })
}

/// Summary used by evaluation reports for a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub macro_f1: f64,
    pub per_class_f1: Vec<F1Score>,
    pub per_class_precision: Vec<Option<f64>>,
    pub accuracy: f64,
    pub counts: Vec<ConfusionCounts>,
}

pub fn classification_metrics(predicted: &[usize], actual: &[usize], classes: usize) -> Result<ClassificationMetrics> {
    let counts = confusion_counts(predicted, actual, classes)?;
    if predicted.is_empty() {
        return Err(Error::Input("no predictions".into()));
    }
    let correct = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    Ok(ClassificationMetrics {
        macro_f1: macro_f1(&counts)?,
        per_class_f1: counts.iter().map(f1).collect(),
        per_class_precision: counts.iter().map(|c| c.precision()).collect(),
        accuracy: correct as f64 / predicted.len() as f64,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: usize, fp: usize, fn_: usize) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn: 0 }
    }

    #[test]
    fn f1_hand_values() {
        assert_eq!(f1(&counts(4, 0, 0)).value, 1.0);
        let half_recall = f1(&counts(2, 0, 2));
        assert!((half_recall.value - 2.0 / 3.0).abs() < 1e-15);
        assert!(!half_recall.degenerate);
        let none = f1(&counts(0, 3, 2));
        assert_eq!(none.value, 0.0);
        assert!(none.degenerate);
        assert!(f1(&counts(0, 0, 0)).degenerate);
    }

    #[test]
    fn macro_f1_is_mean() {
        // F1 0.8: tp 4, fp 1, fn 1; F1 0.6: tp 3, fp 2, fn 2.
        let m = macro_f1(&[counts(4, 1, 1), counts(3, 2, 2)]).unwrap();
        assert!((m - 0.7).abs() < 1e-15);
        let perfect = confusion_counts(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(macro_f1(&perfect).unwrap(), 1.0);
        assert!(macro_f1(&[]).is_err());
    }

    #[test]
    fn rmse_trivial_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0, 0.0, 5.0], &[1.0, -2.0, 3.0]).unwrap(), 2.0);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn reconstruction_report_edges() {
        let clean = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let noisy = Tensor::new(vec![2, 2], vec![0.5, 1.0, 2.0, 2.0]).unwrap();
        let exact = reconstruction_report(&clean, &noisy, &clean).unwrap();
        assert_eq!(exact.mse_model, 0.0);
        assert!(exact.capped);
        assert_eq!(exact.improvement_ratio, RATIO_CAP);
        let same = reconstruction_report(&clean, &noisy, &noisy).unwrap();
        assert_eq!(same.improvement_ratio, 1.0);
        assert!((same.mse_identity - 1.25 / 4.0).abs() < 1e-15);
        assert!(reconstruction_report(&clean, &noisy, &Tensor::zeros(&[4, 1])).is_err());
    }

    #[test]
    fn confusion_counts_totals() {
        let c = confusion_counts(&[0, 1, 1, 0, 1], &[0, 0, 1, 1, 1], 2).unwrap();
        assert!(c.iter().all(|k| k.total() == 5));
        assert_eq!(c[1], ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 1 });
        assert!(confusion_counts(&[2], &[0], 2).is_err());
    }
}
