/// Stops once the best validation loss has improved by less than
/// `threshold` (relative) over the last `window` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    window: usize,
    threshold: f64,
    best: Vec<f64>,
}

impl EarlyStopping {
    pub fn new(window: usize, threshold: f64) -> Self {
        assert!(window >= 1 && threshold > 0.0, "window >= 1 and threshold > 0");
        Self {
            window,
            threshold,
            best: Vec::new(),
        }
    }

    /// Records one epoch's validation loss; returns `true` when training should stop.
    pub fn update(&mut self, val_loss: f64) -> bool {
        let best = self.best.last().map_or(val_loss, |&b| b.min(val_loss));
        self.best.push(best);
        let n = self.best.len();
        if n <= self.window {
            return false;
        }
        let before = self.best[n - 1 - self.window];
        improvement(before, best) < self.threshold
    }

    /// Best-so-far validation loss after each recorded epoch.
    pub fn best_curve(&self) -> &[f64] {
        &self.best
    }
}

/// Relative decrease from `before` to `after`; a zero `before` counts as no room to improve.
pub fn improvement(before: f64, after: f64) -> f64 {
    if before > 0.0 {
        (before - after) / before
    } else {
        0.0
    }
}
