//! Measurement perturbations (additive noise, patch dropout) and the
//! patch reshaping between `p × l` matrices and `N × D` patch sequences.

use std::rc::Rc;

use dpae_autograd::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Signal-to-noise ratio in dB; `None` disables noise.
    pub snr_db: Option<f64>,
    /// Fraction of patches zeroed.
    pub ratio_pad: f64,
    pub rng_seed: u64,
}

impl PerturbConfig {
    pub fn clean() -> Self {
        Self {
            snr_db: None,
            ratio_pad: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio_pad) {
            return Err(Error::Config(format!("ratio_pad {} outside [0, 1]", self.ratio_pad)));
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        Ok(())
    }
}

/// Adds zero-mean Gaussian noise per channel (column) with variance
/// `P_sig / 10^(snr_db / 10)`, `P_sig` being the channel's mean square.
pub fn add_noise<R: Rng + ?Sized>(x: &Tensor, snr_db: Option<f64>, rng: &mut R) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("add_noise input".into()));
    }
    let Some(snr) = snr_db else {
        return Ok(x.clone());
    };
    let (p, l) = (x.rows(), x.cols());
    let std: Vec<f64> = (0..l)
        .map(|c| {
            let power = (0..p).map(|t| x.get(t, c).powi(2)).sum::<f64>() / p as f64;
            (power / 10f64.powf(snr / 10.0)).sqrt()
        })
        .collect();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(l) {
        for (v, s) in row.iter_mut().zip(&std) {
            let z: f64 = rng.sample(StandardNormal);
            *v += s * z;
        }
    }
    Ok(out)
}

/// Geometry of the patch sequence: each channel is cut into
/// `patches_per_channel` contiguous segments of `patch_len` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub samples: usize,
    pub channels: usize,
    pub patch_len: usize,
}

impl PatchGrid {
    pub fn new(samples: usize, channels: usize, patch_len: usize) -> Result<Self> {
        if samples == 0 || channels == 0 || patch_len == 0 || !samples.is_multiple_of(patch_len) {
            return Err(Error::Config(format!(
                "{samples} samples cannot be split into patches of {patch_len}"
            )));
        }
        Ok(Self {
            samples,
            channels,
            patch_len,
        })
    }

    pub fn patches_per_channel(&self) -> usize {
        self.samples / self.patch_len
    }

    /// `N = l · m`.
    pub fn seq_len(&self) -> usize {
        self.channels * self.patches_per_channel()
    }

    fn check(&self, x: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
        if x.shape() != [rows, cols] {
            return Err(Error::Input(format!(
                "{what}: expected {rows}×{cols}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// For each patch-sequence entry (row-major `N × D`), the flat index in the `p × l` matrix.
    pub fn patch_index(&self) -> Rc<[usize]> {
        let (m, d, l) = (self.patches_per_channel(), self.patch_len, self.channels);
        let mut idx = Vec::with_capacity(self.samples * l);
        for i in 0..l {
            for j in 0..m {
                for c in 0..d {
                    idx.push((j * d + c) * l + i);
                }
            }
        }
        idx.into()
    }

    /// For each `p × l` entry, the flat index in the `N × D` patch sequence.
    pub fn unpatch_index(&self) -> Rc<[usize]> {
        let (m, d, l) = (self.patches_per_channel(), self.patch_len, self.channels);
        let mut idx = Vec::with_capacity(self.samples * l);
        for t in 0..self.samples {
            for i in 0..l {
                idx.push((i * m + t / d) * d + t % d);
            }
        }
        idx.into()
    }

    /// Row `i·m + j` holds samples `[j·D, (j+1)·D)` of channel `i`.
    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x, self.samples, self.channels, "patchify")?;
        let src = x.data();
        let data = self.patch_index().iter().map(|&k| src[k]).collect();
        Ok(Tensor::new(vec![self.seq_len(), self.patch_len], data)?)
    }

    pub fn unpatchify(&self, xp: &Tensor) -> Result<Tensor> {
        self.check(xp, self.seq_len(), self.patch_len, "unpatchify")?;
        let src = xp.data();
        let data = self.unpatch_index().iter().map(|&k| src[k]).collect();
        Ok(Tensor::new(vec![self.samples, self.channels], data)?)
    }
}

/// Zeroes `round(ratio_pad · N)` distinct rows chosen uniformly without
/// replacement. The returned mask is `true` for zeroed rows.
pub fn mask_patches<R: Rng + ?Sized>(
    xp: &Tensor,
    ratio_pad: f64,
    rng: &mut R,
) -> Result<(Tensor, Vec<bool>)> {
    if !(0.0..=1.0).contains(&ratio_pad) {
        return Err(Error::Config(format!("ratio_pad {ratio_pad} outside [0, 1]")));
    }
    let n = xp.rows();
    let count = (ratio_pad * n as f64).round() as usize;
    let mut mask = vec![false; n];
    let mut out = xp.clone();
    if count == 0 {
        return Ok((out, mask));
    }
    let d = xp.cols();
    for row in rand::seq::index::sample(rng, n, count) {
        mask[row] = true;
        out.data_mut()[row * d..(row + 1) * d].fill(0.0);
    }
    Ok((out, mask))
}

/// Noise, patchify and masking in pipeline order.
pub fn perturb<R: Rng + ?Sized>(
    x: &Tensor,
    grid: &PatchGrid,
    snr_db: Option<f64>,
    ratio_pad: f64,
    rng: &mut R,
) -> Result<(Tensor, Vec<bool>)> {
    let noisy = add_noise(x, snr_db, rng)?;
    let patches = grid.patchify(&noisy)?;
    mask_patches(&patches, ratio_pad, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn paper_grid_dimensions() {
        let grid = PatchGrid::new(200, 38, 40).unwrap();
        assert_eq!(grid.patches_per_channel(), 5);
        assert_eq!(grid.seq_len(), 190);
        let xp = grid.patchify(&Tensor::zeros(&[200, 38])).unwrap();
        assert_eq!(xp.shape(), &[190, 40]);
        assert!(xp.data().iter().all(|&v| v == 0.0));
        assert!(PatchGrid::new(200, 38, 30).is_err());
    }

    #[test]
    fn single_entry_lands_at_index_oracle() {
        let grid = PatchGrid::new(200, 38, 40).unwrap();
        let mut x = Tensor::zeros(&[200, 38]);
        x.set(85, 2, 7.0);
        let xp = grid.patchify(&x).unwrap();
        let m = 5;
        let (row, col) = (2 * m + 85 / 40, 85 % 40);
        assert_eq!((row, col), (12, 5));
        for r in 0..190 {
            for c in 0..40 {
                let expected = if (r, c) == (row, col) { 7.0 } else { 0.0 };
                assert_eq!(xp.get(r, c), expected);
            }
        }
        let back = grid.unpatchify(&xp).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn unpatchify_ones_and_shape_errors() {
        let grid = PatchGrid::new(80, 8, 20).unwrap();
        let ones = grid.unpatchify(&Tensor::ones(&[32, 20])).unwrap();
        assert_eq!(ones, Tensor::ones(&[80, 8]));
        assert!(grid.unpatchify(&Tensor::ones(&[20, 32])).is_err());
        assert!(grid.patchify(&Tensor::ones(&[8, 80])).is_err());
    }

    #[test]
    fn masking_counts_and_content() {
        let mut rng = stream(3, 0);
        let xp = Tensor::new(vec![190, 4], (0..760).map(|v| v as f64 + 1.0).collect()).unwrap();
        let (out, mask) = mask_patches(&xp, 0.0, &mut rng).unwrap();
        assert_eq!(out, xp);
        assert!(mask.iter().all(|m| !m));

        let (out, mask) = mask_patches(&xp, 0.40, &mut rng).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 76);
        for r in 0..190 {
            if mask[r] {
                assert!(out.row_slice(r).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(out.row_slice(r), xp.row_slice(r));
            }
        }
        assert!(mask_patches(&xp, 1.5, &mut rng).is_err());
    }

    #[test]
    fn masking_is_deterministic_per_rng_state() {
        let xp = Tensor::ones(&[32, 3]);
        let (_, a) = mask_patches(&xp, 0.25, &mut stream(11, 2)).unwrap();
        let (_, b) = mask_patches(&xp, 0.25, &mut stream(11, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_noise_is_identity() {
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(add_noise(&x, None, &mut stream(0, 0)).unwrap(), x);
        let bad = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(add_noise(&bad, Some(20.0), &mut stream(0, 0)).is_err());
    }
}
