//! Context-encoder noise: random rectangles of an image are overwritten.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};

/// Replacement value for masked pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    Zero,
    /// Mean pixel intensity of the training set (see [`CorruptionConfig::dataset_mean`]).
    DatasetMean,
    /// Independent `U[0, 1)` draws.
    UniformNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Inclusive range for the number of rectangles per sample.
    pub n_masks_range: [usize; 2],
    /// Inclusive range for each rectangle side, as a fraction of the image side.
    pub mask_side_range: [f64; 2],
    pub fill_mode: FillMode,
    /// Fill value for [`FillMode::DatasetMean`]; the batch mean is used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_mean: Option<f64>,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            n_masks_range: [1, 3],
            mask_side_range: [0.1, 0.5],
            fill_mode: FillMode::UniformNoise,
            dataset_mean: None,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.n_masks_range;
        if lo < 1 || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "n_masks_range must satisfy 1 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        let [flo, fhi] = self.mask_side_range;
        if !(flo > 0.0 && flo <= fhi && fhi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask_side_range must satisfy 0 < min <= max <= 1, got [{flo}, {fhi}]"
            )));
        }
        if let Some(m) = self.dataset_mean {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::InvalidConfig(format!("dataset_mean {m} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Half-open interval covered by a side of `len` pixels centred at `center`,
/// clipped to `0..size`.
pub(crate) fn clipped_span(center: usize, len: usize, size: usize) -> (usize, usize) {
    let start = center as isize - (len / 2) as isize;
    let end = start + len as isize;
    (start.max(0) as usize, (end.min(size as isize)) as usize)
}

fn side_pixels(fraction: f64, size: usize) -> usize {
    ((fraction * size as f64).round() as usize).clamp(1, size)
}

/// Corrupt a batch `[N, C, H, W]`.
///
/// Returns the corrupted batch and a same-shaped `{0, 1}` mask marking the
/// replaced pixels. Unmasked pixels are copied unchanged.
pub fn corrupt<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    cfg.validate()?;
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::InvalidArgument(format!(
            "corrupt expects [N, C, H, W], got {:?}",
            x.shape()
        )));
    };
    let fill_value = match cfg.fill_mode {
        FillMode::DatasetMean => Some(cfg.dataset_mean.unwrap_or_else(|| {
            let sum: f64 = x.data().iter().map(|v| v.as_f64()).sum();
            sum / x.numel().max(1) as f64
        })),
        FillMode::Zero => Some(0.0),
        FillMode::UniformNoise => None,
    };
    let plane = h * w;
    let mut out = x.data().to_vec();
    let mut mask = vec![T::zero(); x.numel()];
    let mut covered = vec![false; plane];
    for i in 0..n {
        covered.iter_mut().for_each(|v| *v = false);
        let k = rng.random_range(cfg.n_masks_range[0]..=cfg.n_masks_range[1]);
        let [flo, fhi] = cfg.mask_side_range;
        for _ in 0..k {
            let side_h = side_pixels(rng.random_range(flo..=fhi), h);
            let side_w = side_pixels(rng.random_range(flo..=fhi), w);
            let cy = rng.random_range(0..h);
            let cx = rng.random_range(0..w);
            let (y0, y1) = clipped_span(cy, side_h, h);
            let (x0, x1) = clipped_span(cx, side_w, w);
            for y in y0..y1 {
                covered[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v = true);
            }
        }
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for (p, _) in covered.iter().enumerate().filter(|(_, &m)| m) {
                out[base + p] = match fill_value {
                    Some(v) => T::of(v),
                    None => T::of(rng.random::<f64>()),
                };
                mask[base + p] = T::one();
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        Tensor::new(x.shape().to_vec(), mask)?,
    ))
}
