//! Anomaly scores derived from a trained model.
//!
//! * samplewise: the negative one-sample ELBO, `KL + rec`, evaluated at the
//!   posterior mean (higher means more anomalous);
//! * pixelwise: `|x - g(f_mu(x))| * |d KL / d x|`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Element, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::CevaeModel;
use crate::objective::{kl_divergence, kl_term, reconstruction_loss, RecLoss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Reconstruction term of the samplewise score.
    pub rec_loss: RecLoss,
    /// `0` scores at the posterior mean; `n > 0` averages `n` sampled ELBOs.
    pub mc_samples: usize,
    pub mc_seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            rec_loss: RecLoss::L1,
            mc_samples: 0,
            mc_seed: 0,
        }
    }
}

/// Scores for a single slice. All maps are `[H, W]` and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult<T: Element = f32> {
    pub sample_score: f64,
    pub recon_error_map: Tensor<T>,
    pub kl_grad_map: Tensor<T>,
    pub pixel_score_map: Tensor<T>,
}

impl<T: Element> AnomalyResult<T> {
    /// Assemble a result whose pixel map is the product of the two factors.
    pub fn from_factors(sample_score: f64, recon_error_map: Tensor<T>, kl_grad_map: Tensor<T>) -> Result<Self> {
        if recon_error_map.shape() != kl_grad_map.shape() {
            return Err(Error::ShapeMismatch {
                op: "pixel score",
                left: recon_error_map.shape().to_vec(),
                right: kl_grad_map.shape().to_vec(),
            });
        }
        let data = recon_error_map
            .data()
            .iter()
            .zip(kl_grad_map.data())
            .map(|(&r, &g)| r * g)
            .collect();
        let pixel_score_map = Tensor::new(recon_error_map.shape().to_vec(), data)?;
        Ok(AnomalyResult {
            sample_score,
            recon_error_map,
            kl_grad_map,
            pixel_score_map,
        })
    }
}

/// Latent usage summary over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostic {
    /// Mean KL contribution of each latent dimension.
    pub per_dim_kl: Vec<f64>,
    /// Nearest-rank 0.95 quantile of `per_dim_kl`.
    pub q95: f64,
    /// Nearest-rank 0.95 quantile of the per-sample total KL.
    pub per_sample_q95: f64,
}

/// Nearest-rank quantile: the value at rank `ceil(p n)` of the sorted data.
pub fn nearest_rank_quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let r = p * sorted.len() as f64;
    // 0.95 * 20 is 19.000000000000004 in binary floating point
    let rank = if (r - r.round()).abs() < 1e-9 { r.round() } else { r.ceil() } as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Reshape `[H, W]`, `[1, H, W]` or `[1, 1, H, W]` to a batch of one.
fn single_slice<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match *x.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (h, w),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "expected a single slice, got shape {:?}",
                x.shape()
            )))
        }
    };
    x.clone().reshape([1, 1, h, w])
}

/// Samplewise score for every slice of a `[N, 1, H, W]` batch.
pub fn sample_scores<T: Element>(model: &CevaeModel<T>, x: &Tensor<T>, cfg: &ScoreConfig) -> Result<Vec<f64>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::InvalidArgument(format!("expected [N, 1, H, W], got {:?}", x.shape())));
    };
    (0..n)
        .map(|i| {
            let slice = Tensor::new([1, c, h, w], x.outer(i)?.into_data())?;
            sample_score(model, &slice, cfg)
        })
        .collect()
}

/// Negative ELBO proxy `KL + rec` for one slice.
pub fn sample_score<T: Element>(model: &CevaeModel<T>, x: &Tensor<T>, cfg: &ScoreConfig) -> Result<f64> {
    let x = single_slice(x)?;
    let latent = model.arch().latent_dim;
    let draws = cfg.mc_samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mc_seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let noise: Vec<T> = if cfg.mc_samples == 0 {
            vec![T::zero(); latent]
        } else {
            (0..latent)
                .map(|_| T::of(StandardNormal.sample(&mut rng)))
                .collect()
        };
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let noise = tape.constant(Tensor::new([1, latent], noise)?);
        let (x_hat, code) = bound.forward_vae(&xv, &noise)?;
        let kl = kl_divergence(&code)?.item()?.as_f64();
        let rec = reconstruction_loss(&xv, &x_hat, cfg.rec_loss)?.item()?.as_f64();
        total += kl + rec;
    }
    let score = total / draws as f64;
    if !score.is_finite() {
        return Err(Error::NonFinite("samplewise score".into()));
    }
    Ok(score)
}

/// `|d KL / d x|` for one slice, shaped `[H, W]`.
///
/// Only the encoder is involved, so decoder weights and sampling noise have
/// no influence on the result.
pub fn kl_input_gradient<T: Element>(model: &CevaeModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let x = single_slice(x)?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let xv = tape.leaf(x);
    let kl = kl_divergence(&bound.encode(&xv)?)?;
    let grads = tape.backward(kl)?;
    let g = grads
        .get(&xv)
        .ok_or_else(|| Error::InvalidArgument("input gradient missing".into()))?;
    Tensor::new([h, w], g.data().iter().map(|v| v.abs()).collect())
}

/// Samplewise score plus reconstruction, KL-gradient and combined maps.
pub fn pixel_score<T: Element>(model: &CevaeModel<T>, x: &Tensor<T>, cfg: &ScoreConfig) -> Result<AnomalyResult<T>> {
    let x = single_slice(x)?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let xv = tape.leaf(x.clone());
    let code = bound.encode(&xv)?;
    let kl = kl_divergence(&code)?;
    let x_hat = bound.decode(&code.mu)?;
    let recon = x
        .data()
        .iter()
        .zip(x_hat.value().data())
        .map(|(&a, &b)| (a - b).abs())
        .collect();
    let recon_error_map = Tensor::new([h, w], recon)?;
    let sample_score = if cfg.mc_samples == 0 {
        let rec = reconstruction_loss(&xv, &x_hat, cfg.rec_loss)?.item()?.as_f64();
        kl.item()?.as_f64() + rec
    } else {
        sample_score(model, &x, cfg)?
    };
    let grads = tape.backward(kl)?;
    let g = grads
        .get(&xv)
        .ok_or_else(|| Error::InvalidArgument("input gradient missing".into()))?;
    let kl_grad_map = Tensor::new([h, w], g.data().iter().map(|v| v.abs()).collect())?;
    if !recon_error_map.is_finite() || !kl_grad_map.is_finite() {
        return Err(Error::NonFinite("pixelwise score maps".into()));
    }
    AnomalyResult::from_factors(sample_score, recon_error_map, kl_grad_map)
}

/// Mean per-dimension KL over `slices` (each `[1, H, W]` or `[H, W]`).
pub fn collapse_diagnostic<T: Element>(model: &CevaeModel<T>, slices: &[&Tensor<T>]) -> Result<CollapseDiagnostic> {
    if slices.is_empty() {
        return Err(Error::EmptyDataset("collapse diagnostic needs at least one slice".into()));
    }
    let latent = model.arch().latent_dim;
    let mut per_dim = vec![0.0; latent];
    let mut per_sample = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(32) {
        let parts = chunk.iter().map(|s| single_slice(s)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let batch = Tensor::stack(&refs)?;
        let s = batch.shape().to_vec();
        let batch = batch.reshape([s[0], 1, s[3], s[4]])?;
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let code = bound.encode(&tape.constant(batch))?;
        let (mu, lv) = (code.mu.value(), code.log_var.value());
        for (m_row, l_row) in mu.data().chunks(latent).zip(lv.data().chunks(latent)) {
            let mut sample_kl = 0.0;
            for (d, (&m, &l)) in m_row.iter().zip(l_row).enumerate() {
                let k = kl_term(m.as_f64(), l.as_f64());
                per_dim[d] += k;
                sample_kl += k;
            }
            per_sample.push(sample_kl);
        }
    }
    let n = slices.len() as f64;
    per_dim.iter_mut().for_each(|v| *v /= n);
    if per_dim.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("per-dimension KL".into()));
    }
    let q95 = nearest_rank_quantile(&per_dim, 0.95).unwrap_or(0.0);
    let per_sample_q95 = nearest_rank_quantile(&per_sample, 0.95).unwrap_or(0.0);
    Ok(CollapseDiagnostic {
        per_dim_kl: per_dim,
        q95,
        per_sample_q95,
    })
}

/// Mean over a `(2r+1)^2` window clipped to the image.
pub fn box_blur<T: Element>(map: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    let &[h, w] = map.shape() else {
        return Err(Error::InvalidArgument(format!("box_blur expects [H, W], got {:?}", map.shape())));
    };
    if radius == 0 {
        return Ok(map.clone());
    }
    let src = map.data();
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let mut acc = 0.0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    acc += src[yy * w + xx].as_f64();
                }
            }
            out[y * w + x] = T::of(acc / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    Tensor::new([h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;

    fn arch() -> ArchConfig {
        ArchConfig {
            image_size: 32,
            conv_channels: vec![2, 3, 3, 4, 4],
            latent_dim: 4,
            ..ArchConfig::default()
        }
    }

    fn slice(seed: usize) -> Tensor<f64> {
        let data = (0..32 * 32)
            .map(|i| (((i * 13 + seed * 7) % 29) as f64) / 29.0)
            .collect();
        Tensor::new([1, 32, 32], data).unwrap()
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank_quantile(&v, 0.95), Some(19.0));
        assert_eq!(nearest_rank_quantile(&[0.0; 7], 0.95), Some(0.0));
        assert_eq!(nearest_rank_quantile(&[3.0, 1.0, 2.0], 1.0), Some(3.0));
        assert_eq!(nearest_rank_quantile(&[], 0.5), None);
    }

    #[test]
    fn pixel_map_is_the_product() {
        let recon = Tensor::<f64>::from_f64([1, 2], &[1.0, 2.0]).unwrap();
        let grad = Tensor::<f64>::from_f64([1, 2], &[0.5, 0.5]).unwrap();
        let r = AnomalyResult::from_factors(0.0, recon, grad).unwrap();
        assert_eq!(r.pixel_score_map.data(), &[0.5, 1.0]);
        let zero = AnomalyResult::from_factors(
            0.0,
            Tensor::<f64>::full([2, 2], 3.0),
            Tensor::<f64>::zeros([2, 2]),
        )
        .unwrap();
        assert!(zero.pixel_score_map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_encoder_gives_zero_gradient_map() {
        let model = CevaeModel::<f64>::zeros(&arch()).unwrap();
        let g = kl_input_gradient(&model, &slice(1)).unwrap();
        assert_eq!(g.shape(), &[32, 32]);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let r = pixel_score(&model, &slice(1), &ScoreConfig::default()).unwrap();
        assert!(r.pixel_score_map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_reconstruction_at_prior_scores_zero() {
        // Zero weights: mu = log_var = 0 and the decoder emits sigmoid(0) = 0.5.
        let model = CevaeModel::<f64>::zeros(&arch()).unwrap();
        let x = Tensor::full([1, 32, 32], 0.5);
        assert_eq!(sample_score(&model, &x, &ScoreConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn scores_are_deterministic_and_maps_non_negative() {
        let model = CevaeModel::<f64>::init(&arch(), 2).unwrap();
        let cfg = ScoreConfig::default();
        let a = pixel_score(&model, &slice(3), &cfg).unwrap();
        let b = pixel_score(&model, &slice(3), &cfg).unwrap();
        assert_eq!(a, b);
        for m in [&a.recon_error_map, &a.kl_grad_map, &a.pixel_score_map] {
            assert!(m.data().iter().all(|&v| v >= 0.0));
        }
        let s = sample_score(&model, &slice(3), &cfg).unwrap();
        assert_eq!(s, a.sample_score);
        let mc = ScoreConfig {
            mc_samples: 4,
            mc_seed: 9,
            ..cfg
        };
        let m1 = sample_score(&model, &slice(3), &mc).unwrap();
        assert_eq!(m1, sample_score(&model, &slice(3), &mc).unwrap());
    }

    #[test]
    fn batch_scores_match_single() {
        let model = CevaeModel::<f64>::init(&arch(), 4).unwrap();
        let batch = Tensor::stack(&[&slice(1), &slice(2)]).unwrap();
        let scores = sample_scores(&model, &batch, &ScoreConfig::default()).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[1], sample_score(&model, &slice(2), &ScoreConfig::default()).unwrap());
    }

    #[test]
    fn collapse_of_zero_model_is_zero() {
        let model = CevaeModel::<f64>::zeros(&arch()).unwrap();
        let s = [slice(0), slice(1)];
        let d = collapse_diagnostic(&model, &[&s[0], &s[1]]).unwrap();
        assert_eq!(d.q95, 0.0);
        assert_eq!(d.per_dim_kl, vec![0.0; 4]);
        assert!(collapse_diagnostic::<f64>(&model, &[]).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let m = Tensor::<f32>::full([5, 4], 2.0);
        assert_eq!(box_blur(&m, 1).unwrap(), m);
        let mut spike = Tensor::<f64>::zeros([3, 3]);
        spike.data_mut()[4] = 9.0;
        let b = box_blur(&spike, 1).unwrap();
        assert_eq!(b.data()[4], 1.0);
        assert_eq!(b.data()[0], 9.0 / 4.0);
    }
}
