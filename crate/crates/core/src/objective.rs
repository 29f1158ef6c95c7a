//! Loss terms of the combined objective
//! `(1 - lambda) [KL + rec_vae] + lambda rec_ce`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Element, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, LatentCode};

/// Per-pixel reconstruction penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecLoss {
    /// Mean absolute error.
    #[default]
    L1,
    /// Mean squared error.
    L2,
}

/// Scalar values of every objective term for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_kl: f64,
    pub l_rec_vae: f64,
    pub l_rec_ce: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Build a breakdown whose total follows the weighting rule.
    pub fn from_terms(l_kl: f64, l_rec_vae: f64, l_rec_ce: f64, lambda: f64) -> Self {
        LossBreakdown {
            l_kl,
            l_rec_vae,
            l_rec_ce,
            total: combine(l_kl, l_rec_vae, l_rec_ce, lambda),
            lambda,
        }
    }
}

/// `(1 - lambda) (l_kl + l_rec_vae) + lambda l_rec_ce`.
pub fn combine(l_kl: f64, l_rec_vae: f64, l_rec_ce: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * (l_kl + l_rec_vae) + lambda * l_rec_ce
}

/// KL divergence of one latent dimension from the standard normal.
pub fn kl_term(mu: f64, log_var: f64) -> f64 {
    0.5 * (mu * mu + log_var.exp() - log_var - 1.0)
}

/// `KL(N(mu, sigma^2) || N(0, I))`, summed over latent dimensions and
/// averaged over the batch.
pub fn kl_divergence<'t, T: Element>(code: &LatentCode<'t, T>) -> Result<Var<'t, T>> {
    let lv = code.log_var.value();
    if !lv.is_finite() {
        return Err(Error::NonFinite("log-variance passed to the KL term".into()));
    }
    let n = lv.shape().first().copied().unwrap_or(1).max(1);
    let inner = code
        .mu
        .square()
        .add(&code.log_var.exp())?
        .sub(&code.log_var)?
        .sub_scalar(T::one());
    Ok(inner.sum_all().mul_scalar(T::of(0.5)).div_scalar(T::of(n as f64)))
}

/// Mean per-pixel reconstruction error over pixels and batch.
pub fn reconstruction_loss<'t, T: Element>(x: &Var<'t, T>, x_hat: &Var<'t, T>, kind: RecLoss) -> Result<Var<'t, T>> {
    let diff = x.sub(x_hat)?;
    Ok(match kind {
        RecLoss::L1 => diff.abs().mean_all(),
        RecLoss::L2 => diff.square().mean_all(),
    })
}

/// Result of [`cevae_loss`]: the differentiable total plus its terms.
pub struct CevaeLoss<'t, T: Element> {
    pub total: Var<'t, T>,
    pub breakdown: LossBreakdown,
    pub x_hat_vae: Var<'t, T>,
    pub code: LatentCode<'t, T>,
}

/// Combined objective on one tape.
///
/// The VAE terms use the clean batch `x` and the reparameterisation `noise`;
/// the context-encoder term reconstructs the clean `x` from the posterior
/// mean of `x_tilde`. With `lambda == 0` the context-encoder path is not
/// evaluated at all and `x_tilde` may be `None`.
pub fn cevae_loss<'t, T: Element>(
    model: &BoundModel<'t, '_, T>,
    x: &Var<'t, T>,
    x_tilde: Option<&Var<'t, T>>,
    noise: &Var<'t, T>,
    lambda: f64,
    kind: RecLoss,
) -> Result<CevaeLoss<'t, T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let (x_hat_vae, code) = model.forward_vae(x, noise)?;
    let l_kl = kl_divergence(&code)?;
    let l_rec_vae = reconstruction_loss(x, &x_hat_vae, kind)?;
    let vae = l_kl.add(&l_rec_vae)?.mul_scalar(T::of(1.0 - lambda));
    let (total, l_rec_ce) = if lambda > 0.0 {
        let x_tilde = x_tilde.ok_or_else(|| {
            Error::InvalidArgument("lambda > 0 needs a corrupted batch".into())
        })?;
        let x_hat_ce = model.forward_ce(x_tilde)?;
        let l_rec_ce = reconstruction_loss(x, &x_hat_ce, kind)?;
        let total = vae.add(&l_rec_ce.mul_scalar(T::of(lambda)))?;
        (total, l_rec_ce.item()?.as_f64())
    } else {
        (vae, 0.0)
    };
    let breakdown = LossBreakdown {
        l_kl: l_kl.item()?.as_f64(),
        l_rec_vae: l_rec_vae.item()?.as_f64(),
        l_rec_ce,
        total: total.item()?.as_f64(),
        lambda,
    };
    Ok(CevaeLoss {
        total,
        breakdown,
        x_hat_vae,
        code,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Tape, Tensor};
    use crate::model::{ArchConfig, CevaeModel};

    fn code<'t>(tape: &'t Tape<f64>, mu: &[f64], lv: &[f64]) -> LatentCode<'t, f64> {
        LatentCode {
            mu: tape.leaf(Tensor::from_f64([1, mu.len()], mu).unwrap()),
            log_var: tape.leaf(Tensor::from_f64([1, lv.len()], lv).unwrap()),
        }
    }

    #[test]
    fn kl_hand_values() {
        let tape = Tape::new();
        let kl = |mu: &[f64], lv: &[f64]| kl_divergence(&code(&tape, mu, lv)).unwrap().item().unwrap();
        assert_eq!(kl(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]), 0.0);
        assert!((kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        // sigma^2 = e  =>  0.5 (e - 1 - 1)
        let v = kl(&[0.0], &[1.0]);
        assert!((v - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-12);
        assert!((v - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn kl_batch_mean() {
        let tape = Tape::<f64>::new();
        let c = LatentCode {
            mu: tape.leaf(Tensor::from_f64([2, 1], &[1.0, 0.0]).unwrap()),
            log_var: tape.leaf(Tensor::zeros([2, 1])),
        };
        assert!((kl_divergence(&c).unwrap().item().unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_non_finite_log_var() {
        let tape = Tape::new();
        let c = code(&tape, &[0.0], &[f64::INFINITY]);
        assert!(matches!(kl_divergence(&c), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reconstruction_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_slice(&[0.0, 1.0]));
        let y = tape.constant(Tensor::from_slice(&[1.0, 1.0]));
        assert_eq!(reconstruction_loss(&x, &x, RecLoss::L1).unwrap().item().unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&x, &y, RecLoss::L1).unwrap().item().unwrap(), 0.5);
        assert_eq!(reconstruction_loss(&y, &x, RecLoss::L1).unwrap().item().unwrap(), 0.5);
        assert_eq!(reconstruction_loss(&x, &y, RecLoss::L2).unwrap().item().unwrap(), 0.5);
        let z = tape.constant(Tensor::from_slice(&[1.0]));
        assert!(reconstruction_loss(&x, &z, RecLoss::L1).is_err());
    }

    #[test]
    fn weighting_examples() {
        assert!((combine(0.2, 0.3, 0.4, 0.5) - 0.45).abs() < 1e-15);
        assert_eq!(combine(0.2, 0.3, 0.4, 0.0), 0.2 + 0.3);
        assert_eq!(combine(0.2, 0.3, 0.4, 1.0), 0.4);
    }

    fn tiny() -> (ArchConfig, CevaeModel<f64>) {
        let arch = ArchConfig {
            image_size: 32,
            conv_channels: vec![2, 2, 3, 3, 4],
            latent_dim: 3,
            ..ArchConfig::default()
        };
        let model = CevaeModel::init(&arch, 5).unwrap();
        (arch, model)
    }

    fn batch(n: usize, offset: f64) -> Tensor<f64> {
        let data: Vec<f64> = (0..n * 32 * 32)
            .map(|i| (((i * 7 + 3) % 23) as f64 / 23.0 + offset).fract())
            .collect();
        Tensor::new([n, 1, 32, 32], data).unwrap()
    }

    #[test]
    fn endpoints_of_the_weighting() {
        let (_, model) = tiny();
        for lambda in [0.0, 0.5, 1.0] {
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let x = tape.constant(batch(2, 0.0));
            let xt = tape.constant(batch(2, 0.3));
            let noise = tape.constant(Tensor::from_f64([2, 3], &[0.1, -0.2, 0.3, 1.0, -1.0, 0.5]).unwrap());
            let loss = cevae_loss(&bound, &x, Some(&xt), &noise, lambda, RecLoss::L1).unwrap();
            let b = loss.breakdown;
            assert!(b.l_kl >= 0.0 && b.l_rec_vae >= 0.0 && b.l_rec_ce >= 0.0);
            let expected = combine(b.l_kl, b.l_rec_vae, b.l_rec_ce, lambda);
            assert!((b.total - expected).abs() < 1e-12);
            if lambda == 0.0 {
                assert_eq!(b.l_rec_ce, 0.0);
                assert_eq!(b.total, b.l_kl + b.l_rec_vae);
            }
            if lambda == 1.0 {
                assert_eq!(b.total, b.l_rec_ce);
            }
        }
    }

    #[test]
    fn ce_only_gives_log_var_head_no_gradient() {
        let (_, model) = tiny();
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let x = tape.constant(batch(2, 0.0));
        let xt = tape.constant(batch(2, 0.4));
        let noise = tape.constant(Tensor::full([2, 3], 0.7));
        let loss = cevae_loss(&bound, &x, Some(&xt), &noise, 1.0, RecLoss::L1).unwrap();
        let mut grads = tape.backward(loss.total).unwrap();
        let g = bound.take_grads(&mut grads).unwrap();
        for (name, grad) in model.names().iter().zip(&g) {
            if name.starts_with("log_var_head") {
                assert!(grad.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(g.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn lambda_out_of_range() {
        let (_, model) = tiny();
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let x = tape.constant(batch(1, 0.0));
        let noise = tape.constant(Tensor::zeros([1, 3]));
        assert!(cevae_loss(&bound, &x, None, &noise, 1.5, RecLoss::L1).is_err());
        assert!(cevae_loss(&bound, &x, None, &noise, 0.5, RecLoss::L1).is_err());
        assert!(cevae_loss(&bound, &x, None, &noise, 0.0, RecLoss::L1).is_ok());
    }
}
