//! Finite-difference verification of every tape primitive and of the full
//! training objective on a small network, in double precision.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{finite_diff_grad, ConvGeometry, Primitive, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, CevaeModel};
use crate::objective::{cevae_loss, RecLoss};

/// Architecture small enough for exhaustive finite differences.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        image_size: 32,
        conv_channels: vec![2, 3, 3, 4, 4],
        latent_dim: 3,
        ..ArchConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Central-difference step.
    pub eps: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Deliberately break one adjoint rule.
    pub fault: Option<Primitive>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            eps: 1e-5,
            tolerance: 1e-5,
            fault: None,
        }
    }
}

/// Outcome of one check.
///
/// The relative error is `max_i |a_i - f_i| / max(max_i |a_i|, max_i |f_i|)`
/// over every input element, with `a` the tape gradient and `f` the central
/// difference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Input and flat element index of the largest discrepancy.
    pub worst_input: usize,
    pub worst_index: usize,
    pub elements: usize,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {:>6} elements  max rel error {:.3e}  {}",
            self.name,
            self.elements,
            self.max_rel_error,
            if self.passed { "ok" } else { "FAIL" }
        )?;
        if !self.passed {
            write!(f, " (input {}, index {})", self.worst_input, self.worst_index)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn compare(name: &str, analytic: &[Tensor<f64>], numeric: &[Tensor<f64>], tol: f64) -> CheckResult {
    let scale = analytic
        .iter()
        .chain(numeric)
        .flat_map(|t| t.data())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let mut worst = (0.0, 0, 0);
    for (j, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (i, (x, y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = (x - y).abs() / scale;
            // NaN compares false, so treat it as infinitely wrong
            let e = if e.is_nan() { f64::INFINITY } else { e };
            if e > worst.0 {
                worst = (e, j, i);
            }
        }
    }
    CheckResult {
        name: name.to_string(),
        max_rel_error: worst.0,
        worst_input: worst.1,
        worst_index: worst.2,
        elements: analytic.iter().map(Tensor::numel).sum(),
        passed: worst.0 <= tol,
    }
}

type Build = dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Check `sum(w * build(inputs))` for a fixed random weight `w`.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: &Build, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        build(&vars)?.shape()
    };
    let n: usize = out_shape.iter().product();
    let w = Tensor::new(out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let tape = match cfg.fault {
        Some(p) => Tape::with_adjoint_fault(p),
        None => Tape::new(),
    };
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&vars)?.mul(&tape.constant(w.clone()))?.sum_all();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.get(v).cloned().ok_or_else(|| Error::InvalidArgument("missing gradient".into())))
        .collect::<Result<_>>()?;

    let mut numeric = Vec::with_capacity(inputs.len());
    for j in 0..inputs.len() {
        let f = |probe: &Tensor<f64>| {
            let tape = Tape::new();
            let vars: Vec<_> = inputs
                .iter()
                .enumerate()
                .map(|(k, t)| tape.constant(if k == j { probe.clone() } else { t.clone() }))
                .collect::<Vec<_>>();
            build(&vars)?.mul(&tape.constant(w.clone()))?.sum_all().item()
        };
        numeric.push(finite_diff_grad(f, &inputs[j], cfg.eps)?);
    }
    Ok(compare(name, &analytic, &numeric, cfg.tolerance))
}

/// Values in `[-1, 1]` at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape and data agree")
}

fn primitive_check(p: Primitive, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let s = [2, 3];
    let c: f64 = rng.random_range(0.5..2.0);
    let geom = ConvGeometry::new(2, 1);
    let name = p.name();
    // Kinked primitives get inputs well clear of their kink.
    let (inputs, build): (Vec<Tensor<f64>>, Box<Build>) = match p {
        Primitive::Add => (vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], Box::new(|v| v[0].add(&v[1]))),
        Primitive::Sub => (vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], Box::new(|v| v[0].sub(&v[1]))),
        Primitive::Mul => (vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], Box::new(|v| v[0].mul(&v[1]))),
        Primitive::Div => (vec![uniform(rng, &s, -1.0, 1.0), away_from_zero(rng, &s, 0.5)], Box::new(|v| v[0].div(&v[1]))),
        Primitive::AddScalar => (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |v| Ok(v[0].add_scalar(c)))),
        Primitive::SubScalar => (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |v| Ok(v[0].sub_scalar(c)))),
        Primitive::MulScalar => (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |v| Ok(v[0].mul_scalar(c)))),
        Primitive::DivScalar => (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |v| Ok(v[0].div_scalar(c)))),
        Primitive::Abs => (vec![away_from_zero(rng, &s, 0.1)], Box::new(|v| Ok(v[0].abs()))),
        Primitive::Exp => (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|v| Ok(v[0].exp()))),
        Primitive::Log => (vec![uniform(rng, &s, 0.5, 2.0)], Box::new(|v| Ok(v[0].log()))),
        Primitive::Square => (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|v| Ok(v[0].square()))),
        Primitive::Sigmoid => (vec![uniform(rng, &s, -3.0, 3.0)], Box::new(|v| Ok(v[0].sigmoid()))),
        Primitive::LeakyRelu => (vec![away_from_zero(rng, &s, 0.1)], Box::new(|v| Ok(v[0].leaky_relu(0.01)))),
        Primitive::Sum => (vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|v| v[0].sum(&[0, 2]))),
        Primitive::Mean => (vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|v| v[0].mean(&[1]))),
        Primitive::Reshape => (vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|v| v[0].reshape(&[4, 6]))),
        Primitive::Linear => (
            vec![uniform(rng, &[2, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)],
            Box::new(|v| v[0].linear(&v[1], Some(&v[2]))),
        ),
        Primitive::Conv2d => (
            vec![
                uniform(rng, &[2, 2, 6, 6], -1.0, 1.0),
                uniform(rng, &[3, 2, 4, 4], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
            ],
            Box::new(move |v| v[0].conv2d(&v[1], Some(&v[2]), geom)),
        ),
        Primitive::ConvTranspose2d => (
            vec![
                uniform(rng, &[2, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[2, 3, 4, 4], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
            ],
            Box::new(move |v| v[0].conv_transpose2d(&v[1], Some(&v[2]), geom)),
        ),
    };
    check_op(name, inputs, &*build, cfg, rng)
}

/// Kinks must be this many finite-difference steps away from the check point.
const KINK_CLEARANCE: f64 = 10.0;

/// Point at which the full objective is checked.
struct LossPoint {
    model: CevaeModel<f64>,
    x: Tensor<f64>,
    x_tilde: Tensor<f64>,
    noise: Tensor<f64>,
    margin: f64,
}

const LAMBDA: f64 = 0.5;

fn eval_loss<'t>(p: &LossPoint, model: &CevaeModel<f64>, tape: &'t Tape<f64>, requires_grad: bool) -> Result<(Var<'t, f64>, Vec<Var<'t, f64>>)> {
    let b = model.bind(tape, requires_grad);
    let loss = cevae_loss(
        &b,
        &tape.constant(p.x.clone()),
        Some(&tape.constant(p.x_tilde.clone())),
        &tape.constant(p.noise.clone()),
        LAMBDA,
        RecLoss::L1,
    )?;
    Ok((loss.total, b.vars().to_vec()))
}

/// Draw parameters and inputs whose forward pass stays clear of every
/// `abs` and `leaky_relu` kink.
///
/// Default initialisation shrinks activations layer by layer, which packs
/// decoder pre-activations so close to zero that a central difference
/// straddles a kink; weights are therefore scaled up and biases drawn
/// non-zero.
fn loss_point(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<LossPoint> {
    let arch = tiny_arch();
    let (n, side) = (2, arch.image_size);
    let mut best = 0.0f64;
    for attempt in 0..200u64 {
        let mut model = CevaeModel::<f64>::init(&arch, cfg.seed.wrapping_add(attempt))?;
        for (name, p) in model.names().to_vec().iter().zip(model.params_mut()) {
            if name.ends_with("bias") {
                p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            } else {
                p.data_mut().iter_mut().for_each(|v| *v *= 2.5);
            }
        }
        let pixels = |rng: &mut ChaCha8Rng| {
            let d = (0..n * side * side).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::new([n, 1, side, side], d).expect("shape and data agree")
        };
        let mut point = LossPoint {
            model,
            x: pixels(rng),
            x_tilde: pixels(rng),
            noise: uniform(rng, &[n, arch.latent_dim], -1.0, 1.0),
            margin: 0.0,
        };
        let tape = Tape::new();
        eval_loss(&point, &point.model, &tape, false)?;
        point.margin = tape.kink_margin().unwrap_or(f64::INFINITY);
        best = best.max(point.margin);
        if point.margin >= KINK_CLEARANCE * cfg.eps {
            return Ok(point);
        }
    }
    Err(Error::Degenerate(format!(
        "no kink-free check point found (best margin {best:.2e})"
    )))
}

/// Check the combined objective with respect to every parameter of the tiny
/// network.
fn loss_check(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let point = loss_point(cfg, rng)?;
    let tape = match cfg.fault {
        Some(p) => Tape::with_adjoint_fault(p),
        None => Tape::new(),
    };
    let (loss, vars) = eval_loss(&point, &point.model, &tape, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.get(v).cloned().ok_or_else(|| Error::InvalidArgument("missing gradient".into())))
        .collect::<Result<_>>()?;

    let mut numeric = Vec::with_capacity(analytic.len());
    for j in 0..point.model.params().len() {
        let f = |probe: &Tensor<f64>| {
            let mut m = point.model.clone();
            m.params_mut()[j] = probe.clone();
            let tape = Tape::new();
            eval_loss(&point, &m, &tape, false)?.0.item()
        };
        numeric.push(finite_diff_grad(f, &point.model.params()[j], cfg.eps)?);
    }
    Ok(compare("cevae_loss", &analytic, &numeric, cfg.tolerance))
}

/// Every primitive once, then the full objective.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Primitive::ALL
        .iter()
        .map(|&p| primitive_check(p, cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    checks.push(loss_check(cfg, &mut rng)?);
    Ok(GradcheckReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}
