//! Adam, the training loop and checkpoint persistence.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt, CorruptionConfig, FillMode};
use crate::diffcore::{Element, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, CevaeModel};
use crate::objective::{cevae_loss, LossBreakdown, RecLoss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the context-encoder term.
    pub lambda: f64,
    pub betas: [f64; 2],
    pub eps_adam: f64,
    pub seed: u64,
    pub arch: ArchConfig,
    pub corruption: CorruptionConfig,
    pub rec_loss: RecLoss,
    /// Rescale gradients whose global L2 norm exceeds this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            batch_size: 64,
            epochs: 60,
            lambda: 0.5,
            betas: [0.9, 0.999],
            eps_adam: 1e-8,
            seed: 0,
            arch: ArchConfig::default(),
            corruption: CorruptionConfig::default(),
            rec_loss: RecLoss::L1,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.eps_adam > 0.0) {
            return bad(format!("eps_adam must be positive, got {}", self.eps_adam));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        self.arch.validate()?;
        self.corruption.validate()
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps_adam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment buffers, one per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Element = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn cast<U: Element>(&self) -> OptimizerState<U> {
        OptimizerState {
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
            t: self.t,
        }
    }
}

/// One bias-corrected Adam update.
///
/// Every gradient is checked before any parameter changes, so a failed step
/// leaves `params` and `state` untouched.
pub fn adam_step<T: Element>(
    names: &[String],
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    hp: &AdamParams,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || names.len() != n {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {n} parameters, {} gradients, {} moment buffers",
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        for other in [&params[i], &state.m[i], &state.v[i]] {
            if other.shape() != g.shape() {
                return Err(Error::ParameterShape {
                    name: names[i].clone(),
                    expected: other.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", names[i])));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let (c1, c2) = (T::of(1.0 - hp.beta1), T::of(1.0 - hp.beta2));
    let bc1 = T::of(1.0 - hp.beta1.powi(t));
    let bc2 = T::of(1.0 - hp.beta2.powi(t));
    let (lr, eps) = (T::of(hp.lr), T::of(hp.eps));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = b1 * md[j] + c1 * gj;
            vd[j] = b2 * vd[j] + c2 * gj * gj;
            let m_hat = md[j] / bc1;
            let v_hat = vd[j] / bc2;
            pd[j] = pd[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v = *v * s));
    }
    norm
}

/// Batch-size weighted mean of the loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossBreakdown,
}

/// Progress report passed to the observer after every optimiser step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: u64,
    pub batch_size: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Element = f32> {
    pub model: CevaeModel<T>,
    pub optimizer: OptimizerState<T>,
    pub log: Vec<EpochLog>,
}

/// Train from a fresh initialisation on `images` (each `[1, H, W]`).
pub fn train<T: Element>(images: &[Tensor<T>], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_observed(images, cfg, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_observed<T: Element>(
    images: &[Tensor<T>],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepInfo),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset("no training slices".into()));
    }
    let side = cfg.arch.image_size;
    let expected = [cfg.arch.in_channels, side, side];
    if let Some(bad) = images.iter().find(|x| x.shape() != expected) {
        return Err(Error::ShapeMismatch {
            op: "training slice",
            left: expected.to_vec(),
            right: bad.shape().to_vec(),
        });
    }
    let (sum, count) = images.iter().fold((0.0, 0usize), |(s, c), x| {
        (s + x.data().iter().map(|v| v.as_f64()).sum::<f64>(), c + x.numel())
    });
    let data_mean = sum / count.max(1) as f64;
    let mut corruption = cfg.corruption.clone();
    if corruption.fill_mode == FillMode::DatasetMean && corruption.dataset_mean.is_none() {
        corruption.dataset_mean = Some(data_mean);
    }

    // Decoder output starts at the data mean.
    let mut model = CevaeModel::<T>::init(&cfg.arch, cfg.seed)?;
    model.set_output_bias(data_mean);
    let mut state = OptimizerState::new(model.params());
    let hp = cfg.adam();
    let latent = cfg.arch.latent_dim;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let step = state.t;
            // One substream per step makes every batch replayable in isolation.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(step + 2);
            let parts: Vec<&Tensor<T>> = chunk.iter().map(|&i| &images[i]).collect();
            let x = Tensor::stack(&parts)?;
            let n = chunk.len();
            let noise: Vec<T> = (0..n * latent)
                .map(|_| T::of(StandardNormal.sample(&mut rng)))
                .collect();
            let x_tilde = if cfg.lambda > 0.0 {
                Some(corrupt(&x, &corruption, &mut rng)?.0)
            } else {
                None
            };

            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let xv = tape.constant(x);
            let xt = x_tilde.map(|t| tape.constant(t));
            let nv = tape.constant(Tensor::new([n, latent], noise)?);
            let loss = cevae_loss(&bound, &xv, xt.as_ref(), &nv, cfg.lambda, cfg.rec_loss)?;
            let b = loss.breakdown;
            if !b.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {epoch}, step {}",
                    b.total,
                    step + 1
                )));
            }
            let mut grads = tape.backward(loss.total)?;
            let mut grads = bound.take_grads(&mut grads)?;
            drop(bound);
            if let Some(max) = cfg.clip_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            adam_step(&model.names().to_vec(), model.params_mut(), &grads, &mut state, &hp)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => {
                        Error::NonFinite(format!("{msg} at epoch {epoch}, step {}", step + 1))
                    }
                    other => other,
                })?;

            let w = n as f64;
            sums[0] += w * b.l_kl;
            sums[1] += w * b.l_rec_vae;
            sums[2] += w * b.l_rec_ce;
            sums[3] += w * b.total;
            seen += n;
            steps += 1;
            observer(&StepInfo {
                epoch,
                step: state.t,
                batch_size: n,
                breakdown: b,
            });
        }
        let d = seen as f64;
        log.push(EpochLog {
            epoch,
            steps,
            mean: LossBreakdown {
                l_kl: sums[0] / d,
                l_rec_vae: sums[1] / d,
                l_rec_ce: sums[2] / d,
                total: sums[3] / d,
                lambda: cfg.lambda,
            },
        });
    }
    Ok(TrainOutcome {
        model,
        optimizer: state,
        log,
    })
}

/// Per-epoch log as CSV with a header row.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,steps,l_kl,l_rec_vae,l_rec_ce,total,lambda\n");
    for e in log {
        let b = &e.mean;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.epoch, e.steps, b.l_kl, b.l_rec_vae, b.l_rec_ce, b.total, b.lambda
        );
    }
    out
}

const MAGIC: &[u8; 4] = b"CEVK";
const OPTS: &[u8; 4] = b"OPTS";
const VERSION: u32 = 1;
const STEP_TENSOR: &str = "adam.step";

/// Contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: CevaeModel<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    put_u32(out, tensors.len())?;
    for (name, t) in tensors {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

/// Serialise a model, its config and optionally the optimiser state.
pub fn checkpoint_bytes(
    model: &CevaeModel<f32>,
    optimizer: Option<&OptimizerState<f32>>,
    cfg: &TrainConfig,
) -> Result<Vec<u8>> {
    if cfg.arch != *model.arch() {
        return Err(Error::InvalidArgument("config architecture differs from the model".into()));
    }
    let mut out = Vec::with_capacity(4 * model.parameter_count() + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let blob = serde_json::to_string(cfg).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    put_u32(&mut out, blob.len())?;
    out.extend_from_slice(blob.as_bytes());
    let params: Vec<(String, &Tensor<f32>)> = model.named_params().map(|(n, t)| (n.to_string(), t)).collect();
    put_tensors(&mut out, &params)?;
    if let Some(opt) = optimizer {
        out.extend_from_slice(OPTS);
        let step = Tensor::scalar(opt.t as f32);
        if step.item()? as u64 != opt.t {
            return Err(Error::InvalidArgument(format!("step {} not representable in f32", opt.t)));
        }
        let names = model.names();
        let tensors: Vec<(String, &Tensor<f32>)> = names
            .iter()
            .zip(&opt.m)
            .map(|(n, t)| (format!("adam.m.{n}"), t))
            .chain(names.iter().zip(&opt.v).map(|(n, t)| (format!("adam.v.{n}"), t)))
            .chain(std::iter::once((STEP_TENSOR.to_string(), &step)))
            .collect();
        put_tensors(&mut out, &tensors)?;
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &CevaeModel<f32>,
    optimizer: Option<&OptimizerState<f32>>,
    cfg: &TrainConfig,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, optimizer, cfg)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<V>(&self, msg: impl Into<String>) -> Result<V> {
        Err(Error::Checkpoint {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let b = self.bytes(n, what)?;
        String::from_utf8(b.to_vec()).or_else(|_| {
            self.pos = start;
            self.fail(format!("{what} is not valid UTF-8"))
        })
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32("tensor count")?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u32("name length")?;
            let name = self.string(len, "tensor name")?;
            let rank = self.u32("rank")?;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(self.u32("dimension")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some());
            let Some(numel) = numel else {
                return self.fail(format!("tensor {name} is too large"));
            };
            let raw = self.bytes(4 * numel, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

/// Parse checkpoint bytes; `path` is only used in error messages.
pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.bytes(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected CEVK");
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let len = r.u32("config length")?;
    let start = r.pos;
    let blob = r.string(len, "config")?;
    let config: TrainConfig = match serde_json::from_str(&blob) {
        Ok(c) => c,
        Err(e) => {
            r.pos = start;
            return r.fail(format!("config: {e}"));
        }
    };
    let tensors_at = r.pos;
    let named = r.tensors()?;
    let model = CevaeModel::from_named(&config.arch, named).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::Checkpoint {
            path: path.to_path_buf(),
            offset: tensors_at as u64,
            msg,
        },
        other => other,
    })?;
    let optimizer = if r.pos == bytes.len() {
        None
    } else {
        if r.bytes(4, "optimizer marker")? != OPTS {
            r.pos -= 4;
            return r.fail("expected OPTS marker or end of file");
        }
        let opts_at = r.pos;
        let mut named = r.tensors()?;
        let mut take = |name: &str| -> Result<Tensor<f32>> {
            let i = named.iter().position(|(n, _)| n == name).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                offset: opts_at as u64,
                msg: format!("optimizer tensor {name} missing"),
            })?;
            Ok(named.swap_remove(i).1)
        };
        let step = take(STEP_TENSOR)?.item()?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in model.named_params() {
            for (prefix, dst) in [("adam.m", &mut m), ("adam.v", &mut v)] {
                let full = format!("{prefix}.{name}");
                let t = take(&full)?;
                if t.shape() != p.shape() {
                    return Err(Error::ParameterShape {
                        name: full,
                        expected: p.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                dst.push(t);
            }
        }
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                offset: opts_at as u64,
                msg: format!("invalid step count {step}"),
            });
        }
        if r.pos != bytes.len() {
            return r.fail("trailing bytes after optimizer state");
        }
        Some(OptimizerState { m, v, t: step as u64 })
    };
    Ok(Checkpoint {
        config,
        model,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

/// Load the parameters of a checkpoint into a model of architecture `arch`.
///
/// Fails with [`Error::ParameterShape`] when the stored tensors do not fit.
pub fn load_model_for(path: &Path, arch: &ArchConfig) -> Result<CevaeModel<f32>> {
    let ckpt = load_checkpoint(path)?;
    let named = ckpt
        .model
        .named_params()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    CevaeModel::from_named(arch, named)
}
