//! The ceVAE network: a convolutional encoder trunk with mean and
//! log-variance heads, and a transposed-convolution decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{conv_output_size, conv_transpose_output_size, ConvGeometry, Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Number of convolutional layers in the encoder and in the decoder.
pub const LAYERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Side length of the square input slices.
    pub image_size: usize,
    pub in_channels: usize,
    /// Encoder widths; the decoder mirrors them.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub leaky_slope: f64,
    pub latent_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 64,
            in_channels: 1,
            conv_channels: vec![16, 32, 64, 128, 256],
            kernel: 4,
            stride: 2,
            padding: 1,
            leaky_slope: 0.01,
            latent_dim: 128,
        }
    }
}

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Zero,
}

impl ArchConfig {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding)
    }

    /// Spatial side of the encoder output.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> LAYERS
    }

    /// Length of the flattened encoder features.
    pub fn feature_len(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(0) * self.bottleneck_size().pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArch(m));
        if self.image_size == 0 || self.image_size % (1 << LAYERS) != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of {}",
                self.image_size,
                1 << LAYERS
            ));
        }
        if self.in_channels != 1 {
            return fail(format!("in_channels must be 1, got {}", self.in_channels));
        }
        if self.conv_channels.len() != LAYERS {
            return fail(format!(
                "expected {LAYERS} conv widths, got {}",
                self.conv_channels.len()
            ));
        }
        if self.conv_channels.contains(&0) {
            return fail("conv widths must be positive".into());
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be at least 1".into());
        }
        if !self.leaky_slope.is_finite() {
            return fail(format!("leaky_slope must be finite, got {}", self.leaky_slope));
        }
        let geom = self.geometry();
        let mut size = self.image_size;
        for layer in 0..LAYERS {
            match conv_output_size(size, self.kernel, geom) {
                Some(next) if next * 2 == size => size = next,
                _ => {
                    return fail(format!(
                        "kernel {} / stride {} / padding {} does not halve {size} at layer {layer}",
                        self.kernel, self.stride, self.padding
                    ))
                }
            }
        }
        for _ in 0..LAYERS {
            size = conv_transpose_output_size(size, self.kernel, geom).unwrap_or(0);
        }
        if size != self.image_size {
            return fail(format!("decoder produces {size}, expected {}", self.image_size));
        }
        Ok(())
    }

    /// `(name, shape, init)` for every parameter, in storage order.
    fn parameter_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let k = self.kernel;
        let mut specs = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &c_out) in self.conv_channels.iter().enumerate() {
            specs.push((
                format!("encoder.{i}.weight"),
                vec![c_out, c_in, k, k],
                Init::Uniform { fan_in: c_in * k * k },
            ));
            specs.push((format!("encoder.{i}.bias"), vec![c_out], Init::Zero));
            c_in = c_out;
        }
        let feat = self.feature_len();
        for head in ["mu_head", "log_var_head"] {
            specs.push((
                format!("{head}.weight"),
                vec![self.latent_dim, feat],
                Init::Uniform { fan_in: feat },
            ));
            specs.push((format!("{head}.bias"), vec![self.latent_dim], Init::Zero));
        }
        specs.push((
            "decoder_input.weight".into(),
            vec![feat, self.latent_dim],
            Init::Uniform { fan_in: self.latent_dim },
        ));
        specs.push(("decoder_input.bias".into(), vec![feat], Init::Zero));
        let mut widths: Vec<usize> = self.conv_channels.iter().rev().copied().collect();
        widths.push(self.in_channels);
        for (i, pair) in widths.windows(2).enumerate() {
            let (c_in, c_out) = (pair[0], pair[1]);
            // Each output pixel of a transposed conv sees c_in * (k/s)^2 taps.
            let fan_in = (c_in * k * k / (self.stride * self.stride)).max(1);
            specs.push((
                format!("decoder.{i}.weight"),
                vec![c_in, c_out, k, k],
                Init::Uniform { fan_in },
            ));
            specs.push((format!("decoder.{i}.bias"), vec![c_out], Init::Zero));
        }
        specs
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.parameter_specs()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// Encoder/decoder parameters plus the architecture they were built for.
///
/// Parameters are stored as a flat list in a fixed order; the layout is
/// described by [`CevaeModel::names`].
#[derive(Debug, Clone, PartialEq)]
pub struct CevaeModel<T: Element = f32> {
    arch: ArchConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

// Offsets into the flat parameter list.
const ENC: usize = 0;
const MU: usize = 2 * LAYERS;
const LV: usize = MU + 2;
const DEC_IN: usize = LV + 2;
const DEC: usize = DEC_IN + 2;

impl<T: Element> CevaeModel<T> {
    /// Fan-in scaled uniform weights `U(-a, a)`, `a = sqrt(1 / fan_in)`; zero biases.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in arch.parameter_specs() {
            let numel: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![T::zero(); numel],
                Init::Uniform { fan_in } => {
                    let a = (1.0 / fan_in as f64).sqrt();
                    (0..numel).map(|_| T::of(rng.random_range(-a..a))).collect()
                }
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(CevaeModel {
            arch: arch.clone(),
            names,
            params,
        })
    }

    /// Set the last decoder bias so a zero pre-activation decodes to `mean`,
    /// clamped to `[1e-3, 1 - 1e-3]`.
    pub fn set_output_bias(&mut self, mean: f64) {
        let m = mean.clamp(1e-3, 1.0 - 1e-3);
        let name = format!("decoder.{}.bias", LAYERS - 1);
        if let Some(b) = self.param_mut(&name) {
            b.data_mut().fill(T::of((m / (1.0 - m)).ln()));
        }
    }

    /// Model with every parameter set to zero.
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let (names, params) = arch
            .parameter_specs()
            .into_iter()
            .map(|(n, s, _)| (n, Tensor::zeros(s)))
            .unzip();
        Ok(CevaeModel {
            arch: arch.clone(),
            names,
            params,
        })
    }

    /// Assemble a model from named tensors, checking names and shapes.
    pub fn from_named(arch: &ArchConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.parameter_specs();
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, _) in specs {
            let pos = named.iter().position(|(n, _)| *n == name).ok_or_else(|| {
                Error::InvalidArgument(format!("missing parameter {name}"))
            })?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::ParameterShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            names.push(name);
            params.push(t);
        }
        if let Some((extra, _)) = named.first() {
            return Err(Error::InvalidArgument(format!("unexpected parameter {extra}")));
        }
        Ok(CevaeModel {
            arch: arch.clone(),
            names,
            params,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_params().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Element>(&self) -> CevaeModel<U> {
        CevaeModel {
            arch: self.arch.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Record every parameter on `tape`.
    pub fn bind<'t, 'm>(&'m self, tape: &'t Tape<T>, requires_grad: bool) -> BoundModel<'t, 'm, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.var(p.clone(), requires_grad))
            .collect();
        BoundModel { model: self, vars }
    }
}

/// Posterior parameters `mu` and `log sigma^2`, both `[N, latent_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct LatentCode<'t, T: Element = f32> {
    pub mu: Var<'t, T>,
    pub log_var: Var<'t, T>,
}

/// `z = mu + exp(log_var / 2) * noise`.
pub fn reparameterize<'t, T: Element>(code: &LatentCode<'t, T>, noise: &Var<'t, T>) -> Result<Var<'t, T>> {
    let sigma = code.log_var.mul_scalar(T::of(0.5)).exp();
    code.mu.add(&sigma.mul(noise)?)
}

/// A model whose parameters are recorded on a tape.
pub struct BoundModel<'t, 'm, T: Element = f32> {
    model: &'m CevaeModel<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Element> BoundModel<'t, '_, T> {
    /// Parameter variables in the model's storage order.
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.model.arch
    }

    fn slope(&self) -> T {
        T::of(self.model.arch.leaky_slope)
    }

    /// Trunk of five strided convolutions, then the two affine heads.
    pub fn encode(&self, x: &Var<'t, T>) -> Result<LatentCode<'t, T>> {
        let arch = self.arch();
        let shape = x.shape();
        let s = arch.image_size;
        if shape.len() != 4 || shape[1] != arch.in_channels || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: vec![0, arch.in_channels, s, s],
                right: shape,
            });
        }
        let n = shape[0];
        let geom = arch.geometry();
        let mut h = *x;
        for layer in 0..LAYERS {
            let (w, b) = (&self.vars[ENC + 2 * layer], &self.vars[ENC + 2 * layer + 1]);
            h = h.conv2d(w, Some(b), geom)?.leaky_relu(self.slope());
        }
        let flat = h.reshape(&[n, arch.feature_len()])?;
        let mu = flat.linear(&self.vars[MU], Some(&self.vars[MU + 1]))?;
        let log_var = flat.linear(&self.vars[LV], Some(&self.vars[LV + 1]))?;
        Ok(LatentCode { mu, log_var })
    }

    /// Affine map to the bottleneck grid, five transposed convolutions, sigmoid.
    pub fn decode(&self, z: &Var<'t, T>) -> Result<Var<'t, T>> {
        let arch = self.arch();
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != arch.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: vec![0, arch.latent_dim],
                right: shape,
            });
        }
        let n = shape[0];
        let side = arch.bottleneck_size();
        let top = arch.conv_channels[LAYERS - 1];
        let mut h = z
            .linear(&self.vars[DEC_IN], Some(&self.vars[DEC_IN + 1]))?
            .reshape(&[n, top, side, side])?;
        let geom = arch.geometry();
        for layer in 0..LAYERS {
            let (w, b) = (&self.vars[DEC + 2 * layer], &self.vars[DEC + 2 * layer + 1]);
            h = h.conv_transpose2d(w, Some(b), geom)?;
            if layer + 1 < LAYERS {
                h = h.leaky_relu(self.slope());
            }
        }
        Ok(h.sigmoid())
    }

    /// VAE path: encode, sample with the supplied standard-normal `noise`, decode.
    pub fn forward_vae(&self, x: &Var<'t, T>, noise: &Var<'t, T>) -> Result<(Var<'t, T>, LatentCode<'t, T>)> {
        let code = self.encode(x)?;
        let z = reparameterize(&code, noise)?;
        Ok((self.decode(&z)?, code))
    }

    /// Context-encoder path: decode the posterior mean of a corrupted input.
    pub fn forward_ce(&self, x_tilde: &Var<'t, T>) -> Result<Var<'t, T>> {
        let code = self.encode(x_tilde)?;
        self.decode(&code.mu)
    }

    /// Pull the gradient of every parameter out of `grads`, in storage order.
    pub fn take_grads(&self, grads: &mut crate::diffcore::Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.vars
            .iter()
            .zip(&self.model.names)
            .map(|(v, name)| {
                grads
                    .take(v)
                    .ok_or_else(|| Error::InvalidArgument(format!("no gradient recorded for {name}")))
            })
            .collect()
    }
}
