//! Slice datasets: synthetic phantoms with injected lesions, the samplewise
//! labelling rule, and PGM + JSON manifest storage.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::LAYERS;

/// Slices with more annotated pixels than this are anomalous.
pub const ANOMALY_MIN_PIXELS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Calib,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Calib => "calib",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, H, W]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[H, W]` with values in `{0, 1}`; `None` means no annotation.
    pub mask: Option<Tensor<f32>>,
    pub split: Split,
}

impl Sample {
    pub fn annotated_pixels(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(0, |m| m.data().iter().filter(|&&v| v != 0.0).count())
    }

    /// Annotation as a `[H, W]` mask; all zeros when absent.
    pub fn mask_or_empty(&self) -> Tensor<f32> {
        self.mask.clone().unwrap_or_else(|| {
            let s = self.image.shape();
            Tensor::zeros([s[1], s[2]])
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelClass {
    Normal,
    Anomalous,
    /// Between one and [`ANOMALY_MIN_PIXELS`] annotated pixels.
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLabel {
    pub class: LabelClass,
    pub annotated_pixels: usize,
}

pub fn label_from_count(annotated_pixels: usize) -> SampleLabel {
    let class = match annotated_pixels {
        0 => LabelClass::Normal,
        n if n > ANOMALY_MIN_PIXELS => LabelClass::Anomalous,
        _ => LabelClass::Excluded,
    };
    SampleLabel {
        class,
        annotated_pixels,
    }
}

pub fn label_sample(sample: &Sample) -> SampleLabel {
    label_from_count(sample.annotated_pixels())
}

/// An ordered collection of equally sized slices with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceDataset {
    image_size: usize,
    samples: Vec<Sample>,
    meta: serde_json::Value,
}

impl SliceDataset {
    pub fn new(image_size: usize, samples: Vec<Sample>, meta: serde_json::Value) -> Result<Self> {
        let mut ids = HashSet::new();
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate sample id {}", s.id)));
            }
            check_sample(s, image_size)?;
        }
        Ok(SliceDataset {
            image_size,
            samples,
            meta,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Images of the training split, in dataset order.
    pub fn train_images(&self) -> Vec<Tensor<f32>> {
        self.with_split(Split::Train).map(|s| s.image.clone()).collect()
    }
}

fn check_sample(s: &Sample, size: usize) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidArgument(format!("sample {}: {msg}", s.id)));
    if s.image.shape() != [1, size, size] {
        return bad(format!("image shape {:?}, expected [1, {size}, {size}]", s.image.shape()));
    }
    if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return bad("image values outside [0, 1]".into());
    }
    if let Some(m) = &s.mask {
        if m.shape() != [size, size] {
            return bad(format!("mask shape {:?}, expected [{size}, {size}]", m.shape()));
        }
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return bad("mask is not binary".into());
        }
    }
    Ok(())
}

fn check_image_size(image_size: usize) -> Result<()> {
    let unit = 1 << LAYERS;
    if image_size == 0 || image_size % unit != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {image_size} must be a positive multiple of {unit}"
        )));
    }
    Ok(())
}

/// Elliptical tissue region of a phantom, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Normalised radius: below 1 inside, above 1 outside.
    pub fn rho(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    /// Whether pixel `(x, y)` (its centre) lies inside.
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        self.rho(x as f64 + 0.5, y as f64 + 0.5) < 1.0
    }
}

/// A healthy phantom slice together with its tissue region.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Tensor<f32>,
    pub tissue: Ellipse,
}

fn blur_plane(src: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let blur_1d = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for i in 0..size {
            for j in 0..size {
                let (lo, hi) = (j.saturating_sub(radius), (j + radius + 1).min(size));
                let at = |k: usize| if horizontal { i * size + k } else { k * size + i };
                let sum: f64 = (lo..hi).map(|k| src[at(k)]).sum();
                out[at(j)] = sum / (hi - lo) as f64;
            }
        }
        out
    };
    blur_1d(&blur_1d(src, true), false)
}

/// One healthy slice: zero background, an elliptical tissue region with a
/// radial intensity profile, a darker inner structure and smooth texture.
pub fn generate_phantom<R: Rng + ?Sized>(image_size: usize, rng: &mut R) -> Result<Phantom> {
    check_image_size(image_size)?;
    let s = image_size as f64;
    let tissue = Ellipse {
        cx: s * (0.5 + rng.random_range(-0.04..0.04)),
        cy: s * (0.5 + rng.random_range(-0.04..0.04)),
        a: s * rng.random_range(0.32..0.40),
        b: s * rng.random_range(0.36..0.44),
        theta: rng.random_range(-0.3..0.3),
    };
    let inner = Ellipse {
        cx: tissue.cx + s * rng.random_range(-0.03..0.03),
        cy: tissue.cy + s * rng.random_range(-0.03..0.03),
        a: s * rng.random_range(0.05..0.10),
        b: s * rng.random_range(0.08..0.14),
        theta: tissue.theta + rng.random_range(-0.2..0.2),
    };
    let base = rng.random_range(0.17..0.23);
    let n = image_size * image_size;
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut texture = blur_plane(&white, image_size, (image_size / 32).max(1));
    let sd = (texture.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    texture.iter_mut().for_each(|v| *v /= sd.max(1e-12));

    let mut data = vec![0.0f32; n];
    for y in 0..image_size {
        for x in 0..image_size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let rho = tissue.rho(px, py);
            if rho >= 1.0 {
                continue;
            }
            let mut v = base + 0.12 * (1.0 - rho * rho) + 0.03 * texture[y * image_size + x];
            let r_in = inner.rho(px, py);
            if r_in < 1.0 {
                v -= 0.12 * (1.0 - r_in * r_in).sqrt();
            }
            data[y * image_size + x] = v.clamp(0.05, 0.5) as f32;
        }
    }
    Ok(Phantom {
        image: Tensor::new([1, image_size, image_size], data)?,
        tissue,
    })
}

/// `n` healthy training slices.
pub fn generate_healthy<R: Rng + ?Sized>(n: usize, image_size: usize, rng: &mut R) -> Result<SliceDataset> {
    if n == 0 {
        return Err(Error::EmptyDataset("at least one healthy slice is required".into()));
    }
    check_image_size(image_size)?;
    let samples = (0..n)
        .map(|i| {
            Ok(Sample {
                id: format!("healthy-{i:05}"),
                image: generate_phantom(image_size, rng)?.image,
                mask: None,
                split: Split::Train,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SliceDataset::new(image_size, samples, serde_json::json!({ "source": "synthetic" }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionPolarity {
    Bright,
    Dark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LesionConfig {
    /// Inclusive range for the number of disks.
    pub count_range: [usize; 2],
    /// Disk radius as a fraction of the image side.
    pub radius_range: [f64; 2],
    /// Magnitude of the intensity change.
    pub offset_range: [f64; 2],
    pub polarity: LesionPolarity,
    /// Disks stay within this normalised radius of the tissue ellipse.
    pub max_rho: f64,
}

impl Default for LesionConfig {
    fn default() -> Self {
        LesionConfig {
            count_range: [1, 2],
            radius_range: [0.06, 0.12],
            offset_range: [0.3, 0.6],
            polarity: LesionPolarity::Bright,
            max_rho: 0.9,
        }
    }
}

impl LesionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.count_range[0] >= 1
            && self.count_range[0] <= self.count_range[1]
            && self.radius_range[0] > 0.0
            && self.radius_range[0] <= self.radius_range[1]
            && self.offset_range[0] > 0.0
            && self.offset_range[0] <= self.offset_range[1]
            && self.max_rho > 0.0
            && self.max_rho <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid lesion config {self:?}")))
        }
    }
}

fn disk_fits(tissue: &Ellipse, cx: f64, cy: f64, r: f64, max_rho: f64) -> bool {
    // Sampling the rim densely is enough at pixel scale.
    (0..64).all(|k| {
        let t = k as f64 * std::f64::consts::TAU / 64.0;
        tissue.rho(cx + r * t.cos(), cy + r * t.sin()) < max_rho
    })
}

/// Add disks inside `tissue` and record the changed pixels as the mask.
pub fn inject_anomaly<R: Rng + ?Sized>(
    sample: &Sample,
    tissue: &Ellipse,
    rng: &mut R,
    cfg: &LesionConfig,
) -> Result<Sample> {
    cfg.validate()?;
    let &[1, h, w] = sample.image.shape() else {
        return Err(Error::InvalidArgument(format!("expected [1, H, W], got {:?}", sample.image.shape())));
    };
    let side = h.min(w) as f64;
    let mut data = sample.image.data().to_vec();
    let k = rng.random_range(cfg.count_range[0]..=cfg.count_range[1]);
    for _ in 0..k {
        let r = side * rng.random_range(cfg.radius_range[0]..=cfg.radius_range[1]);
        let reach = tissue.a.max(tissue.b);
        let mut centre = None;
        for _ in 0..1000 {
            let cx = tissue.cx + rng.random_range(-reach..reach);
            let cy = tissue.cy + rng.random_range(-reach..reach);
            if disk_fits(tissue, cx, cy, r, cfg.max_rho) {
                centre = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = centre else {
            return Err(Error::InvalidArgument(format!(
                "tissue region of {} too small for a lesion of radius {r:.1}",
                sample.id
            )));
        };
        let delta = rng.random_range(cfg.offset_range[0]..=cfg.offset_range[1]) as f32;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    let v = &mut data[y * w + x];
                    *v = match cfg.polarity {
                        LesionPolarity::Bright => (*v + delta).min(1.0),
                        LesionPolarity::Dark => (*v - delta).max(0.0),
                    };
                }
            }
        }
    }
    let mask: Vec<f32> = data
        .iter()
        .zip(sample.image.data())
        .map(|(a, b)| if a != b { 1.0 } else { 0.0 })
        .collect();
    Ok(Sample {
        id: sample.id.clone(),
        image: Tensor::new([1, h, w], data)?,
        mask: Some(Tensor::new([h, w], mask)?),
        split: sample.split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Healthy slices in total; the test normals are taken from these.
    pub n_healthy: usize,
    pub n_anomalous: usize,
    /// Healthy slices held out for testing; defaults to `n_anomalous`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test_normal: Option<usize>,
    pub image_size: usize,
    pub seed: u64,
    /// Fraction of each test class tagged as calibration slices.
    pub calib_fraction: f64,
    pub lesion: LesionConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_healthy: 600,
            n_anomalous: 100,
            n_test_normal: None,
            image_size: 64,
            seed: 0,
            calib_fraction: 0.2,
            lesion: LesionConfig::default(),
        }
    }
}

/// Benchmark with healthy training slices and a labelled test pool.
///
/// Every slice draws from its own random substream, so a slice depends only
/// on the seed and its index.
pub fn synth_benchmark(cfg: &SynthConfig) -> Result<SliceDataset> {
    check_image_size(cfg.image_size)?;
    cfg.lesion.validate()?;
    if !(0.0..1.0).contains(&cfg.calib_fraction) {
        return Err(Error::InvalidConfig(format!(
            "calib_fraction must lie in [0, 1), got {}",
            cfg.calib_fraction
        )));
    }
    let n_test_normal = cfg.n_test_normal.unwrap_or(cfg.n_anomalous);
    if cfg.n_healthy <= n_test_normal {
        return Err(Error::EmptyDataset(format!(
            "training split empty: {} healthy slices, {} reserved for testing",
            cfg.n_healthy, n_test_normal
        )));
    }
    let n_train = cfg.n_healthy - n_test_normal;
    let rng_for = |index: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        rng
    };
    let calib_normal = (cfg.calib_fraction * n_test_normal as f64).round() as usize;
    let calib_anomalous = (cfg.calib_fraction * cfg.n_anomalous as f64).round() as usize;
    let mut samples = Vec::with_capacity(cfg.n_healthy + cfg.n_anomalous);
    for i in 0..cfg.n_healthy {
        let phantom = generate_phantom(cfg.image_size, &mut rng_for(i))?;
        let (id, split) = if i < n_train {
            (format!("train-{i:05}"), Split::Train)
        } else {
            let j = i - n_train;
            let split = if j < calib_normal { Split::Calib } else { Split::Test };
            (format!("normal-{j:05}"), split)
        };
        samples.push(Sample {
            id,
            image: phantom.image,
            mask: None,
            split,
        });
    }
    for j in 0..cfg.n_anomalous {
        let mut rng = rng_for(cfg.n_healthy + j);
        let phantom = generate_phantom(cfg.image_size, &mut rng)?;
        let healthy = Sample {
            id: format!("anomalous-{j:05}"),
            image: phantom.image,
            mask: None,
            split: if j < calib_anomalous { Split::Calib } else { Split::Test },
        };
        samples.push(inject_anomaly(&healthy, &phantom.tissue, &mut rng, &cfg.lesion)?);
    }
    let meta = serde_json::json!({
        "source": "synthetic",
        "generator": cfg,
        "normalization": "fixed intensity model, no per-slice rescaling",
    });
    SliceDataset::new(cfg.image_size, samples, meta)
}

/// Binary greyscale PGM (`P5`) with `maxval` 255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Pgm> {
        let fail = |msg: String| Error::Pgm {
            path: path.to_path_buf(),
            msg,
        };
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() {
                match bytes[pos] {
                    b'#' => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    c if c.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(fail("truncated header".into()));
            }
            fields.push(&bytes[start..pos]);
        }
        if fields[0] != b"P5" {
            return Err(fail("not a binary PGM (expected P5 magic)".into()));
        }
        let num = |f: &[u8], what: &str| -> Result<usize> {
            std::str::from_utf8(f)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fail(format!("malformed {what}")))
        };
        let (width, height, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
        if maxval != 255 {
            return Err(fail(format!("maxval {maxval} unsupported, expected 255")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(fail("missing raster".into()));
        }
        let raster = &bytes[pos + 1..];
        let expected = width * height;
        if raster.len() != expected {
            return Err(fail(format!("raster has {} bytes, expected {expected}", raster.len())));
        }
        Ok(Pgm {
            width,
            height,
            pixels: raster.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Pgm> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Pgm::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Quantise `[0, 1]` values to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Pgm {
        Pgm {
            width,
            height,
            pixels: values
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }
}

/// Read a PGM slice as a `[1, H, W]` tensor in `[0, 1]`.
pub fn load_slice(path: &Path) -> Result<Tensor<f32>> {
    let pgm = Pgm::read(path)?;
    Tensor::new([1, pgm.height, pgm.width], pgm.to_unit())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    image: PathBuf,
    mask: Option<PathBuf>,
    split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    image_size: usize,
    samples: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sample id {id:?} is not a safe file name")))
    }
}

/// Write `manifest.json`, `images/*.pgm` and `masks/*.pgm` under `dir`.
///
/// Values are quantised to 8 bits once; saving a loaded dataset again
/// reproduces the files byte for byte.
pub fn save_dataset(ds: &SliceDataset, dir: &Path) -> Result<PathBuf> {
    let size = ds.image_size;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        check_id(&s.id)?;
        let image = PathBuf::from("images").join(format!("{}.pgm", s.id));
        Pgm::from_unit(size, size, s.image.data()).write(&dir.join(&image))?;
        let mask = match &s.mask {
            Some(m) => {
                let rel = PathBuf::from("masks").join(format!("{}.pgm", s.id));
                Pgm::from_unit(size, size, m.data()).write(&dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image,
            mask,
            split: s.split,
        });
    }
    let manifest = Manifest {
        image_size: size,
        samples: entries,
        meta: ds.meta.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load a dataset from a manifest file or a directory containing one.
pub fn load_dataset(path: &Path) -> Result<SliceDataset> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        msg: e.to_string(),
    })?;
    let size = manifest.image_size;
    let mismatch = |file: &Path, pgm: &Pgm| Error::Manifest {
        path: manifest_path.clone(),
        msg: format!(
            "{} is {}x{}, manifest image_size is {size}",
            file.display(),
            pgm.width,
            pgm.height
        ),
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let image_path = root.join(&e.image);
        let pgm = Pgm::read(&image_path)?;
        if pgm.width != size || pgm.height != size {
            return Err(mismatch(&image_path, &pgm));
        }
        let image = Tensor::new([1, size, size], pgm.to_unit())?;
        let mask = match &e.mask {
            Some(rel) => {
                let mask_path = root.join(rel);
                let pgm = Pgm::read(&mask_path)?;
                if pgm.width != size || pgm.height != size {
                    return Err(mismatch(&mask_path, &pgm));
                }
                let bits = pgm.pixels.iter().map(|&p| if p != 0 { 1.0 } else { 0.0 }).collect();
                Some(Tensor::new([size, size], bits)?)
            }
            None => None,
        };
        samples.push(Sample {
            id: e.id,
            image,
            mask,
            split: e.split,
        });
    }
    SliceDataset::new(size, samples, manifest.meta).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::Manifest {
            path: manifest_path.clone(),
            msg,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_healthy: 12,
            n_anomalous: 5,
            n_test_normal: Some(5),
            image_size: 32,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn labelling_boundaries() {
        assert_eq!(label_from_count(0).class, LabelClass::Normal);
        assert_eq!(label_from_count(1).class, LabelClass::Excluded);
        assert_eq!(label_from_count(10).class, LabelClass::Excluded);
        assert_eq!(label_from_count(20).class, LabelClass::Excluded);
        assert_eq!(label_from_count(21).class, LabelClass::Anomalous);
        assert_eq!(label_from_count(25).class, LabelClass::Anomalous);
    }

    #[test]
    fn healthy_generation_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = generate_healthy(4, 64, &mut rng).unwrap();
        let b = generate_healthy(4, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(generate_healthy(1, 48, &mut rng).is_err());
        assert!(generate_healthy(0, 64, &mut rng).is_err());
        for _ in 0..20 {
            let p = generate_phantom(64, &mut rng).unwrap();
            let d = p.image.data();
            assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
            for y in 0..64 {
                for x in 0..64 {
                    if !p.tissue.contains_pixel(x, y) {
                        assert!(d[y * 64 + x] < 0.05);
                    }
                }
            }
        }
    }

    #[test]
    fn injection_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let p = generate_phantom(64, &mut rng).unwrap();
            let healthy = Sample {
                id: "x".into(),
                image: p.image.clone(),
                mask: None,
                split: Split::Test,
            };
            let sick = inject_anomaly(&healthy, &p.tissue, &mut rng, &LesionConfig::default()).unwrap();
            let mask = sick.mask.as_ref().unwrap();
            assert!(sick.annotated_pixels() > ANOMALY_MIN_PIXELS);
            let (mut before, mut after) = (0.0, 0.0);
            for i in 0..64 * 64 {
                let changed = sick.image.data()[i] != p.image.data()[i];
                assert_eq!(changed, mask.data()[i] == 1.0);
                if changed {
                    assert!(p.tissue.contains_pixel(i % 64, i / 64));
                    before += p.image.data()[i] as f64;
                    after += sick.image.data()[i] as f64;
                }
            }
            assert!(after > before);
        }
        let tiny = Ellipse {
            cx: 16.0,
            cy: 16.0,
            a: 1.0,
            b: 1.0,
            theta: 0.0,
        };
        let s = Sample {
            id: "t".into(),
            image: Tensor::zeros([1, 32, 32]),
            mask: None,
            split: Split::Test,
        };
        assert!(inject_anomaly(&s, &tiny, &mut rng, &LesionConfig::default()).is_err());
    }

    #[test]
    fn benchmark_layout() {
        let cfg = small_cfg();
        let ds = synth_benchmark(&cfg).unwrap();
        assert_eq!(ds.len(), 17);
        assert_eq!(ds.with_split(Split::Train).count(), 7);
        assert_eq!(ds.with_split(Split::Calib).count(), 2);
        let labels: Vec<_> = ds
            .samples()
            .iter()
            .filter(|s| s.split != Split::Train)
            .map(|s| label_sample(s).class)
            .collect();
        assert_eq!(labels.iter().filter(|&&c| c == LabelClass::Normal).count(), 5);
        assert_eq!(synth_benchmark(&cfg).unwrap(), ds);
        let empty = SynthConfig {
            n_healthy: 5,
            ..cfg.clone()
        };
        assert!(matches!(synth_benchmark(&empty), Err(Error::EmptyDataset(_))));
        let none = SynthConfig {
            n_healthy: 0,
            n_anomalous: 0,
            ..cfg
        };
        assert!(synth_benchmark(&none).is_err());
    }

    #[test]
    fn pgm_round_trip_and_endpoints() {
        let pgm = Pgm {
            width: 3,
            height: 2,
            pixels: vec![0, 255, 7, 8, 9, 10],
        };
        let p = Path::new("mem.pgm");
        assert_eq!(Pgm::decode(&pgm.encode(), p).unwrap(), pgm);
        let unit = pgm.to_unit();
        assert_eq!(unit[0], 0.0);
        assert_eq!(unit[1], 1.0);
        assert_eq!(Pgm::from_unit(3, 2, &unit), pgm);
        let with_comment = b"P5 # c\n3 # w\n2\n255\n\x00\xff\x07\x08\x09\x0a";
        assert_eq!(Pgm::decode(with_comment, p).unwrap(), pgm);
        assert!(Pgm::decode(b"P2\n3 2\n255\n", p).is_err());
        assert!(Pgm::decode(b"P5\n3 2\n65535\n", p).is_err());
        assert!(Pgm::decode(b"P5\n3 2\n255\n\x00", p).is_err());
        assert!(Pgm::decode(b"P5\n3", p).is_err());
    }

    #[test]
    fn dataset_round_trip_is_idempotent() {
        let ds = synth_benchmark(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
        save_dataset(&ds, &d1).unwrap();
        let loaded = load_dataset(&d1).unwrap();
        assert_eq!(loaded.len(), ds.len());
        for (a, b) in loaded.samples().iter().zip(ds.samples()) {
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        save_dataset(&loaded, &d2).unwrap();
        for entry in std::fs::read_dir(d1.join("images")).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(d1.join("images").join(&name)).unwrap();
            let b = std::fs::read(d2.join("images").join(&name)).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(
            std::fs::read(d1.join(MANIFEST_FILE)).unwrap(),
            std::fs::read(d2.join(MANIFEST_FILE)).unwrap()
        );
        assert_eq!(load_dataset(&d2).unwrap(), loaded);
    }

    #[test]
    fn missing_mask_is_named() {
        let ds = synth_benchmark(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("masks").join("anomalous-00000.pgm");
        std::fs::remove_file(&victim).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("anomalous-00000.pgm"), "{err}");
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let ds = synth_benchmark(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        Pgm::from_unit(4, 4, &[0.0; 16])
            .write(&dir.path().join("images").join("train-00000.pgm"))
            .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Manifest { .. })));
    }

    #[test]
    fn dataset_invariants_enforced() {
        let s = |id: &str, v: f32| Sample {
            id: id.into(),
            image: Tensor::full([1, 32, 32], v),
            mask: None,
            split: Split::Train,
        };
        assert!(SliceDataset::new(32, vec![s("a", 0.1), s("a", 0.2)], serde_json::Value::Null).is_err());
        assert!(SliceDataset::new(32, vec![s("a", 1.5)], serde_json::Value::Null).is_err());
        assert!(SliceDataset::new(64, vec![s("a", 0.5)], serde_json::Value::Null).is_err());
    }
}
