//! `cevae`: generate data, train, score, evaluate and check gradients.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod config;
mod heatmap;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cevae::data::{self, SliceDataset};
use cevae::diffcore::{Primitive, Tensor};
use cevae::evalkit::{self, ModelScorer};
use cevae::gradcheck::{self, GradcheckConfig};
use cevae::scoring;
use cevae::training;
use cevae::ErrorCategory;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use config::{create_dir, parent_dir, write_file, LoadedConfig, RunRecord};
use heatmap::HeatmapScale;

#[derive(Debug)]
pub struct CliError {
    pub category: ErrorCategory,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            category: ErrorCategory::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            category: ErrorCategory::Data,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            category: ErrorCategory::Numerical,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.category {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numerical => 3,
        }
    }
}

impl From<cevae::Error> for CliError {
    fn from(e: cevae::Error) -> Self {
        CliError {
            category: e.category(),
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cevae", version, about = "Context-encoding VAE anomaly detection on 2D slices")]
struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, env = "CEVAE_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic phantom benchmark.
    Synth(SynthArgs),
    /// Train a model on the training split of a dataset.
    Train(TrainArgs),
    /// Score slices with a trained model.
    Score(ScoreArgs),
    /// Evaluate a model on the labelled slices of a dataset.
    Eval(EvalArgs),
    /// Compare every adjoint with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; its `synth` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_healthy: Option<usize>,
    #[arg(long)]
    n_anomalous: Option<usize>,
    /// Healthy slices held out as test normals; defaults to `--n-anomalous`.
    #[arg(long)]
    n_test_normal: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; its `train` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-epoch loss log; defaults to `train_log.csv` beside the checkpoint.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreMode {
    Sample,
    Pixel,
    Both,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PGM slice, a dataset directory, or a directory of PGM slices.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ScoreMode::Both)]
    mode: ScoreMode,
    /// Also write the unscaled maps as CSV.
    #[arg(long)]
    raw: bool,
    /// JSON run config; its `score` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Report JSON; ROC files are written beside it.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; its `eval` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    calib_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Box blur radius for the pixel map; 0 disables it.
    #[arg(long)]
    blur_radius: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let mut cfg = LoadedConfig::load(a.config.as_deref())?.config;
    let s = &mut cfg.synth;
    if let Some(v) = a.n_healthy {
        s.n_healthy = v;
    }
    if let Some(v) = a.n_anomalous {
        s.n_anomalous = v;
    }
    if a.n_test_normal.is_some() {
        s.n_test_normal = a.n_test_normal;
    }
    if let Some(v) = a.image_size {
        s.image_size = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if s.n_healthy == 0 {
        return Err(CliError::usage("--n-healthy must be positive: the training split would be empty"));
    }
    let ds = data::synth_benchmark(s)?;
    create_dir(&a.out)?;
    let manifest = data::save_dataset(&ds, &a.out)?;
    RunRecord {
        command: "synth",
        paths: BTreeMap::from([("out", a.out.clone())]),
        config: &cfg,
    }
    .write(&a.out)?;
    println!("wrote {} slices to {}", ds.len(), manifest.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let loaded = LoadedConfig::load(a.config.as_deref())?;
    let mut cfg = loaded.config.clone();
    let t = &mut cfg.train;
    if let Some(v) = a.lambda {
        t.lambda = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }

    let ds = data::load_dataset(&a.data)?;
    if loaded.sets("/train/arch/image_size") && t.arch.image_size != ds.image_size() {
        return Err(CliError::data(format!(
            "config expects {0}x{0} slices, dataset {1} has {2}x{2}",
            t.arch.image_size,
            a.data.display(),
            ds.image_size()
        )));
    }
    t.arch.image_size = ds.image_size();
    t.validate()?;
    let images = ds.train_images();
    let steps_per_epoch = images.len().div_ceil(t.batch_size.max(1));
    eprintln!(
        "training on {} slices, {} epochs of {} steps, lambda {}",
        images.len(),
        t.epochs,
        steps_per_epoch,
        t.lambda
    );

    let start = Instant::now();
    let quiet = a.quiet;
    let epochs = t.epochs;
    let outcome = training::train_observed::<f32>(&images, t, |info| {
        if !quiet && info.step % steps_per_epoch as u64 == 0 {
            let b = info.breakdown;
            eprintln!(
                "epoch {}/{epochs}  total {:.5}  kl {:.5}  rec_vae {:.5}  rec_ce {:.5}  {:.0}s",
                info.epoch,
                b.total,
                b.l_kl,
                b.l_rec_vae,
                b.l_rec_ce,
                start.elapsed().as_secs_f64()
            );
        }
    })?;

    let out_dir = parent_dir(&a.out);
    create_dir(&out_dir)?;
    training::save_checkpoint(&a.out, &outcome.model, Some(&outcome.optimizer), &cfg.train)?;
    let log_path = a.log.clone().unwrap_or_else(|| out_dir.join("train_log.csv"));
    write_file(&log_path, training::log_to_csv(&outcome.log).as_bytes())?;
    RunRecord {
        command: "train",
        paths: BTreeMap::from([("data", a.data.clone()), ("checkpoint", a.out.clone()), ("log", log_path)]),
        config: &cfg,
    }
    .write(&out_dir)?;

    if let Some(last) = outcome.log.last() {
        let b = last.mean;
        println!(
            "final epoch {}: total {:.6} l_kl {:.6} l_rec_vae {:.6} l_rec_ce {:.6} (lambda {})",
            last.epoch, b.total, b.l_kl, b.l_rec_vae, b.l_rec_ce, b.lambda
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Slices to score as `(id, [1, H, W])`, in a stable order.
fn score_inputs(input: &Path) -> CliResult<Vec<(String, Tensor<f32>)>> {
    if input.is_file() {
        let id = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(id, data::load_slice(input)?)]);
    }
    if input.join(data::MANIFEST_FILE).is_file() {
        let ds = data::load_dataset(input)?;
        return Ok(ds.samples().iter().map(|s| (s.id.clone(), s.image.clone())).collect());
    }
    let entries = std::fs::read_dir(input).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::data(format!("{}: no .pgm slices found", input.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, data::load_slice(p)?))
        })
        .collect()
}

fn cmd_score(a: ScoreArgs) -> CliResult {
    let mut cfg = LoadedConfig::load(a.config.as_deref())?.config;
    let ckpt = training::load_checkpoint(&a.ckpt)?;
    let model = ckpt.model;
    cfg.train = ckpt.config;
    let inputs = score_inputs(&a.input)?;
    let side = model.arch().image_size;
    for (id, x) in &inputs {
        if x.shape()[1..] != [side, side] {
            return Err(CliError::data(format!(
                "slice {id}: expected {side}x{side} (checkpoint architecture), got {}x{}",
                x.shape()[2],
                x.shape()[1]
            )));
        }
    }
    create_dir(&a.out)?;

    let score_cfg = &cfg.score;
    let mut scores = Vec::with_capacity(inputs.len());
    match a.mode {
        ScoreMode::Sample => {
            let computed: Vec<cevae::Result<f64>> = inputs
                .par_iter()
                .map(|(_, x)| scoring::sample_score(&model, x, score_cfg))
                .collect();
            for r in computed {
                scores.push(r?);
            }
        }
        ScoreMode::Pixel | ScoreMode::Both => {
            let map_dir = a.out.join("heatmaps");
            create_dir(&map_dir)?;
            let computed: Vec<cevae::Result<scoring::AnomalyResult<f32>>> = inputs
                .par_iter()
                .map(|(_, x)| scoring::pixel_score(&model, x, score_cfg))
                .collect();
            for ((id, _), r) in inputs.iter().zip(computed) {
                let r = r?;
                write_maps(&map_dir, id, &r, a.raw)?;
                scores.push(r.sample_score);
            }
        }
    }
    if a.mode != ScoreMode::Pixel {
        let mut csv = String::from("id,score\n");
        for ((id, _), s) in inputs.iter().zip(&scores) {
            csv.push_str(&format!("{id},{s}\n"));
        }
        write_file(&a.out.join("sample_scores.csv"), csv.as_bytes())?;
    }
    RunRecord {
        command: "score",
        paths: BTreeMap::from([("checkpoint", a.ckpt.clone()), ("input", a.input.clone())]),
        config: &cfg,
    }
    .write(&a.out)?;
    println!("scored {} slices into {}", inputs.len(), a.out.display());
    Ok(())
}

fn write_maps(dir: &Path, id: &str, r: &scoring::AnomalyResult<f32>, raw: bool) -> CliResult {
    let maps = [
        ("recon_error", &r.recon_error_map),
        ("kl_grad", &r.kl_grad_map),
        ("pixel_score", &r.pixel_score_map),
    ];
    let mut scales: BTreeMap<&str, HeatmapScale> = BTreeMap::new();
    for (name, map) in maps {
        let (pgm, scale) = heatmap::to_pgm(map);
        pgm.write(&dir.join(format!("{id}.{name}.pgm")))?;
        scales.insert(name, scale);
        if raw {
            write_file(&dir.join(format!("{id}.{name}.csv")), heatmap::to_csv(map).as_bytes())?;
        }
    }
    let sidecar = serde_json::json!({ "id": id, "sample_score": r.sample_score, "scales": scales });
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| CliError::data(e.to_string()))?;
    write_file(&dir.join(format!("{id}.json")), text.as_bytes())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let mut cfg = LoadedConfig::load(a.config.as_deref())?.config;
    let e = &mut cfg.eval;
    if let Some(v) = a.calib_fraction {
        e.calib_fraction = v;
    }
    if let Some(v) = a.seed {
        e.seed = v;
    }
    if let Some(v) = a.blur_radius {
        e.blur_radius = v;
    }
    if !(e.calib_fraction > 0.0 && e.calib_fraction < 1.0) {
        return Err(CliError::usage(format!(
            "--calib-fraction must lie strictly between 0 and 1 to calibrate a threshold, got {}",
            e.calib_fraction
        )));
    }
    let ckpt = training::load_checkpoint(&a.ckpt)?;
    cfg.train = ckpt.config;
    let ds: SliceDataset = data::load_dataset(&a.data)?;
    let side = ckpt.model.arch().image_size;
    if ds.image_size() != side {
        return Err(CliError::data(format!(
            "checkpoint expects {side}x{side} slices, dataset {} has {}x{}",
            a.data.display(),
            ds.image_size(),
            ds.image_size()
        )));
    }
    let scorer = ModelScorer {
        model: &ckpt.model,
        config: cfg.eval.score.clone(),
        blur_radius: cfg.eval.blur_radius,
    };
    let outcome = evalkit::evaluate(&scorer, &ds, &cfg.eval)?;

    let out_dir = parent_dir(&a.out);
    create_dir(&out_dir)?;
    let report = serde_json::to_string_pretty(&outcome.report).map_err(|e| CliError::data(e.to_string()))?;
    write_file(&a.out, report.as_bytes())?;
    write_file(&out_dir.join("roc_samplewise.csv"), outcome.samplewise_roc.to_csv().as_bytes())?;
    write_file(&out_dir.join("roc_pixelwise.csv"), outcome.pixelwise_roc.to_csv().as_bytes())?;
    let svg = evalkit::roc_svg(&[
        ("samplewise", &outcome.samplewise_roc),
        ("pixelwise", &outcome.pixelwise_roc.thinned(2000)),
    ]);
    write_file(&out_dir.join("roc.svg"), svg.as_bytes())?;
    let mut slices = String::from("id,class,score,calib\n");
    for s in &outcome.slices {
        let class = serde_json::to_value(s.class)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        slices.push_str(&format!("{},{class},{},{}\n", s.id, s.score, s.calib));
    }
    write_file(&out_dir.join("slice_scores.csv"), slices.as_bytes())?;
    RunRecord {
        command: "eval",
        paths: BTreeMap::from([("checkpoint", a.ckpt.clone()), ("data", a.data.clone()), ("report", a.out.clone())]),
        config: &cfg,
    }
    .write(&out_dir)?;

    let r = &outcome.report;
    println!(
        "slices: {} normal, {} anomalous, {} excluded",
        r.counts.normal, r.counts.anomalous, r.counts.excluded
    );
    println!("samplewise AUROC  {:.4}", r.samplewise_auroc);
    println!("pixelwise AUROC   {:.4}", r.pixelwise_auroc);
    println!("  recon error     {:.4}", r.recon_error_pixelwise_auroc);
    println!("  KL gradient     {:.4}", r.kl_grad_pixelwise_auroc);
    println!(
        "Dice (holdout)    {:.4} pooled, {:.4} per slice, threshold {:.4e}",
        r.dice_on_holdout, r.dice_on_holdout_per_slice, r.calibrated_threshold
    );
    if let Some(c) = &r.collapse {
        println!("KL q95            {:.4}", c.q95);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(
            Primitive::ALL
                .into_iter()
                .find(|p| p.name() == name)
                .ok_or_else(|| CliError::usage(format!("unknown primitive {name:?}")))?,
        ),
    };
    let cfg = GradcheckConfig {
        seed: a.seed,
        fault,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run_gradcheck(&cfg)?;
    for c in &report.checks {
        println!("{c}");
    }
    println!("{} checks in {:.1}s", report.checks.len(), report.seconds);
    let failed: Vec<String> = report
        .failures()
        .map(|c| format!("{} (input {}, index {})", c.name, c.worst_input, c.worst_index))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numerical(format!("gradient check failed: {}", failed.join(", "))))
    }
}
