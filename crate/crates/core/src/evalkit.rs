//! Detection metrics and the evaluation protocol: samplewise and pixelwise
//! AUROC, Dice-optimal threshold calibration on a held-out fraction of the
//! test slices, and Dice on the rest.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{label_sample, LabelClass, Sample, SliceDataset, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::CevaeModel;
use crate::scoring::{box_blur, collapse_diagnostic, pixel_score, AnomalyResult, CollapseDiagnostic, ScoreConfig};

fn check_scores(scores: &[f64], labels: usize) -> Result<()> {
    if scores.len() != labels {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {labels} labels",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    Ok(())
}

/// Tie groups in ascending score order as `(negatives, positives)` counts.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = None;
    for i in idx {
        // -0.0 and 0.0 tie
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group pushed above");
        if labels[i] {
            g.1 += 1;
        } else {
            g.0 += 1;
        }
    }
    groups
}

/// `P(s+ > s-) + P(s+ = s-) / 2` from exact pair counts.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!(
            "AUROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    // twice the Mann-Whitney count keeps half credit integral
    let mut twice = 0u128;
    let mut neg_below = 0u128;
    for (n, p) in tie_groups(scores, labels) {
        let (n, p) = (n as u128, p as u128);
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auroc: f64,
}

impl RocCurve {
    /// Area under the piecewise linear curve.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    /// At most `max_points` points, always keeping both end points.
    pub fn thinned(&self, max_points: usize) -> RocCurve {
        let n = self.points.len();
        if n <= max_points || max_points < 2 {
            return self.clone();
        }
        let points = (0..max_points)
            .map(|k| self.points[k * (n - 1) / (max_points - 1)])
            .collect();
        RocCurve {
            points,
            auroc: self.auroc,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            let _ = writeln!(out, "{f},{t}");
        }
        out
    }
}

/// ROC curve with one vertex per distinct score (thresholds descending).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let auroc = auroc(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0u64, 0u64);
    for (n, p) in groups.into_iter().rev() {
        fp += n;
        tp += p;
        points.push((fp as f64 / neg, tp as f64 / pos));
    }
    Ok(RocCurve { points, auroc })
}

fn binary(mask: &Tensor<f32>, what: &str) -> Result<Vec<bool>> {
    mask.data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::InvalidArgument(format!("{what} mask value {v} is not binary"))),
        })
        .collect()
}

/// Overlap counts accumulated over any number of mask pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl DiceCounts {
    pub fn from_bools(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = DiceCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            c.intersection += (p && t) as u64;
            c.predicted += p as u64;
            c.truth += t as u64;
        }
        c
    }

    pub fn add(&mut self, other: DiceCounts) {
        self.intersection += other.intersection;
        self.predicted += other.predicted;
        self.truth += other.truth;
    }

    /// `2 |A ∩ B| / (|A| + |B|)`, and 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            1.0
        } else {
            (2 * self.intersection) as f64 / denom as f64
        }
    }
}

pub fn dice(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice",
            left: pred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    Ok(DiceCounts::from_bools(&binary(pred, "predicted")?, &binary(truth, "true")?).dice())
}

/// Threshold maximising pooled Dice of `score > t` over the maps.
///
/// Candidates are `-inf`, the midpoints between consecutive distinct pooled
/// scores, and `+inf`; the smallest optimal candidate wins.
pub fn calibrate_threshold(maps: &[&Tensor<f32>], masks: &[&Tensor<f32>]) -> Result<f64> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "calibration needs matching non-empty map and mask lists, got {} and {}",
            maps.len(),
            masks.len()
        )));
    }
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    for (m, t) in maps.iter().zip(masks) {
        if m.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "calibrate_threshold",
                left: m.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let truth = binary(t, "true")?;
        pooled.extend(m.data().iter().map(|&v| v as f64).zip(truth));
    }
    if pooled.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::NonFinite("NaN in calibration maps".into()));
    }
    let positives = pooled.iter().filter(|(_, t)| *t).count() as u64;
    if positives == 0 {
        return Err(Error::Degenerate("calibration set has no annotated pixels".into()));
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // (score, count, positives) per distinct score, ascending
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for &(s, t) in &pooled {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                g.1 += 1;
                g.2 += t as u64;
            }
            _ => groups.push((s, 1, t as u64)),
        }
    }
    let dice_of = |predicted: u64, tp: u64| (2 * tp) as f64 / (predicted + positives) as f64;
    // Candidate k predicts every group with index >= k.
    let mut predicted = pooled.len() as u64;
    let mut tp = positives;
    let mut best = (dice_of(predicted, tp), f64::NEG_INFINITY);
    for k in 1..=groups.len() {
        let (lo, count, pos) = groups[k - 1];
        predicted -= count;
        tp -= pos;
        let threshold = match groups.get(k) {
            Some(&(hi, _, _)) => {
                let mid = lo + (hi - lo) / 2.0;
                if mid < hi { mid } else { lo }
            }
            None => f64::INFINITY,
        };
        let d = dice_of(predicted, tp);
        if d > best.0 {
            best = (d, threshold);
        }
    }
    Ok(best.1)
}

/// Calibration flags from a seeded split stratified by `classes`.
pub fn stratified_split<K: Copy + Eq + std::hash::Hash + Ord>(classes: &[K], fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "calibration fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut by_class: std::collections::BTreeMap<K, Vec<usize>> = Default::default();
    for (i, &k) in classes.iter().enumerate() {
        by_class.entry(k).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut calib = vec![false; classes.len()];
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let take = (fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..take] {
            calib[i] = true;
        }
    }
    Ok(calib)
}

/// Anything that turns a slice into anomaly scores.
pub trait SliceScorer: Sync {
    fn score(&self, sample: &Sample) -> Result<AnomalyResult<f32>>;

    /// Latent usage over the given slices, when the scorer has a latent space.
    fn collapse(&self, _slices: &[&Tensor<f32>]) -> Result<Option<CollapseDiagnostic>> {
        Ok(None)
    }
}

/// Scores a trained model.
pub struct ModelScorer<'a> {
    pub model: &'a CevaeModel<f32>,
    pub config: ScoreConfig,
    /// Box blur radius applied to the pixel map; 0 disables it.
    pub blur_radius: usize,
}

impl SliceScorer for ModelScorer<'_> {
    fn score(&self, sample: &Sample) -> Result<AnomalyResult<f32>> {
        let mut r = pixel_score(self.model, &sample.image, &self.config)?;
        if self.blur_radius > 0 {
            r.pixel_score_map = box_blur(&r.pixel_score_map, self.blur_radius)?;
        }
        Ok(r)
    }

    fn collapse(&self, slices: &[&Tensor<f32>]) -> Result<Option<CollapseDiagnostic>> {
        collapse_diagnostic(self.model, slices).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub calib_fraction: f64,
    pub seed: u64,
    pub blur_radius: usize,
    pub score: ScoreConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            calib_fraction: 0.2,
            seed: 0,
            blur_radius: 0,
            score: ScoreConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub normal: usize,
    pub anomalous: usize,
    pub excluded: usize,
    /// Training slices present in the dataset; never evaluated.
    pub train: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.normal + self.anomalous + self.excluded + self.train
    }
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Named(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => Repr::Named("inf".into()),
            f64::NEG_INFINITY => Repr::Named("-inf".into()),
            x => Repr::Finite(x),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Finite(x) => Ok(x),
            Repr::Named(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Named(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Named(s) => Err(serde::de::Error::custom(format!("invalid threshold {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ClassCounts,
    pub samplewise_auroc: f64,
    /// All pixels of all evaluated slices ranked together.
    pub pixelwise_auroc: f64,
    /// Mean over slices that contain both pixel classes.
    pub pixelwise_auroc_per_slice: Option<f64>,
    pub recon_error_pixelwise_auroc: f64,
    pub kl_grad_pixelwise_auroc: f64,
    #[serde(with = "threshold_serde")]
    pub calibrated_threshold: f64,
    pub calib_dice: f64,
    /// Pooled over the pixels of all holdout slices.
    pub dice_on_holdout: f64,
    pub dice_on_holdout_per_slice: f64,
    pub calib_slices: usize,
    pub holdout_slices: usize,
    pub collapse: Option<CollapseDiagnostic>,
    pub config: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub id: String,
    pub class: LabelClass,
    pub score: f64,
    pub calib: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub samplewise_roc: RocCurve,
    pub pixelwise_roc: RocCurve,
    pub slices: Vec<SliceScore>,
}

/// Evaluate `scorer` on every non-training slice of `dataset`.
///
/// The evaluated slices are split into calibration and holdout parts by a
/// seeded split stratified by label; any `calib` tags in the dataset are
/// treated like `test`.
pub fn evaluate<S: SliceScorer>(scorer: &S, dataset: &SliceDataset, cfg: &EvalConfig) -> Result<EvalOutcome> {
    let mut counts = ClassCounts::default();
    let mut pool: Vec<(&Sample, LabelClass)> = Vec::new();
    for s in dataset.samples() {
        if s.split == Split::Train {
            counts.train += 1;
            continue;
        }
        let class = label_sample(s).class;
        match class {
            LabelClass::Normal => counts.normal += 1,
            LabelClass::Anomalous => counts.anomalous += 1,
            LabelClass::Excluded => counts.excluded += 1,
        }
        pool.push((s, class));
    }
    if counts.normal == 0 || counts.anomalous == 0 {
        return Err(Error::Degenerate(format!(
            "need normal and anomalous test slices, got normal={} anomalous={} excluded={} train={}",
            counts.normal, counts.anomalous, counts.excluded, counts.train
        )));
    }
    let classes: Vec<LabelClass> = pool.iter().map(|p| p.1).collect();
    let calib = stratified_split(&classes, cfg.calib_fraction, cfg.seed)?;

    let results: Vec<AnomalyResult<f32>> = pool
        .par_iter()
        .map(|(s, _)| scorer.score(s))
        .collect::<Result<_>>()?;
    let masks: Vec<Tensor<f32>> = pool.iter().map(|(s, _)| s.mask_or_empty()).collect();
    for (r, m) in results.iter().zip(&masks) {
        if r.pixel_score_map.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "score map vs mask",
                left: r.pixel_score_map.shape().to_vec(),
                right: m.shape().to_vec(),
            });
        }
    }

    let (mut s_scores, mut s_labels) = (Vec::new(), Vec::new());
    for ((_, class), r) in pool.iter().zip(&results) {
        if *class != LabelClass::Excluded {
            s_scores.push(r.sample_score);
            s_labels.push(*class == LabelClass::Anomalous);
        }
    }
    let samplewise_roc = roc_curve(&s_scores, &s_labels)?;

    let truth: Vec<bool> = masks.iter().flat_map(|m| m.data().iter().map(|&v| v != 0.0)).collect();
    let pooled = |f: fn(&AnomalyResult<f32>) -> &Tensor<f32>| -> Vec<f64> {
        results.iter().flat_map(|r| f(r).data().iter().map(|&v| v as f64)).collect()
    };
    let pixel_scores = pooled(|r| &r.pixel_score_map);
    let pixelwise_roc = roc_curve(&pixel_scores, &truth)?;
    let recon_auroc = auroc(&pooled(|r| &r.recon_error_map), &truth)?;
    let kl_auroc = auroc(&pooled(|r| &r.kl_grad_map), &truth)?;

    let mut per_slice = Vec::new();
    for (r, m) in results.iter().zip(&masks) {
        let t: Vec<bool> = m.data().iter().map(|&v| v != 0.0).collect();
        let p = t.iter().filter(|&&b| b).count();
        if p > 0 && p < t.len() {
            let s: Vec<f64> = r.pixel_score_map.data().iter().map(|&v| v as f64).collect();
            per_slice.push(auroc(&s, &t)?);
        }
    }
    let pixelwise_auroc_per_slice = (!per_slice.is_empty()).then(|| per_slice.iter().sum::<f64>() / per_slice.len() as f64);

    let pick = |want: bool| -> (Vec<&Tensor<f32>>, Vec<&Tensor<f32>>) {
        results
            .iter()
            .zip(&masks)
            .zip(&calib)
            .filter(|(_, &c)| c == want)
            .map(|((r, m), _)| (&r.pixel_score_map, m))
            .unzip()
    };
    let (calib_maps, calib_masks) = pick(true);
    let (hold_maps, hold_masks) = pick(false);
    if calib_maps.is_empty() || hold_maps.is_empty() {
        return Err(Error::Degenerate(format!(
            "calibration split left {} calibration and {} holdout slices",
            calib_maps.len(),
            hold_maps.len()
        )));
    }
    let threshold = calibrate_threshold(&calib_maps, &calib_masks)?;
    let counts_at = |maps: &[&Tensor<f32>], masks: &[&Tensor<f32>]| -> Vec<DiceCounts> {
        maps.iter()
            .zip(masks)
            .map(|(m, t)| {
                let pred: Vec<bool> = m.data().iter().map(|&v| v as f64 > threshold).collect();
                let truth: Vec<bool> = t.data().iter().map(|&v| v != 0.0).collect();
                DiceCounts::from_bools(&pred, &truth)
            })
            .collect()
    };
    let total = |c: &[DiceCounts]| {
        let mut acc = DiceCounts::default();
        c.iter().for_each(|&x| acc.add(x));
        acc.dice()
    };
    let calib_counts = counts_at(&calib_maps, &calib_masks);
    let hold_counts = counts_at(&hold_maps, &hold_masks);
    let dice_per_slice = hold_counts.iter().map(DiceCounts::dice).sum::<f64>() / hold_counts.len() as f64;

    let images: Vec<&Tensor<f32>> = pool.iter().map(|(s, _)| &s.image).collect();
    let collapse = scorer.collapse(&images)?;

    let slices = pool
        .iter()
        .zip(&results)
        .zip(&calib)
        .map(|(((s, class), r), &c)| SliceScore {
            id: s.id.clone(),
            class: *class,
            score: r.sample_score,
            calib: c,
        })
        .collect();
    let report = EvalReport {
        counts,
        samplewise_auroc: samplewise_roc.auroc,
        pixelwise_auroc: pixelwise_roc.auroc,
        pixelwise_auroc_per_slice,
        recon_error_pixelwise_auroc: recon_auroc,
        kl_grad_pixelwise_auroc: kl_auroc,
        calibrated_threshold: threshold,
        calib_dice: total(&calib_counts),
        dice_on_holdout: total(&hold_counts),
        dice_on_holdout_per_slice: dice_per_slice,
        calib_slices: calib_maps.len(),
        holdout_slices: hold_maps.len(),
        collapse,
        config: cfg.clone(),
    };
    Ok(EvalOutcome {
        report,
        samplewise_roc,
        pixelwise_roc,
        slices,
    })
}

/// ROC curves as a standalone SVG line plot.
pub fn roc_svg(curves: &[(&str, &RocCurve)]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let full = SIZE + 2.0 * PAD;
    let px = |f: f64| PAD + f * SIZE;
    let py = |t: f64| PAD + (1.0 - t) * SIZE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{full}" height="{full}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v}</text>"#, px(v), PAD + SIZE + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v}</text>"#, PAD - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">false positive rate</text>"#,
        PAD + SIZE / 2.0,
        full - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">true positive rate</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let pts: Vec<String> = curve
            .thinned(2000)
            .points
            .iter()
            .map(|&(f, t)| format!("{:.2},{:.2}", px(f), py(t)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{} (AUROC {:.3})</text>"#,
            PAD + SIZE - 170.0,
            PAD + SIZE - 12.0 - 16.0 * i as f64,
            xml_escape(name),
            curve.auroc
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
