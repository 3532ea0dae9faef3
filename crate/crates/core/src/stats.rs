//! Confusion counts, clinical metrics with normal-approximation intervals,
//! ROC curves, AUC and the training-set-size ablation.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cam::{heatmap, localization_score, CamMethod, DEFAULT_POINTING_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::phantom::{derive_seed, LesionLabel, PhantomCase};
use crate::trainer::{csv_error, fine_tune, predict_dataset, TrainConfig};

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// Confusion counts with metastasis as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion_matrix(predictions: &[LesionLabel], truths: &[LesionLabel]) -> Result<ConfusionCounts> {
    if predictions.len() != truths.len() {
        return Err(Error::validation(
            "predictions",
            format!("{} predictions for {} truths", predictions.len(), truths.len()),
        ));
    }
    if truths.is_empty() {
        return Err(Error::validation("predictions", "must not be empty"));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p, t) {
            (LesionLabel::Metastasis, LesionLabel::Metastasis) => c.tp += 1,
            (LesionLabel::Metastasis, LesionLabel::Trauma) => c.fp += 1,
            (LesionLabel::Trauma, LesionLabel::Trauma) => c.tn += 1,
            (LesionLabel::Trauma, LesionLabel::Metastasis) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// A proportion with its interval; `None` throughout when the denominator
/// is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl Metric {
    fn wald(num: u64, den: u64, z: f64) -> Metric {
        if den == 0 {
            return Metric {
                value: None,
                ci_low: None,
                ci_high: None,
            };
        }
        let p = num as f64 / den as f64;
        let half = z * (p * (1.0 - p) / den as f64).sqrt();
        Metric {
            value: Some(p),
            ci_low: Some((p - half).clamp(0.0, 1.0)),
            ci_high: Some((p + half).clamp(0.0, 1.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub counts: ConfusionCounts,
    pub confidence: f64,
    pub sensitivity: Metric,
    pub specificity: Metric,
    pub accuracy: Metric,
    pub ppv: Metric,
    pub npv: Metric,
}

impl ClassMetrics {
    /// `(name, metric)` in reporting order.
    pub fn named(&self) -> [(&'static str, Metric); 5] {
        [
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("accuracy", self.accuracy),
            ("ppv", self.ppv),
            ("npv", self.npv),
        ]
    }
}

/// Two-sided standard-normal quantile for `confidence`.
pub fn z_value(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::validation("confidence", "must lie strictly between 0 and 1"));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(1.0 - (1.0 - confidence) / 2.0))
}

pub fn classification_metrics(c: ConfusionCounts, confidence: f64) -> Result<ClassMetrics> {
    if c.total() == 0 {
        return Err(Error::validation("counts", "total must be at least 1"));
    }
    let z = z_value(confidence)?;
    Ok(ClassMetrics {
        counts: c,
        confidence,
        sensitivity: Metric::wald(c.tp, c.tp + c.fn_, z),
        specificity: Metric::wald(c.tn, c.tn + c.fp, z),
        accuracy: Metric::wald(c.tp + c.tn, c.total(), z),
        ppv: Metric::wald(c.tp, c.tp + c.fp, z),
        npv: Metric::wald(c.tn, c.tn + c.fn_, z),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `≥ threshold` are called positive; `+∞` for the origin.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn new(scores: &[f64], truths: &[LesionLabel]) -> Result<Self> {
        let points = roc_points(scores, truths)?;
        let auc = auc_trapezoid(&points);
        Ok(RocCurve { points, auc })
    }
}

fn class_totals(scores: &[f64], truths: &[LesionLabel]) -> Result<(usize, usize)> {
    if scores.len() != truths.len() {
        return Err(Error::validation(
            "scores",
            format!("{} scores for {} truths", scores.len(), truths.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("scores", "must not contain NaN"));
    }
    let pos = truths.iter().filter(|&&t| t == LesionLabel::Metastasis).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("truths", "both classes must be present"));
    }
    Ok((pos, neg))
}

/// ROC points from a descending sweep over the distinct scores, starting at
/// the `+∞` origin. Tied scores move together, so each step may be diagonal.
pub fn roc_points(scores: &[f64], truths: &[LesionLabel]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_totals(scores, truths)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if truths[order[i]] == LesionLabel::Metastasis {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(points)
}

pub fn auc_trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half.
pub fn auc_pairwise_oracle(scores: &[f64], truths: &[LesionLabel]) -> Result<f64> {
    let (pos, neg) = class_totals(scores, truths)?;
    let mut wins = 0.0;
    for (sp, _) in scores.iter().zip(truths).filter(|(_, &t)| t == LesionLabel::Metastasis) {
        for (sn, _) in scores.iter().zip(truths).filter(|(_, &t)| t == LesionLabel::Trauma) {
            wins += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos * neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

/// `mean ± z·s/√n` with the sample standard deviation.
pub fn mean_normal_ci(values: &[f64], confidence: f64) -> Result<MeanCi> {
    if values.len() < 2 {
        return Err(Error::validation("values", "need at least 2 values for an interval"));
    }
    let z = z_value(confidence)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = z * var.sqrt() / n.sqrt();
    Ok(MeanCi {
        mean,
        low: mean - half,
        high: mean + half,
    })
}

/// Everything `metrics.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: ClassMetrics,
    pub auc: f64,
}

pub fn write_metrics_json(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_json(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["fpr", "tpr", "threshold"]).map_err(|e| csv_error(path, e))?;
    for p in points {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_roc_csv(path: &Path) -> Result<Vec<RocPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    check_header(path, &mut r, &["fpr", "tpr", "threshold"])?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn check_header(path: &Path, r: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<()> {
    let h = r.headers().map_err(|e| csv_error(path, e))?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(Error::format(path, format!("expected header {}", expected.join(","))));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub train_size: usize,
    pub test_accuracy: f64,
    pub mean_iou: f64,
    /// Hex SHA-256 over every test heatmap, in test order.
    #[serde(skip)]
    pub heatmap_digest: String,
}

/// Seeded training subset of `size` cases: the whole pool at full size,
/// otherwise `size/2` cases per class drawn without replacement.
pub fn ablation_subset(pool: &[PhantomCase], size: usize, seed: u64) -> Result<Vec<PhantomCase>> {
    if size > pool.len() {
        return Err(Error::validation(
            "ablation_sizes",
            format!("size {size} exceeds the {}-case training pool", pool.len()),
        ));
    }
    if size == pool.len() {
        return Ok(pool.to_vec());
    }
    if size == 0 || size % 2 == 1 {
        return Err(Error::validation(
            "ablation_sizes",
            format!("partial size {size} must be even and positive for a balanced split"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for label in [LesionLabel::Metastasis, LesionLabel::Trauma] {
        let members: Vec<&PhantomCase> = pool.iter().filter(|c| c.label == label).collect();
        if members.len() < size / 2 {
            return Err(Error::validation(
                "ablation_sizes",
                format!("size {size} needs {} {label} cases, pool has {}", size / 2, members.len()),
            ));
        }
        out.extend(members.choose_multiple(&mut rng, size / 2).map(|c| (*c).clone()));
    }
    // Keep pool order so the result does not depend on draw order.
    let rank = |c: &PhantomCase| pool.iter().position(|p| p.image.id == c.image.id);
    out.sort_by_key(rank);
    Ok(out)
}

/// Fine-tunes a fresh copy of `base` on each requested training size and
/// scores it on `test_set`. Rows come back in the order of `sizes`.
pub fn run_ablation(
    sizes: &[usize],
    base: &Network,
    full_train_set: &[PhantomCase],
    test_set: &[PhantomCase],
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    for &s in sizes {
        if s > full_train_set.len() || (s < full_train_set.len() && (s == 0 || s % 2 == 1)) {
            ablation_subset(full_train_set, s, 0)?;
        }
    }
    sizes
        .iter()
        .map(|&size| {
            let subset = ablation_subset(full_train_set, size, derive_seed(config.seed, size as u64))?;
            let (net, _) = fine_tune(base, &subset, config)?;
            let preds = predict_dataset(&net, test_set)?;
            let correct = preds.iter().zip(test_set).filter(|(p, c)| p.label == c.label).count();
            let (iou_sum, digest) = test_heatmaps(&net, test_set)?;
            Ok(AblationRow {
                train_size: size,
                test_accuracy: correct as f64 / test_set.len() as f64,
                mean_iou: iou_sum / test_set.len() as f64,
                heatmap_digest: digest,
            })
        })
        .collect()
}

/// Summed Grad-CAM IoU toward each case's true class, and a digest of all
/// heatmaps.
fn test_heatmaps(net: &Network, cases: &[PhantomCase]) -> Result<(f64, String)> {
    use rayon::prelude::*;
    let maps = cases
        .par_iter()
        .map(|c| {
            let h = heatmap(net, &c.image, c.label, CamMethod::GradCam)?;
            let iou = localization_score(&h, &c.mask, DEFAULT_POINTING_THRESHOLD)?.iou;
            Ok((h, iou))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut d = Sha256::new();
    let mut sum = 0.0;
    for (h, iou) in &maps {
        for v in &h.values {
            d.update(v.to_le_bytes());
        }
        sum += iou;
    }
    Ok((sum, hex(&d.finalize())))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["train_size", "test_accuracy", "mean_iou"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([r.train_size.to_string(), r.test_accuracy.to_string(), r.mean_iou.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    check_header(path, &mut r, &["train_size", "test_accuracy", "mean_iou"])?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}
