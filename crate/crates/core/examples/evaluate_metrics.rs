//! Clinical metrics with 95% intervals for a confusion matrix, and ROC/AUC
//! for a handful of scores.
//!
//! cargo run --release --example evaluate_metrics

use ribcam::phantom::LesionLabel::{Metastasis as M, Trauma as T};
use ribcam::stats::{auc_pairwise_oracle, classification_metrics, ConfusionCounts, RocCurve};

fn main() -> ribcam::Result<()> {
    let m = classification_metrics(ConfusionCounts { tp: 81, fn_: 9, tn: 60, fp: 13 }, 0.95)?;
    for (name, v) in m.named() {
        match (v.value, v.ci_low, v.ci_high) {
            (Some(p), Some(lo), Some(hi)) => println!("{name:<12} {p:.4}  [{lo:.4}, {hi:.4}]"),
            _ => println!("{name:<12} undefined"),
        }
    }

    let scores = [0.95, 0.9, 0.8, 0.8, 0.6, 0.4, 0.35, 0.2];
    let truths = [M, M, T, M, M, T, T, T];
    let roc = RocCurve::new(&scores, &truths)?;
    for p in &roc.points {
        println!("threshold {:>5}  fpr {:.2}  tpr {:.2}", p.threshold, p.fpr, p.tpr);
    }
    println!("auc {:.4} (pairwise {:.4})", roc.auc, auc_pairwise_oracle(&scores, &truths)?);
    Ok(())
}
