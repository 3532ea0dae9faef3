//! `ribcam <subcommand> --config <path> [--seed N] [--out DIR]`
//!
//! Every output lands under the run directory. Exit status is 0 on success,
//! 1 for usage, configuration or validation errors and 2 for I/O failures.
//! `RIBCAM_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cam::{heatmap, localization_score, overlay_colormap, read_heatmap_csv, write_heatmap_csv, CamMethod};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{load_dataset, load_scan_png, save_dataset, write_rgb_png};
use crate::phantom::{generate_dataset, Dataset, LesionLabel};
use crate::plot::{ablation_plot, roc_plot};
use crate::stats::{
    auc_trapezoid, classification_metrics, confusion_matrix, read_ablation_csv, read_metrics_json, read_roc_csv,
    roc_points, run_ablation, write_ablation_csv, write_metrics_json, write_roc_csv, EvalReport,
};
use crate::trainer::{csv_error, fine_tune, predict_dataset, pretrain_pretext};

pub const PRETRAINED: &str = "pretrained.ckpt";
pub const MODEL: &str = "model.ckpt";

#[derive(Parser, Debug)]
#[command(name = "ribcam", version, about = "Rib-lesion phantoms, CNN training and heatmap evidence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom dataset
    GenData(Common),
    /// Train the pretext network
    Pretrain(Common),
    /// Replace the head and fine-tune on the training split
    Train(Common),
    /// Score the test split: predictions, metrics and ROC
    Eval(Common),
    /// Heatmaps and localization scores for the test split
    Cam(Common),
    /// Fine-tune on each ablation size
    Ablate(Common),
    /// Plots, overlays and a text summary
    Report(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn split(self) -> (&'static str, Common) {
        match self {
            Command::GenData(c) => ("gen-data", c),
            Command::Pretrain(c) => ("pretrain", c),
            Command::Train(c) => ("train", c),
            Command::Eval(c) => ("eval", c),
            Command::Cam(c) => ("cam", c),
            Command::Ablate(c) => ("ablate", c),
            Command::Report(c) => ("report", c),
        }
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (name, common) = cli.command.split();
    match configure(&common).and_then(|cfg| run_subcommand(name, &cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ribcam {name}: {e}");
            e.exit_code()
        }
    }
}

fn configure(common: &Common) -> Result<RunConfig> {
    init_threads()?;
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("RIBCAM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("RIBCAM_THREADS must be a positive integer, got {v:?}")))?;
    // Only the first call in a process can size the global pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one subcommand and, on success, echoes the effective config to
/// `<out_dir>/config.txt`.
pub fn run_subcommand(name: &str, cfg: &RunConfig) -> Result<()> {
    match name {
        "gen-data" => gen_data(cfg)?,
        "pretrain" => pretrain(cfg)?,
        "train" => train(cfg)?,
        "eval" => eval(cfg)?,
        "cam" => cam(cfg)?,
        "ablate" => ablate(cfg)?,
        "report" => report(cfg)?,
        other => return Err(Error::validation("subcommand", format!("unknown subcommand {other:?}"))),
    }
    mkdir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("config.txt");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingInputs(missing))
    }
}

/// Loads the configured dataset; an absent or empty one is a validation
/// error rather than an I/O failure.
fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir();
    if !dir.join("labels.csv").is_file() {
        return Err(Error::validation(
            "data_dir",
            format!("{} holds no dataset (labels.csv not found)", dir.display()),
        ));
    }
    let ds = load_dataset(&dir)?;
    if ds.test.is_empty() {
        return Err(Error::validation("data_dir", format!("{} has no test cases", dir.display())));
    }
    Ok(ds)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let (m, t) = cfg.phantom_specs();
    let ds = generate_dataset(&cfg.split, &m, &t, cfg.seed)?;
    let dir = cfg.data_dir();
    mkdir(&dir)?;
    save_dataset(&dir, &ds)
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let arch = cfg.arch_spec()?;
    let (net, log) = pretrain_pretext(&arch, &cfg.pretext_config(), cfg.seed)?;
    mkdir(&cfg.out_dir)?;
    save_checkpoint(&net, &cfg.out_dir.join(PRETRAINED))?;
    log.write_csv(&cfg.out_dir.join("pretrain_log.csv"))
}

/// The pretrained network with a fresh two-class head.
fn transfer_base(cfg: &RunConfig) -> Result<crate::model::Network> {
    let path = cfg.out_dir.join(PRETRAINED);
    require(std::slice::from_ref(&path))?;
    let pre = load_checkpoint(&path)?;
    crate::model::replace_final_layer(&pre, 2, cfg.seed)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let ds = dataset(cfg)?;
    let base = transfer_base(cfg)?;
    let (net, log) = fine_tune(&base, &ds.train, &cfg.train_config())?;
    save_checkpoint(&net, &cfg.out_dir.join(MODEL))?;
    log.write_csv(&cfg.out_dir.join("train_log.csv"))
}

fn trained_model(cfg: &RunConfig) -> Result<crate::model::Network> {
    let path = cfg.out_dir.join(MODEL);
    require(std::slice::from_ref(&path))?;
    load_checkpoint(&path)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let ds = dataset(cfg)?;
    let net = trained_model(cfg)?;
    let preds = predict_dataset(&net, &ds.test)?;
    let truths: Vec<LesionLabel> = ds.test.iter().map(|c| c.label).collect();
    let labels: Vec<LesionLabel> = preds.iter().map(|p| p.label).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let metrics = classification_metrics(confusion_matrix(&labels, &truths)?, cfg.confidence)?;
    let points = roc_points(&scores, &truths)?;
    let report = EvalReport {
        metrics,
        auc: auc_trapezoid(&points),
    };

    let path = cfg.out_dir.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["id", "label", "predicted", "score"])
        .map_err(|e| csv_error(&path, e))?;
    for (c, p) in ds.test.iter().zip(&preds) {
        w.write_record([&c.image.id, c.label.as_str(), p.label.as_str(), &p.score.to_string()])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_metrics_json(&cfg.out_dir.join("metrics.json"), &report)?;
    write_roc_csv(&cfg.out_dir.join("roc.csv"), &points)
}

const LOCALIZATION_HEADER: [&str; 6] = ["id", "label", "predicted", "method", "iou", "pointing_hit"];

/// One row of `heatmaps/localization.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationRow {
    pub id: String,
    pub label: LesionLabel,
    pub predicted: LesionLabel,
    pub method: CamMethod,
    pub iou: f64,
    pub pointing_hit: bool,
}

/// Heatmaps toward each test case's predicted class. Every case is scored;
/// the first `cam_cases` of each true class also get a heatmap CSV.
fn cam(cfg: &RunConfig) -> Result<()> {
    use rayon::prelude::*;
    let ds = dataset(cfg)?;
    let net = trained_model(cfg)?;
    let preds = predict_dataset(&net, &ds.test)?;
    let scored = ds
        .test
        .par_iter()
        .zip(&preds)
        .map(|(c, p)| {
            let h = heatmap(&net, &c.image, p.label, cfg.cam_method)?;
            let loc = localization_score(&h, &c.mask, cfg.pointing_threshold)?;
            Ok((h, loc))
        })
        .collect::<Result<Vec<_>>>()?;

    let dir = cfg.out_dir.join("heatmaps");
    mkdir(&dir)?;
    let mut kept = [0usize; 2];
    let path = dir.join("localization.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(LOCALIZATION_HEADER).map_err(|e| csv_error(&path, e))?;
    for ((c, p), (h, loc)) in ds.test.iter().zip(&preds).zip(&scored) {
        let k = &mut kept[c.label.class_index()];
        if *k < cfg.cam_cases {
            *k += 1;
            write_heatmap_csv(&dir.join(format!("{}.csv", c.image.id)), h)?;
        }
        w.write_record([
            c.image.id.as_str(),
            c.label.as_str(),
            p.label.as_str(),
            cfg.cam_method.as_str(),
            &loc.iou.to_string(),
            if loc.pointing_hit { "1" } else { "0" },
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_localization_csv(path: &Path) -> Result<Vec<LocalizationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let h = r.headers().map_err(|e| csv_error(path, e))?;
    if h.iter().ne(LOCALIZATION_HEADER) {
        return Err(Error::format(path, format!("expected header {}", LOCALIZATION_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", i + 2));
        let f = |j: usize| rec.get(j).unwrap_or("");
        rows.push(LocalizationRow {
            id: f(0).to_string(),
            label: f(1).parse().map_err(|_| bad("label"))?,
            predicted: f(2).parse().map_err(|_| bad("predicted"))?,
            method: f(3).parse().map_err(|_| bad("method"))?,
            iou: f(4).parse().map_err(|_| bad("iou"))?,
            pointing_hit: match f(5) {
                "1" => true,
                "0" => false,
                _ => return Err(bad("pointing_hit")),
            },
        });
    }
    Ok(rows)
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let ds = dataset(cfg)?;
    let base = transfer_base(cfg)?;
    let rows = run_ablation(&cfg.ablation_sizes, &base, &ds.train, &ds.test, &cfg.train_config())?;
    write_ablation_csv(&cfg.out_dir.join("ablation.csv"), &rows)
}

/// Fixed-order text summary: the five metrics with confidence intervals,
/// then AUC, then localization over every scored test case.
pub fn summary_text(report: &EvalReport, loc: &[LocalizationRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
    let pct = (report.metrics.confidence * 100.0).to_string();
    let mut s = String::new();
    for (name, m) in report.metrics.named() {
        s.push_str(&format!(
            "{name:<12} {}  ({pct}% CI {} - {})\n",
            fmt(m.value),
            fmt(m.ci_low),
            fmt(m.ci_high)
        ));
    }
    s.push_str(&format!("{:<12} {:.4}\n", "auc", report.auc));
    let c = &report.metrics.counts;
    s.push_str(&format!("counts       tp {} fn {} tn {} fp {}\n", c.tp, c.fn_, c.tn, c.fp));
    if !loc.is_empty() {
        let n = loc.len() as f64;
        let iou = loc.iter().map(|r| r.iou).sum::<f64>() / n;
        let hits = loc.iter().filter(|r| r.pointing_hit).count();
        s.push_str(&format!("mean_iou     {iou:.4}\npointing     {hits}/{}\n", loc.len()));
    }
    s
}

fn report(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out_dir;
    let heat_dir = out.join("heatmaps");
    let loc_path = heat_dir.join("localization.csv");
    let (metrics, roc) = (out.join("metrics.json"), out.join("roc.csv"));
    require(&[metrics.clone(), roc.clone(), loc_path.clone()])?;
    let loc = read_localization_csv(&loc_path)?;
    let with_maps: Vec<&LocalizationRow> = loc
        .iter()
        .filter(|r| heat_dir.join(format!("{}.csv", r.id)).is_file())
        .collect();
    let images = cfg.data_dir().join("images");
    let image_paths: Vec<PathBuf> = with_maps.iter().map(|r| images.join(format!("{}.png", r.id))).collect();
    require(&image_paths)?;

    let report = read_metrics_json(&metrics)?;
    let points = read_roc_csv(&roc)?;
    let abl_path = out.join("ablation.csv");
    let ablation = if abl_path.is_file() {
        Some(read_ablation_csv(&abl_path)?)
    } else {
        None
    };

    let dir = out.join("report");
    let overlays = dir.join("overlays");
    mkdir(&overlays)?;
    write_rgb_png(&dir.join("roc.png"), &roc_plot(&points, report.auc))?;
    for (r, img_path) in with_maps.iter().zip(&image_paths) {
        let image = load_scan_png(img_path, &r.id)?;
        let h = read_heatmap_csv(&heat_dir.join(format!("{}.csv", r.id)), r.predicted, r.method)?;
        let rgb = overlay_colormap(&image, &h, cfg.overlay_alpha)?;
        write_rgb_png(&overlays.join(format!("{}.png", r.id)), &rgb)?;
    }
    if let Some(rows) = ablation {
        write_rgb_png(&dir.join("ablation.png"), &ablation_plot(&rows))?;
    }
    let path = dir.join("summary.txt");
    std::fs::write(&path, summary_text(&report, &loc)).map_err(|e| Error::io(&path, e))
}
