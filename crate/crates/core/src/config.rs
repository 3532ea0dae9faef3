//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored, unknown or repeated keys are errors, and absent keys take the
//! defaults below. [`RunConfig::to_text`] writes every key with its resolved
//! value, so feeding the echo back in reproduces the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cam::{CamMethod, DEFAULT_OVERLAY_ALPHA, DEFAULT_POINTING_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::ArchSpec;
use crate::phantom::{DatasetSplit, PhantomSpec, DEFAULT_SIDE};
use crate::stats::DEFAULT_CONFIDENCE;
use crate::trainer::{FreezeMask, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchName {
    Desk,
    DeskGap,
    Full,
}

impl ArchName {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::Desk => "desk",
            ArchName::DeskGap => "desk_gap",
            ArchName::Full => "full",
        }
    }

    pub fn spec(self) -> ArchSpec {
        match self {
            ArchName::Desk => ArchSpec::desk(),
            ArchName::DeskGap => ArchSpec::desk_gap(),
            ArchName::Full => ArchSpec::full(),
        }
    }
}

impl FromStr for ArchName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(ArchName::Desk),
            "desk_gap" => Ok(ArchName::DeskGap),
            "full" => Ok(ArchName::Full),
            _ => Err("expected desk, desk_gap or full".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset root; `<out_dir>/data` when unset.
    pub data_dir: Option<PathBuf>,
    pub arch: ArchName,
    /// Overrides of the archetype's input side and channel scale.
    pub input_side: Option<usize>,
    pub channel_scale: Option<f64>,
    pub image_side: usize,
    pub split: DatasetSplit,
    pub noise_mean_counts: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub freeze_mask: FreezeMask,
    pub determinism: bool,
    pub pretext_epochs: usize,
    pub pretext_batch_size: usize,
    pub pretext_learning_rate: f64,
    pub ablation_sizes: Vec<usize>,
    pub confidence: f64,
    pub cam_method: CamMethod,
    /// Heatmap CSVs written per class by `cam`.
    pub cam_cases: usize,
    pub overlay_alpha: f64,
    pub pointing_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = TrainConfig::desk();
        let pretext = TrainConfig::pretext();
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            data_dir: None,
            arch: ArchName::Desk,
            input_side: None,
            channel_scale: None,
            image_side: DEFAULT_SIDE,
            split: DatasetSplit::default(),
            noise_mean_counts: PhantomSpec::metastasis(0).noise_mean_counts,
            epochs: desk.epochs,
            batch_size: desk.batch_size,
            learning_rate: desk.learning_rate,
            momentum: desk.momentum,
            freeze_mask: desk.freeze_mask,
            determinism: desk.determinism,
            pretext_epochs: pretext.epochs,
            pretext_batch_size: pretext.batch_size,
            pretext_learning_rate: pretext.learning_rate,
            ablation_sizes: vec![300, 400, 500, 675],
            confidence: DEFAULT_CONFIDENCE,
            cam_method: CamMethod::GradCam,
            cam_cases: 4,
            overlay_alpha: DEFAULT_OVERLAY_ALPHA,
            pointing_threshold: DEFAULT_POINTING_THRESHOLD,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value {raw:?} for key `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got {body:?}")))?;
            let (key, v) = (key.trim(), v.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
            }
            match key {
                "seed" => c.seed = value(key, v, line)?,
                "out_dir" => c.out_dir = PathBuf::from(v),
                "data_dir" => c.data_dir = Some(PathBuf::from(v)),
                "arch" => {
                    c.arch = v
                        .parse()
                        .map_err(|e| Error::Config(format!("line {line}: key `arch`: {e}, got {v:?}")))?
                }
                "input_side" => c.input_side = Some(value(key, v, line)?),
                "channel_scale" => c.channel_scale = Some(value(key, v, line)?),
                "image_side" => c.image_side = value(key, v, line)?,
                "train_metastasis" => c.split.train_metastasis = value(key, v, line)?,
                "train_trauma" => c.split.train_trauma = value(key, v, line)?,
                "test_metastasis" => c.split.test_metastasis = value(key, v, line)?,
                "test_trauma" => c.split.test_trauma = value(key, v, line)?,
                "noise_mean_counts" => c.noise_mean_counts = value(key, v, line)?,
                "epochs" => c.epochs = value(key, v, line)?,
                "batch_size" => c.batch_size = value(key, v, line)?,
                "learning_rate" => c.learning_rate = value(key, v, line)?,
                "momentum" => c.momentum = value(key, v, line)?,
                "freeze_mask" => c.freeze_mask = value(key, v, line)?,
                "determinism" => c.determinism = value(key, v, line)?,
                "pretext_epochs" => c.pretext_epochs = value(key, v, line)?,
                "pretext_batch_size" => c.pretext_batch_size = value(key, v, line)?,
                "pretext_learning_rate" => c.pretext_learning_rate = value(key, v, line)?,
                "ablation_sizes" => {
                    c.ablation_sizes = v
                        .split(',')
                        .map(|s| value(key, s.trim(), line))
                        .collect::<Result<_>>()?
                }
                "confidence" => c.confidence = value(key, v, line)?,
                "cam_method" => c.cam_method = value(key, v, line)?,
                "cam_cases" => c.cam_cases = value(key, v, line)?,
                "overlay_alpha" => c.overlay_alpha = value(key, v, line)?,
                "pointing_threshold" => c.pointing_threshold = value(key, v, line)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch_spec()?;
        self.train_config().validate()?;
        self.pretext_config().validate()?;
        self.phantom_specs().0.validate()?;
        if self.split.train_metastasis + self.split.train_trauma == 0 {
            return Err(Error::validation("train_metastasis", "training split is empty"));
        }
        if self.ablation_sizes.is_empty() {
            return Err(Error::validation("ablation_sizes", "needs at least one size"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::validation("confidence", "must lie strictly between 0 and 1"));
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(Error::validation("overlay_alpha", "must lie in [0, 1]"));
        }
        if !(self.pointing_threshold > 0.0 && self.pointing_threshold < 1.0) {
            return Err(Error::validation("pointing_threshold", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    /// The archetype with overrides applied, validated.
    pub fn arch_spec(&self) -> Result<ArchSpec> {
        let mut a = self.arch.spec();
        if let Some(s) = self.input_side {
            a.input_side = s;
        }
        if let Some(s) = self.channel_scale {
            a.channel_scale = s;
        }
        a.validate()?;
        Ok(a)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed: self.seed,
            freeze_mask: self.freeze_mask.clone(),
            determinism: self.determinism,
        }
    }

    pub fn pretext_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretext_epochs,
            batch_size: self.pretext_batch_size,
            learning_rate: self.pretext_learning_rate,
            seed: self.seed,
            determinism: self.determinism,
            ..TrainConfig::pretext()
        }
    }

    /// Metastasis and trauma generator settings.
    pub fn phantom_specs(&self) -> (PhantomSpec, PhantomSpec) {
        let adjust = |mut s: PhantomSpec| {
            s.side = self.image_side;
            s.noise_mean_counts = self.noise_mean_counts;
            s
        };
        (adjust(PhantomSpec::metastasis(self.seed)), adjust(PhantomSpec::trauma(self.seed)))
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let arch = self.arch.spec();
        let sizes: Vec<String> = self.ablation_sizes.iter().map(|s| s.to_string()).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", &self.seed);
        put("out_dir", &self.out_dir.display());
        // A derived data_dir stays derived so the echo can be replayed under
        // another --out.
        if let Some(d) = &self.data_dir {
            put("data_dir", &d.display());
        }
        put("arch", &self.arch.as_str());
        put("input_side", &self.input_side.unwrap_or(arch.input_side));
        put("channel_scale", &self.channel_scale.unwrap_or(arch.channel_scale));
        put("image_side", &self.image_side);
        put("train_metastasis", &self.split.train_metastasis);
        put("train_trauma", &self.split.train_trauma);
        put("test_metastasis", &self.split.test_metastasis);
        put("test_trauma", &self.split.test_trauma);
        put("noise_mean_counts", &self.noise_mean_counts);
        put("epochs", &self.epochs);
        put("batch_size", &self.batch_size);
        put("learning_rate", &self.learning_rate);
        put("momentum", &self.momentum);
        put("freeze_mask", &self.freeze_mask);
        put("determinism", &self.determinism);
        put("pretext_epochs", &self.pretext_epochs);
        put("pretext_batch_size", &self.pretext_batch_size);
        put("pretext_learning_rate", &self.pretext_learning_rate);
        put("ablation_sizes", &sizes.join(","));
        put("confidence", &self.confidence);
        put("cam_method", &self.cam_method);
        put("cam_cases", &self.cam_cases);
        put("overlay_alpha", &self.overlay_alpha);
        put("pointing_threshold", &self.pointing_threshold);
        s
    }
}
