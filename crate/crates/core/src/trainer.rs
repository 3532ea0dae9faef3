//! Pretext pretraining, transfer-learning fine-tuning and batch prediction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{build_network, ArchSpec, LayerKind, Network, ParamGrads};
use crate::nn::{softmax, softmax_xent, sgdm_step, OptimizerState, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};
use crate::phantom::{apply_count_noise, derive_seed, LesionLabel, PhantomCase, ScanImage};
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 128;
/// Epoch count used for desk-scale runs.
pub const DESK_EPOCHS: usize = 30;

/// Samples per gradient work unit. Chunk gradients are summed in index
/// order, so results do not depend on how many workers run.
const CHUNK: usize = 16;

/// Which parameterized layers stay fixed during training.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum FreezeMask {
    /// Every conv stage frozen, every dense stage trainable.
    #[default]
    ConvFrozen,
    /// Everything trainable.
    None,
    /// Only the final dense layer trainable.
    HeadOnly,
    /// Nothing trainable.
    All,
    /// One flag per parameterized layer, in order (`true` = frozen).
    Custom(Vec<bool>),
}

impl FreezeMask {
    /// Frozen flag for each parameterized layer of `net`.
    pub fn resolve(&self, net: &Network) -> Result<Vec<bool>> {
        let idx = net.param_layers();
        let last = idx.len() - 1;
        Ok(match self {
            FreezeMask::ConvFrozen => idx
                .iter()
                .map(|&i| matches!(net.layers()[i].kind, LayerKind::Conv(_)))
                .collect(),
            FreezeMask::None => vec![false; idx.len()],
            FreezeMask::All => vec![true; idx.len()],
            FreezeMask::HeadOnly => (0..idx.len()).map(|j| j != last).collect(),
            FreezeMask::Custom(v) => {
                if v.len() != idx.len() {
                    return Err(Error::validation(
                        "freeze_mask",
                        format!("{} flags given, network has {} parameterized layers", v.len(), idx.len()),
                    ));
                }
                v.clone()
            }
        })
    }
}

impl fmt::Display for FreezeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezeMask::ConvFrozen => f.write_str("conv"),
            FreezeMask::None => f.write_str("none"),
            FreezeMask::HeadOnly => f.write_str("head"),
            FreezeMask::All => f.write_str("all"),
            FreezeMask::Custom(v) => {
                let s: Vec<&str> = v.iter().map(|&b| if b { "1" } else { "0" }).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

impl FromStr for FreezeMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "conv" => FreezeMask::ConvFrozen,
            "none" => FreezeMask::None,
            "head" => FreezeMask::HeadOnly,
            "all" => FreezeMask::All,
            other => FreezeMask::Custom(
                other
                    .split(',')
                    .map(|t| match t.trim() {
                        "1" | "true" => Ok(true),
                        "0" | "false" => Ok(false),
                        _ => Err(Error::validation("freeze_mask", format!("cannot parse {other:?}"))),
                    })
                    .collect::<Result<_>>()?,
            ),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub freeze_mask: FreezeMask,
    /// Fixed-order gradient reduction. When off, chunk gradients are
    /// combined in whatever order the thread pool finishes them.
    pub determinism: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            seed: 0,
            freeze_mask: FreezeMask::default(),
            determinism: true,
        }
    }
}

impl TrainConfig {
    /// Reference hyperparameters with the desk-scale epoch count.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: DESK_EPOCHS,
            ..TrainConfig::default()
        }
    }

    /// Settings for training the pretext network from scratch.
    pub fn pretext() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            freeze_mask: FreezeMask::None,
            determinism: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
    /// Optimizer learning rate at every step of the epoch.
    pub step_learning_rates: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["epoch", "loss", "accuracy", "seconds"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.6}", r.loss),
                format!("{:.6}", r.accuracy),
                format!("{:.3}", r.seconds),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

/// Separable bilinear resampling with corner alignment: output pixel `i`
/// samples source coordinate `i·(src−1)/(dst−1)`.
pub fn resize_bilinear(image: &ScanImage, target_side: usize) -> Result<ScanImage> {
    if target_side == 0 {
        return Err(Error::validation("target_side", "must be at least 1"));
    }
    if image.width == target_side && image.height == target_side {
        return Ok(image.clone());
    }
    let mut out = resample_bilinear(&image.pixels, image.width, image.height, target_side, target_side);
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    ScanImage::new(target_side, target_side, out, image.id.clone())
}

/// Corner-aligned bilinear resampling of a row-major `sw`×`sh` grid.
pub(crate) fn resample_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    let corner = |from: usize, to: usize| -> Vec<f64> {
        (0..to)
            .map(|i| if to == 1 { 0.0 } else { i as f64 * (from - 1) as f64 / (to - 1) as f64 })
            .collect()
    };
    sample_bilinear(src, sw, sh, &corner(sw, dw), &corner(sh, dh))
}

/// Bilinear samples of a row-major `sw`×`sh` grid at fractional source
/// columns `xs` and rows `ys`, clamped to the grid.
pub(crate) fn sample_bilinear(src: &[f32], sw: usize, sh: usize, xs: &[f64], ys: &[f64]) -> Vec<f32> {
    let taps = |from: usize, at: &[f64]| -> Vec<(usize, usize, f32)> {
        at.iter()
            .map(|&pos| {
                let pos = pos.clamp(0.0, (from - 1) as f64);
                let lo = (pos.floor() as usize).min(from - 1);
                let hi = (lo + 1).min(from - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let (dw, dh) = (xs.len(), ys.len());
    let xs = taps(sw, xs);
    let ys = taps(sh, ys);
    let mut rows = vec![0.0f32; sh * dw];
    for y in 0..sh {
        let row = &src[y * sw..(y + 1) * sw];
        for (x, &(lo, hi, t)) in xs.iter().enumerate() {
            rows[y * dw + x] = row[lo] + (row[hi] - row[lo]) * t;
        }
    }
    let mut out = vec![0.0f32; dw * dh];
    for (y, &(lo, hi, t)) in ys.iter().enumerate() {
        for x in 0..dw {
            let a = rows[lo * dw + x];
            let b = rows[hi * dw + x];
            out[y * dw + x] = a + (b - a) * t;
        }
    }
    out
}

/// Network input for `image`, resizing to the network's input side first
/// when the image is square and of a different size.
pub fn prepare_input(net: &Network, image: &ScanImage) -> Result<Tensor> {
    let side = net.input_shape()[net.input_shape().len() - 1];
    if image.width == image.height && image.width != side {
        net.input_tensor(&resize_bilinear(image, side)?)
    } else {
        net.input_tensor(image)
    }
}

fn stack(samples: &[Tensor], shape: &[usize]) -> Result<Tensor> {
    let mut full = vec![samples.len()];
    full.extend_from_slice(shape);
    let mut data = Vec::with_capacity(samples.len() * shape.iter().product::<usize>());
    for s in samples {
        data.extend_from_slice(s.data());
    }
    Tensor::new(full, data)
}

struct ChunkResult {
    grads: ParamGrads,
    loss: f64,
    correct: usize,
}

/// Trains `net` in place on pre-batched inputs `x` (`[N, ...]` at layer 0)
/// with class targets `y`.
fn train_loop(net: &mut Network, x: &Tensor, y: &[usize], config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    let n = y.len();
    if n == 0 {
        return Err(Error::validation("train_set", "must not be empty"));
    }
    let classes = net.num_classes();
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::validation("labels", format!("class {bad} outside a {classes}-class head")));
    }
    let frozen = config.freeze_mask.resolve(net)?;
    let param_layers = net.param_layers();
    let trainable: Vec<usize> = param_layers
        .iter()
        .zip(&frozen)
        .filter(|(_, &f)| !f)
        .map(|(&i, _)| i)
        .collect();

    // The frozen prefix is a fixed function of the input, so run it once.
    let start = trainable.first().copied().unwrap_or(net.layers().len());
    let cached = if start == 0 {
        x.clone()
    } else {
        net.forward_span(0, start, x.clone(), false)?.acts.pop().expect("output")
    };
    let sample_shape = cached.shape()[1..].to_vec();
    let sample_len: usize = sample_shape.iter().product();

    let mut state = OptimizerState::new(
        trainable.iter().flat_map(|&i| {
            let (w, b) = net.params_of(i);
            [w.shape(), b.shape()]
        }),
        config.learning_rate,
        config.momentum,
    )?;

    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0;
        let mut rates = Vec::new();
        for batch in order.chunks(config.batch_size) {
            if start == net.layers().len() {
                // Nothing trainable: evaluate only.
                for &i in batch {
                    let logits = net.forward_from(0, sample_batch(x, &[i])?, false)?;
                    let r = softmax_xent(&Tensor::from_vec(logits.output().data().to_vec()), y[i])?;
                    loss_sum += r.loss as f64;
                    correct += usize::from(argmax_first(r.probs.data()) == y[i]);
                }
                continue;
            }
            let work = |chunk: &[usize]| -> Result<ChunkResult> {
                let mut data = Vec::with_capacity(chunk.len() * sample_len);
                for &i in chunk {
                    data.extend_from_slice(&cached.data()[i * sample_len..(i + 1) * sample_len]);
                }
                let mut shape = vec![chunk.len()];
                shape.extend_from_slice(&sample_shape);
                let trace = net.forward_from(start, Tensor::new(shape, data)?, true)?;
                let out = trace.output();
                let mut g = Vec::with_capacity(out.len());
                let mut loss = 0.0;
                let mut correct = 0;
                for (s, &i) in chunk.iter().enumerate() {
                    let logits = Tensor::from_vec(out.data()[s * classes..(s + 1) * classes].to_vec());
                    let r = softmax_xent(&logits, y[i])?;
                    loss += r.loss as f64;
                    correct += usize::from(argmax_first(r.probs.data()) == y[i]);
                    g.extend_from_slice(r.grad_logits.data());
                }
                let mut grads = net.grad_buffers(|l| trainable.contains(&l));
                net.backward(&trace, Tensor::new(out.shape().to_vec(), g)?, start, Some(&mut grads), false)?;
                Ok(ChunkResult { grads, loss, correct })
            };
            let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
            let combined = if config.determinism {
                let parts = chunks.par_iter().map(|c| work(c)).collect::<Result<Vec<_>>>()?;
                let mut it = parts.into_iter();
                let mut acc = it.next().expect("nonempty batch");
                for p in it {
                    merge(&mut acc, p)?;
                }
                acc
            } else {
                chunks
                    .par_iter()
                    .map(|c| work(c))
                    .try_reduce_with(|mut a, b| merge(&mut a, b).map(|_| a))
                    .expect("nonempty batch")?
            };
            loss_sum += combined.loss;
            correct += combined.correct;
            let mut grads = combined.grads;
            grads.scale(1.0 / batch.len() as f32);
            let flat = grads.into_flat();
            let mut params = net.trainable_params_mut(&trainable);
            rates.push(state.learning_rate);
            sgdm_step(&mut params, &flat, &mut state)?;
        }
        log.records.push(EpochRecord {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            seconds: t0.elapsed().as_secs_f64(),
            step_learning_rates: rates,
        });
    }
    Ok(log)
}

fn merge(acc: &mut ChunkResult, other: ChunkResult) -> Result<()> {
    acc.grads.add_assign(&other.grads)?;
    acc.loss += other.loss;
    acc.correct += other.correct;
    Ok(())
}

fn sample_batch(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let len: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * len);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * len..(i + 1) * len]);
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&x.shape()[1..]);
    Tensor::new(shape, data)
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax_first(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}

/// Fine-tunes a copy of `net` on two-class phantom cases. Layers frozen by
/// `config.freeze_mask` are left untouched; the rest follow SGDM over
/// seeded per-epoch shuffles, keeping the partial last batch.
pub fn fine_tune(net: &Network, train_set: &[PhantomCase], config: &TrainConfig) -> Result<(Network, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::validation("train_set", "must not be empty"));
    }
    if net.num_classes() != 2 {
        return Err(Error::shape(format!(
            "fine-tuning needs a 2-class head, network emits {}",
            net.num_classes()
        )));
    }
    let inputs = train_set
        .par_iter()
        .map(|c| prepare_input(net, &c.image))
        .collect::<Result<Vec<_>>>()?;
    let x = stack(&inputs, net.input_shape())?;
    let y: Vec<usize> = train_set.iter().map(|c| c.label.class_index()).collect();
    let mut out = net.clone();
    let log = train_loop(&mut out, &x, &y, config)?;
    Ok((out, log))
}

pub const PRETEXT_CLASSES: usize = 4;
pub const PRETEXT_CASES_PER_CLASS: usize = 64;

/// Pretext class names, by class index.
pub const PRETEXT_LABELS: [&str; PRETEXT_CLASSES] = ["bar", "blob", "arc", "noise"];

/// Synthetic shape-discrimination images at `side`×`side`: straight bars,
/// round blobs, circular arcs and shape-free noise, over faint band clutter.
pub fn pretext_dataset(side: usize, per_class: usize, seed: u64) -> Result<Vec<(ScanImage, usize)>> {
    (0..PRETEXT_CLASSES * per_class)
        .into_par_iter()
        .map(|i| {
            let class = i % PRETEXT_CLASSES;
            let s = derive_seed(seed, i as u64);
            Ok((pretext_image(side, class, s)?, class))
        })
        .collect()
}

fn pretext_image(side: usize, class: usize, seed: u64) -> Result<ScanImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side as f64;
    let mut px = vec![rng.random_range(0.03f64..0.12); side * side];
    // Faint curved bands so that the shapes sit on rib-like clutter.
    for _ in 0..rng.random_range(0..4) {
        let y0 = rng.random_range(0.1..0.9) * n;
        let bend = rng.random_range(-0.15..0.15) * n;
        let width = rng.random_range(1.0..2.5) * n / 64.0;
        let level = rng.random_range(0.1..0.3);
        for y in 0..side {
            for x in 0..side {
                let u = x as f64 / n - 0.5;
                let d = (y as f64 - (y0 + bend * 4.0 * u * u)).abs();
                let v = level * (-0.5 * (d / width).powi(2)).exp();
                px[y * side + x] = px[y * side + x].max(v);
            }
        }
    }
    let peak = rng.random_range(0.55..1.0);
    let cx = rng.random_range(0.2..0.8) * n;
    let cy = rng.random_range(0.2..0.8) * n;
    let scale = n / 64.0;
    let mut paint = |f: &dyn Fn(f64, f64) -> f64| {
        for y in 0..side {
            for x in 0..side {
                let v = peak * f(x as f64, y as f64);
                px[y * side + x] = px[y * side + x].max(v);
            }
        }
    };
    match class {
        0 => {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (theta.cos(), theta.sin());
            let half_len = rng.random_range(4.0..12.0) * scale;
            let width = rng.random_range(0.6..1.5) * scale;
            paint(&|x, y| {
                let (rx, ry) = (x - cx, y - cy);
                let along = rx * dx + ry * dy;
                let across = -rx * dy + ry * dx;
                let over = (along.abs() - half_len).max(0.0);
                (-0.5 * ((across / width).powi(2) + (over / width).powi(2))).exp()
            });
        }
        1 => {
            let sigma = rng.random_range(0.8..2.5) * scale;
            paint(&|x, y| (-0.5 * ((x - cx).powi(2) + (y - cy).powi(2)) / (sigma * sigma)).exp());
        }
        2 => {
            let radius = rng.random_range(10.0..24.0) * scale;
            let start = rng.random_range(0.0..std::f64::consts::TAU);
            let extent = rng.random_range(1.0..3.0);
            let width = rng.random_range(0.6..1.5) * scale;
            paint(&|x, y| {
                let (rx, ry) = (x - cx, y - cy);
                let a = (ry.atan2(rx) - start).rem_euclid(std::f64::consts::TAU);
                if a > extent {
                    return 0.0;
                }
                let d = (rx.hypot(ry) - radius).abs();
                (-0.5 * (d / width).powi(2)).exp()
            });
        }
        _ => {}
    }
    let clean = ScanImage::new(side, side, px.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(), "pretext")?;
    apply_count_noise(&clean, 200.0, derive_seed(seed, 0x6e6f697365))
}

/// Trains a fresh network on the four-class pretext task. The returned
/// network has a 4-way head; replace it before fine-tuning.
pub fn pretrain_pretext(arch: &ArchSpec, config: &TrainConfig, seed: u64) -> Result<(Network, TrainLog)> {
    config.validate()?;
    let arch = arch.clone().with_num_classes(PRETEXT_CLASSES);
    let mut net = build_network(&arch, derive_seed(seed, 1))?;
    let data = pretext_dataset(arch.input_side, PRETEXT_CASES_PER_CLASS, derive_seed(seed, 2))?;
    let inputs = data
        .iter()
        .map(|(img, _)| net.input_tensor(img))
        .collect::<Result<Vec<_>>>()?;
    let x = stack(&inputs, net.input_shape())?;
    let y: Vec<usize> = data.iter().map(|(_, c)| *c).collect();
    let cfg = TrainConfig {
        seed: derive_seed(seed, 3),
        ..config.clone()
    };
    let log = train_loop(&mut net, &x, &y, &cfg)?;
    Ok((net, log))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: LesionLabel,
    /// Softmax probability of the metastasis class.
    pub score: f64,
}

/// Per-case predictions, in input order.
pub fn predict_dataset(net: &Network, cases: &[PhantomCase]) -> Result<Vec<Prediction>> {
    if cases.is_empty() {
        return Err(Error::validation("cases", "must not be empty"));
    }
    cases.par_iter().map(|c| predict_case(net, &c.image)).collect()
}

pub fn predict_case(net: &Network, image: &ScanImage) -> Result<Prediction> {
    let logits = net.logits(&prepare_input(net, image)?)?;
    let probs = softmax(logits.data());
    let label = LesionLabel::from_class_index(argmax_first(&probs))
        .ok_or_else(|| Error::shape("prediction needs a 2-class head"))?;
    Ok(Prediction {
        label,
        score: probs[LesionLabel::Metastasis.class_index()] as f64,
    })
}
