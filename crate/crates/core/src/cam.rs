//! Class activation maps, Grad-CAM, heatmap overlays and localization scores.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{LayerKind, Network};
use crate::phantom::{LesionLabel, Mask, ScanImage};
use crate::tensor::{shape_str, Scalar, Tensor};
use crate::trainer::{prepare_input, resample_bilinear, sample_bilinear};

pub const DEFAULT_POINTING_THRESHOLD: f64 = 0.5;
pub const DEFAULT_OVERLAY_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CamMethod {
    Cam,
    GradCam,
}

impl CamMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::Cam => "cam",
            CamMethod::GradCam => "gradcam",
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam" => Ok(CamMethod::Cam),
            "gradcam" => Ok(CamMethod::GradCam),
            _ => Err(Error::validation("cam_method", format!("expected cam or gradcam, got {s:?}"))),
        }
    }
}

/// Final conv features with the per-method extras.
#[derive(Clone, Debug)]
pub struct CamInputs<T = f32> {
    /// `[K, h, w]`
    pub feature_maps: Tensor<T>,
    /// `[K]`, present only for CAM-compatible heads.
    pub class_weights: Option<Tensor<T>>,
    /// `[K, h, w]` gradients of the target logit.
    pub class_gradients: Option<Tensor<T>>,
}

fn check_maps<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[k, h, w] => Ok((k, h, w)),
        s => Err(Error::shape(format!("{what} must be [K,h,w], got {}", shape_str(s)))),
    }
}

/// `M(x, y) = Σ_k w_k · f_k(x, y)`, unrectified.
pub fn compute_cam<T: Scalar>(inputs: &CamInputs<T>) -> Result<Tensor<T>> {
    let w = inputs.class_weights.as_ref().ok_or_else(|| {
        Error::Capability("CAM needs a global-average-pool + dense head; use Grad-CAM for this network".into())
    })?;
    let (k, h, wd) = check_maps(&inputs.feature_maps, "feature maps")?;
    if w.shape() != [k] {
        return Err(Error::shape(format!(
            "{} class weights for {k} feature maps",
            shape_str(w.shape())
        )));
    }
    Ok(weighted_sum(inputs.feature_maps.data(), w.data(), h, wd))
}

fn weighted_sum<T: Scalar>(maps: &[T], weights: &[T], h: usize, w: usize) -> Tensor<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); plane];
    for (m, &wk) in maps.chunks(plane).zip(weights) {
        for (o, &v) in out.iter_mut().zip(m) {
            *o += wk * v;
        }
    }
    Tensor::new(vec![h, w], out).expect("plane shape")
}

/// Grad-CAM from precomputed inputs: `ReLU(Σ_k α_k A^k)` with `α_k` the
/// spatial mean of the target-logit gradient.
pub fn grad_cam_from_inputs<T: Scalar>(inputs: &CamInputs<T>) -> Result<Tensor<T>> {
    let g = inputs
        .class_gradients
        .as_ref()
        .ok_or_else(|| Error::validation("class_gradients", "Grad-CAM needs logit gradients"))?;
    let (k, h, w) = check_maps(&inputs.feature_maps, "feature maps")?;
    if g.shape() != inputs.feature_maps.shape() {
        return Err(Error::shape(format!(
            "gradients {} vs feature maps {}",
            shape_str(g.shape()),
            shape_str(inputs.feature_maps.shape())
        )));
    }
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let alpha: Vec<T> = g.data().chunks(plane).map(|c| c.iter().copied().sum::<T>() * inv).collect();
    debug_assert_eq!(alpha.len(), k);
    Ok(weighted_sum(inputs.feature_maps.data(), &alpha, h, w).map(|v| v.max(T::zero())))
}

/// Final conv stage output of `net` on `input`, the target-logit gradient
/// with respect to it, and the CAM class weights when the head allows.
pub fn cam_inputs_tensor<T: Scalar>(net: &Network<T>, input: &Tensor<T>, target_class: usize) -> Result<CamInputs<T>> {
    let classes = net.num_classes();
    if target_class >= classes {
        return Err(Error::validation(
            "target_class",
            format!("{target_class} outside a {classes}-class head"),
        ));
    }
    let cam = net
        .cam_layer()
        .ok_or_else(|| Error::Capability("network has no conv stage".into()))?;
    if input.shape() != net.input_shape() {
        return Err(Error::shape(format!(
            "input {} does not match network input {}",
            shape_str(input.shape()),
            shape_str(net.input_shape())
        )));
    }
    let mut batch = vec![1];
    batch.extend_from_slice(net.input_shape());
    let trace = net.forward_from(0, input.clone().reshape(&batch)?, true)?;
    let mut seed = Tensor::zeros(trace.output().shape());
    seed.data_mut()[target_class] = T::one();
    let grad = net
        .backward(&trace, seed, cam + 1, None, true)?
        .expect("input gradient requested");
    let map_shape = net.layers()[cam].out_shape().to_vec();
    let feature_maps = trace.input_of(cam + 1).clone().reshape(&map_shape)?;
    let class_gradients = Some(grad.reshape(&map_shape)?);
    Ok(CamInputs {
        feature_maps,
        class_weights: cam_weights(net, cam, target_class),
        class_gradients,
    })
}

fn cam_weights<T: Scalar>(net: &Network<T>, cam: usize, target_class: usize) -> Option<Tensor<T>> {
    let rest = &net.layers()[cam + 1..];
    match rest {
        [gap, dense] if matches!(gap.kind, LayerKind::GlobalAvgPool) => match &dense.kind {
            LayerKind::Dense(p) => {
                let k = p.in_units();
                let row = p.weights.data()[target_class * k..(target_class + 1) * k].to_vec();
                Some(Tensor::from_vec(row))
            }
            _ => None,
        },
        _ => None,
    }
}

/// Whether the head after the final conv stage is exactly GAP → dense.
pub fn is_cam_compatible<T: Scalar>(net: &Network<T>) -> bool {
    net.cam_layer().is_some_and(|c| cam_weights(net, c, 0).is_some())
}

pub fn cam_inputs(net: &Network, image: &ScanImage, target_class: LesionLabel) -> Result<CamInputs> {
    cam_inputs_tensor(net, &prepare_input(net, image)?, target_class.class_index())
}

/// Raw Grad-CAM map `[h, w]` over the final conv stage output.
pub fn compute_grad_cam(net: &Network, image: &ScanImage, target_class: LesionLabel) -> Result<Tensor> {
    grad_cam_from_inputs(&cam_inputs(net, image, target_class)?)
}

/// Relevance map in `[0, 1]` at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub target_class: LesionLabel,
    pub method: CamMethod,
}

impl Heatmap {
    /// Row-major index of the largest value, first on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Min-max normalizes `raw` (a constant map becomes all zeros) and
/// bilinearly upsamples it to `width`×`height`.
pub fn normalize_upsample(
    raw: &Tensor,
    width: usize,
    height: usize,
    target_class: LesionLabel,
    method: CamMethod,
) -> Result<Heatmap> {
    let &[h, w] = raw.shape() else {
        return Err(Error::shape(format!("raw map must be [h,w], got {}", shape_str(raw.shape()))));
    };
    if width == 0 || height == 0 {
        return Err(Error::validation("heatmap size", "must be positive"));
    }
    let norm = min_max(raw.data());
    let values = if (w, h) == (width, height) {
        norm
    } else {
        resample_bilinear(&norm, w, h, width, height)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect()
    };
    Ok(Heatmap {
        width,
        height,
        values,
        target_class,
        method,
    })
}

fn min_max(raw: &[f32]) -> Vec<f32> {
    let (lo, hi) = raw
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range > 0.0 && range.is_finite() {
        raw.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// Affine map `(scale, offset)` from a cell index in the output of layer
/// `upto` to the network-input pixel at the center of its receptive field.
pub fn grid_geometry<T: Scalar>(net: &Network<T>, upto: usize) -> (f64, f64) {
    let (mut a, mut b) = (1.0, 0.0);
    for layer in net.layers()[..=upto].iter().rev() {
        let (k, s, p) = match &layer.kind {
            LayerKind::Conv(c) => (c.weights.shape()[3], c.stride, c.padding),
            LayerKind::MaxPool(pool) => (pool.window, pool.stride, 0),
            _ => continue,
        };
        b = s as f64 * b + (k as f64 - 1.0) / 2.0 - p as f64;
        a *= s as f64;
    }
    (a, b)
}

/// Heatmap for `image` at its own resolution. Each pixel samples the raw
/// map at the cell whose receptive field is centered there, undoing the
/// resize to the network input.
pub fn heatmap(net: &Network, image: &ScanImage, target_class: LesionLabel, method: CamMethod) -> Result<Heatmap> {
    let inputs = cam_inputs(net, image, target_class)?;
    let raw = match method {
        CamMethod::Cam => compute_cam(&inputs)?,
        CamMethod::GradCam => grad_cam_from_inputs(&inputs)?,
    };
    let &[h, w] = raw.shape() else {
        unreachable!("raw maps are 2-D")
    };
    let (scale, offset) = grid_geometry(net, net.cam_layer().expect("cam inputs found a conv stage"));
    let side = net.input_shape()[net.input_shape().len() - 1];
    let cells = |n: usize| -> Vec<f64> {
        let to_input = if n == side || n == 1 { 1.0 } else { (side - 1) as f64 / (n - 1) as f64 };
        (0..n).map(|x| (x as f64 * to_input - offset) / scale).collect()
    };
    let values = sample_bilinear(&min_max(raw.data()), w, h, &cells(image.width), &cells(image.height))
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(Heatmap {
        width: image.width,
        height: image.height,
        values,
        target_class,
        method,
    })
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Blue-to-red colormap: `h ↦ (h, 0, 1−h)`.
pub fn colormap(heat: f64) -> [f64; 3] {
    [heat, 0.0, 1.0 - heat]
}

/// Blended channel values in `[0, 1]`: `(1−α)·gray + α·colormap(heat)`.
pub fn blend_pixel(gray: f64, heat: f64, alpha: f64) -> [f64; 3] {
    colormap(heat).map(|c| (1.0 - alpha) * gray + alpha * c)
}

pub fn overlay_colormap(image: &ScanImage, heat: &Heatmap, alpha: f64) -> Result<RgbImage> {
    if (image.width, image.height) != (heat.width, heat.height) {
        return Err(Error::shape(format!(
            "image {}×{} vs heatmap {}×{}",
            image.width, image.height, heat.width, heat.height
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation("alpha", "must lie in [0, 1]"));
    }
    let mut data = Vec::with_capacity(image.pixels.len() * 3);
    for (&g, &h) in image.pixels.iter().zip(&heat.values) {
        for c in blend_pixel(g as f64, h as f64, alpha) {
            data.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbImage {
        width: image.width,
        height: image.height,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    pub iou: f64,
    pub pointing_hit: bool,
}

/// IoU of `{heat ≥ threshold}` with `mask` (1.0 when both are empty) and
/// whether the heatmap's argmax lies inside the mask.
pub fn localization_score(heat: &Heatmap, mask: &Mask, threshold: f64) -> Result<Localization> {
    if (heat.width, heat.height) != (mask.width, mask.height) {
        return Err(Error::shape(format!(
            "heatmap {}×{} vs mask {}×{}",
            heat.width, heat.height, mask.width, mask.height
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::validation("threshold", "must lie strictly between 0 and 1"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&v, &m) in heat.values.iter().zip(&mask.bits) {
        let r = v as f64 >= threshold;
        inter += usize::from(r && m);
        union += usize::from(r || m);
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(Localization {
        iou,
        pointing_hit: mask.bits[heat.argmax()],
    })
}

/// Normalized heat values, one CSV line per image row.
pub fn write_heatmap_csv(path: &Path, heat: &Heatmap) -> Result<()> {
    let mut out = String::with_capacity(heat.values.len() * 8);
    for row in heat.values.chunks(heat.width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_heatmap_csv(path: &Path, target_class: LesionLabel, method: CamMethod) -> Result<Heatmap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let row: Vec<f32> = line
            .split(',')
            .map(|c| c.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::format(path, "ragged heatmap rows"));
        }
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(path, "heat value outside [0, 1]"));
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::format(path, "empty heatmap"))?;
    Ok(Heatmap {
        width,
        height,
        values,
        target_class,
        method,
    })
}
