//! AlexNet-shaped networks: architecture descriptors, construction,
//! final-layer replacement and batched forward/backward composition.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{kernels, softmax, ConvParams, DenseParams, LrnParams};
use crate::phantom::{derive_seed, ScanImage};
use crate::tensor::{shape_str, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

/// One convolutional stage: conv → ReLU → optional LRN → optional max-pool.
/// `out_channels` is the unscaled count; [`ArchSpec::channel_scale`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: Option<PoolSpec>,
    pub lrn: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// flatten → fc6 → ReLU → fc7 → ReLU → fc8
    FullyConnected,
    /// global average pool → fc8 (CAM-compatible). Hidden fc stages unused.
    GlobalAvgPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub input_side: usize,
    pub input_channels: usize,
    pub conv_stages: Vec<ConvStage>,
    /// Units of fc6, fc7, fc8; the last equals `num_classes`.
    pub fc_stages: Vec<usize>,
    pub num_classes: usize,
    pub channel_scale: f64,
    pub head: HeadKind,
    pub lrn: LrnParams,
}

const fn stage(out_channels: usize, kernel: usize, stride: usize, padding: usize, pool: Option<PoolSpec>, lrn: bool) -> ConvStage {
    ConvStage {
        out_channels,
        kernel,
        stride,
        padding,
        pool,
        lrn,
    }
}

const POOL_3_2: Option<PoolSpec> = Some(PoolSpec { window: 3, stride: 2 });
/// Max over the whole 32×32 final grid.
const POOL_GLOBAL_32: Option<PoolSpec> = Some(PoolSpec { window: 32, stride: 32 });

impl ArchSpec {
    /// AlexNet at full scale: 227×227 input replicated to three channels.
    pub fn full() -> Self {
        ArchSpec {
            input_side: 227,
            input_channels: 3,
            conv_stages: vec![
                stage(96, 11, 4, 0, POOL_3_2, true),
                stage(256, 5, 1, 2, POOL_3_2, true),
                stage(384, 3, 1, 1, None, false),
                stage(384, 3, 1, 1, None, false),
                stage(256, 3, 1, 1, POOL_3_2, false),
            ],
            fc_stages: vec![4096, 4096, 2],
            num_classes: 2,
            channel_scale: 1.0,
            head: HeadKind::FullyConnected,
            lrn: LrnParams::default(),
        }
    }

    /// Desk-scale variant: 64×64 grayscale input, a quarter of the channels,
    /// no LRN, and a 32×32 final conv grid so heatmaps resolve rib-width
    /// lesions. The last pool takes the max over the whole grid, which keeps
    /// the dense head translation invariant; a head that weights each grid
    /// position separately leaves Grad-CAM's spatially averaged gradients
    /// with nothing to point at.
    pub fn desk() -> Self {
        ArchSpec {
            input_side: 64,
            input_channels: 1,
            conv_stages: vec![
                stage(96, 5, 2, 2, None, false),
                stage(256, 5, 1, 2, None, false),
                stage(384, 3, 1, 1, None, false),
                stage(384, 3, 1, 1, None, false),
                stage(256, 3, 1, 1, POOL_GLOBAL_32, false),
            ],
            fc_stages: vec![4096, 4096, 2],
            num_classes: 2,
            channel_scale: 0.25,
            head: HeadKind::FullyConnected,
            lrn: LrnParams::default(),
        }
    }

    /// Desk variant whose head is global average pooling plus one dense
    /// layer, so CAM applies directly to the last conv stage.
    pub fn desk_gap() -> Self {
        let mut a = ArchSpec::desk();
        a.conv_stages[4].pool = None;
        a.head = HeadKind::GlobalAvgPool;
        a
    }

    pub fn with_num_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        if let Some(last) = self.fc_stages.last_mut() {
            *last = n;
        }
        self
    }

    pub fn scaled(&self, units: usize) -> usize {
        ((units as f64 * self.channel_scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_stages.len() != 5 {
            return Err(Error::validation("conv_stages", "exactly 5 stages are required"));
        }
        if self.fc_stages.len() != 3 {
            return Err(Error::validation("fc_stages", "exactly 3 stages are required"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes", "must be at least 2"));
        }
        if self.fc_stages[2] != self.num_classes {
            return Err(Error::validation("fc_stages", "last stage must equal num_classes"));
        }
        if !(self.channel_scale > 0.0 && self.channel_scale <= 1.0) {
            return Err(Error::validation("channel_scale", "must lie in (0, 1]"));
        }
        if self.input_side == 0 || self.input_channels == 0 {
            return Err(Error::validation("input", "side and channels must be positive"));
        }
        for (i, s) in self.conv_stages.iter().enumerate() {
            if s.kernel == 0 || s.stride == 0 || s.out_channels == 0 {
                return Err(Error::validation(
                    format!("conv{}", i + 1),
                    "kernel, stride and channels must be positive",
                ));
            }
        }
        Ok(())
    }

    /// Flat `key=value` rendering used in checkpoints; [`ArchSpec::parse`]
    /// inverts it exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_side={}", self.input_side);
        let _ = writeln!(s, "input_channels={}", self.input_channels);
        let _ = writeln!(s, "channel_scale={}", self.channel_scale);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let head = match self.head {
            HeadKind::FullyConnected => "fc",
            HeadKind::GlobalAvgPool => "gap",
        };
        let _ = writeln!(s, "head={head}");
        let l = &self.lrn;
        let _ = writeln!(s, "lrn={},{},{},{}", l.size, l.k, l.alpha, l.beta);
        for (i, c) in self.conv_stages.iter().enumerate() {
            let pool = match c.pool {
                Some(p) => format!("{}/{}", p.window, p.stride),
                None => "-".into(),
            };
            let _ = writeln!(
                s,
                "conv{}={},{},{},{},{},{}",
                i + 1,
                c.out_channels,
                c.kernel,
                c.stride,
                c.padding,
                pool,
                u8::from(c.lrn)
            );
        }
        let fc: Vec<String> = self.fc_stages.iter().map(|u| u.to_string()).collect();
        let _ = writeln!(s, "fc={}", fc.join(","));
        s
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        fn num<T: std::str::FromStr>(v: &str, key: &str) -> std::result::Result<T, String> {
            v.trim().parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        let mut a = ArchSpec {
            input_side: 0,
            input_channels: 0,
            conv_stages: Vec::new(),
            fc_stages: Vec::new(),
            num_classes: 0,
            channel_scale: 0.0,
            head: HeadKind::FullyConnected,
            lrn: LrnParams::default(),
        };
        let mut convs: Vec<(usize, ConvStage)> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("missing '=' in {line:?}"))?;
            match k {
                "input_side" => a.input_side = num(v, k)?,
                "input_channels" => a.input_channels = num(v, k)?,
                "channel_scale" => a.channel_scale = num(v, k)?,
                "num_classes" => a.num_classes = num(v, k)?,
                "head" => {
                    a.head = match v {
                        "fc" => HeadKind::FullyConnected,
                        "gap" => HeadKind::GlobalAvgPool,
                        _ => return Err(format!("unknown head {v:?}")),
                    }
                }
                "lrn" => {
                    let p: Vec<&str> = v.split(',').collect();
                    if p.len() != 4 {
                        return Err("lrn needs 4 fields".into());
                    }
                    a.lrn = LrnParams {
                        size: num(p[0], k)?,
                        k: num(p[1], k)?,
                        alpha: num(p[2], k)?,
                        beta: num(p[3], k)?,
                    };
                }
                "fc" => {
                    a.fc_stages = v.split(',').map(|u| num(u, k)).collect::<std::result::Result<_, _>>()?;
                }
                _ if k.starts_with("conv") => {
                    let idx: usize = num(&k[4..], k)?;
                    let p: Vec<&str> = v.split(',').collect();
                    if p.len() != 6 {
                        return Err(format!("{k} needs 6 fields"));
                    }
                    let pool = match p[4] {
                        "-" => None,
                        w => {
                            let (win, st) = w.split_once('/').ok_or_else(|| format!("bad pool {w:?}"))?;
                            Some(PoolSpec {
                                window: num(win, k)?,
                                stride: num(st, k)?,
                            })
                        }
                    };
                    convs.push((
                        idx,
                        ConvStage {
                            out_channels: num(p[0], k)?,
                            kernel: num(p[1], k)?,
                            stride: num(p[2], k)?,
                            padding: num(p[3], k)?,
                            pool,
                            lrn: p[5] == "1",
                        },
                    ));
                }
                _ => return Err(format!("unknown key {k:?}")),
            }
        }
        convs.sort_by_key(|(i, _)| *i);
        a.conv_stages = convs.into_iter().map(|(_, c)| c).collect();
        a.validate().map_err(|e| e.to_string())?;
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind<T = f32> {
    Conv(ConvParams<T>),
    Relu,
    MaxPool(PoolSpec),
    Lrn(LrnParams),
    Flatten,
    GlobalAvgPool,
    Dense(DenseParams<T>),
}

impl<T: Scalar> LayerKind<T> {
    fn cast<U: Scalar>(&self) -> LayerKind<U> {
        match self {
            LayerKind::Conv(p) => LayerKind::Conv(p.cast()),
            LayerKind::Dense(p) => LayerKind::Dense(p.cast()),
            LayerKind::Relu => LayerKind::Relu,
            LayerKind::MaxPool(p) => LayerKind::MaxPool(*p),
            LayerKind::Lrn(p) => LayerKind::Lrn(*p),
            LayerKind::Flatten => LayerKind::Flatten,
            LayerKind::GlobalAvgPool => LayerKind::GlobalAvgPool,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::Dense(_))
    }

    /// Output shape of one sample, or a shape error.
    fn infer(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerKind::Conv(p) => Ok(p.geometry(input)?.out_shape().to_vec()),
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Lrn(_) => {
                if input.len() != 3 {
                    return Err(Error::shape(format!("LRN expects [C,H,W], got {}", shape_str(input))));
                }
                Ok(input.to_vec())
            }
            LayerKind::MaxPool(p) => Ok(kernels::check_pool(input, p.window, p.stride)?.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(Error::shape(format!("global pool expects [C,H,W], got {}", shape_str(input))));
                }
                Ok(vec![input[0]])
            }
            LayerKind::Dense(p) => {
                let n: usize = input.iter().product();
                if input.len() != 1 || n != p.in_units() {
                    return Err(Error::shape(format!(
                        "dense layer expects [{}], got {}",
                        p.in_units(),
                        shape_str(input)
                    )));
                }
                Ok(vec![p.out_units()])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f32> {
    pub name: String,
    pub kind: LayerKind<T>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl<T> Layer<T> {
    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    arch: Option<ArchSpec>,
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    rng_seed: u64,
}

/// Activations of a batched forward pass starting at layer `from`.
/// `acts[j]` is the input of layer `from + j`; the last entry is the output.
#[derive(Clone, Debug)]
pub struct Trace<T = f32> {
    pub from: usize,
    pub acts: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace always holds its input")
    }

    /// Activation entering layer `layer` (or the network output when
    /// `layer` equals the layer count).
    pub fn input_of(&self, layer: usize) -> &Tensor<T> {
        &self.acts[layer - self.from]
    }

    /// Flat input index chosen by each output cell of the max-pool at
    /// `layer`; `None` for other layers or when activations were dropped.
    pub fn pool_argmax(&self, layer: usize) -> Option<&[usize]> {
        self.argmax.get(layer.checked_sub(self.from)?)?.as_deref()
    }
}

/// Named per-layer outputs of a single-image forward pass.
#[derive(Clone, Debug)]
pub struct ActivationRecord<T = f32> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T> ActivationRecord<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Per-layer parameter gradient buffers: `Some((weights, bias))` for each
/// layer whose gradients are requested.
#[derive(Clone, Debug)]
pub struct ParamGrads<T = f32> {
    pub layers: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn add_assign(&mut self, other: &ParamGrads<T>) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b.as_ref()) {
                aw.add_assign(bw)?;
                ab.add_assign(bb)?;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.scale(factor);
            b.scale(factor);
        }
    }

    /// Flattened `[w, b, w, b, ...]` over the requested layers.
    pub fn into_flat(self) -> Vec<Tensor<T>> {
        self.layers.into_iter().flatten().flat_map(|(w, b)| [w, b]).collect()
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn init_conv(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize, stride: usize, pad: usize) -> ConvParams<f32> {
    ConvParams {
        weights: uniform_tensor(rng, &[out_c, in_c, k, k], in_c * k * k),
        bias: Tensor::zeros(&[out_c]),
        stride,
        padding: pad,
    }
}

fn init_dense(rng: &mut ChaCha8Rng, out_u: usize, in_u: usize) -> DenseParams<f32> {
    DenseParams {
        weights: uniform_tensor(rng, &[out_u, in_u], in_u),
        bias: Tensor::zeros(&[out_u]),
    }
}

/// Builds the network described by `arch` with fan-in-scaled uniform
/// weights (`±sqrt(6/fan_in)`) and zero biases, deterministically from `seed`.
pub fn build_network(arch: &ArchSpec, seed: u64) -> Result<Network<f32>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<(String, LayerKind<f32>)> = Vec::new();
    let mut shape = vec![arch.input_channels, arch.input_side, arch.input_side];
    let mut channels = arch.input_channels;
    for (i, s) in arch.conv_stages.iter().enumerate() {
        let n = i + 1;
        let out_c = arch.scaled(s.out_channels);
        let conv = LayerKind::Conv(init_conv(&mut rng, out_c, channels, s.kernel, s.stride, s.padding));
        shape = conv
            .infer(&shape)
            .map_err(|e| Error::shape(format!("conv stage {n}: {e}")))?;
        layers.push((format!("conv{n}"), conv));
        layers.push((format!("relu{n}"), LayerKind::Relu));
        if s.lrn {
            layers.push((format!("lrn{n}"), LayerKind::Lrn(arch.lrn)));
        }
        if let Some(p) = s.pool {
            let pool = LayerKind::<f32>::MaxPool(p);
            shape = pool
                .infer(&shape)
                .map_err(|e| Error::shape(format!("pool after conv stage {n}: {e}")))?;
            layers.push((format!("pool{n}"), pool));
        }
        channels = out_c;
    }
    match arch.head {
        HeadKind::FullyConnected => {
            let mut units: usize = shape.iter().product();
            layers.push(("flatten".into(), LayerKind::Flatten));
            for (j, &u) in arch.fc_stages.iter().enumerate() {
                let out_u = if j + 1 == arch.fc_stages.len() { u } else { arch.scaled(u) };
                layers.push((format!("fc{}", j + 6), LayerKind::Dense(init_dense(&mut rng, out_u, units))));
                if j + 1 < arch.fc_stages.len() {
                    layers.push((format!("relu{}", j + 6), LayerKind::Relu));
                }
                units = out_u;
            }
        }
        HeadKind::GlobalAvgPool => {
            layers.push(("gap".into(), LayerKind::GlobalAvgPool));
            layers.push(("fc8".into(), LayerKind::Dense(init_dense(&mut rng, arch.num_classes, channels))));
        }
    }
    let mut net = Network::from_layers(vec![arch.input_channels, arch.input_side, arch.input_side], layers)?;
    net.arch = Some(arch.clone());
    net.rng_seed = seed;
    net.dry_run()?;
    Ok(net)
}

/// Replaces the last dense layer with a freshly initialized one emitting
/// `new_num_classes` logits; every other parameter is carried over unchanged.
pub fn replace_final_layer(net: &Network<f32>, new_num_classes: usize, seed: u64) -> Result<Network<f32>> {
    if new_num_classes < 2 {
        return Err(Error::validation("num_classes", "must be at least 2"));
    }
    let idx = net
        .final_dense_index()
        .ok_or_else(|| Error::Capability("network has no dense output layer".into()))?;
    let LayerKind::Dense(old) = &net.layers[idx].kind else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x68656164));
    let fresh = init_dense(&mut rng, new_num_classes, old.in_units());
    let mut out = net.clone();
    out.layers[idx].kind = LayerKind::Dense(fresh);
    out.layers[idx].out_shape = vec![new_num_classes];
    if let Some(a) = out.arch.take() {
        out.arch = Some(a.with_num_classes(new_num_classes));
    }
    Ok(out)
}

impl<T: Scalar> Network<T> {
    /// Assembles a network from explicit layers, checking that shapes chain
    /// from `input_shape` (`[C, H, W]` or `[n]`).
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<(String, LayerKind<T>)>) -> Result<Self> {
        let mut shape = input_shape.clone();
        let mut built = Vec::with_capacity(layers.len());
        for (name, kind) in layers {
            let out = kind
                .infer(&shape)
                .map_err(|e| Error::shape(format!("layer {name}: {e}")))?;
            built.push(Layer {
                name,
                kind,
                in_shape: shape,
                out_shape: out.clone(),
            });
            shape = out;
        }
        if built.is_empty() {
            return Err(Error::validation("layers", "network needs at least one layer"));
        }
        Ok(Network {
            arch: None,
            input_shape,
            layers: built,
            rng_seed: 0,
        })
    }

    fn dry_run(&self) -> Result<()> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let out = self.forward_from(0, Tensor::zeros(&shape), false)?;
        if out.output().shape()[1..] != *self.output_shape() {
            return Err(Error::shape("dry run produced an unexpected output shape"));
        }
        Ok(())
    }

    pub fn arch(&self) -> Option<&ArchSpec> {
        self.arch.as_ref()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.layers.last().expect("nonempty").out_shape
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Indices of layers carrying parameters, in order.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].kind.has_params()).collect()
    }

    pub fn final_dense_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l.kind, LayerKind::Dense(_)))
    }

    /// Index of the layer whose output is the final conv stage's activation
    /// (the last conv followed by its ReLU and LRN, if present).
    pub fn cam_layer(&self) -> Option<usize> {
        let mut i = self.layers.iter().rposition(|l| matches!(l.kind, LayerKind::Conv(_)))?;
        while i + 1 < self.layers.len() && matches!(self.layers[i + 1].kind, LayerKind::Relu | LayerKind::Lrn(_)) {
            i += 1;
        }
        Some(i)
    }

    /// `(weights, bias)` references over parameter layers, in order.
    pub fn params(&self) -> Vec<(&Tensor<T>, &Tensor<T>)> {
        self.layers
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Conv(p) => Some((&p.weights, &p.bias)),
                LayerKind::Dense(p) => Some((&p.weights, &p.bias)),
                _ => None,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Weight and bias of parameterized layer `idx`.
    ///
    /// # Panics
    /// If layer `idx` has no parameters.
    pub fn params_of(&self, idx: usize) -> (&Tensor<T>, &Tensor<T>) {
        match &self.layers[idx].kind {
            LayerKind::Conv(p) => (&p.weights, &p.bias),
            LayerKind::Dense(p) => (&p.weights, &p.bias),
            _ => panic!("layer {} has no parameters", self.layers[idx].name),
        }
    }

    /// `[w, b, w, b, ...]` for the listed layers, in layer order.
    pub fn trainable_params_mut(&mut self, layers: &[usize]) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| layers.contains(i))
            .flat_map(|(_, l)| match &mut l.kind {
                LayerKind::Conv(p) => vec![&mut p.weights, &mut p.bias],
                LayerKind::Dense(p) => vec![&mut p.weights, &mut p.bias],
                _ => Vec::new(),
            })
            .collect()
    }

    /// Mutable weight/bias tensors of layer `idx`, if it has parameters.
    pub fn layer_params_mut(&mut self, idx: usize) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match &mut self.layers[idx].kind {
            LayerKind::Conv(p) => Some((&mut p.weights, &mut p.bias)),
            LayerKind::Dense(p) => Some((&mut p.weights, &mut p.bias)),
            _ => None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    kind: l.kind.cast(),
                    in_shape: l.in_shape.clone(),
                    out_shape: l.out_shape.clone(),
                })
                .collect(),
            rng_seed: self.rng_seed,
        }
    }

    /// Converts a scan to the network input tensor `[C, H, W]`, replicating
    /// the gray channel when the network expects more than one.
    pub fn input_tensor(&self, image: &ScanImage) -> Result<Tensor<T>> {
        let [c, h, w] = self.input_shape[..] else {
            return Err(Error::shape("network input is not an image"));
        };
        if image.width != w || image.height != h {
            return Err(Error::shape(format!(
                "image {}×{} does not match network input {w}×{h}",
                image.width, image.height
            )));
        }
        let plane: Vec<T> = image.pixels.iter().map(|&p| T::from_f64(p as f64)).collect();
        let mut data = Vec::with_capacity(c * plane.len());
        for _ in 0..c {
            data.extend_from_slice(&plane);
        }
        Tensor::new(vec![c, h, w], data)
    }

    fn check_batch(&self, layer: usize, input: &Tensor<T>) -> Result<usize> {
        let expected = &self.layers[layer].in_shape;
        let s = input.shape();
        if s.len() != expected.len() + 1 || s[1..] != expected[..] {
            return Err(Error::shape(format!(
                "layer {} expects batches of {}, got {}",
                self.layers[layer].name,
                shape_str(expected),
                shape_str(s)
            )));
        }
        Ok(s[0])
    }

    /// Batched forward pass from layer `from` on `input` shaped
    /// `[N, ...in_shape(from)]`. With `keep == false` only the output is
    /// retained.
    pub fn forward_from(&self, from: usize, input: Tensor<T>, keep: bool) -> Result<Trace<T>> {
        self.forward_span(from, self.layers.len(), input, keep)
    }

    /// Like [`Network::forward_from`] but stops before layer `to`.
    pub fn forward_span(&self, from: usize, to: usize, input: Tensor<T>, keep: bool) -> Result<Trace<T>> {
        if from >= to || to > self.layers.len() {
            return Err(Error::shape(format!("empty or out-of-range layer span {from}..{to}")));
        }
        let n = self.check_batch(from, &input)?;
        let mut acts = vec![input];
        let mut argmax = Vec::new();
        for layer in &self.layers[from..to] {
            let x = acts.last().expect("nonempty");
            let (y, idx) = self.layer_forward(layer, x, n)?;
            if keep {
                argmax.push(idx);
                acts.push(y);
            } else {
                acts = vec![y];
            }
        }
        Ok(Trace { from, acts, argmax })
    }

    fn layer_forward(&self, layer: &Layer<T>, x: &Tensor<T>, n: usize) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
        let in_len: usize = layer.in_shape.iter().product();
        let out_len: usize = layer.out_shape.iter().product();
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&layer.out_shape);
        let mut y = vec![T::zero(); n * out_len];
        let mut idx = None;
        match &layer.kind {
            LayerKind::Conv(p) => {
                let g = p.geometry(&layer.in_shape)?;
                let mut scratch = Vec::new();
                for (xs, ys) in x.data().chunks(in_len).zip(y.chunks_mut(out_len)) {
                    kernels::conv_forward(xs, p, &g, ys, &mut scratch);
                }
            }
            LayerKind::Relu => {
                y.copy_from_slice(x.data());
                kernels::relu_slice(&mut y);
            }
            LayerKind::MaxPool(p) => {
                let mut am = vec![0; n * out_len];
                for ((xs, ys), is) in x.data().chunks(in_len).zip(y.chunks_mut(out_len)).zip(am.chunks_mut(out_len)) {
                    kernels::pool_forward(xs, &layer.in_shape, p.window, p.stride, ys, is);
                }
                idx = Some(am);
            }
            LayerKind::Lrn(p) => {
                for (xs, ys) in x.data().chunks(in_len).zip(y.chunks_mut(out_len)) {
                    kernels::lrn_forward(xs, layer.in_shape[0], p, ys);
                }
            }
            LayerKind::Flatten => y.copy_from_slice(x.data()),
            LayerKind::GlobalAvgPool => {
                for (xs, ys) in x.data().chunks(in_len).zip(y.chunks_mut(out_len)) {
                    kernels::gap_slice(xs, layer.in_shape[0], ys);
                }
            }
            LayerKind::Dense(p) => kernels::dense_forward(x.data(), n, p, &mut y),
        }
        Ok((Tensor::new(out_shape, y)?, idx))
    }

    /// Backpropagates `grad_out` (shaped like the trace output) down to the
    /// input of layer `stop`. Parameter gradients are accumulated into
    /// `grads.layers[i]` wherever that entry is `Some`. Returns the gradient
    /// at the input of `stop` when `want_input_grad` is set.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_out: Tensor<T>,
        stop: usize,
        mut grads: Option<&mut ParamGrads<T>>,
        want_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        if stop < trace.from || trace.acts.len() != self.layers.len() - trace.from + 1 {
            return Err(Error::shape("trace does not cover the requested backward range"));
        }
        if grad_out.shape() != trace.output().shape() {
            return Err(Error::shape(format!(
                "output gradient {} vs network output {}",
                shape_str(grad_out.shape()),
                shape_str(trace.output().shape())
            )));
        }
        let n = grad_out.shape()[0];
        let mut g = grad_out;
        for li in (stop..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let x = trace.input_of(li);
            let need_dx = li > stop || want_input_grad;
            let pg = grads
                .as_deref_mut()
                .and_then(|pg| pg.layers.get_mut(li))
                .and_then(|e| e.as_mut());
            let in_len: usize = layer.in_shape.iter().product();
            let out_len: usize = layer.out_shape.iter().product();
            let mut dx = if need_dx { vec![T::zero(); n * in_len] } else { Vec::new() };
            match &layer.kind {
                LayerKind::Conv(p) => {
                    let geo = p.geometry(&layer.in_shape)?;
                    let mut scratch = Vec::new();
                    let mut pg = pg;
                    for s in 0..n {
                        let xs = &x.data()[s * in_len..(s + 1) * in_len];
                        let gs = &g.data()[s * out_len..(s + 1) * out_len];
                        let acc = pg.as_mut().map(|(w, b)| (w.data_mut(), b.data_mut()));
                        let dxs = need_dx.then(|| &mut dx[s * in_len..(s + 1) * in_len]);
                        kernels::conv_backward(xs, p, &geo, gs, acc, dxs, &mut scratch);
                    }
                }
                LayerKind::Dense(p) => {
                    let acc = pg.map(|(w, b)| (w.data_mut(), b.data_mut()));
                    kernels::dense_backward(x.data(), n, p, g.data(), acc, need_dx.then_some(&mut dx[..]));
                }
                _ if !need_dx => {}
                LayerKind::Relu => {
                    dx.copy_from_slice(g.data());
                    kernels::relu_backward_slice(x.data(), &mut dx);
                }
                LayerKind::MaxPool(_) => {
                    let am = trace.argmax[li - trace.from].as_ref().expect("pool layers record argmax");
                    for s in 0..n {
                        kernels::pool_backward(
                            &am[s * out_len..(s + 1) * out_len],
                            &g.data()[s * out_len..(s + 1) * out_len],
                            &mut dx[s * in_len..(s + 1) * in_len],
                        );
                    }
                }
                LayerKind::Lrn(p) => {
                    for s in 0..n {
                        kernels::lrn_backward(
                            &x.data()[s * in_len..(s + 1) * in_len],
                            layer.in_shape[0],
                            p,
                            &g.data()[s * out_len..(s + 1) * out_len],
                            &mut dx[s * in_len..(s + 1) * in_len],
                        );
                    }
                }
                LayerKind::Flatten => dx.copy_from_slice(g.data()),
                LayerKind::GlobalAvgPool => {
                    for s in 0..n {
                        kernels::gap_backward_slice(
                            &g.data()[s * out_len..(s + 1) * out_len],
                            &mut dx[s * in_len..(s + 1) * in_len],
                        );
                    }
                }
            }
            if !need_dx {
                return Ok(None);
            }
            g = Tensor::new(x.shape().to_vec(), dx)?;
        }
        Ok(Some(g))
    }

    /// Zeroed gradient buffers for the parameter layers selected by `want`
    /// (indexed by layer).
    pub fn grad_buffers(&self, want: impl Fn(usize) -> bool) -> ParamGrads<T> {
        ParamGrads {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| match &l.kind {
                    LayerKind::Conv(p) if want(i) => Some((Tensor::zeros(p.weights.shape()), Tensor::zeros(p.bias.shape()))),
                    LayerKind::Dense(p) if want(i) => Some((Tensor::zeros(p.weights.shape()), Tensor::zeros(p.bias.shape()))),
                    _ => None,
                })
                .collect(),
        }
    }

    /// Logits for one input without retaining intermediate activations.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.batch_of_one(input)?;
        let out = self.forward_from(0, batch, false)?;
        Ok(Tensor::from_vec(out.output().data().to_vec()))
    }

    fn batch_of_one(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "input {} does not match network input {}",
                shape_str(input.shape()),
                shape_str(&self.input_shape)
            )));
        }
        let mut s = vec![1];
        s.extend_from_slice(&self.input_shape);
        input.clone().reshape(&s)
    }

    /// Softmax probabilities plus every layer's output for one input tensor.
    pub fn forward_probs_tensor(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ActivationRecord<T>)> {
        let trace = self.forward_from(0, self.batch_of_one(input)?, true)?;
        let entries = self
            .layers
            .iter()
            .zip(&trace.acts[1..])
            .map(|(l, a)| Ok((l.name.clone(), a.clone().reshape(&l.out_shape)?)))
            .collect::<Result<Vec<_>>>()?;
        let probs = Tensor::from_vec(softmax(trace.output().data()));
        Ok((probs, ActivationRecord { entries }))
    }
}

/// Softmax class probabilities for `image` and the retained activations
/// (including the final conv stage output used for Grad-CAM).
pub fn forward_probs<T: Scalar>(net: &Network<T>, image: &ScanImage) -> Result<(Tensor<T>, ActivationRecord<T>)> {
    net.forward_probs_tensor(&net.input_tensor(image)?)
}

/// SHA-256 over the little-endian `f32` bytes of the given tensors, in order.
pub fn digest_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f32>>) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in tensors {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

impl Network<f32> {
    /// Digest of the parameters of the layers selected by `keep` (by index).
    pub fn param_digest(&self, keep: impl Fn(usize) -> bool) -> [u8; 32] {
        let mut ts = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if !keep(i) {
                continue;
            }
            match &l.kind {
                LayerKind::Conv(p) => ts.extend([&p.weights, &p.bias]),
                LayerKind::Dense(p) => ts.extend([&p.weights, &p.bias]),
                _ => {}
            }
        }
        digest_tensors(ts)
    }
}
