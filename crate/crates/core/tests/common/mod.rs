//! Central-difference gradient checks shared by the layer tests and the
//! acceptance run. Each check builds a random instance, differentiates a
//! scalar loss analytically and returns the worst per-coordinate relative
//! error.

#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ribcam::model::{build_network, ArchSpec, LayerKind, Network, Trace};
use ribcam::nn::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, finite_diff_check, global_avg_pool,
    local_response_norm, local_response_norm_backward, maxpool2d, maxpool2d_backward, relu, relu_backward,
    softmax_xent, ConvParams, DenseParams, LrnParams,
};
use ribcam::phantom::{generate_case, LesionLabel, PhantomSpec};
use ribcam::trainer::prepare_input;
use ribcam::Tensor;

pub const STEP: f64 = 1e-6;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks sit far outside the step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(0.01..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Random conv geometry; loss is `Σ r·conv(x)` with a fixed random `r`.
pub fn conv_instance(rng: &mut ChaCha8Rng) -> f64 {
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = *[1, 3, 5].choose(rng).unwrap();
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=2);
    let side = rng.random_range(k.max(4)..=8);
    let x = uniform(rng, &[cin, side, side], -1.0, 1.0);
    let w = uniform(rng, &[cout, cin, k, k], -1.0, 1.0);
    let b = uniform(rng, &[cout], -1.0, 1.0);
    let p = ConvParams::new(w.clone(), b.clone(), stride, pad).unwrap();
    let y = conv2d_forward(&x, &p).unwrap();
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let g = conv2d_backward(&x, &p, &r).unwrap();
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        let p = ConvParams::new(w.clone(), b.clone(), stride, pad).unwrap();
        dot(&conv2d_forward(x, &p).unwrap(), &r)
    };
    let ex = finite_diff_check(|t| loss(t, &w, &b), &x, &g.input, STEP);
    let ew = finite_diff_check(|t| loss(&x, t, &b), &w, &g.weights, STEP);
    let eb = finite_diff_check(|t| loss(&x, &w, t), &b, &g.bias, STEP);
    ex.max(ew).max(eb)
}

pub fn dense_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (i, o) = (rng.random_range(1..=12), rng.random_range(1..=6));
    let x = uniform(rng, &[i], -1.0, 1.0);
    let w = uniform(rng, &[o, i], -1.0, 1.0);
    let b = uniform(rng, &[o], -1.0, 1.0);
    let p = DenseParams::new(w.clone(), b.clone()).unwrap();
    let r = uniform(rng, &[o], -1.0, 1.0);
    let g = dense_backward(&x, &p, &r).unwrap();
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        dot(&dense_forward(x, &DenseParams::new(w.clone(), b.clone()).unwrap()).unwrap(), &r)
    };
    let ex = finite_diff_check(|t| loss(t, &w, &b), &x, &g.input, STEP);
    let ew = finite_diff_check(|t| loss(&x, t, &b), &w, &g.weights, STEP);
    let eb = finite_diff_check(|t| loss(&x, &w, t), &b, &g.bias, STEP);
    ex.max(ew).max(eb)
}

/// Distinct values at least 0.01 apart, so the argmax of every window is
/// stable under the step.
pub fn pool_instance(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..=3);
    let side = rng.random_range(3..=8);
    let window = rng.random_range(1..=side.min(3));
    let stride = rng.random_range(1..=2);
    let n = c * side * side;
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::new(
        vec![c, side, side],
        ranks.iter().map(|&k| k as f64 * 0.01 + rng.random_range(0.0..0.005)).collect(),
    )
    .unwrap();
    let pooled = maxpool2d(&x, window, stride).unwrap();
    let r = uniform(rng, pooled.output.shape(), -1.0, 1.0);
    let g = maxpool2d_backward(x.shape(), &pooled, &r).unwrap();
    finite_diff_check(|t| dot(&maxpool2d(t, window, stride).unwrap().output, &r), &x, &g, STEP)
}

pub fn relu_instance(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..=3);
    let x = off_zero(rng, &[c, 4, 4]);
    let r = uniform(rng, x.shape(), -1.0, 1.0);
    let g = relu_backward(&x, &r).unwrap();
    finite_diff_check(|t| dot(&relu(t), &r), &x, &g, STEP)
}

pub fn lrn_instance(rng: &mut ChaCha8Rng) -> f64 {
    let params = LrnParams {
        size: *[1, 3, 5].choose(rng).unwrap(),
        k: rng.random_range(0.5..2.0),
        alpha: rng.random_range(1e-4..1.0),
        beta: rng.random_range(0.5..1.0),
    };
    let c = rng.random_range(1..=7);
    let x = uniform(rng, &[c, 3, 3], -2.0, 2.0);
    let r = uniform(rng, x.shape(), -1.0, 1.0);
    let g = local_response_norm_backward(&x, &params, &r).unwrap();
    finite_diff_check(|t| dot(&local_response_norm(t, &params).unwrap(), &r), &x, &g, STEP)
}

pub fn softmax_xent_instance(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(2..=6);
    let z = uniform(rng, &[n], -4.0, 4.0);
    let target = rng.random_range(0..n);
    let g = softmax_xent(&z, target).unwrap().grad_logits;
    finite_diff_check(|t| softmax_xent(t, target).unwrap().loss, &z, &g, STEP)
}

/// Global average pooling has no public backward; its gradient is the
/// upstream value spread evenly over each plane.
pub fn gap_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
    let x = uniform(rng, &[c, h, w], -1.0, 1.0);
    let r = uniform(rng, &[c], -1.0, 1.0);
    let spread: Vec<f64> = r.data().iter().flat_map(|&v| std::iter::repeat_n(v / (h * w) as f64, h * w)).collect();
    let g = Tensor::new(x.shape().to_vec(), spread).unwrap();
    finite_diff_check(|t| dot(&global_avg_pool(t).unwrap(), &r), &x, &g, STEP)
}

pub type LayerCheck = fn(&mut ChaCha8Rng) -> f64;

pub const LAYER_CHECKS: [(&str, LayerCheck); 7] = [
    ("conv", conv_instance),
    ("pool", pool_instance),
    ("relu", relu_instance),
    ("dense", dense_instance),
    ("lrn", lrn_instance),
    ("softmax-xent", softmax_xent_instance),
    ("gap", gap_instance),
];

/// Worst relative error over `instances` random draws of one layer check.
pub fn worst_over(check: LayerCheck, instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances).map(|_| check(&mut rng)).fold(0.0, f64::max)
}

/// Which side of every kink the forward pass sits on: ReLU input signs and
/// max-pool winners for each layer from `trace.from` on.
fn kink_pattern(net: &Network<f64>, trace: &Trace<f64>) -> Vec<usize> {
    let mut out = Vec::new();
    for (j, layer) in net.layers().iter().enumerate().skip(trace.from) {
        match layer.kind {
            LayerKind::Relu => out.extend(trace.input_of(j).data().iter().map(|&v| usize::from(v > 0.0))),
            LayerKind::MaxPool(_) => out.extend_from_slice(trace.pool_argmax(j).unwrap()),
            _ => {}
        }
    }
    out
}

/// Cross-entropy from layer `from` on the cached activation `act` (shaped
/// `[1, ...]`), and the kink pattern of that pass.
fn loss_from(net: &Network<f64>, from: usize, act: &Tensor<f64>, label: usize) -> (f64, Vec<usize>) {
    let trace = net.forward_from(from, act.clone(), true).unwrap();
    let logits = Tensor::from_vec(trace.output().data().to_vec());
    (softmax_xent(&logits, label).unwrap().loss, kink_pattern(net, &trace))
}

/// Floor for the relative-error denominator in whole-network checks. The
/// loss carries ~1e-15 of rounding noise, so at `STEP` a central difference
/// is only good to ~5e-10 absolute; gradients below the floor are held to an
/// absolute error of `1e-4 * NET_FLOOR` instead.
pub const NET_FLOOR: f64 = 1e-5;

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(NET_FLOOR)
}

/// Outcome of a whole-network check.
#[derive(Clone, Copy, Debug, Default)]
pub struct NetworkCheck {
    pub worst: f64,
    pub coordinates: usize,
    /// Draws discarded because a step crossed a ReLU or max-pool kink,
    /// where central differences do not estimate the derivative.
    pub redrawn: usize,
}

/// One instance on a freshly initialized network of `arch`, in double
/// precision: random phantom input and label, `per_layer` sampled weight
/// coordinates plus one bias per parameter layer, and `inputs` sampled
/// input pixels.
pub fn network_instance(arch: &ArchSpec, seed: u64, per_layer: usize, inputs: usize) -> NetworkCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net32 = build_network(arch, seed).unwrap();
    let mut net: Network<f64> = net32.cast();
    let label = if rng.random_bool(0.5) { LesionLabel::Metastasis } else { LesionLabel::Trauma };
    let mut spec = PhantomSpec::for_label(label, seed);
    spec.side = 128;
    let case = generate_case(&spec).unwrap();
    let x = prepare_input(&net32, &case.image).unwrap().cast::<f64>();
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(x.shape());
    let x = x.reshape(&batch_shape).unwrap();
    let y = label.class_index();

    let trace = net.forward_from(0, x.clone(), true).unwrap();
    let r = softmax_xent(&Tensor::from_vec(trace.output().data().to_vec()), y).unwrap();
    let mut grads = net.grad_buffers(|_| true);
    let g_out = Tensor::new(trace.output().shape().to_vec(), r.grad_logits.data().to_vec()).unwrap();
    let dx = net.backward(&trace, g_out, 0, Some(&mut grads), true).unwrap().unwrap();
    let base = kink_pattern(&net, &trace);

    let mut out = NetworkCheck::default();
    let record = |out: &mut NetworkCheck, analytic: f64, (up, pu): (f64, Vec<usize>), (down, pd): (f64, Vec<usize>), base: &[usize]| {
        if pu != base || pd != base {
            out.redrawn += 1;
            return false;
        }
        out.coordinates += 1;
        out.worst = out.worst.max(rel(analytic, (up - down) / (2.0 * STEP)));
        true
    };
    for li in net.param_layers() {
        let act = trace.input_of(li).clone();
        let tail = &base[base.len() - kink_pattern_len(&net, &trace, li)..];
        let (gw, gb) = grads.layers[li].clone().unwrap();
        for (is_w, want) in [(true, per_layer), (false, 1)] {
            let len = if is_w { gw.len() } else { gb.len() };
            let mut done = 0;
            for _ in 0..50 * want {
                if done == want {
                    break;
                }
                let i = rng.random_range(0..len);
                let analytic = if is_w { gw.data()[i] } else { gb.data()[i] };
                let mut eval = |delta: f64| {
                    let (w, b) = net.layer_params_mut(li).unwrap();
                    let t = if is_w { w } else { b };
                    let old = t.data()[i];
                    t.data_mut()[i] = old + delta;
                    let l = loss_from(&net, li, &act, y);
                    let (w, b) = net.layer_params_mut(li).unwrap();
                    let t = if is_w { w } else { b };
                    t.data_mut()[i] = old;
                    l
                };
                let (up, down) = (eval(STEP), eval(-STEP));
                done += usize::from(record(&mut out, analytic, up, down, tail));
            }
            assert_eq!(done, want, "layer {li}: no kink-free coordinate found");
        }
    }
    let mut done = 0;
    while done < inputs {
        let i = rng.random_range(0..x.len());
        let mut probe = x.clone();
        probe.data_mut()[i] += STEP;
        let up = loss_from(&net, 0, &probe, y);
        probe.data_mut()[i] -= 2.0 * STEP;
        let down = loss_from(&net, 0, &probe, y);
        done += usize::from(record(&mut out, dx.data()[i], up, down, &base));
    }
    out
}

/// Length of the kink pattern contributed by layers `from..`.
fn kink_pattern_len(net: &Network<f64>, trace: &Trace<f64>, from: usize) -> usize {
    net.layers()
        .iter()
        .enumerate()
        .skip(from)
        .map(|(j, l)| match l.kind {
            LayerKind::Relu => trace.input_of(j).len(),
            LayerKind::MaxPool(_) => trace.pool_argmax(j).unwrap().len(),
            _ => 0,
        })
        .sum()
}
