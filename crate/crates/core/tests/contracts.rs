//! Worked examples for each module's public operations, checked against
//! values computed independently here.

use ribcam::cam::{cam_inputs_tensor, compute_cam, grad_cam_from_inputs};
use ribcam::model::{build_network, forward_probs, replace_final_layer, ArchSpec, LayerKind, Network, PoolSpec};
use ribcam::nn::{local_response_norm, ConvParams, DenseParams, LrnParams};
use ribcam::phantom::{
    apply_count_noise, generate_case, generate_dataset, lesion_geometry_stats, render_noiseless, DatasetSplit,
    Mask, PhantomCase, PhantomSpec, ScanImage,
};
use ribcam::stats::{classification_metrics, run_ablation, ConfusionCounts};
use ribcam::trainer::{
    fine_tune, predict_case, predict_dataset, pretrain_pretext, resize_bilinear, FreezeMask, TrainConfig,
};
use ribcam::Tensor;

fn small_set(n_per_class: usize, seed: u64) -> Vec<PhantomCase> {
    let split = DatasetSplit {
        train_metastasis: n_per_class,
        train_trauma: n_per_class,
        test_metastasis: 0,
        test_trauma: 0,
    };
    let mut m = PhantomSpec::metastasis(0);
    let mut t = PhantomSpec::trauma(0);
    m.side = 64;
    t.side = 64;
    generate_dataset(&split, &m, &t, seed).unwrap().train
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 0.01,
        ..TrainConfig::default()
    }
}

// ---- phantoms -------------------------------------------------------------

#[test]
fn same_spec_renders_identical_bytes() {
    let s = PhantomSpec::metastasis(42);
    let (a, b) = (generate_case(&s).unwrap(), generate_case(&s).unwrap());
    assert_eq!(a.image, b.image);
    assert_eq!(a.mask, b.mask);
}

#[test]
fn noiseless_lesion_elongation_tracks_the_spec() {
    let t = render_noiseless(&PhantomSpec::trauma(3)).unwrap();
    let r = lesion_geometry_stats(&t.lesion_support()).unwrap().moment_ratio;
    assert!((0.75..=1.25).contains(&r), "trauma ratio {r}");
    let m = render_noiseless(&PhantomSpec::metastasis(7)).unwrap();
    let r = lesion_geometry_stats(&m.lesion_support()).unwrap().moment_ratio;
    assert!((3.0..=5.0).contains(&r), "metastasis ratio {r}");
}

#[test]
fn rectangle_moment_ratio_matches_coordinate_variances() {
    let mask = Mask::rect(12, 12, 2, 3, 8, 2);
    let coords: Vec<(f64, f64)> = mask.coords().map(|(x, y)| (x as f64, y as f64)).collect();
    let n = coords.len() as f64;
    let var = |f: fn(&(f64, f64)) -> f64| {
        let m = coords.iter().map(f).sum::<f64>() / n;
        coords.iter().map(|c| (f(c) - m).powi(2)).sum::<f64>() / n
    };
    let want = (var(|c| c.0) / var(|c| c.1)).sqrt();
    let got = lesion_geometry_stats(&mask).unwrap().moment_ratio;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn count_noise_is_seeded_and_unbiased() {
    let img = ScanImage::constant(256, 256, 0.5);
    let a = apply_count_noise(&img, 10_000.0, 5).unwrap();
    assert_eq!(a, apply_count_noise(&img, 10_000.0, 5).unwrap());
    let mean = a.pixels.iter().map(|&p| p as f64).sum::<f64>() / a.pixels.len() as f64;
    assert!((mean - 0.5).abs() <= 0.005, "mean {mean}");
}

#[test]
fn dataset_split_edge_cases() {
    let zero = DatasetSplit {
        train_metastasis: 0,
        train_trauma: 0,
        test_metastasis: 0,
        test_trauma: 0,
    };
    let (m, t) = (PhantomSpec::metastasis(0), PhantomSpec::trauma(0));
    let d = generate_dataset(&zero, &m, &t, 1).unwrap();
    assert!(d.train.is_empty() && d.test.is_empty());

    let a = small_set(3, 9);
    let b = small_set(3, 9);
    let ids = |v: &[PhantomCase]| v.iter().map(|c| c.image.id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&a), ids(&b));
    assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image));
}

// ---- layers ---------------------------------------------------------------

#[test]
fn lrn_matches_direct_formula() {
    let p = LrnParams {
        size: 5,
        k: 2.0,
        alpha: 1e-4,
        beta: 0.75,
    };
    let x: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.9).collect();
    let got = local_response_norm(&Tensor::new(vec![4, 2, 2], x.clone()).unwrap(), &p).unwrap();
    for c in 0..4usize {
        for s in 0..4 {
            let lo = c.saturating_sub(2);
            let hi = (c + 2).min(3);
            let sum: f64 = (lo..=hi).map(|j| x[j * 4 + s].powi(2)).sum();
            let want = x[c * 4 + s] / (2.0 + 1e-4 * sum).powf(0.75);
            assert!((got.data()[c * 4 + s] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn train_config_defaults() {
    let c = TrainConfig::default();
    assert_eq!((c.epochs, c.batch_size), (100, 128));
    assert_eq!((c.learning_rate, c.momentum), (0.0001, 0.9));
    assert_eq!(TrainConfig::desk().epochs, 30);
}

// ---- networks -------------------------------------------------------------

#[test]
fn desk_parameter_count_from_stage_descriptors() {
    let a = ArchSpec::desk();
    let scale = |u: usize| ((u as f64 * a.channel_scale).round() as usize).max(1);
    let (mut cin, mut side, mut total) = (a.input_channels, a.input_side, 0);
    for s in &a.conv_stages {
        let out = scale(s.out_channels);
        total += out * cin * s.kernel * s.kernel + out;
        side = (side + 2 * s.padding - s.kernel) / s.stride + 1;
        if let Some(p) = s.pool {
            side = (side - p.window) / p.stride + 1;
        }
        cin = out;
    }
    let mut fan_in = cin * side * side;
    for (i, &u) in a.fc_stages.iter().enumerate() {
        let u = if i + 1 == a.fc_stages.len() { u } else { scale(u) };
        total += u * fan_in + u;
        fan_in = u;
    }
    assert_eq!(total, 1_351_090);
    assert_eq!(build_network(&a, 0).unwrap().param_count(), total);
}

#[test]
fn builds_are_seeded() {
    let a = build_network(&ArchSpec::desk(), 4).unwrap();
    let b = build_network(&ArchSpec::desk(), 4).unwrap();
    assert_eq!(a.param_digest(|_| true), b.param_digest(|_| true));
    assert_eq!(a.output_shape(), &[2]);
}

#[test]
fn head_replacement_keeps_the_body() {
    let net = build_network(&ArchSpec::desk().with_num_classes(1000), 2).unwrap();
    let last = net.final_dense_index().unwrap();
    let body = |n: &Network| n.param_digest(|i| i != last);
    assert_eq!(net.params_of(last).0.shape(), &[1000, 1024]);

    let two = replace_final_layer(&net, 2, 5).unwrap();
    assert_eq!(two.params_of(last).0.shape(), &[2, 1024]);
    assert_eq!(body(&net), body(&two));

    let same = replace_final_layer(&net, 1000, 5).unwrap();
    assert_eq!(body(&net), body(&same));
    assert_ne!(net.params_of(last).0, same.params_of(last).0);
}

/// conv 1×1 (weight 1) → GAP → dense with both rows equal to 1.
fn tiny_gap_net() -> Network<f64> {
    Network::from_layers(
        vec![1, 4, 4],
        vec![
            (
                "conv".into(),
                LayerKind::Conv(
                    ConvParams::new(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), Tensor::zeros(&[1]), 1, 0)
                        .unwrap(),
                ),
            ),
            ("gap".into(), LayerKind::GlobalAvgPool),
            (
                "fc".into(),
                LayerKind::Dense(
                    DenseParams::new(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(), Tensor::zeros(&[2])).unwrap(),
                ),
            ),
        ],
    )
    .unwrap()
}

#[test]
fn hand_built_net_on_constant_image() {
    let net = tiny_gap_net();
    let img = ScanImage::constant(4, 4, 0.3);
    let (probs, acts) = forward_probs(&net, &img).unwrap();
    let logits = acts.get("fc").unwrap();
    assert!(logits.data().iter().all(|&v| (v - 0.3f32 as f64).abs() < 1e-12));
    assert_eq!(probs.data(), &[0.5, 0.5]);
}

#[test]
fn probabilities_are_a_distribution_and_repeatable() {
    let net = build_network(&ArchSpec::desk(), 8).unwrap();
    let img = resize_bilinear(&generate_case(&PhantomSpec::metastasis(8)).unwrap().image, 64).unwrap();
    let (p, _) = forward_probs(&net, &img).unwrap();
    assert!((p.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(p.data(), forward_probs(&net, &img).unwrap().0.data());
}

// ---- training -------------------------------------------------------------

#[test]
fn pretext_loss_falls_on_defaults() {
    let (_, log) = pretrain_pretext(&ArchSpec::desk(), &TrainConfig::pretext(), 0).unwrap();
    let (first, last) = (log.records[0].loss, log.records.last().unwrap().loss);
    assert_eq!(log.records.len(), TrainConfig::pretext().epochs);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn fine_tune_contracts() {
    let data = small_set(6, 2);
    let base = build_network(&ArchSpec::desk(), 1).unwrap();

    let (a, log) = fine_tune(&base, &data, &quick_config(1)).unwrap();
    assert_eq!(log.records.len(), 1);
    assert!(log.records.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
    let (b, _) = fine_tune(&base, &data, &quick_config(1)).unwrap();
    assert_eq!(a.param_digest(|_| true), b.param_digest(|_| true));

    let frozen = TrainConfig {
        freeze_mask: FreezeMask::All,
        ..quick_config(2)
    };
    let (c, log) = fine_tune(&base, &data, &frozen).unwrap();
    assert_eq!(log.records.len(), 2);
    assert_eq!(c.param_digest(|_| true), base.param_digest(|_| true));
}

#[test]
fn predictions_are_per_case_and_order_free() {
    let data = small_set(3, 4);
    let net = build_network(&ArchSpec::desk(), 6).unwrap();
    let batch = predict_dataset(&net, &data).unwrap();
    assert_eq!(batch.len(), data.len());
    for (p, c) in batch.iter().zip(&data) {
        assert_eq!(*p, predict_case(&net, &c.image).unwrap());
        assert!((0.0..=1.0).contains(&p.score));
        let (probs, _) = forward_probs(&net, &resize_bilinear(&c.image, 64).unwrap()).unwrap();
        assert_eq!(p.score, probs.data()[0] as f64);
    }
}

// ---- class activation maps ------------------------------------------------

/// Two-map conv stage followed by a dense head over the flattened grid, or
/// by GAP → dense.
fn toy_net(gap: bool) -> Network<f64> {
    let conv = ConvParams::new(
        Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| ((i * 5 % 7) as f64 - 3.0) / 4.0).collect()).unwrap(),
        Tensor::new(vec![2], vec![0.1, -0.05]).unwrap(),
        1,
        1,
    )
    .unwrap();
    let mut layers = vec![("conv".into(), LayerKind::Conv(conv)), ("relu".into(), LayerKind::Relu)];
    let fan_in = if gap { 2 } else { 2 * 5 * 5 };
    if gap {
        layers.push(("gap".into(), LayerKind::GlobalAvgPool));
    } else {
        layers.push(("pool".into(), LayerKind::MaxPool(PoolSpec { window: 1, stride: 1 })));
        layers.push(("flat".into(), LayerKind::Flatten));
    }
    let w: Vec<f64> = (0..2 * fan_in).map(|i| ((i * 13 % 17) as f64 - 8.0) / 9.0).collect();
    layers.push((
        "fc".into(),
        LayerKind::Dense(DenseParams::new(Tensor::new(vec![2, fan_in], w).unwrap(), Tensor::zeros(&[2])).unwrap()),
    ));
    Network::from_layers(vec![1, 5, 5], layers).unwrap()
}

fn toy_input() -> Tensor<f64> {
    Tensor::new(vec![1, 5, 5], (0..25).map(|i| ((i * 3 % 11) as f64) / 10.0).collect()).unwrap()
}

#[test]
fn gap_head_grad_cam_is_scaled_relu_cam() {
    let net = toy_net(true);
    for class in 0..2 {
        let inputs = cam_inputs_tensor(&net, &toy_input(), class).unwrap();
        let cam = compute_cam(&inputs).unwrap();
        let grad = grad_cam_from_inputs(&inputs).unwrap();
        for (g, c) in grad.data().iter().zip(cam.data()) {
            assert!((g - c.max(0.0) / 25.0).abs() < 1e-12, "{g} vs {c}");
        }
    }
}

#[test]
fn grad_cam_matches_finite_difference_weights() {
    let net = toy_net(false);
    let cam = net.cam_layer().unwrap();
    let inputs = cam_inputs_tensor(&net, &toy_input(), 1).unwrap();
    let a = inputs.feature_maps.clone();
    let logit = |maps: &Tensor<f64>| {
        let batch = maps.clone().reshape(&[1, 2, 5, 5]).unwrap();
        net.forward_from(cam + 1, batch, false).unwrap().output().data()[1]
    };
    let h = 1e-6;
    let mut alpha = [0.0; 2];
    for i in 0..a.len() {
        let mut p = a.clone();
        p.data_mut()[i] += h;
        let up = logit(&p);
        p.data_mut()[i] -= 2.0 * h;
        alpha[i / 25] += (up - logit(&p)) / (2.0 * h) / 25.0;
    }
    let raw = grad_cam_from_inputs(&inputs).unwrap();
    for s in 0..25 {
        let want = (alpha[0] * a.data()[s] + alpha[1] * a.data()[25 + s]).max(0.0);
        assert!((raw.data()[s] - want).abs() < 1e-3, "cell {s}: {} vs {want}", raw.data()[s]);
    }
}

#[test]
fn disconnected_head_gives_an_empty_map() {
    let mut net = toy_net(false);
    let last = net.final_dense_index().unwrap();
    net.layer_params_mut(last).unwrap().0.fill(0.0);
    let raw = grad_cam_from_inputs(&cam_inputs_tensor(&net, &toy_input(), 0).unwrap()).unwrap();
    assert!(raw.data().iter().all(|&v| v == 0.0));
}

// ---- statistics -----------------------------------------------------------

/// Exhaustive search over confusion matrices with 90 positives and 73
/// negatives for those whose five metrics round to the target values.
#[test]
fn target_percentages_have_one_integer_solution() {
    let target = [0.9000, 0.8219, 0.8650, 0.8617, 0.8696];
    let round4 = |v: f64| (v * 1e4).round() / 1e4;
    let mut hits = Vec::new();
    for tp in 0..=90u64 {
        for tn in 0..=73u64 {
            let (fn_, fp) = (90 - tp, 73 - tn);
            let vals = [
                tp as f64 / 90.0,
                tn as f64 / 73.0,
                (tp + tn) as f64 / 163.0,
                tp as f64 / (tp + fp).max(1) as f64,
                tn as f64 / (tn + fn_).max(1) as f64,
            ];
            if vals.iter().zip(&target).all(|(v, t)| (round4(*v) - t).abs() < 1e-9) {
                hits.push((tp, fn_, tn, fp));
            }
        }
    }
    assert_eq!(hits, vec![(81, 9, 60, 13)]);
    let m = classification_metrics(ConfusionCounts { tp: 81, fp: 13, tn: 60, fn_: 9 }, 0.95).unwrap();
    for ((_, metric), t) in m.named().iter().zip(target) {
        assert!((round4(metric.value.unwrap()) - t).abs() < 1e-9);
    }
}

#[test]
fn training_is_independent_of_worker_count() {
    let data = small_set(5, 12);
    let base = build_network(&ArchSpec::desk(), 3).unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let (net, log) = pool.install(|| fine_tune(&base, &data, &quick_config(2))).unwrap();
        assert!(log.records.iter().all(|r| r.step_learning_rates.iter().all(|&lr| lr == 0.01)));
        net.param_digest(|_| true)
    };
    assert_eq!(run(1), run(3));

    let conv_only = |n: &Network| n.param_digest(|i| matches!(n.layers()[i].kind, LayerKind::Conv(_)));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (tuned, _) = pool.install(|| fine_tune(&base, &data, &quick_config(1))).unwrap();
    assert_eq!(conv_only(&tuned), conv_only(&base));
    assert_ne!(tuned.param_digest(|_| true), base.param_digest(|_| true));
}

#[test]
fn ablation_rows_follow_sizes_and_reproduce() {
    let pool = small_set(6, 21);
    let test = small_set(3, 22);
    let base = build_network(&ArchSpec::desk(), 5).unwrap();
    let cfg = quick_config(2);
    let rows = run_ablation(&[4, 8, 12], &base, &pool, &test, &cfg).unwrap();
    assert_eq!(rows.iter().map(|r| r.train_size).collect::<Vec<_>>(), vec![4, 8, 12]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.test_accuracy) && (0.0..=1.0).contains(&r.mean_iou)));

    let (full, _) = fine_tune(&base, &pool, &cfg).unwrap();
    let preds = predict_dataset(&full, &test).unwrap();
    let acc = preds.iter().zip(&test).filter(|(p, c)| p.label == c.label).count() as f64 / test.len() as f64;
    assert_eq!(rows[2].test_accuracy, acc);

    let again = run_ablation(&[4, 8, 12], &base, &pool, &test, &cfg).unwrap();
    assert_eq!(rows, again);
    assert!(rows.iter().zip(&again).all(|(a, b)| a.heatmap_digest == b.heatmap_digest));
    assert!(run_ablation(&[5], &base, &pool, &test, &cfg).is_err());
}
