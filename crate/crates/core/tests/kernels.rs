use proptest::prelude::*;
use ribcam::nn::{
    conv2d_forward, maxpool2d, sgdm_step, softmax, softmax_xent, ConvParams, OptimizerState,
};
use ribcam::Tensor;

/// Direct cross-correlation with zero padding, one output at a time.
fn conv_oracle(x: &[f64], (c, h, w): (usize, usize, usize), wt: &[f64], (o, k): (usize, usize), b: &[f64], s: usize, p: usize) -> Vec<f64> {
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((oc * c + ic) * k + ky) * k + kx] * x[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn pool_oracle(x: &[f64], (c, h, w): (usize, usize, usize), win: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = ((h - win) / s + 1, (w - win) / s + 1);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..win {
                    for dx in 0..win {
                        m = m.max(x[(ch * h + oy * s + dy) * w + ox * s + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn conv_matches_nested_loops(
        (c, o, k, s, p, h, w, x, wt, b) in (
            prop::sample::select(vec![1usize, 3]),
            1usize..=3,
            prop::sample::select(vec![1usize, 3, 5]),
            1usize..=2,
            0usize..=2,
            5usize..=9,
            5usize..=9,
        ).prop_flat_map(|(c, o, k, s, p, h, w)| {
            (Just(c), Just(o), Just(k), Just(s), Just(p), Just(h), Just(w),
             values(c * h * w), values(o * c * k * k), values(o))
        })
    ) {
        let params = ConvParams::new(
            Tensor::new(vec![o, c, k, k], wt.clone()).unwrap(),
            Tensor::from_vec(b.clone()),
            s,
            p,
        ).unwrap();
        let got = conv2d_forward(&Tensor::new(vec![c, h, w], x.clone()).unwrap(), &params).unwrap();
        let want = conv_oracle(&x, (c, h, w), &wt, (o, k), &b, s, p);
        prop_assert_eq!(got.len(), want.len());
        for (a, e) in got.data().iter().zip(&want) {
            prop_assert!((a - e).abs() <= 1e-12, "{} vs {}", a, e);
        }
        // Same inputs, bit-identical outputs.
        let again = conv2d_forward(&Tensor::new(vec![c, h, w], x).unwrap(), &params).unwrap();
        prop_assert_eq!(got.data(), again.data());
    }

    #[test]
    fn maxpool_matches_nested_loops(
        (c, h, w, win, s, x) in (1usize..=3, 3usize..=9, 3usize..=9, 1usize..=3, 1usize..=3)
            .prop_flat_map(|(c, h, w, win, s)| (Just(c), Just(h), Just(w), Just(win), Just(s), values(c * h * w)))
    ) {
        let got = maxpool2d(&Tensor::new(vec![c, h, w], x.clone()).unwrap(), win, s).unwrap();
        prop_assert_eq!(got.output.data(), &pool_oracle(&x, (c, h, w), win, s)[..]);
        for (v, &i) in got.output.data().iter().zip(&got.argmax) {
            prop_assert_eq!(*v, x[i]);
        }
    }

    #[test]
    fn softmax_xent_identities(z in prop::collection::vec(-30.0f64..30.0, 2..8), t in 0usize..8) {
        let t = t % z.len();
        let r = softmax_xent(&Tensor::from_vec(z.clone()), t).unwrap();
        prop_assert!((r.probs.data().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!((softmax(&z).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(r.loss >= 0.0);
        prop_assert!(r.grad_logits.data().iter().sum::<f64>().abs() <= 1e-9);
    }

    #[test]
    fn momentum_zero_is_plain_descent(
        (w, g) in (1usize..20).prop_flat_map(|n| (values(n), values(n))),
        lr in 1e-5f64..1.0,
    ) {
        let mut a = Tensor::from_vec(w.clone());
        let mut state = OptimizerState::<f64>::new([a.shape()], lr, 0.0).unwrap();
        for _ in 0..3 {
            sgdm_step(&mut [&mut a], &[Tensor::from_vec(g.clone())], &mut state).unwrap();
        }
        let mut plain = w;
        for _ in 0..3 {
            for (p, &d) in plain.iter_mut().zip(&g) {
                *p -= lr * d;
            }
        }
        prop_assert_eq!(a.data(), &plain[..]);
    }
}
