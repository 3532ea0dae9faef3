//! Cross-channel local response normalization.
//!
//! `b_c = a_c / (k + alpha · Σ a_j²)^beta`, the sum running over channels
//! `j ∈ [c − n/2, c + n/2]` clipped to the valid range, where `n` is the
//! window size (`size`).

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams {
    pub size: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            size: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    fn window(&self, c: usize, channels: usize) -> std::ops::Range<usize> {
        let r = self.size / 2;
        c.saturating_sub(r)..(c + r + 1).min(channels)
    }
}

fn check<T: Scalar>(input: &Tensor<T>) -> Result<(usize, usize)> {
    match input.shape() {
        [c, h, w] => Ok((*c, h * w)),
        s => Err(Error::shape(format!("LRN expects [C,H,W], got {}", shape_str(s)))),
    }
}

/// Denominator base `k + alpha·Σ a²` per element.
fn denominators<T: Scalar>(x: &[T], channels: usize, hw: usize, p: &LrnParams) -> Vec<T> {
    let (k, alpha) = (T::from_f64(p.k), T::from_f64(p.alpha));
    let mut d = vec![T::zero(); x.len()];
    for c in 0..channels {
        for j in p.window(c, channels) {
            for s in 0..hw {
                let a = x[j * hw + s];
                d[c * hw + s] += a * a;
            }
        }
    }
    for v in &mut d {
        *v = k + alpha * *v;
    }
    d
}

pub(crate) fn forward_slice<T: Scalar>(x: &[T], channels: usize, p: &LrnParams, out: &mut [T]) {
    let hw = x.len() / channels;
    let beta = T::from_f64(p.beta);
    let d = denominators(x, channels, hw, p);
    for ((o, &a), &d) in out.iter_mut().zip(x).zip(&d) {
        *o = a / d.powf(beta);
    }
}

pub(crate) fn backward_slice<T: Scalar>(x: &[T], channels: usize, p: &LrnParams, g: &[T], dx: &mut [T]) {
    let hw = x.len() / channels;
    let beta = T::from_f64(p.beta);
    let coef = T::from_f64(2.0 * p.alpha * p.beta);
    let d = denominators(x, channels, hw, p);
    // s_c = g_c · a_c · d_c^(−β−1), gathered over each element's window.
    let scaled: Vec<T> = (0..x.len())
        .map(|i| g[i] * x[i] * d[i].powf(-beta - T::one()))
        .collect();
    for c in 0..channels {
        for s in 0..hw {
            let i = c * hw + s;
            let mut acc = T::zero();
            for j in p.window(c, channels) {
                acc += scaled[j * hw + s];
            }
            dx[i] = g[i] * d[i].powf(-beta) - coef * x[i] * acc;
        }
    }
}

pub fn local_response_norm<T: Scalar>(input: &Tensor<T>, params: &LrnParams) -> Result<Tensor<T>> {
    let (c, _) = check(input)?;
    let mut out = Tensor::zeros(input.shape());
    forward_slice(input.data(), c, params, out.data_mut());
    Ok(out)
}

pub fn local_response_norm_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &LrnParams,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, _) = check(input)?;
    if upstream.shape() != input.shape() {
        return Err(Error::shape(format!(
            "LRN upstream {} vs input {}",
            shape_str(upstream.shape()),
            shape_str(input.shape())
        )));
    }
    let mut dx = Tensor::zeros(input.shape());
    backward_slice(input.data(), c, params, upstream.data(), dx.data_mut());
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::<f64>::zeros(&[4, 2, 2]);
        let y = local_response_norm(&x, &LrnParams::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_k_without_alpha_is_identity() {
        let x = Tensor::new(vec![3, 1, 2], vec![1.0f64, -2.0, 3.0, 0.5, 7.0, -0.25]).unwrap();
        let p = LrnParams {
            size: 3,
            k: 1.0,
            alpha: 0.0,
            beta: 0.75,
        };
        assert_eq!(local_response_norm(&x, &p).unwrap(), x);
    }
}
