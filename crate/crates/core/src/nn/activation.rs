use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(Error::shape(format!(
            "relu input {} vs upstream {}",
            shape_str(input.shape()),
            shape_str(upstream.shape())
        )));
    }
    let mut out = upstream.clone();
    relu_backward_slice(input.data(), out.data_mut());
    Ok(out)
}

pub(crate) fn relu_slice<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v <= T::zero() {
            *v = T::zero();
        }
    }
}

pub(crate) fn relu_backward_slice<T: Scalar>(x: &[T], g: &mut [T]) {
    for (g, &x) in g.iter_mut().zip(x) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Mean over the spatial extent of each channel: `[C, H, W] -> [C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape().len() != 3 {
        return Err(Error::shape(format!(
            "global average pool expects [C,H,W], got {}",
            shape_str(input.shape())
        )));
    }
    let c = input.shape()[0];
    let mut out = vec![T::zero(); c];
    gap_slice(input.data(), c, &mut out);
    Ok(Tensor::from_vec(out))
}

pub(crate) fn gap_slice<T: Scalar>(x: &[T], channels: usize, out: &mut [T]) {
    let hw = x.len() / channels;
    let scale = T::one() / T::from_f64(hw as f64);
    for (o, plane) in out.iter_mut().zip(x.chunks(hw)) {
        *o = plane.iter().copied().sum::<T>() * scale;
    }
}

pub(crate) fn gap_backward_slice<T: Scalar>(g: &[T], dx: &mut [T]) {
    let hw = dx.len() / g.len();
    let scale = T::one() / T::from_f64(hw as f64);
    for (plane, &gc) in dx.chunks_mut(hw).zip(g) {
        plane.fill(gc * scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition_including_zero() {
        let x = Tensor::from_vec(vec![-1.0f64, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::from_vec(vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_is_identity_on_nonnegative_input() {
        let x = Tensor::from_vec(vec![0.0f32, 0.25, 3.0, 7.5]);
        assert_eq!(relu(&x), x);
    }

    #[test]
    fn gap_averages_planes() {
        let x = Tensor::new(vec![2, 1, 2], vec![1.0f64, 3.0, -2.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.0, 1.0]);
    }
}
