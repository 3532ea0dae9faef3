use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

/// Output of a max-pool: pooled values plus, per output cell, the flat
/// input index that won the window.
#[derive(Clone, Debug)]
pub struct MaxPoolOutput<T = f32> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub(crate) fn pooled_extent(input: usize, window: usize, stride: usize) -> usize {
    (input - window) / stride + 1
}

pub(crate) fn check_pool(input_shape: &[usize], window: usize, stride: usize) -> Result<[usize; 3]> {
    if window == 0 || stride == 0 {
        return Err(Error::validation("pool", "window and stride must be positive"));
    }
    if input_shape.len() != 3 || window > input_shape[1] || window > input_shape[2] {
        return Err(Error::shape(format!(
            "pool window {window} does not fit input {}",
            shape_str(input_shape)
        )));
    }
    Ok([
        input_shape[0],
        pooled_extent(input_shape[1], window, stride),
        pooled_extent(input_shape[2], window, stride),
    ])
}

/// Max over each window. Ties go to the first maximum in row-major order,
/// which is also where the backward pass routes the gradient.
pub(crate) fn forward_slice<T: Scalar>(
    x: &[T],
    in_shape: &[usize],
    window: usize,
    stride: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (pooled_extent(h, window, stride), pooled_extent(w, window, stride));
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for i in row..row + window {
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = x[best];
                argmax[o] = best;
            }
        }
    }
}

pub(crate) fn backward_slice<T: Scalar>(argmax: &[usize], upstream: &[T], dx: &mut [T]) {
    dx.fill(T::zero());
    for (&src, &g) in argmax.iter().zip(upstream) {
        dx[src] += g;
    }
}

pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<MaxPoolOutput<T>> {
    let out_shape = check_pool(input.shape(), window, stride)?;
    let n = out_shape.iter().product();
    let mut out = vec![T::zero(); n];
    let mut argmax = vec![0; n];
    forward_slice(input.data(), input.shape(), window, stride, &mut out, &mut argmax);
    Ok(MaxPoolOutput {
        output: Tensor::new(out_shape.to_vec(), out)?,
        argmax,
    })
}

/// Routes `upstream` back through a previous [`maxpool2d`] call.
pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    pooled: &MaxPoolOutput<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if upstream.shape() != pooled.output.shape() {
        return Err(Error::shape(format!(
            "upstream gradient {} does not match pool output {}",
            shape_str(upstream.shape()),
            shape_str(pooled.output.shape())
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    backward_slice(&pooled.argmax, upstream.data(), dx.data_mut());
    Ok(dx)
}
