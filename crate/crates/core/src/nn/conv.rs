//! 2-D cross-correlation via im2col and a GEMM.

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `[out_channels, in_channels, kernel_h, kernel_w]`
    pub weights: Tensor<T>,
    /// `[out_channels]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        if weights.shape().len() != 4 {
            return Err(Error::shape(format!(
                "conv weights must be 4-D, got {}",
                shape_str(weights.shape())
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::shape(format!(
                "conv bias {} does not match {} output channels",
                shape_str(bias.shape()),
                weights.shape()[0]
            )));
        }
        if stride == 0 {
            return Err(Error::validation("stride", "must be positive"));
        }
        Ok(ConvParams {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    pub fn geometry(&self, input_shape: &[usize]) -> Result<ConvGeometry> {
        ConvGeometry::new(input_shape, self)
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Resolved extents for one convolution applied to one input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn new<T: Scalar>(input_shape: &[usize], p: &ConvParams<T>) -> Result<Self> {
        let w = p.weights.shape();
        let mismatch = || {
            Error::shape(format!(
                "conv input {} incompatible with weights {} (stride {}, padding {})",
                shape_str(input_shape),
                shape_str(w),
                p.stride,
                p.padding
            ))
        };
        if input_shape.len() != 3 || input_shape[0] != w[1] {
            return Err(mismatch());
        }
        let (in_h, in_w) = (input_shape[1], input_shape[2]);
        let (kh, kw) = (w[2], w[3]);
        if in_h + 2 * p.padding < kh || in_w + 2 * p.padding < kw {
            return Err(mismatch());
        }
        Ok(ConvGeometry {
            in_c: w[1],
            in_h,
            in_w,
            out_c: w[0],
            kh,
            kw,
            stride: p.stride,
            pad: p.padding,
            out_h: (in_h + 2 * p.padding - kh) / p.stride + 1,
            out_w: (in_w + 2 * p.padding - kw) / p.stride + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_c, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn scratch_len(&self) -> usize {
        self.patch_len() * self.positions()
    }

    /// Input offset feeding `(out_y, out_x)` through kernel tap `(ky, kx)`,
    /// or `None` in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, xx)) => plane[y * g.in_w + xx],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.in_w + xx] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Slice-level forward used by batched network code. `scratch` must hold
/// `g.scratch_len()` values.
pub(crate) fn forward_slice<T: Scalar>(
    x: &[T],
    p: &ConvParams<T>,
    g: &ConvGeometry,
    out: &mut [T],
    scratch: &mut Vec<T>,
) {
    scratch.resize(g.scratch_len(), T::zero());
    im2col(x, g, scratch);
    let positions = g.positions();
    let bias = p.bias.data();
    for (co, row) in out.chunks_mut(positions).enumerate() {
        row.fill(bias[co]);
    }
    T::gemm(
        g.out_c,
        g.patch_len(),
        positions,
        p.weights.data(),
        false,
        scratch,
        false,
        T::one(),
        out,
    );
}

/// Slice-level backward. Weight and bias gradients are accumulated into
/// `gw`/`gb`; the input gradient is written (overwritten) into `dx` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_slice<T: Scalar>(
    x: &[T],
    p: &ConvParams<T>,
    g: &ConvGeometry,
    upstream: &[T],
    gw: Option<(&mut [T], &mut [T])>,
    dx: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let positions = g.positions();
    let patch = g.patch_len();
    scratch.resize(g.scratch_len(), T::zero());
    if let Some((gw, gb)) = gw {
        im2col(x, g, scratch);
        T::gemm(g.out_c, positions, patch, upstream, false, scratch, true, T::one(), gw);
        for (co, row) in upstream.chunks(positions).enumerate() {
            gb[co] += row.iter().copied().sum::<T>();
        }
    }
    if let Some(dx) = dx {
        T::gemm(
            patch,
            g.out_c,
            positions,
            p.weights.data(),
            true,
            upstream,
            false,
            T::zero(),
            scratch,
        );
        dx.fill(T::zero());
        col2im_add(scratch, g, dx);
    }
}

/// Cross-correlation of a `[C, H, W]` input with `params`, plus bias.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = params.geometry(input.shape())?;
    let mut out = vec![T::zero(); g.out_len()];
    forward_slice(input.data(), params, &g, &mut out, &mut Vec::new());
    Tensor::new(g.out_shape().to_vec(), out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    upstream_grad: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = params.geometry(input.shape())?;
    if upstream_grad.shape() != g.out_shape() {
        return Err(Error::shape(format!(
            "upstream gradient {} does not match conv output {}",
            shape_str(upstream_grad.shape()),
            shape_str(&g.out_shape())
        )));
    }
    let mut gw = Tensor::zeros(params.weights.shape());
    let mut gb = Tensor::zeros(params.bias.shape());
    let mut dx = Tensor::zeros(input.shape());
    backward_slice(
        input.data(),
        params,
        &g,
        upstream_grad.data(),
        Some((gw.data_mut(), gb.data_mut())),
        Some(dx.data_mut()),
        &mut Vec::new(),
    );
    Ok(ConvGrads {
        input: dx,
        weights: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(w: Vec<f64>, shape: [usize; 4], b: Vec<f64>, stride: usize, pad: usize) -> ConvParams<f64> {
        ConvParams::new(
            Tensor::new(shape.to_vec(), w).unwrap(),
            Tensor::from_vec(b),
            stride,
            pad,
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let p = params(vec![1.0], [1, 1, 1, 1], vec![0.0], 1, 0);
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums_entries() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = params(vec![1.0; 4], [1, 1, 2, 2], vec![0.0], 1, 0);
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let p = params(vec![0.0; 9], [1, 1, 3, 3], vec![0.0], 1, 0);
        let err = conv2d_forward(&x, &p).unwrap_err().to_string();
        assert!(err.contains("[2×4×4]") && err.contains("[1×1×3×3]"), "{err}");
    }

    #[test]
    fn empty_output_extent_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let p = params(vec![0.0; 9], [1, 1, 3, 3], vec![0.0], 1, 0);
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::new(vec![2, 4, 4], (0..32).map(|v| v as f64 * 0.1).collect()).unwrap();
        let p = params((0..36).map(|v| v as f64).collect(), [2, 2, 3, 3], vec![1.0, -1.0], 1, 1);
        let up = Tensor::zeros(&[2, 4, 4]);
        let g = conv2d_backward(&x, &p, &up).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_channel_sum() {
        let x = Tensor::new(vec![1, 3, 3], vec![0.5; 9]).unwrap();
        let p = params(vec![1.0; 8], [2, 1, 2, 2], vec![0.0, 0.0], 1, 0);
        let up = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.5, 0.0]).unwrap();
        let g = conv2d_backward(&x, &p, &up).unwrap();
        assert_eq!(g.bias.data(), &[10.0, 0.0]);
    }

    #[test]
    fn upstream_shape_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 3]);
        let p = params(vec![1.0; 4], [1, 1, 2, 2], vec![0.0], 1, 0);
        let up = Tensor::zeros(&[1, 3, 3]);
        assert!(matches!(conv2d_backward(&x, &p, &up), Err(Error::Shape(_))));
    }
}
