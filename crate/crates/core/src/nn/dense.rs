use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T = f32> {
    /// `[out_units, in_units]`
    pub weights: Tensor<T>,
    /// `[out_units]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weights.shape().len() != 2 || bias.shape() != [weights.shape()[0]] {
            return Err(Error::shape(format!(
                "dense weights {} and bias {} are inconsistent",
                shape_str(weights.shape()),
                shape_str(bias.shape())
            )));
        }
        Ok(DenseParams { weights, bias })
    }

    pub fn out_units(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_units(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> DenseParams<U> {
        DenseParams {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `y = W·x + b` for a single input vector.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, params: &DenseParams<T>) -> Result<Tensor<T>> {
    if input.len() != params.in_units() {
        return Err(Error::shape(format!(
            "dense input of length {} for a layer expecting {}",
            input.len(),
            params.in_units()
        )));
    }
    let mut out = vec![T::zero(); params.out_units()];
    forward_batch(input.data(), 1, params, &mut out);
    Ok(Tensor::from_vec(out))
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &DenseParams<T>,
    upstream: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    if input.len() != params.in_units() || upstream.len() != params.out_units() {
        return Err(Error::shape(format!(
            "dense backward: input {} / upstream {} for weights {}",
            shape_str(input.shape()),
            shape_str(upstream.shape()),
            shape_str(params.weights.shape())
        )));
    }
    let mut gw = Tensor::zeros(params.weights.shape());
    let mut gb = Tensor::zeros(params.bias.shape());
    let mut dx = Tensor::zeros(input.shape());
    backward_batch(
        input.data(),
        1,
        params,
        upstream.data(),
        Some((gw.data_mut(), gb.data_mut())),
        Some(dx.data_mut()),
    );
    Ok(DenseGrads {
        input: dx,
        weights: gw,
        bias: gb,
    })
}

/// `Y = X·Wᵀ + b` for `n` rows of `X`.
pub(crate) fn forward_batch<T: Scalar>(x: &[T], n: usize, p: &DenseParams<T>, out: &mut [T]) {
    let (o, i) = (p.out_units(), p.in_units());
    for row in out.chunks_mut(o) {
        row.copy_from_slice(p.bias.data());
    }
    T::gemm(n, i, o, x, false, p.weights.data(), true, T::one(), out);
}

/// Accumulates `Gᵀ·X` into the weight gradient and column sums of `G` into
/// the bias gradient; writes `G·W` into `dx`.
pub(crate) fn backward_batch<T: Scalar>(
    x: &[T],
    n: usize,
    p: &DenseParams<T>,
    upstream: &[T],
    gw: Option<(&mut [T], &mut [T])>,
    dx: Option<&mut [T]>,
) {
    let (o, i) = (p.out_units(), p.in_units());
    if let Some((gw, gb)) = gw {
        T::gemm(o, n, i, upstream, true, x, false, T::one(), gw);
        for row in upstream.chunks(o) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    if let Some(dx) = dx {
        T::gemm(n, o, i, upstream, false, p.weights.data(), false, T::zero(), dx);
    }
}
