use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct SoftmaxXent<T = f32> {
    pub loss: T,
    pub probs: Tensor<T>,
    pub grad_logits: Tensor<T>,
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of a softmax over `logits` against `target_class`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, target_class: usize) -> Result<SoftmaxXent<T>> {
    let k = logits.len();
    if target_class >= k {
        return Err(Error::validation(
            "target_class",
            format!("{target_class} is outside 0..{k}"),
        ));
    }
    let probs = softmax(logits.data());
    // ln p_t computed from the shifted logits avoids ln(0) on saturation.
    let max = logits.data().iter().copied().fold(T::neg_infinity(), T::max);
    let log_total = logits
        .data()
        .iter()
        .map(|&z| (z - max).exp())
        .sum::<T>()
        .ln();
    let loss = -(logits.data()[target_class] - max - log_total);
    let mut grad = probs.clone();
    grad[target_class] -= T::one();
    Ok(SoftmaxXent {
        loss: loss.max(T::zero()),
        probs: Tensor::from_vec(probs),
        grad_logits: Tensor::from_vec(grad),
    })
}
