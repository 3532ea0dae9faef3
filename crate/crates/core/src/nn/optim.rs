use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Heavy-ball momentum state: `v ← μ·v − η·g`, `w ← w + v`.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub velocity: Vec<Tensor<T>>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero velocity mirroring `shapes`.
    pub fn new<'a>(
        shapes: impl IntoIterator<Item = &'a [usize]>,
        learning_rate: f64,
        momentum: f64,
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        Ok(OptimizerState {
            velocity: shapes.into_iter().map(Tensor::zeros).collect(),
            learning_rate,
            momentum,
        })
    }
}

pub fn sgdm_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(format!(
            "sgdm: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((w, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::shape(format!(
                "sgdm: param {} grad {} velocity {}",
                shape_str(w.shape()),
                shape_str(g.shape()),
                shape_str(v.shape())
            )));
        }
    }
    let lr = T::from_f64(state.learning_rate);
    let mu = T::from_f64(state.momentum);
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = mu * *v - lr * g;
            *w += *v;
        }
    }
    Ok(())
}
