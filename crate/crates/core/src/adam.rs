use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, VdtError};
use crate::scalar::Scalar;
use crate::valuenet::ValueNetwork;

/// Adam moments and hyperparameters for a flat parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(num_params: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: vec![T::zero(); num_params],
            second_moment: vec![T::zero(); num_params],
            step_count: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn with_defaults(num_params: usize, learning_rate: f64) -> Self {
        Self::new(num_params, learning_rate, 0.9, 0.999, 1e-8)
    }
}

/// One Adam step that moves the parameters along `ascent` (the gradient fed to
/// Adam is `-ascent`).
pub fn adam_step<T: Scalar>(net: &mut ValueNetwork<T>, opt: &mut OptimizerState<T>, ascent: &[T]) -> Result<()> {
    let n = net.num_params();
    check_dim("ascent direction", n, ascent.len())?;
    check_dim("adam first moment", n, opt.first_moment.len())?;
    check_dim("adam second moment", n, opt.second_moment.len())?;
    if let Some(k) = ascent.iter().position(|v| !v.is_finite()) {
        return Err(VdtError::Diverged {
            iteration: opt.step_count as usize + 1,
            detail: format!("non-finite ascent direction at parameter {k}"),
            last_good: None,
        });
    }
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let b1 = T::of(opt.beta1);
    let b2 = T::of(opt.beta2);
    let c1 = T::of(1.0 - opt.beta1.powi(t));
    let c2 = T::of(1.0 - opt.beta2.powi(t));
    let lr = T::of(opt.learning_rate);
    let eps = T::of(opt.epsilon);
    let one = T::one();
    for (((p, m), v), &a) in net
        .params_mut()
        .iter_mut()
        .zip(opt.first_moment.iter_mut())
        .zip(opt.second_moment.iter_mut())
        .zip(ascent)
    {
        let g = -a;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
