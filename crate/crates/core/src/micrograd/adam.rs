use super::{MicrogradError, Scalar, Tensor};

/// Per-parameter-block Adam state. Moments are zero-initialised.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub label: String,
    pub step_count: u64,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(label: impl Into<String>, len: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            label: label.into(),
            step_count: 0,
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            learning_rate,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    params: &mut Tensor<T>,
    grads: &Tensor<T>,
    state: &mut AdamState<T>,
) -> Result<(), MicrogradError> {
    if params.shape() != grads.shape() || state.first_moment.len() != params.len() {
        return Err(MicrogradError::Shape(format!(
            "adam `{}`: params {:?}, grads {:?}, state length {}",
            state.label,
            params.shape(),
            grads.shape(),
            state.first_moment.len()
        )));
    }
    if !grads.all_finite() {
        return Err(MicrogradError::NonFiniteGradient { block: state.label.clone() });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64(1.0 - state.beta2.powi(t));
    let lr = T::from_f64(state.learning_rate);
    let eps = T::from_f64(state.epsilon);
    let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
    for ((p, &g), (m, v)) in params.data_mut().iter_mut().zip(grads.data()).zip(moments) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
