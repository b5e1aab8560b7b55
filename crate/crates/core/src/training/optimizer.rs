use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Param};

/// AdamW moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self::for_params(params.params())
    }

    pub fn for_params(params: &[Param]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Decoupled weight decay is applied first
/// (`p ← p·(1 − lr·wd)`), then the bias-corrected Adam step.
///
/// Gradients are checked before anything is touched, so a non-finite entry
/// leaves parameters and moments unchanged.
pub fn adamw_step(params: &mut [Param], grads: &[Tensor], state: &mut OptimizerState, lr: f64, weight_decay: f64) -> Result<()> {
    adamw_step_where(params, grads, state, lr, weight_decay, |_| true)
}

/// [`adamw_step`] restricted to parameters for which `update` holds; the rest
/// (and their moments) stay bitwise unchanged, weight decay included.
pub fn adamw_step_where(
    params: &mut [Param],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    update: impl Fn(&Param) -> bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(format!("gradient shape {:?} for {} {:?}", g.shape(), p.name, p.value.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !update(p) {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            *w *= decay;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;

    fn param(values: Vec<f64>) -> Param {
        Param {
            name: "w".into(),
            group: ParamGroup::Extractor,
            value: Tensor::new(vec![values.len()], values).unwrap(),
        }
    }

    #[test]
    fn zero_gradient_applies_only_decay() {
        let mut ps = vec![param(vec![0.5, -2.0, 3.25])];
        let before = ps[0].value.data().to_vec();
        let mut state = OptimizerState::for_params(&ps);
        let g = vec![Tensor::zeros(&[3]).unwrap()];
        adamw_step(&mut ps, &g, &mut state, 1e-3, 1e-3).unwrap();
        for (a, b) in ps[0].value.data().iter().zip(&before) {
            assert_eq!(*a, b * (1.0 - 1e-6));
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias correction makes the first update ≈ lr·sign(g).
        let mut ps = vec![param(vec![1.0, 1.0])];
        let mut state = OptimizerState::for_params(&ps);
        let g = vec![Tensor::new(vec![2], vec![0.3, -7.0]).unwrap()];
        adamw_step(&mut ps, &g, &mut state, 0.01, 0.0).unwrap();
        let d = ps[0].value.data();
        assert!((d[0] - 0.99).abs() < 1e-9);
        assert!((d[1] - 1.01).abs() < 1e-9);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let (lr, wd) = (0.1, 0.01);
        let mut ps = vec![param(vec![2.0])];
        let mut state = OptimizerState::for_params(&ps);
        let (g1, g2) = (0.5, -0.25);
        adamw_step(&mut ps, &[Tensor::new(vec![1], vec![g1]).unwrap()], &mut state, lr, wd).unwrap();
        adamw_step(&mut ps, &[Tensor::new(vec![1], vec![g2]).unwrap()], &mut state, lr, wd).unwrap();

        let mut w: f64 = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            w *= 1.0 - lr * wd;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((ps[0].value.data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut ps = vec![param(vec![1.0, 2.0])];
        ps[0].name = "classifier.bias".into();
        let mut state = OptimizerState::for_params(&ps);
        let g = vec![Tensor::new(vec![2], vec![0.1, f64::NAN]).unwrap()];
        match adamw_step(&mut ps, &g, &mut state, 1e-3, 1e-3) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "classifier.bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(ps[0].value.data(), &[1.0, 2.0]);
        assert_eq!(state.step(), 0);
    }
}
