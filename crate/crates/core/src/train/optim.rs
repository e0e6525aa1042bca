use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ModelParams;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// First and second moments per tensor, plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    pub step: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn for_shapes<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<ArrayD<F>> = shapes.into_iter().map(ArrayD::zeros).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn for_params(params: &ModelParams<F>) -> Self {
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        Self::for_shapes(shapes.iter().map(Vec::as_slice))
    }
}

/// One decoupled-weight-decay Adam update:
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`.
///
/// Gradients are checked first; any non-finite value aborts the step and
/// leaves parameters and state untouched.
pub fn adamw_update<F: Real>(
    params: Vec<(String, ArrayViewMutD<'_, F>)>,
    grads: Vec<(String, ArrayViewD<'_, F>)>,
    state: &mut OptimizerState<F>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Optimizer("parameter, gradient and state counts differ".into()));
    }
    for ((name, p), (_, g)) in params.iter().zip(&grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Optimizer(format!("gradient shape mismatch for {name}")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let one = F::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let (lr, eps, wd) = (F::lit(lr), F::lit(cfg.eps), F::lit(cfg.weight_decay));
    for (((_, mut p), (_, g)), (m, v)) in params
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        Zip::from(&mut p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
        });
    }
    Ok(())
}

pub fn adamw_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut OptimizerState<F>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), TrainError> {
    adamw_update(params.tensors_mut(), grads.tensors(), state, lr, cfg)
}

/// Cosine annealing from `lr_init` at step 0 to `lr_min` at `total`; steps
/// past the end stay at `lr_min`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let c = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
    lr_init * c + lr_min * (1.0 - c)
}

#[cfg(test)]
mod tests {
    use ndarray::{arr0, ArrayD, IxDyn};

    use super::*;

    fn one_tensor(x: &mut ArrayD<f64>) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![("x".into(), x.view_mut())]
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut x = ArrayD::from_elem(IxDyn(&[3]), 2.0f64);
        let g = ArrayD::zeros(IxDyn(&[3]));
        let mut st = OptimizerState::<f64>::for_shapes([&[3usize][..]]);
        let cfg = AdamWConfig::default();
        for k in 1..=5 {
            adamw_update(one_tensor(&mut x), vec![("x".into(), g.view())], &mut st, 1e-4, &cfg).unwrap();
            let want = 2.0 * (1.0 - 1e-7f64).powi(k);
            assert!(x.iter().all(|v| ((v - want) / want).abs() < 1e-15));
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = arr0(0.0f64).into_dyn();
        let g = arr0(1.0f64).into_dyn();
        let mut st = OptimizerState::<f64>::for_shapes([&[][..]]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_update(one_tensor(&mut x), vec![("x".into(), g.view())], &mut st, 1e-4, &cfg).unwrap();
        assert!((x[[]] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut x = ArrayD::from_elem(IxDyn(&[2]), 1.0f64);
        let mut g = ArrayD::zeros(IxDyn(&[2]));
        g[[1]] = f64::NAN;
        let mut st = OptimizerState::<f64>::for_shapes([&[2usize][..]]);
        let before = (x.clone(), st.clone());
        let r = adamw_update(one_tensor(&mut x), vec![("x".into(), g.view())], &mut st, 1e-3, &AdamWConfig::default());
        assert!(matches!(r, Err(TrainError::NonFiniteGradient(_))));
        assert_eq!((x, st), before);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut x = ArrayD::from_shape_fn(IxDyn(&[4]), |i| i[0] as f64 - 1.5);
        let g = ArrayD::from_elem(IxDyn(&[4]), 0.3);
        let before = x.clone();
        let mut st = OptimizerState::<f64>::for_shapes([&[4usize][..]]);
        for _ in 0..3 {
            adamw_update(one_tensor(&mut x), vec![("x".into(), g.view())], &mut st, 0.0, &AdamWConfig::default())
                .unwrap();
        }
        assert_eq!(x, before);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 1000, 1e-4, 1e-6), 1e-4);
        assert_eq!(cosine_lr(1000, 1000, 1e-4, 1e-6), 1e-6);
        assert_eq!(cosine_lr(1500, 1000, 1e-4, 1e-6), 1e-6);
        assert!((cosine_lr(500, 1000, 1e-4, 1e-6) - 5.05e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1e-4, 1e-6);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
