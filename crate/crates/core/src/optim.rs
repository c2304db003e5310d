//! Adam with decoupled weight decay, and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment accumulators and step counter for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
    pub lr0: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[&Tensor<T>], lr0: f64, weight_decay: f64, total_steps: u64) -> Self {
        Self {
            first: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
            lr0,
            weight_decay,
            total_steps,
        }
    }
}

/// One Adam update at learning rate `lr`. Weight decay is applied as
/// `p -= lr * wd * p` before the moment update.
pub fn adam_step<T: Real>(
    state: &mut OptimizerState<T>,
    params: &mut [(&str, &mut Tensor<T>)],
    grads: &[&Tensor<T>],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
    let (ob1, ob2) = (T::one() - b1, T::one() - b2);
    let decay = T::from_f64(lr * state.weight_decay);
    let step_size = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(ADAM_EPS);

    for (slot, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[slot];
        let v = &mut state.second[slot];
        for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *pv -= decay * *pv;
            *mv = b1 * *mv + ob1 * *gv;
            *vv = b2 * *vv + ob2 * *gv * *gv;
            *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr0 * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_lr(t: u64, total: u64, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("cosine schedule with zero total steps".into()));
    }
    if t > total {
        return Err(Error::InvalidArgument(format!("step {t} beyond total {total}")));
    }
    let frac = t as f64 / total as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam written out independently of the vectorised path.
    fn scalar_adam(p0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            p -= lr * wd * p;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= lr * mh / (vh.sqrt() + 1e-8);
        }
        p
    }

    fn run(p0: &[f64], steps: &[Vec<f64>], lr: f64, wd: f64) -> Vec<f64> {
        let mut p = Tensor::<f64>::from_f64(&[p0.len()], p0).unwrap();
        let mut st = OptimizerState::new(&[&p], lr, wd, 10);
        for g in steps {
            let g = Tensor::from_f64(&[g.len()], g).unwrap();
            adam_step(&mut st, &mut [("w", &mut p)], &[&g], lr).unwrap();
        }
        p.data().to_vec()
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let out = run(&[1.0, -2.0], &[vec![0.0, 0.0]], 0.01, 0.0);
        assert_eq!(out, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let out = run(&[0.5, 0.5], &[vec![1.0, 1.0]], 0.01, 0.0);
        for v in out {
            assert!(((0.5 - v) - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let grads = [vec![0.3, -1.2], vec![-0.7, 0.4]];
        let out = run(&[0.25, -0.5], &grads, 1e-3, 1e-4);
        for j in 0..2 {
            let g: Vec<f64> = grads.iter().map(|s| s[j]).collect();
            let expect = scalar_adam([0.25, -0.5][j], &g, 1e-3, 1e-4);
            assert!((out[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_leaves_params() {
        let out = run(&[0.25, -0.5], &[vec![3.0, 1.0], vec![1.0, 1.0]], 0.0, 1e-4);
        assert_eq!(out, vec![0.25, -0.5]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut st = OptimizerState::new(&[&p], 0.1, 0.0, 1);
        let g = Tensor::from_f64(&[2], &[0.0, f64::NAN]).unwrap();
        let err = adam_step(&mut st, &mut [("head.weight", &mut p)], &[&g], 0.1).unwrap_err();
        assert!(err.to_string().contains("head.weight"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 500, 1e-3).unwrap(), 1e-3);
        assert!(cosine_lr(500, 500, 1e-3).unwrap().abs() < 1e-18);
        assert!((cosine_lr(250, 500, 1e-3).unwrap() - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1, 0, 1e-3).is_err());
    }
}
