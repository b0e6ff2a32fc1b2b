//! Adam with bias correction.

use crate::autodiff::tensor::Tensor;
use crate::error::{DagamError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Result<Self> {
        let cfg = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(DagamError::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(DagamError::Config(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(DagamError::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a list of parameters plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::from_parts(p.shape().to_vec(), vec![0.0; p.numel()]);
        AdamState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }
}

/// One Adam update. A `None` gradient leaves that parameter and its moments
/// untouched (the parameter was not reached by the loss).
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(DagamError::dim(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let shapes_ok = state.m[i].shape() == p.shape()
            && state.v[i].shape() == p.shape()
            && g.as_ref().is_none_or(|g| g.shape() == p.shape());
        if !shapes_ok {
            return Err(DagamError::dim(format!(
                "adam: parameter {i} shape {:?} disagrees with its gradient or moments",
                p.shape()
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *pj -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_by_hand() {
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Some(Tensor::scalar(1.0))];
        let mut s = AdamState::for_params(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::new(0.001).unwrap()).unwrap();
        assert_eq!(s.t, 1);
        assert!((s.m[0].item().unwrap() - 0.1).abs() < 1e-15);
        assert!((s.v[0].item().unwrap() - 0.001).abs() < 1e-15);
        // m_hat = v_hat = 1, step = lr / (1 + eps)
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p[0].item().unwrap() - expected).abs() < 1e-15);
        assert!((p[0].item().unwrap() - 0.999).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = vec![Tensor::vector(vec![0.3, -0.2]).unwrap()];
        let g = vec![Some(Tensor::zeros(&[2]).unwrap())];
        let mut s = AdamState::for_params(&p);
        for step in 1..=3 {
            adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            assert_eq!(s.t, step);
        }
        assert_eq!(p[0].data(), &[0.3, -0.2]);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = vec![Tensor::vector(vec![0.1, 0.7, -1.3]).unwrap()];
            let mut s = AdamState::for_params(&p);
            for k in 0..5 {
                let g = vec![Some(
                    Tensor::vector(vec![0.5 * k as f64, -0.25, 1e-3]).unwrap(),
                )];
                adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            }
            (p, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a[0]), bits(&b[0]));
        assert_eq!(sa, sb);
    }

    #[test]
    fn rejects_bad_lr_and_shapes() {
        assert!(matches!(AdamConfig::new(0.0), Err(DagamError::Config(_))));
        assert!(matches!(AdamConfig::new(-1.0), Err(DagamError::Config(_))));
        let mut p = vec![Tensor::zeros(&[2]).unwrap()];
        let mut s = AdamState::for_params(&p);
        let g = vec![Some(Tensor::zeros(&[3]).unwrap())];
        assert!(matches!(
            adam_step(&mut p, &g, &mut s, &AdamConfig::default()),
            Err(DagamError::Dimension(_))
        ));
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut p = vec![Tensor::vector(vec![0.0; 4]).unwrap()];
        let mut s = AdamState::for_params(&p);
        for k in 0..20 {
            let g = vec![Some(
                Tensor::vector(vec![-(k as f64), 3.0, -0.1, 1e6]).unwrap(),
            )];
            adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            assert!(s.v[0].data().iter().all(|&v| v >= 0.0));
        }
    }
}
