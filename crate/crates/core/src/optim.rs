//! SGD with classical momentum and global-norm clipping.

use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::params::Params;

/// What a member with no assigned samples does in a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IdlePolicy {
    /// Zero gradient; the velocity keeps decaying and is still applied.
    #[default]
    Decay,
    /// Parameters and velocity are left untouched.
    Freeze,
}

impl IdlePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decay" => Ok(IdlePolicy::Decay),
            "freeze" => Ok(IdlePolicy::Freeze),
            other => Err(Error::Config(format!("unknown idle policy {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IdlePolicy::Decay => "decay",
            IdlePolicy::Freeze => "freeze",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global L2 threshold; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub idle: IdlePolicy,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            momentum: 0.9,
            clip_norm: 5.0,
            batch_size: 32,
            idle: IdlePolicy::Decay,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

fn check_shapes<T: Real, P: Params<T>>(a: &P, b: &P, what: &'static str) -> Result<()> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() || ta.iter().zip(&tb).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::Shape {
            op: what,
            left: (ta.len(), a.num_params()),
            right: (tb.len(), b.num_params()),
        });
    }
    Ok(())
}

/// `v ← λv + η·clip(g)`, `θ ← θ − v`. Returns the gradient norm before
/// clipping.
pub fn sgd_momentum_update<T: Real, P: Params<T>>(
    params: &mut P,
    grads: &P,
    velocity: &mut P,
    opt: &OptimizerConfig,
) -> Result<f64> {
    check_shapes(params, grads, "gradient shape")?;
    check_shapes(params, velocity, "velocity shape")?;
    let norm = grads.l2_norm();
    let clip = if norm > opt.clip_norm { opt.clip_norm / norm } else { 1.0 };
    let step = T::of(opt.learning_rate * clip);
    let lambda = T::of(opt.momentum);
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = lambda * *v + step * g;
            *p -= *v;
        }
    }
    Ok(norm)
}

/// Update for a member that received no samples this step.
pub fn idle_update<T: Real, P: Params<T>>(params: &mut P, velocity: &mut P, opt: &OptimizerConfig) -> Result<()> {
    check_shapes(params, velocity, "velocity shape")?;
    if opt.idle == IdlePolicy::Freeze {
        return Ok(());
    }
    let lambda = T::of(opt.momentum);
    for (p, v) in params.tensors_mut().into_iter().zip(velocity.tensors_mut()) {
        for (p, v) in p.iter_mut().zip(v.iter_mut()) {
            *v = lambda * *v;
            *p -= *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Flat(Vec<f64>);

    impl Params<f64> for Flat {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    fn opt(lr: f64, momentum: f64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: lr,
            momentum,
            clip_norm: f64::INFINITY,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_zero_velocity_is_a_no_op() {
        let mut p = Flat(vec![1.5f64, -2.0]);
        let g = Flat(vec![0.0f64, 0.0]);
        let mut v = Flat(vec![0.0f64, 0.0]);
        sgd_momentum_update(&mut p, &g, &mut v, &OptimizerConfig::default()).unwrap();
        assert_eq!(p, Flat(vec![1.5, -2.0]));
    }

    #[test]
    fn no_momentum_is_plain_sgd() {
        let mut p = Flat(vec![1.0f64, 2.0, 3.0]);
        let g = Flat(vec![0.5f64, -1.0, 2.0]);
        let mut v = Flat(vec![0.0f64; 3]);
        sgd_momentum_update(&mut p, &g, &mut v, &opt(0.1, 0.0)).unwrap();
        assert_eq!(p.0, vec![1.0 - 0.1 * 0.5, 2.0 + 0.1, 3.0 - 0.1 * 2.0]);
    }

    #[test]
    fn second_step_moves_one_point_nine_g() {
        // Step 1: v = g, θ -= g. Step 2: v = 0.9g + g = 1.9g.
        let g = Flat(vec![0.25f64, -4.0]);
        let mut p = Flat(vec![0.0f64, 0.0]);
        let mut v = Flat(vec![0.0f64, 0.0]);
        let o = opt(1.0, 0.9);
        sgd_momentum_update(&mut p, &g, &mut v, &o).unwrap();
        let before = p.clone();
        sgd_momentum_update(&mut p, &g, &mut v, &o).unwrap();
        for i in 0..2 {
            let delta = before.0[i] - p.0[i];
            assert!((delta - 1.9 * g.0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_caps_the_step() {
        let g = Flat(vec![3.0f64, 4.0]);
        let mut p = Flat(vec![0.0f64, 0.0]);
        let mut v = Flat(vec![0.0f64, 0.0]);
        let o = OptimizerConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            clip_norm: 1.0,
            ..Default::default()
        };
        let norm = sgd_momentum_update(&mut p, &g, &mut v, &o).unwrap();
        assert_eq!(norm, 5.0);
        assert!((p.0[0] + 0.6).abs() < 1e-12 && (p.0[1] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn idle_policies() {
        let mut p = Flat(vec![1.0f64]);
        let mut v = Flat(vec![0.5f64]);
        let mut o = opt(0.1, 0.5);
        idle_update(&mut p, &mut v, &o).unwrap();
        assert_eq!((p.0[0], v.0[0]), (0.75, 0.25));
        o.idle = IdlePolicy::Freeze;
        idle_update(&mut p, &mut v, &o).unwrap();
        assert_eq!((p.0[0], v.0[0]), (0.75, 0.25));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Flat(vec![1.0f64, 2.0]);
        let g = Flat(vec![1.0f64]);
        let mut v = Flat(vec![0.0f64, 0.0]);
        assert!(sgd_momentum_update(&mut p, &g, &mut v, &OptimizerConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(opt(0.0, 0.9).validate().is_err());
        assert!(opt(0.1, 1.0).validate().is_err());
    }
}
