//! Bias-corrected Adam over named parameter tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, ParamMap, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates mirroring the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamMap,
    pub v: ParamMap,
    pub step: u64,
    /// episodes skipped because a gradient was non-finite
    pub skipped_non_finite: u64,
}

impl AdamState {
    pub fn new(params: &ParamMap) -> Self {
        let zeros: ParamMap =
            params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0, skipped_non_finite: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

/// One Adam update in place. A non-finite gradient skips the whole episode:
/// parameters and moments stay untouched, only the skip counter moves.
pub fn adam_step(
    params: &mut ParamMap,
    grads: &GradientMap,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {:?}", name)))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{}: {:?} vs {:?}", name, g.shape(), p.shape()),
            ));
        }
        if !g.all_finite() {
            state.skipped_non_finite += 1;
            return Ok(StepOutcome::SkippedNonFinite);
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let m = state.m.get_mut(name).expect("moment mirrors params");
        let v = state.v.get_mut(name).expect("moment mirrors params");
        let p = params.get_mut(name).unwrap();
        for ((pi, mi), (vi, &gi)) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(g.data()))
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(StepOutcome::Applied)
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradientMap, max_norm: f64) {
    let mut sq = 0.0;
    for g in grads.values() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(value: f64) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("w".into(), Tensor::vector(vec![value]));
        p
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params_unchanged() {
        let mut params = single(0.5);
        let mut state = AdamState::new(&params);
        let mut grads = GradientMap::new();
        grads.insert("w".into(), Tensor::vector(vec![0.0]));
        let out = adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::Applied);
        assert_eq!(params["w"].data(), &[0.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected m_hat / sqrt(v_hat) = sign(g) on the first step
        let mut params = single(0.0);
        let mut state = AdamState::new(&params);
        let mut grads = GradientMap::new();
        grads.insert("w".into(), Tensor::vector(vec![3.7]));
        let cfg = AdamConfig::default();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert_abs_diff_eq!(params["w"].data()[0], -cfg.learning_rate, epsilon = 1e-6);
    }

    #[test]
    fn non_finite_gradient_skips_episode() {
        let mut params = single(1.0);
        let mut state = AdamState::new(&params);
        let mut grads = GradientMap::new();
        grads.insert("w".into(), Tensor::vector(vec![f64::NAN]));
        let out = adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(params["w"].data(), &[1.0]);
        assert_eq!(state.step, 0);
        assert_eq!(state.skipped_non_finite, 1);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut params = single(0.3);
            let mut state = AdamState::new(&params);
            let cfg = AdamConfig::default();
            for i in 0..50 {
                let mut grads = GradientMap::new();
                grads.insert("w".into(), Tensor::vector(vec![(i as f64 * 0.37).sin()]));
                adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            }
            params["w"].data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut grads = GradientMap::new();
        grads.insert("a".into(), Tensor::vector(vec![3.0, 4.0]));
        clip_global_norm(&mut grads, 1.0);
        let norm: f64 = grads["a"].data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        // under the cap nothing changes
        let mut small = GradientMap::new();
        small.insert("a".into(), Tensor::vector(vec![0.1]));
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"].data(), &[0.1]);
    }
}
