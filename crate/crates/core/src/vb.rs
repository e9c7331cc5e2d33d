//! Truncated stick-breaking variational inference for the infinite
//! spherical Gaussian mixture, recorded on the autodiff graph so the
//! unrolled updates stay differentiable, plus the fixed-cluster EM
//! variant used by the ablation study.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::log_softmax_rows;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Responsibility mass below which an EM cluster counts as collapsed.
const EM_COLLAPSE_MASS: f64 = 1e-8;
/// Variance floor corresponding to the clamped precision of 1e6.
const EM_VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VbConfig {
    /// Truncation level K'.
    pub k_max: usize,
    /// Dirichlet process concentration.
    pub alpha: f64,
    /// Number of unrolled sweeps (globals then assignments).
    pub steps: usize,
    /// Small positive mass mixed into every assignment row; keeps log r
    /// finite during training, 0 for inference-only runs.
    pub assignment_floor: f64,
}

impl Default for VbConfig {
    fn default() -> Self {
        VbConfig { k_max: 10, alpha: 1.0, steps: 10, assignment_floor: 1e-6 }
    }
}

impl VbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if !(0.0..1.0 / self.k_max as f64).contains(&self.assignment_floor)
            && self.assignment_floor != 0.0
        {
            return Err(Error::Config(format!(
                "assignment_floor {} not in [0, 1/K')",
                self.assignment_floor
            )));
        }
        Ok(())
    }
}

/// Variational posterior handles. Globals are `None` until the first
/// global update populates them.
#[derive(Clone, Debug)]
pub struct VbState {
    pub gamma1: Option<Var>,
    pub gamma2: Option<Var>,
    pub theta: Option<Var>,
    pub a: Var,
    pub b: Var,
    pub r: Var,
    pub log_r: Option<Var>,
}

fn check_rows_normalized(r: &Tensor, what: &str) -> Result<()> {
    if r.shape().len() != 2 {
        return Err(Error::Contract(format!("{} must be a matrix, got {:?}", what, r.shape())));
    }
    for i in 0..r.rows() {
        let row = r.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-8 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!(
                "{} row {} is not a normalized simplex row (sum {})",
                what, i, s
            )));
        }
    }
    Ok(())
}

/// Mix the assignment floor into a normalized matrix:
/// R <- (1 - K * floor) * R + floor.
fn apply_floor(g: &mut Graph, r: Var, cfg: &VbConfig) -> Result<(Var, Option<Var>)> {
    if cfg.assignment_floor == 0.0 {
        return Ok((r, None));
    }
    let scaled = g.scale(r, 1.0 - cfg.k_max as f64 * cfg.assignment_floor)?;
    let floored = g.add_const(scaled, cfg.assignment_floor)?;
    let log_r = g.ln(floored)?;
    Ok((floored, Some(log_r)))
}

/// Fresh state: a = b = 1 for every cluster, assignments from R0 with the
/// floor mixed in; gamma and theta wait for the first global update.
pub fn init_state(g: &mut Graph, r0: Var, log_r0: Option<Var>, cfg: &VbConfig) -> Result<VbState> {
    cfg.validate()?;
    let r_t = g.value(r0).clone();
    check_rows_normalized(&r_t, "R0")?;
    if r_t.cols() != cfg.k_max {
        return Err(Error::Contract(format!(
            "R0 has {} columns, config says K' = {}",
            r_t.cols(),
            cfg.k_max
        )));
    }
    let ones = Tensor::vector(vec![1.0; cfg.k_max]);
    let a = g.leaf(ones.clone());
    let b = g.leaf(ones);
    let (r, log_floored) = apply_floor(g, r0, cfg)?;
    let log_r = log_floored.or(log_r0);
    Ok(VbState { gamma1: None, gamma2: None, theta: None, a, b, r, log_r })
}

/// Closed-form coordinate updates of the global posteriors, in listed order
/// with each update seeing the freshest values.
pub fn update_globals(g: &mut Graph, z: Var, state: &mut VbState, cfg: &VbConfig) -> Result<()> {
    let s_dim = g.value(z).cols() as f64;
    let n = g.value(z).rows();
    let r = state.r;

    let mass = g.sum_axis(r, 0)?; // per-cluster responsibility mass
    let gamma1 = g.add_const(mass, 1.0)?;
    let later_mass = g.suffix_sum_exclusive(mass)?;
    let gamma2 = g.add_const(later_mass, cfg.alpha)?;

    // theta_k = E[beta_k] sum_n r_nk z_n / (1 + E[beta_k] sum_n r_nk),
    // the coordinate-ascent maximizer over the fixed-covariance q(mu).
    let ebeta = g.div(state.a, state.b)?;
    let rt = g.transpose(r)?;
    let weighted = g.matmul(rt, z)?; // K x S
    let ebeta_cols = g.repeat_col(ebeta, g.value(z).cols())?;
    let numer = g.mul(ebeta_cols, weighted)?;
    let scaled_mass = g.mul(ebeta, mass)?;
    let denom = g.add_const(scaled_mass, 1.0)?;
    let denom_cols = g.repeat_col(denom, g.value(z).cols())?;
    let theta = g.div(numer, denom_cols)?;

    let a_new = {
        let half_s_mass = g.scale(mass, 0.5 * s_dim)?;
        g.add_const(half_s_mass, 1.0)?
    };

    let b_new = {
        let dist = g.pairwise_sq_dist(z, theta)?; // N x K
        let dist_s = g.add_const(dist, s_dim)?;
        let weighted = g.mul(r, dist_s)?;
        let col = g.sum_axis(weighted, 0)?;
        let half = g.scale(col, 0.5)?;
        g.add_const(half, 1.0)?
    };

    debug_assert_eq!(g.value(theta).shape(), &[cfg.k_max, g.value(z).cols()]);
    let _ = n;
    state.gamma1 = Some(gamma1);
    state.gamma2 = Some(gamma2);
    state.theta = Some(theta);
    state.a = a_new;
    state.b = b_new;
    Ok(())
}

struct StickExpectations {
    elog_pi: Var,
}

fn stick_expectations(g: &mut Graph, gamma1: Var, gamma2: Var) -> Result<StickExpectations> {
    let total = g.add(gamma1, gamma2)?;
    let dig1 = g.digamma_t(gamma1)?;
    let dig2 = g.digamma_t(gamma2)?;
    let digt = g.digamma_t(total)?;
    let elog_eta = g.sub(dig1, digt)?;
    let elog_1m = g.sub(dig2, digt)?;
    let carried = g.prefix_sum_exclusive(elog_1m)?;
    let elog_pi = g.add(elog_eta, carried)?;
    Ok(StickExpectations { elog_pi })
}

/// Coordinate-ascent assignment update: softmax over
/// E[log pi_k] + (S/2)(psi(a_k) - log b_k) - (a_k / 2 b_k)(|z_n - theta_k|^2 + S).
pub fn update_assignments(g: &mut Graph, z: Var, state: &mut VbState, cfg: &VbConfig) -> Result<()> {
    let (gamma1, gamma2, theta) = match (state.gamma1, state.gamma2, state.theta) {
        (Some(g1), Some(g2), Some(t)) => (g1, g2, t),
        _ => return Err(Error::Contract("update_assignments before any global update".into())),
    };
    let s_dim = g.value(z).cols() as f64;
    let n = g.value(z).rows();

    let sticks = stick_expectations(g, gamma1, gamma2)?;
    let dig_a = g.digamma_t(state.a)?;
    let ln_b = g.ln(state.b)?;
    let elog_beta = g.sub(dig_a, ln_b)?;
    let half_s_elog = g.scale(elog_beta, 0.5 * s_dim)?;
    let base = g.add(sticks.elog_pi, half_s_elog)?; // per-cluster offsets

    let b2 = g.scale(state.b, 2.0)?;
    let coef = g.div(state.a, b2)?;
    let dist = g.pairwise_sq_dist(z, theta)?;
    let dist_s = g.add_const(dist, s_dim)?;
    let coef_rows = g.repeat_row(coef, n)?;
    let penalty = g.mul(coef_rows, dist_s)?;
    let base_rows = g.repeat_row(base, n)?;
    let logits = g.sub(base_rows, penalty)?;

    let logits_t = g.value(logits);
    if let Some(pos) = logits_t.data().iter().position(|v| !v.is_finite()) {
        let k = pos % cfg.k_max;
        return Err(Error::numeric(
            "update_assignments",
            format!("non-finite logit for cluster {}", k),
        ));
    }

    let (r, log_r) = log_softmax_rows(g, logits)?;
    let (r, log_floored) = apply_floor(g, r, cfg)?;
    state.r = r;
    state.log_r = Some(log_floored.unwrap_or(log_r));
    Ok(())
}

/// Truncated evidence lower bound of the current state.
pub fn elbo(g: &mut Graph, z: Var, state: &VbState, cfg: &VbConfig) -> Result<Var> {
    let (gamma1, gamma2, theta) = match (state.gamma1, state.gamma2, state.theta) {
        (Some(g1), Some(g2), Some(t)) => (g1, g2, t),
        _ => return Err(Error::Contract("elbo requires populated globals".into())),
    };
    let s_dim = g.value(z).cols() as f64;
    let n = g.value(z).rows();
    let log_r = match state.log_r {
        Some(lr) => lr,
        None => g.ln(state.r)?,
    };

    // expected complete-data log likelihood under q
    let sticks = stick_expectations(g, gamma1, gamma2)?;
    let dig_a = g.digamma_t(state.a)?;
    let ln_b = g.ln(state.b)?;
    let elog_beta = g.sub(dig_a, ln_b)?;
    let half_s_elog = g.scale(elog_beta, 0.5 * s_dim)?;
    let base = g.add(sticks.elog_pi, half_s_elog)?;
    let base = g.add_const(base, -0.5 * s_dim * LN_2PI)?;

    let ebeta = g.div(state.a, state.b)?;
    let coef = g.scale(ebeta, 0.5)?;
    let dist = g.pairwise_sq_dist(z, theta)?;
    let dist_s = g.add_const(dist, s_dim)?;
    let coef_rows = g.repeat_row(coef, n)?;
    let penalty = g.mul(coef_rows, dist_s)?;

    let base_rows = g.repeat_row(base, n)?;
    let per_nk = g.sub(base_rows, penalty)?;
    let per_nk = g.sub(per_nk, log_r)?;
    let weighted = g.mul(state.r, per_nk)?;
    let ll = g.sum_all(weighted)?;

    // KL(Beta(g1,g2) || Beta(1,alpha)) per stick
    let total = g.add(gamma1, gamma2)?;
    let dig1 = g.digamma_t(gamma1)?;
    let dig2 = g.digamma_t(gamma2)?;
    let digt = g.digamma_t(total)?;
    let elog_eta = g.sub(dig1, digt)?;
    let elog_1m = g.sub(dig2, digt)?;
    let lg_total = g.ln_gamma_t(total)?;
    let lg1 = g.ln_gamma_t(gamma1)?;
    let lg2 = g.ln_gamma_t(gamma2)?;
    let log_b_norm = {
        let d = g.sub(lg_total, lg1)?;
        g.sub(d, lg2)?
    };
    let g1m1 = g.add_const(gamma1, -1.0)?;
    let t1 = g.mul(g1m1, elog_eta)?;
    let g2ma = g.add_const(gamma2, -cfg.alpha)?;
    let t2 = g.mul(g2ma, elog_1m)?;
    let kl_beta_k = {
        let s = g.add(log_b_norm, t1)?;
        let s = g.add(s, t2)?;
        g.add_const(s, cfg.alpha.ln())?
    };
    let kl_beta = g.sum_all(kl_beta_k)?;

    // KL(N(theta, I) || N(0, I)) = |theta|^2 / 2
    let theta_sq = g.mul(theta, theta)?;
    let theta_norm = g.sum_all(theta_sq)?;
    let kl_mu = g.scale(theta_norm, 0.5)?;

    // KL(Gamma(a,b) || Gamma(1,1)) = (a-1) psi(a) - ln Gamma(a) + ln b + a/b - a
    let am1 = g.add_const(state.a, -1.0)?;
    let t_dig = g.mul(am1, dig_a)?;
    let lg_a = g.ln_gamma_t(state.a)?;
    let a_over_b = g.div(state.a, state.b)?;
    let kl_gamma_k = {
        let s = g.sub(t_dig, lg_a)?;
        let s = g.add(s, ln_b)?;
        let s = g.add(s, a_over_b)?;
        g.sub(s, state.a)?
    };
    let kl_gamma = g.sum_all(kl_gamma_k)?;

    let kl = g.add(kl_beta, kl_mu)?;
    let kl = g.add(kl, kl_gamma)?;
    g.sub(ll, kl)
}

/// One recorded ELBO evaluation per sweep.
pub struct ElboStep {
    pub var: Var,
    pub value: f64,
}

/// Unrolled VB loop: `steps` sweeps of globals-then-assignments, with the
/// ELBO evaluated after each sweep. Everything is recorded on `g`.
pub fn run_vb(
    g: &mut Graph,
    z: Var,
    r0: Var,
    log_r0: Option<Var>,
    cfg: &VbConfig,
) -> Result<(VbState, Vec<ElboStep>)> {
    let mut state = init_state(g, r0, log_r0, cfg)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        update_globals(g, z, &mut state, cfg)?;
        update_assignments(g, z, &mut state, cfg)?;
        let e = elbo(g, z, &state, cfg)?;
        trace.push(ElboStep { var: e, value: g.scalar_value(e) });
    }
    Ok((state, trace))
}

/// Outcome of the differentiable EM variant.
pub struct EmOutcome {
    pub r: Var,
    pub log_lik: Vec<f64>,
    /// true when any cluster collapsed and had its precision clamped
    pub collapsed: bool,
}

/// Fixed-K spherical-GMM EM with maximum-likelihood M-steps, recorded on
/// the graph like the VB loop. Collapsed clusters (mass below 1e-8) have
/// their precision clamped at 1e6 and are flagged.
pub fn run_em(g: &mut Graph, z: Var, r0: Var, steps: usize) -> Result<EmOutcome> {
    let r0_t = g.value(r0).clone();
    check_rows_normalized(&r0_t, "R0")?;
    let k = r0_t.cols();
    let n = r0_t.rows();
    let s_dim = g.value(z).cols();
    if g.value(z).rows() != n {
        return Err(Error::Contract(format!(
            "Z has {} rows, R0 has {}",
            g.value(z).rows(),
            n
        )));
    }

    let mut r = r0;
    let mut collapsed = false;
    let mut log_lik = Vec::with_capacity(steps);

    for _ in 0..steps {
        // M-step
        let mass = g.sum_axis(r, 0)?;
        let mass_t = g.value(mass).clone();
        let dead: Vec<bool> = mass_t.data().iter().map(|&m| m < EM_COLLAPSE_MASS).collect();
        if dead.iter().any(|&d| d) {
            collapsed = true;
        }
        let live_mask = g.leaf(Tensor::vector(
            dead.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect(),
        ));
        let dead_ones = g.leaf(Tensor::vector(
            dead.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect(),
        ));
        let mass_live = g.mul(mass, live_mask)?;
        let mass_safe = g.add(mass_live, dead_ones)?;

        let pi = g.scale(mass, 1.0 / n as f64)?;
        // dead clusters get a vanishing but finite mixing weight
        let pi_live = g.mul(pi, live_mask)?;
        let dead_tiny = g.scale(dead_ones, 1e-300)?;
        let pi_safe = g.add(pi_live, dead_tiny)?;

        let rt = g.transpose(r)?;
        let weighted = g.matmul(rt, z)?;
        let mass_cols = g.repeat_col(mass_safe, s_dim)?;
        let mu = g.div(weighted, mass_cols)?;

        let dist = g.pairwise_sq_dist(z, mu)?;
        let rd = g.mul(r, dist)?;
        let ss = g.sum_axis(rd, 0)?;
        let denom = g.scale(mass_safe, s_dim as f64)?;
        let sig2_raw = g.div(ss, denom)?;

        // precision clamp (variance floor) for collapsed or degenerate fits
        let sig2_t = g.value(sig2_raw).clone();
        let clamp: Vec<bool> = sig2_t
            .data()
            .iter()
            .zip(&dead)
            .map(|(&v, &d)| d || v < EM_VAR_FLOOR)
            .collect();
        let sig2 = if clamp.iter().any(|&c| c) {
            collapsed = true;
            let keep = g.leaf(Tensor::vector(
                clamp.iter().map(|&c| if c { 0.0 } else { 1.0 }).collect(),
            ));
            let floor = g.leaf(Tensor::vector(
                clamp.iter().map(|&c| if c { EM_VAR_FLOOR } else { 0.0 }).collect(),
            ));
            let kept = g.mul(sig2_raw, keep)?;
            g.add(kept, floor)?
        } else {
            sig2_raw
        };

        // E-step
        let ln_pi = g.ln(pi_safe)?;
        let ln_sig = g.ln(sig2)?;
        let ln_norm = g.add_const(ln_sig, LN_2PI)?;
        let half_s_ln = g.scale(ln_norm, -(s_dim as f64) / 2.0)?;
        let offsets = g.add(ln_pi, half_s_ln)?;
        let halves = g.leaf(Tensor::vector(vec![0.5; k]));
        let coef = g.div(halves, sig2)?;
        let coef_rows = g.repeat_row(coef, n)?;
        let penalty = g.mul(coef_rows, dist)?;
        let offset_rows = g.repeat_row(offsets, n)?;
        let logits = g.sub(offset_rows, penalty)?;
        let lse = g.log_sum_exp_rows(logits)?;
        let ll = g.sum_all(lse)?;
        log_lik.push(g.scalar_value(ll));
        let (r_new, _) = log_softmax_rows(g, logits)?;
        r = r_new;
    }

    Ok(EmOutcome { r, log_lik, collapsed })
}

/// Argmax of each assignment row; ties break to the lowest cluster index.
pub fn hard_assignments(r: &Tensor) -> Vec<usize> {
    let (n, k) = (r.rows(), r.cols());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = r.row(i);
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        labels.push(best);
    }
    labels
}

/// Number of clusters carrying more than `min_mass` total responsibility.
pub fn populated_clusters(r: &Tensor, min_mass: f64) -> usize {
    let (n, k) = (r.rows(), r.cols());
    let mut count = 0;
    for j in 0..k {
        let mass: f64 = (0..n).map(|i| r.get2(i, j)).sum();
        if mass > min_mass {
            count += 1;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn uniform_r0(n: usize, k: usize) -> Tensor {
        Tensor::filled(&[n, k], 1.0 / k as f64)
    }

    fn random_simplex_rows(n: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            rows.push(raw.into_iter().map(|v| v / s).collect());
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn init_state_sets_unit_gamma_prior_params() {
        let mut g = Graph::new();
        let cfg = VbConfig { k_max: 3, assignment_floor: 0.0, ..Default::default() };
        let r0 = g.leaf(uniform_r0(4, 3));
        let state = init_state(&mut g, r0, None, &cfg).unwrap();
        assert_eq!(g.value(state.a).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.value(state.b).data(), &[1.0, 1.0, 1.0]);
        assert!(state.gamma1.is_none() && state.theta.is_none());
        // floor 0 leaves R0 untouched
        assert_eq!(g.value(state.r).data(), uniform_r0(4, 3).data());
    }

    #[test]
    fn init_state_rejects_unnormalized_rows() {
        let mut g = Graph::new();
        let cfg = VbConfig { k_max: 2, ..Default::default() };
        let r0 = g.leaf(Tensor::from_rows(&[vec![0.9, 0.3]]).unwrap());
        assert!(init_state(&mut g, r0, None, &cfg).is_err());
    }

    #[test]
    fn floor_mixing_preserves_normalization() {
        let mut g = Graph::new();
        let cfg = VbConfig { k_max: 2, assignment_floor: 1e-3, ..Default::default() };
        let r0 = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let state = init_state(&mut g, r0, None, &cfg).unwrap();
        let r = g.value(state.r);
        assert_abs_diff_eq!(r.row(0).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(r.data().iter().all(|&v| v >= 1e-3 - 1e-15));
        assert!(state.log_r.is_some());
    }

    #[test]
    fn global_update_hand_example() {
        // N=2, K'=2, R=[[1,0],[1,0]], alpha=1
        let mut g = Graph::new();
        let cfg = VbConfig { k_max: 2, steps: 1, assignment_floor: 0.0, ..Default::default() };
        let z = g.leaf(
            Tensor::from_rows(&[
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            ])
            .unwrap(),
        );
        let r0 = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let mut state = init_state(&mut g, r0, None, &cfg).unwrap();
        update_globals(&mut g, z, &mut state, &cfg).unwrap();

        assert_eq!(g.value(state.gamma1.unwrap()).data(), &[3.0, 1.0]);
        assert_eq!(g.value(state.gamma2.unwrap()).data(), &[1.0, 1.0]);
        // S = 10: a_1 = 1 + (10/2) * 2 = 11, a_2 = 1
        assert_eq!(g.value(state.a).data(), &[11.0, 1.0]);
        // symmetric points cancel: theta_1 = 0
        let theta = g.value(state.theta.unwrap());
        for &v in theta.row(0) {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_cluster_assignments_are_one() {
        let mut g = Graph::new();
        let cfg = VbConfig { k_max: 1, steps: 1, assignment_floor: 0.0, ..Default::default() };
        let z = g.leaf(Tensor::from_rows(&[vec![0.3, -0.8], vec![1.2, 0.4]]).unwrap());
        let r0 = g.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let (state, _) = run_vb(&mut g, z, r0, None, &cfg).unwrap();
        for &v in g.value(state.r).data() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn assignment_rows_stay_normalized() {
        let mut rng = crate::rng::seeded(5);
        let mut g = Graph::new();
        let cfg = VbConfig { k_max: 6, steps: 4, assignment_floor: 0.0, ..Default::default() };
        let z_rows: Vec<Vec<f64>> =
            (0..9).map(|_| (0..3).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()).collect();
        let z = g.leaf(Tensor::from_rows(&z_rows).unwrap());
        let r0 = g.leaf(random_simplex_rows(9, 6, &mut rng));
        let (state, _) = run_vb(&mut g, z, r0, None, &cfg).unwrap();
        let r = g.value(state.r);
        for i in 0..9 {
            assert_abs_diff_eq!(r.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn near_cluster_wins_assignment() {
        // equal gamma, a, b; theta_2 at distance 100 -> row prefers cluster 1
        let mut g = Graph::new();
        let cfg = VbConfig { k_max: 2, assignment_floor: 0.0, ..Default::default() };
        let z = g.leaf(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let r0 = g.leaf(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let mut state = init_state(&mut g, r0, None, &cfg).unwrap();
        state.gamma1 = Some(g.leaf(Tensor::vector(vec![2.0, 2.0])));
        state.gamma2 = Some(g.leaf(Tensor::vector(vec![2.0, 2.0])));
        state.theta = Some(g.leaf(
            Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![100.0, 0.0, 0.0]]).unwrap(),
        ));
        state.a = g.leaf(Tensor::vector(vec![3.0, 3.0]));
        state.b = g.leaf(Tensor::vector(vec![4.0, 4.0]));
        update_assignments(&mut g, z, &mut state, &cfg).unwrap();
        let r = g.value(state.r);
        assert!(r.get2(0, 0) > r.get2(0, 1));
        assert_eq!(hard_assignments(r), vec![0]);
    }

    #[test]
    fn steps_zero_returns_initial_state() {
        let mut g = Graph::new();
        let cfg = VbConfig { k_max: 3, steps: 0, assignment_floor: 0.0, ..Default::default() };
        let z = g.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let r0_t = uniform_r0(2, 3);
        let r0 = g.leaf(r0_t.clone());
        let (state, trace) = run_vb(&mut g, z, r0, None, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(g.value(state.r).data(), r0_t.data());
        assert!(state.gamma1.is_none());
    }

    #[test]
    fn elbo_trace_is_monotone_on_random_problems() {
        let mut rng = crate::rng::seeded(17);
        for trial in 0..20 {
            let n = rng.gen_range(2..=20);
            let s = rng.gen_range(1..=6);
            let mut g = Graph::new();
            let cfg = VbConfig { k_max: 10, steps: 6, assignment_floor: 0.0, ..Default::default() };
            let z_rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..s).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect())
                .collect();
            let z = g.leaf(Tensor::from_rows(&z_rows).unwrap());
            let r0 = g.leaf(random_simplex_rows(n, 10, &mut rng));
            let (_, trace) = run_vb(&mut g, z, r0, None, &cfg).unwrap();
            for w in trace.windows(2) {
                assert!(
                    w[1].value >= w[0].value - 1e-8,
                    "trial {}: ELBO decreased from {} to {}",
                    trial,
                    w[0].value,
                    w[1].value
                );
            }
        }
    }

    #[test]
    fn single_cluster_single_instance_closed_form_elbo() {
        // K'=1, one instance at the origin, S=2, alpha=1, one sweep.
        // After the sweep gamma = (2,1), theta = 0, a = b = 2, r = [1];
        // substituting into the bound term by term collapses to
        //   ELBO = -(4 ln 2 + ln pi).
        let mut g = Graph::new();
        let cfg = VbConfig { k_max: 1, steps: 1, assignment_floor: 0.0, ..Default::default() };
        let z = g.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let r0 = g.leaf(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let (_, trace) = run_vb(&mut g, z, r0, None, &cfg).unwrap();
        let expected = -(4.0 * std::f64::consts::LN_2 + std::f64::consts::PI.ln());
        assert_abs_diff_eq!(trace[0].value, expected, epsilon = 1e-9);
    }

    #[test]
    fn elbo_finite_under_scaling() {
        let mut rng = crate::rng::seeded(3);
        let rows: Vec<Vec<f64>> =
            (0..8).map(|_| (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).collect();
        for scale in [1.0, 2.0] {
            let mut g = Graph::new();
            let cfg = VbConfig { k_max: 5, steps: 3, assignment_floor: 0.0, ..Default::default() };
            let scaled: Vec<Vec<f64>> =
                rows.iter().map(|r| r.iter().map(|&v| v * scale).collect()).collect();
            let z = g.leaf(Tensor::from_rows(&scaled).unwrap());
            let r0 = g.leaf(uniform_r0(8, 5));
            let (_, trace) = run_vb(&mut g, z, r0, None, &cfg).unwrap();
            assert!(trace.iter().all(|s| s.value.is_finite()));
        }
    }

    #[test]
    fn posterior_parameter_bounds_hold() {
        let mut rng = crate::rng::seeded(29);
        for _ in 0..20 {
            let n = rng.gen_range(2..=30);
            let s_dim = rng.gen_range(1..=8);
            let k = 10usize;
            let mut g = Graph::new();
            let cfg = VbConfig { k_max: k, steps: 3, assignment_floor: 0.0, ..Default::default() };
            let z_rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..s_dim).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let z = g.leaf(Tensor::from_rows(&z_rows).unwrap());
            let r0 = g.leaf(random_simplex_rows(n, k, &mut rng));
            let (state, _) = run_vb(&mut g, z, r0, None, &cfg).unwrap();
            let nf = n as f64;
            for &v in g.value(state.gamma1.unwrap()).data() {
                assert!(v >= 1.0 - 1e-12 && v <= 1.0 + nf + 1e-9);
            }
            for &v in g.value(state.gamma2.unwrap()).data() {
                assert!(v >= cfg.alpha - 1e-12 && v <= cfg.alpha + nf * k as f64 + 1e-9);
            }
            for &v in g.value(state.a).data() {
                assert!(v >= 1.0 - 1e-12 && v <= 1.0 + nf * s_dim as f64 / 2.0 + 1e-9);
            }
            for &v in g.value(state.b).data() {
                assert!(v >= 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn empty_trailing_clusters_leave_leading_argmax_unchanged() {
        // two well separated points, K'=2 base vs K'=6 with matched priors
        let run = |k: usize| -> Vec<usize> {
            let mut g = Graph::new();
            let cfg = VbConfig { k_max: k, steps: 8, assignment_floor: 0.0, ..Default::default() };
            let z = g.leaf(
                Tensor::from_rows(&[
                    vec![5.0, 0.0],
                    vec![5.1, 0.1],
                    vec![-5.0, 0.0],
                    vec![-5.1, -0.1],
                ])
                .unwrap(),
            );
            let mut rows = Vec::new();
            for i in 0..4 {
                let mut row = vec![0.0; k];
                row[i % 2] = 1.0;
                rows.push(row);
            }
            let r0 = g.leaf(Tensor::from_rows(&rows).unwrap());
            let (state, _) = run_vb(&mut g, z, r0, None, &cfg).unwrap();
            hard_assignments(g.value(state.r))
        };
        let base = run(2);
        let extended = run(6);
        assert_eq!(base, extended);
    }

    #[test]
    fn em_steps_zero_returns_r0() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        let r0_t = uniform_r0(2, 2);
        let r0 = g.leaf(r0_t.clone());
        let out = run_em(&mut g, z, r0, 0).unwrap();
        assert_eq!(g.value(out.r).data(), r0_t.data());
        assert!(out.log_lik.is_empty());
    }

    #[test]
    fn em_separates_two_blobs() {
        let mut rng = crate::rng::seeded(8);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..30 {
            let c = i % 2;
            let center = if c == 0 { -6.0 } else { 6.0 };
            rows.push(vec![
                center + rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ]);
            y.push(c);
        }
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_rows(&rows).unwrap());
        let r0 = g.leaf(random_simplex_rows(30, 2, &mut rng));
        let out = run_em(&mut g, z, r0, 20).unwrap();
        let labels = hard_assignments(g.value(out.r));
        let score = crate::metrics::ari_labels(&y, &labels).unwrap();
        assert!(score >= 0.999, "EM ARI {}", score);
        for w in out.log_lik.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "log-likelihood decreased: {:?}", out.log_lik);
        }
    }

    #[test]
    fn hard_assignment_examples() {
        let r = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(hard_assignments(&r), vec![0, 1]);
        let uniform = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(hard_assignments(&uniform), vec![0]);
        let onehot = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(hard_assignments(&onehot), vec![1, 0]);
    }
}
