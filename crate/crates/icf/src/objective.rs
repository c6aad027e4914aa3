//! The selectivity objective and its training machinery.
//!
//! Selectivity scores how well the executed factor explains the observed
//! latent variation relative to the pool average:
//! S = log(A(h', h, phi_behavior) + eps) - log(mean_i A(h', h, phi_i) + eps).
//! Its empirical mean is a Donsker-Varadhan style lower bound on the
//! conditional mutual information I(phi; h' | h).

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{IcfError, Result};
use serde::{Deserialize, Serialize};

/// Epsilon inside entropy logs.
pub const ENTROPY_EPS: f64 = 1e-8;
/// Default importance-weight clip.
pub const DEFAULT_W_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    RectifiedInner,
}

/// Attribution-score kernel A(h', h, phi).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Gaussian width; ignored by the rectified kernel.
    pub sigma: f64,
    /// Added inside both selectivity logs so exact-zero scores stay defined.
    pub eps_floor: f64,
}

impl KernelSpec {
    /// Gaussian kernel with sigma = sqrt(latent_dim).
    pub fn gaussian(latent_dim: usize) -> Self {
        KernelSpec {
            kind: KernelKind::Gaussian,
            sigma: (latent_dim as f64).sqrt(),
            eps_floor: 1e-8,
        }
    }

    pub fn rectified() -> Self {
        KernelSpec {
            kind: KernelKind::RectifiedInner,
            sigma: 1.0,
            eps_floor: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(IcfError::Config(format!(
                "kernel sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.eps_floor < 0.0 {
            return Err(IcfError::Config("eps_floor must be nonnegative".into()));
        }
        Ok(())
    }
}

fn check_dims(a: &[usize], b: &[usize], context: &'static str) -> Result<()> {
    if a != b {
        return Err(IcfError::ShapeMismatch {
            context,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// A(h', h, phi) as a differentiable node.
///
/// gaussian: exp(-||h' - (h + phi)||^2 / (2 sigma^2));
/// rectified_inner: max{0, <h' - h, phi>}.
pub fn kernel_score(
    tape: &mut Tape,
    h_prime: NodeId,
    h: NodeId,
    phi: NodeId,
    spec: &KernelSpec,
) -> Result<NodeId> {
    check_dims(
        tape.value(h_prime).shape(),
        tape.value(h).shape(),
        "kernel_score h' vs h",
    )?;
    check_dims(
        tape.value(h).shape(),
        tape.value(phi).shape(),
        "kernel_score h vs phi",
    )?;
    match spec.kind {
        KernelKind::Gaussian => {
            let target = tape.add(h, phi)?;
            let d2 = tape.squared_distance(h_prime, target)?;
            let scaled = tape.scale(d2, -1.0 / (2.0 * spec.sigma * spec.sigma));
            Ok(tape.exp(scaled))
        }
        KernelKind::RectifiedInner => {
            let dh = tape.sub(h_prime, h)?;
            let inner = tape.dot(dh, phi)?;
            Ok(tape.relu(inner))
        }
    }
}

/// Value-level kernel score on plain tensors.
pub fn kernel_score_value(
    h_prime: &Tensor,
    h: &Tensor,
    phi: &Tensor,
    spec: &KernelSpec,
) -> Result<f64> {
    check_dims(h_prime.shape(), h.shape(), "kernel_score h' vs h")?;
    check_dims(h.shape(), phi.shape(), "kernel_score h vs phi")?;
    match spec.kind {
        KernelKind::Gaussian => {
            let d2: f64 = h_prime
                .data()
                .iter()
                .zip(h.data())
                .zip(phi.data())
                .map(|((&hp, &hh), &p)| {
                    let d = hp - (hh + p);
                    d * d
                })
                .sum();
            Ok((-d2 / (2.0 * spec.sigma * spec.sigma)).exp())
        }
        KernelKind::RectifiedInner => {
            let inner: f64 = h_prime
                .data()
                .iter()
                .zip(h.data())
                .zip(phi.data())
                .map(|((&hp, &hh), &p)| (hp - hh) * p)
                .sum();
            Ok(inner.max(0.0))
        }
    }
}

/// Selectivity computed on detached score values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectivityValue {
    pub value: f64,
    /// Every score in the pool sat below the epsilon floor (possible with the
    /// rectified kernel); the value degrades gracefully to 0.
    pub degenerate_pool: bool,
}

pub fn selectivity_value(
    behavior_score: f64,
    pool_scores: &[f64],
    spec: &KernelSpec,
) -> Result<SelectivityValue> {
    if pool_scores.len() < 2 {
        return Err(IcfError::Degenerate(format!(
            "selectivity needs a pool of at least 2 factors, got {}",
            pool_scores.len()
        )));
    }
    let mean = pool_scores.iter().sum::<f64>() / pool_scores.len() as f64;
    let degenerate = pool_scores.iter().all(|&s| s <= spec.eps_floor) && behavior_score <= spec.eps_floor;
    if degenerate && spec.eps_floor == 0.0 {
        return Ok(SelectivityValue {
            value: 0.0,
            degenerate_pool: true,
        });
    }
    Ok(SelectivityValue {
        value: (behavior_score + spec.eps_floor).ln() - (mean + spec.eps_floor).ln(),
        degenerate_pool: degenerate,
    })
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

/// Differentiable selectivity over score nodes (pathwise gradient path).
pub fn selectivity_node(
    tape: &mut Tape,
    behavior_score: NodeId,
    pool_scores: &[NodeId],
    spec: &KernelSpec,
) -> Result<NodeId> {
    if pool_scores.len() < 2 {
        return Err(IcfError::Degenerate(format!(
            "selectivity needs a pool of at least 2 factors, got {}",
            pool_scores.len()
        )));
    }
    let total = sum_nodes(tape, pool_scores)?;
    let mean = tape.scale(total, 1.0 / pool_scores.len() as f64);
    let log_b = tape.log(behavior_score, spec.eps_floor)?;
    let log_m = tape.log(mean, spec.eps_floor)?;
    tape.sub(log_b, log_m)
}

/// H(p) = -sum p log(p + eps), differentiable.
pub fn entropy(tape: &mut Tape, dist: NodeId) -> Result<NodeId> {
    let lp = tape.log(dist, ENTROPY_EPS)?;
    let plp = tape.mul(dist, lp)?;
    let s = tape.sum(plp);
    Ok(tape.neg(s))
}

pub fn entropy_value(p: &[f64]) -> f64 {
    -p.iter().map(|&x| x * (x + ENTROPY_EPS).ln()).sum::<f64>()
}

/// Mean squared reconstruction error.
pub fn autoencoder_loss(tape: &mut Tape, obs: NodeId, reconstruction: NodeId) -> Result<NodeId> {
    check_dims(
        tape.value(obs).shape(),
        tape.value(reconstruction).shape(),
        "autoencoder_loss",
    )?;
    tape.mse(obs, reconstruction)
}

/// Squared L2 distance between the observed terminal latent and the
/// transition model's prediction.
pub fn model_based_loss(tape: &mut Tape, h_end: NodeId, h_pred: NodeId) -> Result<NodeId> {
    check_dims(
        tape.value(h_end).shape(),
        tape.value(h_pred).shape(),
        "model_based_loss",
    )?;
    tape.squared_distance(h_end, h_pred)
}

/// Per-factor trajectory probability ratios against the behavior factor,
/// from summed per-step log-probabilities. Clipped to [0, w_max].
pub fn importance_weights(logp_sums: &[f64], behavior: usize, w_max: f64) -> Vec<f64> {
    let base = logp_sums[behavior];
    logp_sums
        .iter()
        .map(|&lp| (lp - base).exp().clamp(0.0, w_max))
        .collect()
}

/// One trajectory's contribution to the surrogate loss.
pub struct SurrogateSample {
    /// Importance weight (1 for the behavior factor).
    pub weight: f64,
    /// Detached selectivity value S for this factor.
    pub s_value: f64,
    /// Differentiable selectivity (pathwise term); None disables that path.
    pub s_pathwise: Option<NodeId>,
    /// Differentiable sum of log pi(a_t | h_t, phi) over the option.
    pub logp_sum: NodeId,
    /// Differentiable baseline V(h), scalar.
    pub baseline: NodeId,
}

/// Surrogate whose gradient is the selectivity-ascent estimator:
/// mean over samples of
///   w * [ -S_pathwise - (S - V_detached) * sum_t log pi + (S - V)^2 ].
/// Minimizing it ascends E[S] and regresses the baseline toward S.
pub fn reinforce_surrogate(tape: &mut Tape, samples: &[SurrogateSample]) -> Result<NodeId> {
    if samples.is_empty() {
        return Err(IcfError::Degenerate("reinforce_surrogate on empty batch".into()));
    }
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let v_detached = tape.value(s.baseline).item();
        let advantage = s.s_value - v_detached;
        let mut term = tape.scale(s.logp_sum, -s.weight * advantage);
        if let Some(sp) = s.s_pathwise {
            let p = tape.scale(sp, -s.weight);
            term = tape.add(term, p)?;
        }
        let neg_v = tape.neg(s.baseline);
        let diff = tape.add_scalar(neg_v, s.s_value);
        let sq = tape.mul(diff, diff)?;
        let reg = tape.scale(sq, s.weight);
        term = tape.add(term, reg)?;
        terms.push(term);
    }
    let total = sum_nodes(tape, &terms)?;
    Ok(tape.scale(total, 1.0 / samples.len() as f64))
}

/// Empirical mean of selectivity values: the variational lower-bound estimate
/// of I(phi; h' | h).
pub fn dv_bound_estimate(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample mean and its standard error.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn exact(spec: KernelSpec) -> KernelSpec {
        KernelSpec { eps_floor: 0.0, ..spec }
    }

    #[test]
    fn gaussian_peak_at_exact_match() {
        let spec = KernelSpec::gaussian(3);
        let h = Tensor::vector(vec![0.2, -0.1, 0.5]);
        let phi = Tensor::vector(vec![1.0, 0.0, -2.0]);
        let mut hp = h.clone();
        hp.add_in_place(&phi);
        assert_eq!(kernel_score_value(&hp, &h, &phi, &spec).unwrap(), 1.0);
    }

    #[test]
    fn gaussian_hand_value() {
        let spec = KernelSpec::gaussian(2);
        assert!((spec.sigma - std::f64::consts::SQRT_2).abs() < 1e-15);
        let h = Tensor::vector(vec![0.0, 0.0]);
        let hp = Tensor::vector(vec![1.0, 0.0]);
        let phi = Tensor::vector(vec![0.0, 0.0]);
        let a = kernel_score_value(&hp, &h, &phi, &spec).unwrap();
        assert!((a - (-0.25f64).exp()).abs() < 1e-12);
        assert!((a - 0.7788007831).abs() < 1e-9);
    }

    #[test]
    fn rectified_clamps_negative() {
        let spec = KernelSpec::rectified();
        let h = Tensor::vector(vec![0.0, 0.0]);
        let hp = Tensor::vector(vec![1.0, 0.0]);
        let phi = Tensor::vector(vec![-1.0, 0.0]);
        assert_eq!(kernel_score_value(&hp, &h, &phi, &spec).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_decreases_with_distance() {
        let spec = KernelSpec::gaussian(2);
        let h = Tensor::vector(vec![0.0, 0.0]);
        let phi = Tensor::vector(vec![0.0, 0.0]);
        let mut last = 2.0;
        for d in 0..5 {
            let hp = Tensor::vector(vec![d as f64 * 0.5, 0.0]);
            let a = kernel_score_value(&hp, &h, &phi, &spec).unwrap();
            assert!(a < last);
            last = a;
        }
    }

    #[test]
    fn kernel_dim_mismatch_errors() {
        let spec = KernelSpec::gaussian(2);
        let h = Tensor::vector(vec![0.0, 0.0]);
        let hp = Tensor::vector(vec![1.0]);
        let phi = Tensor::vector(vec![0.0, 0.0]);
        assert!(kernel_score_value(&hp, &h, &phi, &spec).is_err());
    }

    #[test]
    fn selectivity_zero_when_pool_uniform() {
        let spec = exact(KernelSpec::gaussian(2));
        let s = selectivity_value(0.7, &[0.7, 0.7, 0.7], &spec).unwrap();
        assert!(s.value.abs() < 1e-12);
        assert!(!s.degenerate_pool);
    }

    #[test]
    fn selectivity_hand_value() {
        let spec = exact(KernelSpec::gaussian(2));
        let e = std::f64::consts::E;
        let s = selectivity_value(1.0, &[1.0, e], &spec).unwrap();
        let expected = 0.0 - ((1.0 + e) / 2.0).ln();
        assert!((s.value - expected).abs() < 1e-9);
        assert!((s.value + 0.62011).abs() < 1e-5);
    }

    #[test]
    fn selectivity_positive_when_behavior_dominates() {
        let spec = KernelSpec::gaussian(2);
        let s = selectivity_value(0.9, &[0.9, 0.1, 0.2], &spec).unwrap();
        assert!(s.value > 0.0);
    }

    #[test]
    fn selectivity_degenerate_pool_is_zero_flagged() {
        let spec = exact(KernelSpec::rectified());
        let s = selectivity_value(0.0, &[0.0, 0.0], &spec).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.degenerate_pool);
    }

    #[test]
    fn selectivity_needs_pool_of_two() {
        let spec = KernelSpec::gaussian(2);
        assert!(selectivity_value(1.0, &[1.0], &spec).is_err());
    }

    #[test]
    fn pool_average_selectivity_never_positive() {
        // Jensen: mean over behaviors of log(s_i) - log(mean s) <= 0.
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let spec = KernelSpec::gaussian(2);
        for _ in 0..1000 {
            let n = rng.gen_range(2..9);
            let pool: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..1.0) })
                .collect();
            let mean_s = pool
                .iter()
                .map(|&b| selectivity_value(b, &pool, &spec).unwrap().value)
                .sum::<f64>()
                / n as f64;
            assert!(mean_s <= 1e-12, "pool {pool:?} gave mean selectivity {mean_s}");
        }
    }

    #[test]
    fn selectivity_node_matches_value_and_gradchecks() {
        let spec = exact(KernelSpec::gaussian(2));
        let h = Tensor::vector(vec![0.1, -0.2]);
        let hp = Tensor::vector(vec![0.6, 0.3]);
        let phi1 = Tensor::vector(vec![0.5, 0.4]);
        let phi2 = Tensor::vector(vec![-0.3, 0.2]);

        let forward = |tape: &mut Tape, ids: &[NodeId]| {
            let s1 = kernel_score(tape, ids[1], ids[0], ids[2], &spec).unwrap();
            let s2 = kernel_score(tape, ids[1], ids[0], ids[3], &spec).unwrap();
            selectivity_node(tape, s1, &[s1, s2], &spec).unwrap()
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = [&h, &hp, &phi1, &phi2]
            .iter()
            .map(|t| tape.leaf((*t).clone()))
            .collect();
        let s = forward(&mut tape, &ids);
        let a1 = kernel_score_value(&hp, &h, &phi1, &spec).unwrap();
        let a2 = kernel_score_value(&hp, &h, &phi2, &spec).unwrap();
        let expected = selectivity_value(a1, &[a1, a2], &spec).unwrap().value;
        assert!((tape.value(s).item() - expected).abs() < 1e-12);

        gradcheck::check_default(&[h, hp, phi1, phi2], forward).unwrap();
    }

    #[test]
    fn entropy_values() {
        assert!((entropy_value(&[0.25; 4]) - 4f64.ln()).abs() < 1e-7);
        assert!((entropy_value(&[0.5, 0.5, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-7);
        assert!(entropy_value(&[1.0, 0.0]).abs() < 1e-7);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.25; 4]));
        let h = entropy(&mut tape, p).unwrap();
        assert!((tape.value(h).item() - 4f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn entropy_gradcheck() {
        gradcheck::check_default(&[Tensor::vector(vec![0.3, 0.2, 0.4, 0.1])], |tape, ids| {
            entropy(tape, ids[0]).unwrap()
        })
        .unwrap();
    }

    #[test]
    fn autoencoder_loss_values_and_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = autoencoder_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let z = tape.leaf(Tensor::vector(vec![0.0; 4]));
        let o = tape.leaf(Tensor::vector(vec![1.0; 4]));
        let l2 = autoencoder_loss(&mut tape, z, o).unwrap();
        assert_eq!(tape.value(l2).item(), 1.0);

        gradcheck::check_default(
            &[Tensor::vector(vec![0.1, 0.9]), Tensor::vector(vec![0.4, -0.2])],
            |tape, ids| autoencoder_loss(tape, ids[0], ids[1]).unwrap(),
        )
        .unwrap();
    }

    #[test]
    fn model_based_loss_values_and_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let l = model_based_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let b = tape.leaf(Tensor::vector(vec![1.0, 3.0]));
        let l2 = model_based_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l2).item(), 1.0);

        gradcheck::check_default(
            &[Tensor::vector(vec![0.1, 0.9]), Tensor::vector(vec![0.4, -0.2])],
            |tape, ids| model_based_loss(tape, ids[0], ids[1]).unwrap(),
        )
        .unwrap();
    }

    #[test]
    fn importance_weight_identities() {
        let w = importance_weights(&[-1.0, -2.0, -1.0 + 3.0], 0, DEFAULT_W_MAX);
        assert_eq!(w[0], 1.0);
        assert!((w[1] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((w[2] - 3f64.exp().min(DEFAULT_W_MAX)).abs() < 1e-12);
        assert_eq!(w[2], DEFAULT_W_MAX);
        assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn importance_weight_half_probability_per_step() {
        // three steps, each at half the behavior probability
        let behavior = 3.0 * (0.8f64).ln();
        let other = 3.0 * (0.4f64).ln();
        let w = importance_weights(&[behavior, other], 0, DEFAULT_W_MAX);
        assert!((w[1] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_gives_zero_policy_gradient() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(vec![0.3, -0.5]));
        let probs = tape.softmax(logits);
        let pa = tape.index(probs, 0).unwrap();
        let logp = tape.log(pa, 0.0).unwrap();
        let v = tape.leaf(Tensor::scalar(0.7));
        let sample = SurrogateSample {
            weight: 1.0,
            s_value: 0.7,
            s_pathwise: None,
            logp_sum: logp,
            baseline: v,
        };
        let loss = reinforce_surrogate(&mut tape, &[sample]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get_or_zeros(logits, &[2]);
        assert!(g.norm() < 1e-12, "policy gradient {:?}", g.data());
        // baseline still receives its regression gradient (zero here since S = V)
        assert!(grads.get(v).is_some());
    }

    #[test]
    fn reinforce_empty_batch_errors() {
        let mut tape = Tape::new();
        assert!(reinforce_surrogate(&mut tape, &[]).is_err());
    }

    #[test]
    fn bandit_converges_to_best_action() {
        // 2-action bandit: action 0 pays S=1, action 1 pays S=0.
        let mut theta = Tensor::vector(vec![0.0, 0.0]);
        let mut v = Tensor::scalar(0.0);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (lr, lr_v) = (1.0, 0.2);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let th = tape.leaf(theta.clone());
            let vb = tape.leaf(v.clone());
            let probs = tape.softmax(th);
            let p0 = tape.value(probs).data()[0];
            let a = usize::from(rng.gen::<f64>() >= p0);
            let s = if a == 0 { 1.0 } else { 0.0 };
            let pa = tape.index(probs, a).unwrap();
            let logp = tape.log(pa, 0.0).unwrap();
            let sample = SurrogateSample {
                weight: 1.0,
                s_value: s,
                s_pathwise: None,
                logp_sum: logp,
                baseline: vb,
            };
            let loss = reinforce_surrogate(&mut tape, &[sample]).unwrap();
            let grads = tape.backward(loss).unwrap();
            let gt = grads.get_or_zeros(th, &[2]);
            for (w, g) in theta.data_mut().iter_mut().zip(gt.data()) {
                *w -= lr * g;
            }
            let gv = grads.get_or_zeros(vb, &[1]);
            v.data_mut()[0] -= lr_v * gv.data()[0];
        }
        let gap = theta.data()[0] - theta.data()[1];
        let p_best = 1.0 / (1.0 + (-gap).exp());
        assert!(p_best > 0.99, "pi(best) = {p_best}");
    }

    #[test]
    fn dv_estimate_constant_kernel_is_zero() {
        let spec = KernelSpec::gaussian(2);
        let values: Vec<f64> = (0..100)
            .map(|_| selectivity_value(0.5, &[0.5, 0.5, 0.5], &spec).unwrap().value)
            .collect();
        assert!(dv_bound_estimate(&values).abs() < 1e-9);
    }

    #[test]
    fn dv_estimate_indicator_two_factors_is_log_two() {
        // two factors, each deterministically producing its own h';
        // indicator scores: behavior 1, other 0
        let spec = exact(KernelSpec::gaussian(2));
        let values: Vec<f64> = (0..2)
            .map(|_| selectivity_value(1.0, &[1.0, 0.0], &spec).unwrap().value)
            .collect();
        assert!((dv_bound_estimate(&values) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_and_se_basics() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-12);
        let expected_se = (5.0f64 / 3.0 / 4.0).sqrt();
        assert!((se - expected_se).abs() < 1e-12);
    }
}
