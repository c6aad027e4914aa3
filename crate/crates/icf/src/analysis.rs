//! Quantitative evaluation: latent-variation clustering, latent-grid
//! structure, ground-truth feature recovery, and an exact conditional
//! mutual-information oracle that validates the variational bound.

use crate::autodiff::Tensor;
use crate::env::{enumerate_states, ground_truth, EnvState, GridSpec, ObsMode};
use crate::error::{IcfError, Result};
use crate::models::IcfModel;
use crate::objective::{mean_and_se, selectivity_value, KernelSpec};
use crate::trainer::{encode_state, rollout_option};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::collections::BTreeMap;

/// One sampled option: latents before/after, the factor that drove it, the
/// actions executed and the environment ground truth on both sides.
#[derive(Clone, Debug)]
pub struct VariationRecord {
    pub h: Tensor,
    pub h_prime: Tensor,
    pub dh: Tensor,
    pub phi: Tensor,
    pub actions: Vec<usize>,
    pub gt_before: Vec<f64>,
    pub gt_after: Vec<f64>,
}

impl VariationRecord {
    /// dh must equal h_prime - h exactly.
    pub fn consistent(&self) -> bool {
        self.dh
            .data()
            .iter()
            .zip(self.h_prime.data())
            .zip(self.h.data())
            .all(|((&d, &hp), &h)| d == hp - h)
    }
}

/// Sample `count` options from uniformly random enumerable states with
/// random factors (generator noise in joint mode, one-hot in discrete mode).
pub fn collect_variations(
    model: &IcfModel,
    grid: &GridSpec,
    obs_mode: ObsMode,
    count: usize,
    t_option: usize,
    permissible_only: bool,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<VariationRecord>> {
    let states = enumerate_states(grid)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let state = states[rng.gen_range(0..states.len())].clone();
        let h = encode_state(model, grid, obs_mode, &state)?;
        let phi = if model.cfg.is_discrete() {
            let mut v = Tensor::zeros(&[model.cfg.factor_dim]);
            v.data_mut()[rng.gen_range(0..model.cfg.n_factors)] = 1.0;
            v
        } else {
            sample_factor(model, &h, rng)?
        };
        let (actions, end) =
            rollout_option(model, grid, obs_mode, &state, &phi, t_option, permissible_only, rng)?;
        let h_prime = encode_state(model, grid, obs_mode, &end)?;
        let mut dh = h_prime.clone();
        for (d, &hv) in dh.data_mut().iter_mut().zip(h.data()) {
            *d -= hv;
        }
        out.push(VariationRecord {
            gt_before: ground_truth(&state),
            gt_after: ground_truth(&end),
            h,
            h_prime,
            dh,
            phi,
            actions,
        });
    }
    Ok(out)
}

/// Draw one factor from the generator with fresh standard-normal noise.
pub fn sample_factor(model: &IcfModel, h: &Tensor, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    let z = Tensor::vector(
        (0..model.cfg.noise_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    );
    let mut tape = crate::autodiff::Tape::new();
    let bound = model.bind(&mut tape);
    let hid = tape.leaf(h.clone());
    let zid = tape.leaf(z);
    let (phi, _) = bound.generate_factor(&mut tape, hid, zid)?;
    Ok(tape.value(phi).clone())
}

// -- dh clustering ----------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ActionCluster {
    /// Action indices grouped into this cluster (more than one after merging).
    pub actions: Vec<usize>,
    pub centroid: Vec<f64>,
    pub count: usize,
    pub within_mean_dist: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterReport {
    pub clusters: Vec<ActionCluster>,
    pub n_clusters: usize,
    /// Mean distance of each dh to its own cluster centroid.
    #[serde(rename = "W")]
    pub w: f64,
    /// Minimum pairwise centroid distance.
    #[serde(rename = "B")]
    pub b: f64,
    /// w / b; +inf when centroids coincide.
    pub ratio: f64,
    pub degenerate: bool,
    /// Action pairs whose raw per-action centroids merged.
    pub merged_actions: Vec<(usize, usize)>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Group single-step dh vectors by executed action and measure separation.
///
/// Per-action centroids closer than 0.2x the overall centroid spread are
/// merged first (redundant actions produce coinciding clusters); W, B and
/// the ratio are computed on the merged clusters.
pub fn cluster_by_action(records: &[VariationRecord]) -> Result<ClusterReport> {
    let mut by_action: std::collections::BTreeMap<usize, Vec<&VariationRecord>> =
        std::collections::BTreeMap::new();
    for r in records {
        if r.actions.len() != 1 {
            return Err(IcfError::Degenerate(
                "cluster_by_action needs single-step records (t_option = 1)".into(),
            ));
        }
        by_action.entry(r.actions[0]).or_default().push(r);
    }
    if by_action.len() < 2 {
        return Err(IcfError::Degenerate(format!(
            "need at least 2 action groups, got {}",
            by_action.len()
        )));
    }
    let k = records[0].dh.len();
    let centroid_of = |rs: &[&VariationRecord]| -> Vec<f64> {
        let mut c = vec![0.0; k];
        for r in rs {
            for (ci, &d) in c.iter_mut().zip(r.dh.data()) {
                *ci += d;
            }
        }
        for ci in c.iter_mut() {
            *ci /= rs.len() as f64;
        }
        c
    };

    // raw per-action clusters
    let mut groups: Vec<(Vec<usize>, Vec<&VariationRecord>)> = by_action
        .into_iter()
        .map(|(a, rs)| (vec![a], rs))
        .collect();
    let raw_centroids: Vec<Vec<f64>> = groups.iter().map(|(_, rs)| centroid_of(rs)).collect();
    let spread = raw_centroids
        .iter()
        .enumerate()
        .flat_map(|(i, a)| raw_centroids[i + 1..].iter().map(move |b| dist(a, b)))
        .fold(0.0f64, f64::max);
    let merge_tol = 0.2 * spread;

    // merge coinciding centroids (union-find over the small group set)
    let mut merged_actions = Vec::new();
    if spread > 0.0 {
        let mut i = 0;
        while i < groups.len() {
            let ci = centroid_of(&groups[i].1);
            let mut j = i + 1;
            while j < groups.len() {
                let cj = centroid_of(&groups[j].1);
                if dist(&ci, &cj) < merge_tol {
                    merged_actions.push((groups[i].0[0], groups[j].0[0]));
                    let (labels, rs) = groups.remove(j);
                    groups[i].0.extend(labels);
                    groups[i].1.extend(rs);
                } else {
                    j += 1;
                }
            }
            i += 1;
        }
    }

    let mut clusters = Vec::with_capacity(groups.len());
    let mut within_total = 0.0;
    for (labels, rs) in &groups {
        let c = centroid_of(rs);
        let within: f64 = rs.iter().map(|r| dist(r.dh.data(), &c)).sum();
        within_total += within;
        clusters.push(ActionCluster {
            actions: labels.clone(),
            centroid: c,
            count: rs.len(),
            within_mean_dist: within / rs.len() as f64,
        });
    }
    let w = within_total / records.len() as f64;
    let b = clusters
        .iter()
        .enumerate()
        .flat_map(|(i, a)| {
            clusters[i + 1..]
                .iter()
                .map(move |c| dist(&a.centroid, &c.centroid))
        })
        .fold(f64::INFINITY, f64::min);
    let b = if clusters.len() < 2 { 0.0 } else { b };
    let (ratio, degenerate) = if b > 0.0 { (w / b, false) } else { (f64::INFINITY, true) };
    Ok(ClusterReport {
        n_clusters: clusters.len(),
        clusters,
        w,
        b,
        ratio,
        degenerate,
        merged_actions,
    })
}

pub fn variations_csv(records: &[VariationRecord]) -> String {
    let k = records.first().map(|r| r.dh.len()).unwrap_or(0);
    let f = records.first().map(|r| r.phi.len()).unwrap_or(0);
    let mut s = String::new();
    for i in 0..k {
        s.push_str(&format!("dh_{i},"));
    }
    for i in 0..f {
        s.push_str(&format!("phi_{i},"));
    }
    s.push_str("action\n");
    for r in records {
        for v in r.dh.data() {
            s.push_str(&format!("{v},"));
        }
        for v in r.phi.data() {
            s.push_str(&format!("{v},"));
        }
        s.push_str(&format!("{}\n", r.actions.first().copied().unwrap_or(0)));
    }
    s
}

// -- latent grid ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LatentGridRow {
    pub state: EnvState,
    pub gt: Vec<f64>,
    pub h: Vec<f64>,
}

/// Encode every enumerable state.
pub fn latent_grid(model: &IcfModel, grid: &GridSpec, obs_mode: ObsMode) -> Result<Vec<LatentGridRow>> {
    enumerate_states(grid)?
        .into_iter()
        .map(|state| {
            let h = encode_state(model, grid, obs_mode, &state)?;
            Ok(LatentGridRow {
                gt: ground_truth(&state),
                h: h.data().to_vec(),
                state,
            })
        })
        .collect()
}

pub fn latent_grid_csv(rows: &[LatentGridRow]) -> String {
    let g = rows.first().map(|r| r.gt.len()).unwrap_or(0);
    let k = rows.first().map(|r| r.h.len()).unwrap_or(0);
    let mut s = String::new();
    for i in 0..g {
        s.push_str(&format!("gt_{i},"));
    }
    for i in 0..k {
        s.push_str(&format!("h_{i}"));
        if i + 1 < k {
            s.push(',');
        }
    }
    s.push('\n');
    for r in rows {
        for v in &r.gt {
            s.push_str(&format!("{v},"));
        }
        for (i, v) in r.h.iter().enumerate() {
            s.push_str(&format!("{v}"));
            if i + 1 < r.h.len() {
                s.push(',');
            }
        }
        s.push('\n');
    }
    s
}

/// Ordinary least squares with intercept; returns R^2 per target column.
/// Constant targets report R^2 = 1 (trivially fit).
pub fn affine_r2(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Vec<f64>> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(IcfError::Degenerate("affine_r2 needs matching non-empty rows".into()));
    }
    let n = inputs.len();
    let d = inputs[0].len();
    let t = targets[0].len();
    let cols = d + 1;
    // normal equations XtX beta = Xt y
    let mut xtx = vec![vec![0.0; cols]; cols];
    let mut xty = vec![vec![0.0; t]; cols];
    let row_x = |r: &Vec<f64>| -> Vec<f64> {
        let mut v = r.clone();
        v.push(1.0);
        v
    };
    for (xi, yi) in inputs.iter().zip(targets) {
        let x = row_x(xi);
        for a in 0..cols {
            for b in 0..cols {
                xtx[a][b] += x[a] * x[b];
            }
            for j in 0..t {
                xty[a][j] += x[a] * yi[j];
            }
        }
    }
    let beta = solve_multi(&mut xtx, &mut xty)?;
    let mut r2 = Vec::with_capacity(t);
    for j in 0..t {
        let mean_y: f64 = targets.iter().map(|y| y[j]).sum::<f64>() / n as f64;
        let mut ss_tot = 0.0;
        let mut ss_res = 0.0;
        for (xi, yi) in inputs.iter().zip(targets) {
            let x = row_x(xi);
            let pred: f64 = (0..cols).map(|a| beta[a][j] * x[a]).sum();
            ss_tot += (yi[j] - mean_y) * (yi[j] - mean_y);
            ss_res += (yi[j] - pred) * (yi[j] - pred);
        }
        r2.push(if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot });
    }
    Ok(r2)
}

/// Gaussian elimination with partial pivoting on multiple right-hand sides.
/// Singular systems are regularized with a tiny ridge term.
fn solve_multi(a: &mut [Vec<f64>], b: &mut [Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    for i in 0..n {
        a[i][i] += 1e-12;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(IcfError::Degenerate("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            let bc = b[col].clone();
            for (x, y) in b[row].iter_mut().zip(&bc) {
                *x -= f * y;
            }
        }
    }
    Ok((0..n)
        .map(|i| b[i].iter().map(|v| v / a[i][i]).collect())
        .collect())
}

// -- feature recovery -------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct FeatureRecovery {
    /// pearson[feature][latent]; None for constant features.
    pub pearson: Vec<Vec<Option<f64>>>,
    pub spearman: Vec<Vec<Option<f64>>>,
    pub max_abs_pearson: Vec<Option<f64>>,
    pub max_abs_spearman: Vec<Option<f64>>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Average ranks (ties share the mean rank).
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Correlate every ground-truth feature with every latent coordinate over
/// the enumerated state space.
pub fn feature_recovery(model: &IcfModel, grid: &GridSpec, obs_mode: ObsMode) -> Result<FeatureRecovery> {
    let rows = latent_grid(model, grid, obs_mode)?;
    feature_recovery_from(&rows)
}

pub fn feature_recovery_from(rows: &[LatentGridRow]) -> Result<FeatureRecovery> {
    if rows.is_empty() {
        return Err(IcfError::Degenerate("no states to correlate".into()));
    }
    let n_feat = rows[0].gt.len();
    let k = rows[0].h.len();
    let mut p = vec![vec![None; k]; n_feat];
    let mut s = vec![vec![None; k]; n_feat];
    for f in 0..n_feat {
        // Marginalize the other features: average each latent over all states
        // that share this feature's value, then correlate the per-value means
        // with the values themselves.
        let mut groups: BTreeMap<u64, (f64, Vec<f64>, usize)> = BTreeMap::new();
        for r in rows {
            let v = r.gt[f];
            let e = groups
                .entry(v.to_bits())
                .or_insert_with(|| (v, vec![0.0; k], 0));
            for (acc, &hv) in e.1.iter_mut().zip(&r.h) {
                *acc += hv;
            }
            e.2 += 1;
        }
        let mut entries: Vec<(f64, Vec<f64>)> = groups
            .into_values()
            .map(|(v, sums, n)| (v, sums.iter().map(|x| x / n as f64).collect()))
            .collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        let fc: Vec<f64> = entries.iter().map(|e| e.0).collect();
        for l in 0..k {
            let lc: Vec<f64> = entries.iter().map(|e| e.1[l]).collect();
            p[f][l] = pearson(&fc, &lc);
            s[f][l] = spearman(&fc, &lc);
        }
    }
    let max_abs = |m: &Vec<Vec<Option<f64>>>| -> Vec<Option<f64>> {
        m.iter()
            .map(|row| {
                row.iter()
                    .filter_map(|v| v.map(f64::abs))
                    .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            })
            .collect()
    };
    Ok(FeatureRecovery {
        max_abs_pearson: max_abs(&p),
        max_abs_spearman: max_abs(&s),
        pearson: p,
        spearman: s,
    })
}

pub fn feature_recovery_csv(fr: &FeatureRecovery) -> String {
    let mut out = String::from("feature,latent,pearson,spearman\n");
    for (f, row) in fr.pearson.iter().enumerate() {
        for (l, pv) in row.iter().enumerate() {
            let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into());
            out.push_str(&format!("{f},{l},{},{}\n", fmt(pv), fmt(&fr.spearman[f][l])));
        }
    }
    out
}

// -- exact MI oracle --------------------------------------------------------

/// Finite MDP with one stochastic policy per factor; the exact ground truth
/// the sampled variational bound is checked against.
#[derive(Clone, Debug)]
pub struct TabularMDP {
    pub n_states: usize,
    pub n_actions: usize,
    /// policies[factor][state][action]
    pub policies: Vec<Vec<Vec<f64>>>,
    /// transition[state][action][next_state]
    pub transition: Vec<Vec<Vec<f64>>>,
}

impl TabularMDP {
    pub fn validate(&self) -> Result<()> {
        let stochastic = |row: &Vec<f64>, what: &str| -> Result<()> {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                return Err(IcfError::Domain(format!("{what} row not stochastic (sum {s})")));
            }
            Ok(())
        };
        for (f, pol) in self.policies.iter().enumerate() {
            if pol.len() != self.n_states {
                return Err(IcfError::Dimension(format!("policy {f} has wrong state count")));
            }
            for row in pol {
                if row.len() != self.n_actions {
                    return Err(IcfError::Dimension(format!("policy {f} has wrong action count")));
                }
                stochastic(row, "policy")?;
            }
        }
        if self.transition.len() != self.n_states {
            return Err(IcfError::Dimension("transition has wrong state count".into()));
        }
        for per_state in &self.transition {
            for row in per_state {
                if row.len() != self.n_states {
                    return Err(IcfError::Dimension("transition has wrong next-state count".into()));
                }
                stochastic(row, "transition")?;
            }
        }
        Ok(())
    }

    /// One-step state transition matrix under a factor's policy.
    pub fn step_matrix(&self, factor: usize) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n_states]; self.n_states];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let pa = self.policies[factor][s][a];
                if pa == 0.0 {
                    continue;
                }
                for s2 in 0..self.n_states {
                    m[s][s2] += pa * self.transition[s][a][s2];
                }
            }
        }
        m
    }

    /// T-step transition matrix.
    pub fn multi_step_matrix(&self, factor: usize, steps: usize) -> Vec<Vec<f64>> {
        let one = self.step_matrix(factor);
        let mut acc = one.clone();
        for _ in 1..steps {
            acc = mat_mul(&acc, &one);
        }
        acc
    }

    /// Random instance with fully stochastic rows.
    pub fn random(n_states: usize, n_actions: usize, n_factors: usize, rng: &mut ChaCha20Rng) -> Self {
        let stoch_row = |rng: &mut ChaCha20Rng, n: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| -(rng.gen::<f64>().max(1e-12)).ln()).collect();
            let s: f64 = v.iter().sum();
            for x in v.iter_mut() {
                *x /= s;
            }
            v
        };
        TabularMDP {
            n_states,
            n_actions,
            policies: (0..n_factors)
                .map(|_| (0..n_states).map(|_| stoch_row(rng, n_actions)).collect())
                .collect(),
            transition: (0..n_states)
                .map(|_| (0..n_actions).map(|_| stoch_row(rng, n_states)).collect())
                .collect(),
        }
    }
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; b[0].len()]; n];
    for i in 0..n {
        for (k, &aik) in a[i].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (j, &bkj) in b[k].iter().enumerate() {
                out[i][j] += aik * bkj;
            }
        }
    }
    out
}

/// Exact I(factor; outcome | start) in nats, with uniform start states and a
/// uniform factor prior. `h_map` optionally merges states into outcome
/// classes (identity when None).
pub fn exact_conditional_mi(mdp: &TabularMDP, steps: usize, h_map: Option<&[usize]>) -> Result<f64> {
    mdp.validate()?;
    if mdp.policies.is_empty() || steps == 0 {
        return Err(IcfError::Degenerate("need at least one factor and one step".into()));
    }
    let n_out = match h_map {
        Some(m) => {
            if m.len() != mdp.n_states {
                return Err(IcfError::Dimension("h_map must cover every state".into()));
            }
            m.iter().max().unwrap() + 1
        }
        None => mdp.n_states,
    };
    let project = |row: &[f64]| -> Vec<f64> {
        match h_map {
            None => row.to_vec(),
            Some(m) => {
                let mut out = vec![0.0; n_out];
                for (s, &p) in row.iter().enumerate() {
                    out[m[s]] += p;
                }
                out
            }
        }
    };
    let n_f = mdp.policies.len();
    let per_factor: Vec<Vec<Vec<f64>>> = (0..n_f)
        .map(|f| {
            mdp.multi_step_matrix(f, steps)
                .iter()
                .map(|row| project(row))
                .collect()
        })
        .collect();
    let mut mi = 0.0;
    for s in 0..mdp.n_states {
        let mut marginal = vec![0.0; n_out];
        for pf in &per_factor {
            for (m, &p) in marginal.iter_mut().zip(&pf[s]) {
                *m += p / n_f as f64;
            }
        }
        for pf in &per_factor {
            for (o, &p) in pf[s].iter().enumerate() {
                if p > 0.0 && marginal[o] > 0.0 {
                    mi += (1.0 / mdp.n_states as f64) * (1.0 / n_f as f64) * p
                        * (p / marginal[o]).ln();
                }
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Sampled variational-bound estimate vs the exact oracle.
#[derive(Clone, Debug, Serialize)]
pub struct BoundGap {
    pub estimate: f64,
    pub se: f64,
    pub oracle: f64,
    /// oracle - estimate.
    pub gap: f64,
    /// estimate <= oracle + 3 SE.
    pub holds: bool,
}

/// Draw `n_samples` (start, factor, outcome) triples from the MDP, score the
/// pool with `score(start, outcome, factor)` and compare the mean selectivity
/// against the exact conditional MI.
pub fn bound_gap_report(
    mdp: &TabularMDP,
    steps: usize,
    score: impl Fn(usize, usize, usize) -> f64,
    n_samples: usize,
    rng: &mut ChaCha20Rng,
) -> Result<BoundGap> {
    mdp.validate()?;
    let n_f = mdp.policies.len();
    let spec = KernelSpec {
        kind: crate::objective::KernelKind::Gaussian,
        sigma: 1.0,
        eps_floor: 1e-8,
    };
    let sample_row = |row: &[f64], rng: &mut ChaCha20Rng| -> usize {
        let mut u = rng.gen::<f64>();
        for (i, &p) in row.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return i;
            }
        }
        row.len() - 1
    };
    let mut values = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let s0 = rng.gen_range(0..mdp.n_states);
        let f = rng.gen_range(0..n_f);
        let mut s = s0;
        for _ in 0..steps {
            let a = sample_row(&mdp.policies[f][s], rng);
            s = sample_row(&mdp.transition[s][a], rng);
        }
        let pool: Vec<f64> = (0..n_f).map(|i| score(s0, s, i)).collect();
        values.push(selectivity_value(pool[f], &pool, &spec)?.value);
    }
    let (estimate, se) = mean_and_se(&values);
    let oracle = exact_conditional_mi(mdp, steps, None)?;
    Ok(BoundGap {
        estimate,
        se,
        oracle,
        gap: oracle - estimate,
        holds: estimate <= oracle + 3.0 * se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::IcfModel;
    use crate::trainer::TrainConfig;
    use rand::SeedableRng;

    fn untrained_model(preset_name: &str) -> (IcfModel, GridSpec) {
        let mut cfg = TrainConfig::for_preset(preset_name);
        cfg.hidden = 8;
        let grid = cfg.grid().unwrap();
        let mcfg = cfg.model_config(&grid);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        (IcfModel::new(mcfg, &mut rng).unwrap(), grid)
    }

    #[test]
    fn collect_variations_count_and_consistency() {
        let (model, grid) = untrained_model("mazebase-small");
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let recs =
            collect_variations(&model, &grid, ObsMode::Symbolic, 50, 1, true, &mut rng).unwrap();
        assert_eq!(recs.len(), 50);
        for r in &recs {
            assert!(r.consistent());
            assert!(r.h.all_finite() && r.dh.all_finite());
            assert_eq!(r.actions.len(), 1);
        }
    }

    fn synthetic_records(noise: f64, n_actions: usize, per_action: usize) -> Vec<VariationRecord> {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut out = Vec::new();
        for a in 0..n_actions {
            for _ in 0..per_action {
                let mut dh = vec![0.0; n_actions];
                dh[a] = 1.0;
                for d in dh.iter_mut() {
                    *d += noise * rng.sample::<f64, _>(StandardNormal);
                }
                let h = Tensor::zeros(&[n_actions]);
                let h_prime = Tensor::vector(dh.clone());
                out.push(VariationRecord {
                    dh: Tensor::vector(dh),
                    h,
                    h_prime,
                    phi: Tensor::zeros(&[n_actions]),
                    actions: vec![a],
                    gt_before: vec![],
                    gt_after: vec![],
                });
            }
        }
        out
    }

    #[test]
    fn one_hot_clusters_separate_cleanly() {
        let recs = synthetic_records(0.01, 4, 50);
        let rep = cluster_by_action(&recs).unwrap();
        assert_eq!(rep.n_clusters, 4);
        assert!(rep.ratio < 0.05, "ratio {}", rep.ratio);
        assert!(!rep.degenerate);
    }

    #[test]
    fn identical_dh_reports_degenerate_infinity() {
        let mut recs = synthetic_records(0.0, 2, 5);
        for r in recs.iter_mut() {
            r.dh = Tensor::vector(vec![1.0, 1.0]);
        }
        let rep = cluster_by_action(&recs).unwrap();
        assert!(rep.degenerate);
        assert!(rep.ratio.is_infinite());
        assert_eq!(rep.b, 0.0);
    }

    #[test]
    fn redundant_action_clusters_merge() {
        // actions 0 and 1 share a mode, action 2 is distinct
        let mut recs = synthetic_records(0.01, 3, 40);
        for r in recs.iter_mut() {
            if r.actions[0] == 1 {
                let mut dh = r.dh.data().to_vec();
                dh.swap(0, 1);
                r.dh = Tensor::vector(dh);
            }
        }
        let rep = cluster_by_action(&recs).unwrap();
        assert_eq!(rep.n_clusters, 2, "merged: {:?}", rep.merged_actions);
        assert!(rep
            .merged_actions
            .iter()
            .any(|&(a, b)| (a, b) == (0, 1) || (a, b) == (1, 0)));
    }

    #[test]
    fn clustering_is_order_invariant() {
        let mut recs = synthetic_records(0.02, 4, 30);
        let rep1 = cluster_by_action(&recs).unwrap();
        recs.reverse();
        recs.swap(1, 57);
        let rep2 = cluster_by_action(&recs).unwrap();
        // summation order may differ by rounding, nothing more
        assert!((rep1.w - rep2.w).abs() <= 1e-12 * rep1.w.abs());
        assert!((rep1.b - rep2.b).abs() <= 1e-12 * rep1.b.abs());
        assert_eq!(rep1.n_clusters, rep2.n_clusters);
    }

    #[test]
    fn latent_grid_row_counts() {
        let (model, grid) = untrained_model("mazebase-small");
        let rows = latent_grid(&model, &grid, ObsMode::Symbolic).unwrap();
        assert_eq!(rows.len(), 63);
        // identical state -> identical encoding
        let again = latent_grid(&model, &grid, ObsMode::Symbolic).unwrap();
        assert_eq!(rows[10].h, again[10].h);
    }

    #[test]
    fn affine_fit_exact_on_affine_data() {
        let inputs: Vec<Vec<f64>> = (0..8)
            .flat_map(|x| (0..8).map(move |y| vec![x as f64, y as f64]))
            .collect();
        let targets: Vec<Vec<f64>> = inputs
            .iter()
            .map(|v| vec![2.0 * v[0] - v[1] + 0.5, -0.3 * v[0] + 0.1 * v[1]])
            .collect();
        let r2 = affine_r2(&inputs, &targets).unwrap();
        for v in r2 {
            assert!(v > 1.0 - 1e-9, "r2 {v}");
        }
    }

    #[test]
    fn affine_fit_constant_target_is_trivial() {
        let inputs = vec![vec![0.0], vec![1.0], vec![2.0]];
        let targets = vec![vec![5.0], vec![5.0], vec![5.0]];
        assert_eq!(affine_r2(&inputs, &targets).unwrap(), vec![1.0]);
    }

    #[test]
    fn feature_recovery_on_permuted_signflipped_copy() {
        let rows: Vec<LatentGridRow> = (0..16)
            .map(|i| {
                let x = (i % 4) as f64;
                let y = (i / 4) as f64;
                LatentGridRow {
                    state: EnvState {
                        agent: None,
                        object_positions: vec![],
                        switch_states: vec![],
                    },
                    gt: vec![x, y],
                    h: vec![-y, x],
                }
            })
            .collect();
        let fr = feature_recovery_from(&rows).unwrap();
        for m in &fr.max_abs_pearson {
            assert!((m.unwrap() - 1.0).abs() < 1e-12);
        }
        for m in &fr.max_abs_spearman {
            assert!((m.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_feature_reports_none() {
        let rows: Vec<LatentGridRow> = (0..4)
            .map(|i| LatentGridRow {
                state: EnvState {
                    agent: None,
                    object_positions: vec![],
                    switch_states: vec![],
                },
                gt: vec![1.0, i as f64],
                h: vec![i as f64],
            })
            .collect();
        let fr = feature_recovery_from(&rows).unwrap();
        assert!(fr.max_abs_pearson[0].is_none());
        assert!(fr.max_abs_pearson[1].is_some());
    }

    fn deterministic_two_factor() -> TabularMDP {
        // from every state, factor 0 goes to state 1, factor 1 to state 2
        let det = |a: usize| -> Vec<f64> {
            let mut v = vec![0.0; 2];
            v[a] = 1.0;
            v
        };
        TabularMDP {
            n_states: 3,
            n_actions: 2,
            policies: vec![vec![det(0); 3], vec![det(1); 3]],
            transition: (0..3)
                .map(|_| {
                    vec![
                        vec![0.0, 1.0, 0.0], // action 0 -> state 1
                        vec![0.0, 0.0, 1.0], // action 1 -> state 2
                    ]
                })
                .collect(),
        }
    }

    #[test]
    fn identical_policies_zero_mi() {
        let mut mdp = deterministic_two_factor();
        mdp.policies[1] = mdp.policies[0].clone();
        let mi = exact_conditional_mi(&mdp, 1, None).unwrap();
        assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn distinct_deterministic_outcomes_log_two() {
        let mdp = deterministic_two_factor();
        let mi = exact_conditional_mi(&mdp, 1, None).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_uniform_conditionals_zero_mi() {
        let uni = vec![0.5, 0.5];
        let mdp = TabularMDP {
            n_states: 2,
            n_actions: 2,
            policies: vec![vec![uni.clone(); 2], vec![uni.clone(); 2]],
            transition: (0..2)
                .map(|_| vec![vec![0.5, 0.5], vec![0.5, 0.5]])
                .collect(),
        };
        let mi = exact_conditional_mi(&mdp, 1, None).unwrap();
        assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn mi_nonnegative_on_random_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mdp = TabularMDP::random(5, 3, 3, &mut rng);
            let mi = exact_conditional_mi(&mdp, 2, None).unwrap();
            assert!(mi >= 0.0);
        }
    }

    #[test]
    fn indicator_scorer_reaches_log_two() {
        let mdp = deterministic_two_factor();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let score = |_s0: usize, s_end: usize, f: usize| -> f64 {
            // indicator of factor f's deterministic outcome
            if s_end == f + 1 {
                1.0
            } else {
                0.0
            }
        };
        let gap = bound_gap_report(&mdp, 1, score, 10_000, &mut rng).unwrap();
        assert!(gap.holds);
        assert!((gap.oracle - 2f64.ln()).abs() < 1e-12);
        assert!(gap.gap.abs() < 0.02, "gap {}", gap.gap);
    }

    #[test]
    fn bound_holds_for_random_scorers() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for trial in 0..10 {
            let mdp = TabularMDP::random(6, 3, 3, &mut rng);
            let seedling = 1000 + trial;
            let table: Vec<f64> = {
                let mut r = ChaCha20Rng::seed_from_u64(seedling);
                (0..6 * 6 * 3).map(|_| r.gen::<f64>()).collect()
            };
            let score =
                move |s0: usize, s: usize, f: usize| -> f64 { table[(s0 * 6 + s) * 3 + f] };
            let gap = bound_gap_report(&mdp, 1, score, 20_000, &mut rng).unwrap();
            assert!(
                gap.holds,
                "trial {trial}: estimate {} > oracle {} + 3*{}",
                gap.estimate, gap.oracle, gap.se
            );
        }
    }

    #[test]
    fn variations_csv_shape() {
        let recs = synthetic_records(0.0, 2, 3);
        let csv = variations_csv(&recs);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "dh_0,dh_1,phi_0,phi_1,action");
        assert_eq!(csv.lines().count(), 1 + 6);
    }

    #[test]
    fn latent_grid_csv_header() {
        let (model, grid) = untrained_model("mazebase-small");
        let rows = latent_grid(&model, &grid, ObsMode::Symbolic).unwrap();
        let csv = latent_grid_csv(&rows);
        assert!(csv.starts_with("gt_0,gt_1,h_0,h_1\n"));
        assert_eq!(csv.lines().count(), 64);
    }
}
