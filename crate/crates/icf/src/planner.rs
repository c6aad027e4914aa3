//! Latent-space prediction and planning: per-action dh prototypes, additive
//! or learned-transition prediction, and greedy decomposition of a
//! start-to-goal latent difference into a multiset of prototype moves.

use crate::analysis::VariationRecord;
use crate::autodiff::{Tape, Tensor};
use crate::env::{EnvState, GridSpec};
use crate::error::{IcfError, Result};
use crate::models::IcfModel;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    Clustered,
    Canonical,
}

#[derive(Clone, Debug, Serialize)]
pub struct Prototype {
    /// Action index this mode belongs to.
    pub action: usize,
    pub dh: Vec<f64>,
    pub count: usize,
    /// Index of an earlier prototype this one coincides with, if any.
    pub duplicate_of: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FactorPrototypeSet {
    pub prototypes: Vec<Prototype>,
    pub source: PrototypeSource,
}

impl FactorPrototypeSet {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes.is_empty() {
            return Err(IcfError::Degenerate("empty prototype set".into()));
        }
        Ok(())
    }

    /// Prototypes that are not duplicates of an earlier one.
    pub fn distinct(&self) -> Vec<(usize, &Prototype)> {
        self.prototypes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.duplicate_of.is_none())
            .collect()
    }
}

/// Per-action centroids of single-step dh records. Actions with fewer than
/// `min_count` records are dropped; coinciding centroids are flagged as
/// duplicates of the first such action.
pub fn extract_prototypes(records: &[VariationRecord], min_count: usize) -> Result<FactorPrototypeSet> {
    if records.is_empty() {
        return Err(IcfError::Degenerate("no records to extract prototypes from".into()));
    }
    let k = records[0].dh.len();
    let mut by_action: std::collections::BTreeMap<usize, (Vec<f64>, usize)> =
        std::collections::BTreeMap::new();
    for r in records {
        if r.actions.len() != 1 {
            return Err(IcfError::Degenerate(
                "prototype extraction needs single-step records".into(),
            ));
        }
        let e = by_action.entry(r.actions[0]).or_insert((vec![0.0; k], 0));
        for (c, &d) in e.0.iter_mut().zip(r.dh.data()) {
            *c += d;
        }
        e.1 += 1;
    }
    let mut prototypes: Vec<Prototype> = by_action
        .into_iter()
        .filter(|(_, (_, n))| *n >= min_count)
        .map(|(action, (mut c, n))| {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
            Prototype {
                action,
                dh: c,
                count: n,
                duplicate_of: None,
            }
        })
        .collect();
    if prototypes.is_empty() {
        return Err(IcfError::Degenerate(format!(
            "no action reached min_count = {min_count}"
        )));
    }

    // flag coinciding modes: tolerance relative to the centroid spread
    let d = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let spread = prototypes
        .iter()
        .enumerate()
        .flat_map(|(i, a)| prototypes[i + 1..].iter().map(move |b| d(&a.dh, &b.dh)))
        .fold(0.0f64, f64::max);
    let tol = 0.2 * spread;
    for i in 0..prototypes.len() {
        if prototypes[i].duplicate_of.is_some() {
            continue;
        }
        for j in i + 1..prototypes.len() {
            if prototypes[j].duplicate_of.is_none() && d(&prototypes[i].dh, &prototypes[j].dh) < tol
            {
                prototypes[j].duplicate_of = Some(i);
            }
        }
    }
    Ok(FactorPrototypeSet {
        prototypes,
        source: PrototypeSource::Clustered,
    })
}

/// h + dh, the additive prediction.
pub fn predict_additive(h: &Tensor, dh: &[f64]) -> Tensor {
    let mut out = h.clone();
    for (o, &d) in out.data_mut().iter_mut().zip(dh) {
        *o += d;
    }
    out
}

/// T(h, phi), the learned-transition prediction.
pub fn predict_learned(model: &IcfModel, h: &Tensor, phi: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let hid = tape.leaf(h.clone());
    let pid = tape.leaf(phi.clone());
    let pred = bound.transition(&mut tape, hid, pid)?;
    Ok(tape.value(pred).clone())
}

/// Decode a predicted latent back to observation space.
pub fn decode_prediction(model: &IcfModel, h_pred: &Tensor) -> Result<Tensor> {
    crate::models::decode_value(model, h_pred)
}

#[derive(Clone, Debug, Serialize)]
pub struct Decomposition {
    /// Indices into the prototype set, one per applied move (a multiset:
    /// order carries no meaning).
    pub labels: Vec<usize>,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Greedy residual decomposition: repeatedly subtract the prototype with the
/// largest positive projection coefficient until the residual drops below
/// tau = 0.25 * min prototype norm, no prototype shrinks the residual, or
/// `max_steps` moves are used.
pub fn decompose(
    h_start: &Tensor,
    h_goal: &Tensor,
    prototypes: &FactorPrototypeSet,
    max_steps: usize,
) -> Result<Decomposition> {
    prototypes.validate()?;
    if h_start.shape() != h_goal.shape() {
        return Err(IcfError::ShapeMismatch {
            context: "decompose",
            lhs: h_start.shape().to_vec(),
            rhs: h_goal.shape().to_vec(),
        });
    }
    let candidates = prototypes.distinct();
    let min_norm = candidates
        .iter()
        .map(|(_, p)| p.dh.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min);
    if !(min_norm > 0.0) || !min_norm.is_finite() {
        return Err(IcfError::Degenerate("prototype with zero norm".into()));
    }
    let tau = 0.25 * min_norm;

    let mut residual: Vec<f64> = h_goal
        .data()
        .iter()
        .zip(h_start.data())
        .map(|(g, s)| g - s)
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut labels = Vec::new();
    while norm(&residual) >= tau && labels.len() < max_steps {
        let mut best: Option<(usize, f64)> = None;
        for (idx, p) in &candidates {
            let nn: f64 = p.dh.iter().map(|v| v * v).sum();
            let proj: f64 =
                residual.iter().zip(&p.dh).map(|(r, d)| r * d).sum::<f64>() / nn;
            if best.map_or(true, |(_, b)| proj > b) {
                best = Some((*idx, proj));
            }
        }
        let (idx, coeff) = best.unwrap();
        // subtracting the prototype reduces the residual iff coeff > 1/2
        if coeff <= 0.5 {
            break;
        }
        for (r, &d) in residual.iter_mut().zip(&prototypes.prototypes[idx].dh) {
            *r -= d;
        }
        labels.push(idx);
    }
    let rn = norm(&residual);
    Ok(Decomposition {
        labels,
        residual_norm: rn,
        converged: rn < tau,
    })
}

/// Try every distinct ordering of the multiset of actions from `start`,
/// returning the first order whose execution satisfies `success`.
pub fn execute_multiset(
    grid: &GridSpec,
    start: &EnvState,
    actions: &[usize],
    success: impl Fn(&EnvState) -> bool,
) -> Result<Option<(Vec<usize>, EnvState)>> {
    let mut sorted = actions.to_vec();
    sorted.sort_unstable();
    let mut orders = Vec::new();
    permutations(&mut sorted, 0, &mut orders);
    for order in orders {
        let mut s = start.clone();
        for &a in &order {
            s = crate::env::step(grid, &s, a)?;
        }
        if success(&s) {
            return Ok(Some((order, s)));
        }
    }
    Ok(None)
}

fn permutations(items: &mut Vec<usize>, start: usize, out: &mut Vec<Vec<usize>>) {
    if start == items.len() {
        out.push(items.clone());
        return;
    }
    let mut seen = std::collections::BTreeSet::new();
    for i in start..items.len() {
        if !seen.insert(items[i]) {
            continue;
        }
        items.swap(start, i);
        permutations(items, start + 1, out);
        items.swap(start, i);
    }
}
