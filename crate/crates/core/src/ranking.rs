//! Expert ordering: ascending router-norm change, then MaxVar promotion.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ExpertMetrics;

pub const DEFAULT_ZETA: f64 = 3.0;

/// Experts of one layer, position 0 first in line for high precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedOrder {
    pub layer_id: usize,
    pub order: Vec<usize>,
    pub zeta: f64,
    pub promotions_applied: usize,
    /// Experts placed ahead of their router-norm position.
    pub promoted: Vec<usize>,
}

/// `a` dominates `b` when its MaxVar is at least `zeta` times larger.
///
/// For `b` with zero MaxVar the ratio test is vacuous, so any strictly
/// larger MaxVar dominates it; equal values never dominate each other.
pub fn dominates(maxvar_a: f64, maxvar_b: f64, zeta: f64) -> bool {
    maxvar_a >= zeta * maxvar_b && maxvar_a > maxvar_b
}

/// Ascending by lambda, ties broken by ascending expert id.
pub fn rank_by_lambda(metrics: &[ExpertMetrics]) -> Result<Vec<usize>> {
    let mut seen = HashSet::new();
    for m in metrics {
        if !seen.insert(m.expert_id) {
            return Err(Error::DuplicateExpert(m.expert_id));
        }
        if !m.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite lambda for expert {}",
                m.expert_id
            )));
        }
    }
    let mut sorted: Vec<&ExpertMetrics> = metrics.iter().collect();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.expert_id.cmp(&b.expert_id)));
    Ok(sorted.into_iter().map(|m| m.expert_id).collect())
}

/// Reorders `order` so no expert sits below one it dominates.
///
/// Walks the input front to back; before placing an expert, every unplaced
/// expert that dominates it is placed first (recursively, in input order).
/// Domination implies strictly larger MaxVar, so the recursion is acyclic.
pub fn maxvar_promote(
    layer_id: usize,
    order: &[usize],
    maxvar: &HashMap<usize, f64>,
    zeta: f64,
) -> Result<RankedOrder> {
    if !zeta.is_finite() || zeta <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "zeta must be a finite value > 1, got {zeta}"
        )));
    }
    let mut values = Vec::with_capacity(order.len());
    let mut seen = HashSet::new();
    for &e in order {
        if !seen.insert(e) {
            return Err(Error::DuplicateExpert(e));
        }
        let v = *maxvar
            .get(&e)
            .ok_or_else(|| Error::InvalidArgument(format!("no MaxVar for expert {e}")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "MaxVar for expert {e} must be finite and >= 0, got {v}"
            )));
        }
        values.push(v);
    }

    let n = order.len();
    let mut placed = vec![false; n];
    let mut out = Vec::with_capacity(n);
    let mut promoted = Vec::new();

    fn place(
        i: usize,
        values: &[f64],
        zeta: f64,
        placed: &mut [bool],
        out: &mut Vec<usize>,
        promoted_pos: &mut Vec<usize>,
        out_of_turn: bool,
    ) {
        for r in 0..values.len() {
            if r != i && !placed[r] && dominates(values[r], values[i], zeta) {
                place(r, values, zeta, placed, out, promoted_pos, true);
            }
        }
        placed[i] = true;
        out.push(i);
        if out_of_turn {
            promoted_pos.push(i);
        }
    }

    let mut promoted_pos = Vec::new();
    for i in 0..n {
        if !placed[i] {
            place(i, &values, zeta, &mut placed, &mut out, &mut promoted_pos, false);
        }
    }
    promoted.extend(promoted_pos.iter().map(|&i| order[i]));

    Ok(RankedOrder {
        layer_id,
        order: out.into_iter().map(|i| order[i]).collect(),
        zeta,
        promotions_applied: promoted.len(),
        promoted,
    })
}

/// Both steps in sequence: lambda ordering, then MaxVar promotion.
pub fn rank_experts(layer_id: usize, metrics: &[ExpertMetrics], zeta: f64) -> Result<RankedOrder> {
    let order = rank_by_lambda(metrics)?;
    let maxvar: HashMap<usize, f64> = metrics.iter().map(|m| (m.expert_id, m.maxvar)).collect();
    maxvar_promote(layer_id, &order, &maxvar, zeta)
}

/// Whether `order` satisfies the promotion fixpoint: no later expert
/// dominates an earlier one.
pub fn is_fixpoint(order: &[usize], maxvar: &HashMap<usize, f64>, zeta: f64) -> bool {
    order
        .iter()
        .enumerate()
        .all(|(i, a)| order[i + 1..].iter().all(|b| !dominates(maxvar[b], maxvar[a], zeta)))
}
