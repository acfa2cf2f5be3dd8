//! Bit assignment over a ranked expert list, plus memory estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::RankedOrder;

/// Absolute slack (in total bits) when comparing a plan against its budget,
/// so targets such as 2.3 bits on 10 experts are met exactly.
const BUDGET_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Target close to the high level: as many high experts as possible.
    NearHigh,
    /// Middle band: as many high experts as possible while the low group
    /// stays no larger than the middle group.
    Balanced,
    /// Target close to the low level: as few low experts as possible.
    NearLow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertBits {
    pub expert_id: usize,
    pub bits: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCount {
    pub bits: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitPlan {
    pub layer_id: usize,
    /// Distinct bit-widths, ascending.
    pub levels: Vec<u32>,
    /// One entry per level, same order as `levels`.
    pub counts: Vec<LevelCount>,
    /// In rank order: position 0 is the highest-priority expert.
    pub assignment: Vec<ExpertBits>,
    pub target_avg_bits: f64,
    pub achieved_avg_bits: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
}

impl BitPlan {
    pub fn bits_for(&self, expert_id: usize) -> Option<u32> {
        self.assignment
            .iter()
            .find(|a| a.expert_id == expert_id)
            .map(|a| a.bits)
    }

    pub fn count_at(&self, bits: u32) -> usize {
        self.counts.iter().find(|c| c.bits == bits).map_or(0, |c| c.count)
    }

    /// Bits never increase down the rank order.
    pub fn is_rank_monotone(&self) -> bool {
        self.assignment.windows(2).all(|w| w[0].bits >= w[1].bits)
    }

    pub fn within_budget(&self) -> bool {
        let k = self.assignment.len() as f64;
        self.achieved_avg_bits * k <= self.target_avg_bits * k + BUDGET_EPS * k.max(1.0)
    }
}

fn fits(total_bits: f64, budget: f64, k: usize) -> bool {
    total_bits <= budget + BUDGET_EPS * (k.max(1) as f64)
}

fn build_plan(order: &RankedOrder, groups: &[(u32, usize)], target: f64, regime: Option<Regime>) -> BitPlan {
    let mut assignment = Vec::with_capacity(order.order.len());
    let mut it = order.order.iter();
    for &(bits, count) in groups {
        for &expert_id in it.by_ref().take(count) {
            assignment.push(ExpertBits { expert_id, bits });
        }
    }
    let k = assignment.len().max(1) as f64;
    let achieved = assignment.iter().map(|a| a.bits as f64).sum::<f64>() / k;
    let mut levels: Vec<u32> = groups.iter().map(|g| g.0).collect();
    levels.sort_unstable();
    let counts = levels
        .iter()
        .map(|&b| LevelCount {
            bits: b,
            count: groups.iter().filter(|g| g.0 == b).map(|g| g.1).sum(),
        })
        .collect();
    BitPlan {
        layer_id: order.layer_id,
        levels,
        counts,
        assignment,
        target_avg_bits: target,
        achieved_avg_bits: achieved,
        regime,
    }
}

/// Top `⌊κ·k⌋` experts at `b_h`, the rest at `b_l`, with
/// `κ = (b_avg - b_l) / (b_h - b_l)`.
pub fn two_level_assign(order: &RankedOrder, b_h: u32, b_l: u32, b_avg: f64) -> Result<BitPlan> {
    if b_l == 0 || b_l >= b_h {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= b_l < b_h, got b_h={b_h}, b_l={b_l}"
        )));
    }
    let (lo, hi) = (b_l as f64, b_h as f64);
    if !(b_avg >= lo && b_avg <= hi) {
        return Err(Error::Infeasible(format!("target {b_avg} outside [{b_l}, {b_h}]")));
    }
    let k = order.order.len();
    let kappa = (b_avg - lo) / (hi - lo);
    let mut n_h = ((kappa * k as f64) + BUDGET_EPS).floor() as usize;
    n_h = n_h.min(k);
    while n_h > 0 && !fits(n_h as f64 * hi + (k - n_h) as f64 * lo, b_avg * k as f64, k) {
        n_h -= 1;
    }
    Ok(build_plan(order, &[(b_h, n_h), (b_l, k - n_h)], b_avg, None))
}

pub fn regime_for(b_h: u32, b_l: u32, b_avg: f64) -> Regime {
    let (hi, lo) = (b_h as f64, b_l as f64);
    let upper = hi - (hi - lo) / 3.0;
    let lower = hi - 2.0 * (hi - lo) / 3.0;
    if b_avg > upper {
        Regime::NearHigh
    } else if b_avg >= lower {
        Regime::Balanced
    } else {
        Regime::NearLow
    }
}

/// Counts `(n_h, n_m, n_l)` for the three-level program, found by
/// enumerating every split of `k` experts.
pub fn three_level_counts(k: usize, b_h: u32, b_m: u32, b_l: u32, b_avg: f64) -> Result<(usize, usize, usize, Regime)> {
    if b_l == 0 || !(b_l < b_m && b_m < b_h) {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= b_l < b_m < b_h, got ({b_h}, {b_m}, {b_l})"
        )));
    }
    if !(b_avg >= b_l as f64 && b_avg <= b_h as f64) {
        return Err(Error::Infeasible(format!("target {b_avg} outside [{b_l}, {b_h}]")));
    }
    let regime = regime_for(b_h, b_l, b_avg);
    let budget = b_avg * k as f64;
    // Lexicographic key, larger is better.
    let score = |n_h: usize, n_l: usize| -> (i64, i64) {
        match regime {
            Regime::NearHigh | Regime::Balanced => (n_h as i64, -(n_l as i64)),
            Regime::NearLow => (-(n_l as i64), n_h as i64),
        }
    };
    type Split = (usize, usize, usize);
    let mut best: Option<((i64, i64), Split)> = None;
    for n_h in 0..=k {
        for n_l in 0..=(k - n_h) {
            let n_m = k - n_h - n_l;
            let total = n_h as f64 * b_h as f64 + n_m as f64 * b_m as f64 + n_l as f64 * b_l as f64;
            if !fits(total, budget, k) {
                continue;
            }
            if regime == Regime::Balanced && n_l > n_m {
                continue;
            }
            let s = score(n_h, n_l);
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, (n_h, n_m, n_l)));
            }
        }
    }
    let (_, (n_h, n_m, n_l)) = best.ok_or_else(|| {
        Error::Infeasible(format!(
            "no split of {k} experts over ({b_h}, {b_m}, {b_l}) meets {b_avg} bits"
        ))
    })?;
    Ok((n_h, n_m, n_l, regime))
}

pub fn three_level_assign(order: &RankedOrder, b_h: u32, b_m: u32, b_l: u32, b_avg: f64) -> Result<BitPlan> {
    let (n_h, n_m, n_l, regime) = three_level_counts(order.order.len(), b_h, b_m, b_l, b_avg)?;
    Ok(build_plan(
        order,
        &[(b_h, n_h), (b_m, n_m), (b_l, n_l)],
        b_avg,
        Some(regime),
    ))
}

/// Bytes of one layer's experts plus the non-expert parameters, in GB
/// (10^9 bytes). Quantization scales and zero points are not counted.
pub fn plan_memory_estimate(
    plan: &BitPlan,
    params_per_expert: u64,
    non_expert_params: u64,
    non_expert_bits: u32,
) -> f64 {
    model_memory_estimate(
        std::slice::from_ref(plan),
        params_per_expert,
        non_expert_params,
        non_expert_bits,
    )
}

/// Same as [`plan_memory_estimate`] summed over every MoE layer.
pub fn model_memory_estimate(
    plans: &[BitPlan],
    params_per_expert: u64,
    non_expert_params: u64,
    non_expert_bits: u32,
) -> f64 {
    let expert_bits: f64 = plans
        .iter()
        .flat_map(|p| p.assignment.iter())
        .map(|a| params_per_expert as f64 * a.bits as f64)
        .sum();
    let bytes = (expert_bits + non_expert_params as f64 * non_expert_bits as f64) / 8.0;
    bytes / 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    fn order(k: usize) -> RankedOrder {
        RankedOrder {
            layer_id: 0,
            order: (0..k).collect(),
            zeta: 3.0,
            promotions_applied: 0,
            promoted: vec![],
        }
    }

    #[test]
    fn two_level_examples() {
        let p = two_level_assign(&order(64), 3, 2, 2.75).unwrap();
        assert_eq!((p.count_at(3), p.count_at(2)), (48, 16));
        assert_eq!(p.achieved_avg_bits, 2.75);

        let p = two_level_assign(&order(8), 3, 2, 3.0).unwrap();
        assert_eq!(p.count_at(3), 8);

        let p = two_level_assign(&order(8), 3, 2, 2.5).unwrap();
        assert_eq!((p.count_at(3), p.count_at(2)), (4, 4));
        assert!(p.is_rank_monotone());
    }

    #[test]
    fn two_level_rounds_down_and_stays_in_budget() {
        let p = two_level_assign(&order(10), 3, 2, 2.35).unwrap();
        assert_eq!(p.count_at(3), 3);
        assert!(p.within_budget());
        // 0.3 * 10 is not exactly 3 in binary floating point.
        let p = two_level_assign(&order(10), 3, 2, 2.3).unwrap();
        assert_eq!(p.count_at(3), 3);
    }

    #[test]
    fn two_level_rejects_out_of_range_target() {
        assert!(matches!(
            two_level_assign(&order(4), 3, 2, 3.5),
            Err(Error::Infeasible(_))
        ));
        assert!(two_level_assign(&order(4), 2, 2, 2.0).is_err());
    }

    #[test]
    fn three_level_examples() {
        let (h, m, l, r) = three_level_counts(8, 3, 2, 1, 2.75).unwrap();
        assert_eq!(((h, m, l), r), ((7, 0, 1), Regime::NearHigh));
        let (h, m, l, r) = three_level_counts(8, 3, 2, 1, 2.0).unwrap();
        assert_eq!(((h, m, l), r), ((2, 4, 2), Regime::Balanced));
        let (h, m, l, r) = three_level_counts(8, 3, 2, 1, 1.25).unwrap();
        assert_eq!(((h, m, l), r), ((0, 2, 6), Regime::NearLow));
    }

    #[test]
    fn regime_boundaries_belong_to_middle_band() {
        // With levels (4, 2, 1) the boundaries are exactly 3 and 2.
        assert_eq!(regime_for(4, 1, 3.0), Regime::Balanced);
        assert_eq!(regime_for(4, 1, 2.0), Regime::Balanced);
        assert_eq!(regime_for(4, 1, 3.01), Regime::NearHigh);
        assert_eq!(regime_for(4, 1, 1.99), Regime::NearLow);
    }

    #[test]
    fn three_level_plan_respects_order() {
        let mut o = order(8);
        o.order = vec![5, 3, 1, 7, 0, 2, 4, 6];
        let p = three_level_assign(&o, 3, 2, 1, 2.0).unwrap();
        assert_eq!(p.bits_for(5), Some(3));
        assert_eq!(p.bits_for(6), Some(1));
        assert!(p.is_rank_monotone());
        assert!(p.within_budget());
    }

    #[test]
    fn memory_estimate_is_linear() {
        let p = two_level_assign(&order(4), 16, 8, 16.0).unwrap();
        assert_eq!(plan_memory_estimate(&p, 1_000_000_000, 0, 16), 8.0);
        let half = two_level_assign(&order(4), 16, 8, 8.0).unwrap();
        assert_eq!(plan_memory_estimate(&half, 1_000_000_000, 0, 16), 4.0);
    }
}
