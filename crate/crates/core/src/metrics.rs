//! Per-expert statistics: router norm change, MaxVar, routing statistics,
//! activation and proficiency diagnostics, and rank correlation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::GroupAxis;
use crate::synthetic::model::{MoeForward, TokenSpaceModel};
use crate::synthetic::tokens::{Relevant, Sequence, Token, TokenSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMetrics {
    pub expert_id: usize,
    /// Router norm change, or the final router norm when
    /// `lambda_is_surrogate` is set.
    pub lambda: f64,
    pub lambda_is_surrogate: bool,
    pub maxvar: f64,
    /// Mean number of tokens routed to the expert per sequence.
    pub activation_frequency: Option<f64>,
    /// Mean total gating mass of the expert per sequence.
    pub activation_weight: Option<f64>,
}

impl ExpertMetrics {
    pub fn new(expert_id: usize, lambda: f64, lambda_is_surrogate: bool, maxvar: f64) -> Self {
        ExpertMetrics {
            expert_id,
            lambda,
            lambda_is_surrogate,
            maxvar,
            activation_frequency: None,
            activation_weight: None,
        }
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidTensor(format!("non-finite value in {what}")));
    }
    Ok(())
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖w_T‖ - ‖w_0‖`.
pub fn router_norm_change(w0: &[f64], w_t: &[f64]) -> Result<f64> {
    if w0.len() != w_t.len() {
        return Err(Error::DimensionMismatch {
            expected: w0.len(),
            actual: w_t.len(),
        });
    }
    check_finite(w0, "initial router")?;
    check_finite(w_t, "final router")?;
    Ok(l2(w_t) - l2(w0))
}

/// `‖w_T‖`, standing in for the norm change when no initial router exists.
pub fn router_norm_surrogate(w_t: &[f64]) -> Result<f64> {
    check_finite(w_t, "final router")?;
    Ok(l2(w_t))
}

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (sum, count) = values.clone().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    let mean = sum / count as f64;
    values.map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64
}

/// Largest population variance over the neurons of `w1`. `neuron_axis`
/// says whether neurons are rows or columns.
pub fn max_intra_neuron_variance(w1: &DMatrix<f64>, neuron_axis: GroupAxis) -> Result<f64> {
    if w1.is_empty() {
        return Err(Error::Empty("first-layer matrix".into()));
    }
    check_finite(w1.as_slice(), "first-layer matrix")?;
    let maxvar = match neuron_axis {
        GroupAxis::Row => w1
            .row_iter()
            .map(|r| population_variance(r.iter().copied()))
            .fold(0.0, f64::max),
        GroupAxis::Column => w1
            .column_iter()
            .map(|c| population_variance(c.iter().copied()))
            .fold(0.0, f64::max),
    };
    Ok(maxvar)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub activation_frequency: f64,
    pub activation_weight: f64,
}

/// Per-expert routing frequency and gating mass, averaged over sequences.
pub fn routing_statistics<M: MoeForward>(
    model: &M,
    ts: &TokenSet,
    sequences: &[Sequence],
) -> Result<Vec<RoutingStats>> {
    if sequences.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    let k = model.num_experts();
    let mut freq = vec![0.0; k];
    let mut weight = vec![0.0; k];
    for seq in sequences {
        let pass = model.forward(ts, seq);
        for (s, e) in pass.experts.iter().enumerate() {
            freq[s] += e.selected.len() as f64;
            weight[s] += e.gates.iter().sum::<f64>();
        }
    }
    let count = sequences.len() as f64;
    Ok(freq
        .into_iter()
        .zip(weight)
        .map(|(f, w)| RoutingStats {
            activation_frequency: f / count,
            activation_weight: w / count,
        })
        .collect())
}

/// `1ᵀ ReLU(W1 v)`: summed ReLU response of the expert's neurons to `v`.
pub fn expert_activation(w1: &DMatrix<f64>, v: &DVector<f64>) -> Result<f64> {
    if w1.ncols() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: w1.ncols(),
            actual: v.len(),
        });
    }
    Ok((w1 * v).iter().map(|x| x.max(0.0)).sum())
}

/// Whether `pass` shows expert `s` routing token `v` with gate at least `1/l`.
fn routes_with_weight(
    pass: &crate::synthetic::model::ForwardPass,
    seq: &Sequence,
    s: usize,
    v: Token,
    top_l: usize,
) -> bool {
    let threshold = 1.0 / top_l as f64;
    let e = &pass.experts[s];
    e.selected
        .iter()
        .zip(&e.gates)
        .any(|(&j, &g)| seq.tokens[j] == v && g >= threshold)
}

/// Fraction of sequences containing `v` in which expert `s` routes `v`
/// with a gating value of at least `1/l`.
pub fn proficiency<M: MoeForward>(
    model: &M,
    ts: &TokenSet,
    sequences: &[Sequence],
    expert: usize,
    v: Token,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for seq in sequences.iter().filter(|s| s.contains(v)) {
        total += 1;
        let pass = model.forward(ts, seq);
        if routes_with_weight(&pass, seq, expert, v, model.top_l()) {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedStatistic(format!(
            "no sequence contains token {}{}",
            if v.sign < 0 { "-" } else { "" },
            v.index
        )));
    }
    Ok(hits as f64 / total as f64)
}

/// Proficiency of every expert for each of the four relevant tokens, in
/// [`Relevant::ALL`] order. `None` where no sequence carries the token.
pub fn proficiency_table<M: MoeForward>(model: &M, ts: &TokenSet, sequences: &[Sequence]) -> Vec<[Option<f64>; 4]> {
    let k = model.num_experts();
    let mut hits = vec![[0usize; 4]; k];
    let mut totals = [0usize; 4];
    for seq in sequences {
        let Some(r) = ts.classify(seq.relevant_token()) else {
            continue;
        };
        let v = ts.relevant(r);
        totals[r.slot()] += 1;
        let pass = model.forward(ts, seq);
        for (s, h) in hits.iter_mut().enumerate() {
            if routes_with_weight(&pass, seq, s, v, model.top_l()) {
                h[r.slot()] += 1;
            }
        }
    }
    hits.into_iter()
        .map(|h| {
            let mut row = [None; 4];
            for slot in 0..4 {
                if totals[slot] > 0 {
                    row[slot] = Some(h[slot] as f64 / totals[slot] as f64);
                }
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelation {
    pub spearman_rho: f64,
    pub kendall_tau: f64,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn kendall_tau_b(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].total_cmp(&a[j]) as i64;
            let db = b[i].total_cmp(&b[j]) as i64;
            match (da, db) {
                (0, 0) => {
                    ties_a += 1;
                    ties_b += 1;
                }
                (0, _) => ties_a += 1,
                (_, 0) => ties_b += 1,
                _ if da == db => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = (((pairs - ties_a) * (pairs - ties_b)) as f64).sqrt();
    (denom > 0.0).then(|| (concordant - discordant) as f64 / denom)
}

/// Spearman's ρ (average ranks) and Kendall's τ-b between two score vectors
/// over the same items.
pub fn rank_correlation_values(a: &[f64], b: &[f64]) -> Result<RankCorrelation> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedStatistic(
            "rank correlation needs at least two items".into(),
        ));
    }
    let undefined = || Error::UndefinedStatistic("constant ranking".into());
    let spearman_rho = pearson(&average_ranks(a), &average_ranks(b)).ok_or_else(undefined)?;
    let kendall_tau = kendall_tau_b(a, b).ok_or_else(undefined)?;
    Ok(RankCorrelation {
        spearman_rho,
        kendall_tau,
    })
}

/// Rank correlation between two orderings of the same experts.
pub fn rank_correlation(order_a: &[usize], order_b: &[usize]) -> Result<RankCorrelation> {
    let pos_a: BTreeMap<usize, usize> = order_a.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let pos_b: BTreeMap<usize, usize> = order_b.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    if pos_a.len() != order_a.len() || pos_b.len() != order_b.len() || pos_a.keys().ne(pos_b.keys()) {
        return Err(Error::MismatchedOrders);
    }
    let a: Vec<f64> = pos_a.values().map(|&p| p as f64).collect();
    let b: Vec<f64> = pos_b.values().map(|&p| p as f64).collect();
    rank_correlation_values(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitDiagnostics {
    /// Largest router norm.
    pub c1: f64,
    /// Largest neuron norm.
    pub c2: f64,
    /// `min_s min_{q ≠ q'} ⟨w_s, q - q'⟩` over the token set plus `-o1, -o2`.
    pub cp: f64,
    /// Fraction of each sign group aligned to the token.
    pub gamma_by_token: BTreeMap<String, f64>,
    /// `max(γ_o1, γ_o2)`.
    pub gamma: f64,
    /// Experts aligned to each relevant token, [`Relevant::ALL`] order.
    pub aligned: [Vec<usize>; 4],
}

/// Router/neuron scale constants and alignment fractions of a model,
/// with alignment read off proficiencies on `probe`.
pub fn init_diagnostics(
    model: &TokenSpaceModel,
    ts: &TokenSet,
    probe: &[Sequence],
    alignment_threshold: f64,
) -> Result<InitDiagnostics> {
    if probe.is_empty() {
        return Err(Error::Empty("alignment probe set".into()));
    }
    let k = model.num_experts();
    let c1 = (0..k).map(|s| model.router_norm(s)).fold(0.0, f64::max);
    let c2 = (0..k).map(|s| model.max_neuron_norm(s)).fold(0.0, f64::max);

    let mut cp = f64::INFINITY;
    for s in 0..k {
        let u = model.router(s);
        let extra = [-u[ts.o1], -u[ts.o2]];
        let (lo, hi) = u
            .iter()
            .chain(&extra)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        cp = cp.min(lo - hi);
    }

    let table = proficiency_table(model, ts, probe);
    let positive: Vec<usize> = (0..k).filter(|&s| model.expert_sign(s) > 0.0).collect();
    let negative: Vec<usize> = (0..k).filter(|&s| model.expert_sign(s) < 0.0).collect();
    let mut aligned: [Vec<usize>; 4] = Default::default();
    let mut gamma_by_token = BTreeMap::new();
    for r in Relevant::ALL {
        let group = if r.label() > 0 { &positive } else { &negative };
        let members: Vec<usize> = group
            .iter()
            .copied()
            .filter(|&s| table[s][r.slot()].is_some_and(|p| p >= alignment_threshold))
            .collect();
        let gamma = if group.is_empty() {
            0.0
        } else {
            members.len() as f64 / group.len() as f64
        };
        gamma_by_token.insert(r.name().to_string(), gamma);
        aligned[r.slot()] = members;
    }
    let gamma = gamma_by_token["o1"].max(gamma_by_token["o2"]);
    Ok(InitDiagnostics {
        c1,
        c2: if k == 0 { 0.0 } else { c2 },
        cp: if k == 0 { 0.0 } else { cp },
        gamma_by_token,
        gamma,
        aligned,
    })
}
