//! Post-training diagnostics for the specialization claims: which relevant
//! token each expert learned, how router norm changes order the experts, and
//! how strongly prevalent-token experts fire compared to their rare-token
//! counterparts.

use serde::{Deserialize, Serialize};

use crate::metrics::proficiency_table;
use crate::synthetic::model::{MoeForward, TokenSpaceModel};
use crate::synthetic::tokens::{Relevant, Sequence, TokenSet};
use crate::synthetic::train::TrainRun;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSummary {
    pub expert_id: usize,
    /// Second-layer sign.
    pub sign: i8,
    pub lambda: f64,
    pub specialization: Option<Relevant>,
    /// Final proficiencies in `o1, -o1, o2, -o2` order.
    pub proficiency: [Option<f64>; 4],
    /// Final activations in `o1, -o1, o2, -o2` order.
    pub activation: [f64; 4],
    pub router_o1_initial: f64,
    pub router_o1_final: f64,
    pub router_o2_initial: f64,
    pub router_o2_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingVerdict {
    /// (rare-token expert, prevalent-token expert) pairs compared.
    pub pairs: usize,
    pub satisfied: usize,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRatioVerdict {
    /// Smallest `σ_{-o_i}(s') / σ_{o_i}(s)` over matched pairs.
    pub min_ratio: Option<f64>,
    /// `(1 - 2α) / (2α)`.
    pub bound: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentVerdict {
    /// Specialized experts whose router projection on their token grew.
    pub enhanced: usize,
    pub specialized: usize,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub alpha: f64,
    pub alignment_threshold: f64,
    pub experts: Vec<ExpertSummary>,
    /// Relevant tokens no expert of the matching class specialized to.
    /// Non-empty makes the run invalid for the ordering and ratio checks.
    pub unlearned: Vec<Relevant>,
    /// Experts whose strongest token belongs to the other class. They are
    /// left out of the ordering and ratio checks.
    pub cross_class: Vec<usize>,
    pub valid: bool,
    pub alignment: AlignmentVerdict,
    pub lambda_ordering: OrderingVerdict,
    pub activation_ratio: ActivationRatioVerdict,
    pub final_test_error: f64,
}

impl LemmaReport {
    /// Router-norm ordering holds on a valid run.
    pub fn ordering_holds(&self) -> bool {
        self.valid && self.lambda_ordering.holds
    }

    /// The activation ratio reaches `fraction` of the bound on a valid run.
    pub fn ratio_holds(&self, fraction: f64) -> bool {
        self.valid
            && self
                .activation_ratio
                .min_ratio
                .is_some_and(|r| r >= fraction * self.activation_ratio.bound)
    }
}

/// Argmax of the proficiencies over the four relevant tokens. Ties go to
/// the tokens of the class the expert votes for (`sign`), then to the less
/// prevalent token. `None` when no proficiency reaches `threshold`.
pub fn specialization(proficiency: &[Option<f64>; 4], sign: i8, threshold: f64) -> Option<Relevant> {
    let key = |r: Relevant, p: f64| (p, r.label() == sign, r.is_less_prevalent());
    Relevant::ALL
        .into_iter()
        .filter_map(|r| proficiency[r.slot()].map(|p| (r, p)))
        .filter(|(_, p)| *p >= threshold)
        .max_by(|(a, pa), (b, pb)| key(*a, *pa).partial_cmp(&key(*b, *pb)).expect("finite proficiency"))
        .map(|(r, _)| r)
}

/// Builds the report for `final_model` against its starting point, with
/// proficiencies measured on `probe`.
pub fn lemma1_report_for(
    initial: &TokenSpaceModel,
    final_model: &TokenSpaceModel,
    ts: &TokenSet,
    probe: &[Sequence],
    alpha: f64,
    alignment_threshold: f64,
    final_test_error: f64,
) -> LemmaReport {
    let k = final_model.num_experts();
    let table = proficiency_table(final_model, ts, probe);
    let experts: Vec<ExpertSummary> = (0..k)
        .map(|s| {
            let activation = Relevant::ALL.map(|r| final_model.activation(s, ts.relevant(r)));
            let sign = if final_model.expert_sign(s) > 0.0 { 1 } else { -1 };
            ExpertSummary {
                expert_id: s,
                sign,
                lambda: final_model.router_norm(s) - initial.router_norm(s),
                specialization: specialization(&table[s], sign, alignment_threshold),
                proficiency: table[s],
                activation,
                router_o1_initial: initial.router(s)[ts.o1],
                router_o1_final: final_model.router(s)[ts.o1],
                router_o2_initial: initial.router(s)[ts.o2],
                router_o2_final: final_model.router(s)[ts.o2],
            }
        })
        .collect();

    // Only experts that learned a token of their own class take part in the
    // within-group comparisons.
    let own_class = |e: &ExpertSummary| e.specialization.filter(|r| r.label() == e.sign);
    let unlearned: Vec<Relevant> = Relevant::ALL
        .into_iter()
        .filter(|r| experts.iter().all(|e| own_class(e) != Some(*r)))
        .collect();
    let cross_class = experts
        .iter()
        .filter(|e| e.specialization.is_some() && own_class(e).is_none())
        .map(|e| e.expert_id)
        .collect();

    let projection = |e: &ExpertSummary, r: Relevant| {
        let (init, fin) = match r {
            Relevant::O1 | Relevant::NegO1 => (e.router_o1_initial, e.router_o1_final),
            Relevant::O2 | Relevant::NegO2 => (e.router_o2_initial, e.router_o2_final),
        };
        let sign = if r.is_less_prevalent() { 1.0 } else { -1.0 };
        (sign * init, sign * fin)
    };
    let specialized: Vec<(&ExpertSummary, Relevant)> =
        experts.iter().filter_map(|e| own_class(e).map(|r| (e, r))).collect();
    let enhanced = specialized
        .iter()
        .filter(|(e, r)| {
            let (init, fin) = projection(e, *r);
            fin > init
        })
        .count();

    let mut ordering = OrderingVerdict {
        pairs: 0,
        satisfied: 0,
        holds: true,
    };
    let mut min_ratio: Option<f64> = None;
    let mut ratio_pairs = 0;
    for (rare, rare_tok) in specialized.iter().filter(|(_, r)| r.is_less_prevalent()) {
        for (common, common_tok) in specialized.iter().filter(|(_, r)| !r.is_less_prevalent()) {
            if rare.sign != common.sign || rare_tok.counterpart() != *common_tok {
                continue;
            }
            ordering.pairs += 1;
            if rare.lambda < common.lambda {
                ordering.satisfied += 1;
            }
            let num = common.activation[common_tok.slot()];
            let den = rare.activation[rare_tok.slot()];
            let ratio = if den > 0.0 { num / den } else { f64::INFINITY };
            min_ratio = Some(min_ratio.map_or(ratio, |m| m.min(ratio)));
            ratio_pairs += 1;
        }
    }
    ordering.holds = ordering.satisfied == ordering.pairs;

    LemmaReport {
        alpha,
        alignment_threshold,
        valid: unlearned.is_empty(),
        unlearned,
        cross_class,
        alignment: AlignmentVerdict {
            enhanced,
            specialized: specialized.len(),
            holds: enhanced == specialized.len(),
        },
        lambda_ordering: ordering,
        activation_ratio: ActivationRatioVerdict {
            min_ratio,
            bound: (1.0 - 2.0 * alpha) / (2.0 * alpha),
            pairs: ratio_pairs,
        },
        experts,
        final_test_error,
    }
}

/// Report for a finished training run.
pub fn lemma1_report(run: &TrainRun) -> LemmaReport {
    lemma1_report_for(
        &run.initial,
        &run.final_model,
        &run.tokens,
        &run.probe,
        run.config.alpha,
        run.config.alignment_threshold,
        run.final_test_error,
    )
}
