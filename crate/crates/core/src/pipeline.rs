//! Metrics, planning and quantization over a loaded checkpoint. These are
//! the documents the command-line tool reads and writes.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::allocation::{three_level_assign, two_level_assign, BitPlan};
use crate::error::{Error, Result};
use crate::io::{LoadedExpert, LoadedLayer, LoadedModel};
use crate::metrics::{max_intra_neuron_variance, router_norm_change, router_norm_surrogate, ExpertMetrics};
use crate::quantizer::{quantize_dequantize, reconstruction_report, GroupAxis, QuantMode, MAX_BITS};
use crate::ranking::rank_experts;
use crate::seeding::{self, stream_rng};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer_id: usize,
    /// Λ is the final router norm for every expert of this layer.
    pub surrogate: bool,
    pub experts: Vec<ExpertMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub model_name: String,
    pub layers: Vec<LayerMetrics>,
}

fn expert_metrics(e: &LoadedExpert, surrogate: bool) -> Result<ExpertMetrics> {
    let lambda = match (&e.router_init, surrogate) {
        (Some(init), false) => router_norm_change(init, &e.router_final)?,
        _ => router_norm_surrogate(&e.router_final)?,
    };
    let maxvar = max_intra_neuron_variance(&e.w1, e.neuron_axis)?;
    Ok(ExpertMetrics::new(e.expert_id, lambda, surrogate, maxvar))
}

/// Λ and MaxVar for every expert. A layer falls back to the surrogate when
/// `force_surrogate` is set or any of its initial routers is missing.
pub fn compute_metrics(model: &LoadedModel, force_surrogate: bool) -> Result<MetricsFile> {
    let layers = model
        .layers
        .iter()
        .map(|layer| {
            let surrogate = force_surrogate || layer.needs_surrogate();
            let experts = layer
                .experts
                .iter()
                .map(|e| expert_metrics(e, surrogate))
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerMetrics {
                layer_id: layer.layer_id,
                surrogate,
                experts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsFile {
        schema_version: SCHEMA_VERSION,
        model_name: model.manifest.model_name.clone(),
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub expert_id: usize,
    pub lambda: f64,
    pub lambda_is_surrogate: bool,
    pub maxvar: f64,
    /// Moved ahead of its router-norm position by MaxVar promotion.
    pub promoted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_id: usize,
    /// Rank order, highest priority first.
    pub ranking: Vec<RankingEntry>,
    pub plan: BitPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanGlobal {
    pub zeta: f64,
    /// As requested: high first.
    pub levels: Vec<u32>,
    pub target_avg_bits: f64,
    pub achieved_avg_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub model_name: String,
    pub global: PlanGlobal,
    pub layers: Vec<LayerPlan>,
}

impl PlanFile {
    pub fn bits_for(&self, layer_id: usize, expert_id: usize) -> Option<u32> {
        self.layers
            .iter()
            .find(|l| l.layer_id == layer_id)
            .and_then(|l| l.plan.bits_for(expert_id))
    }
}

/// Checks `levels` is two or three strictly decreasing bit-widths.
pub fn validate_levels(levels: &[u32]) -> Result<()> {
    if !(2..=3).contains(&levels.len()) {
        return Err(Error::InvalidArgument(format!(
            "expected 2 or 3 levels (high[,mid],low), got {}",
            levels.len()
        )));
    }
    if levels.iter().any(|&b| b == 0 || b > MAX_BITS) {
        return Err(Error::InvalidArgument(format!(
            "levels must be in 1..={MAX_BITS}: {levels:?}"
        )));
    }
    if levels.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "levels must be strictly decreasing: {levels:?}"
        )));
    }
    Ok(())
}

/// Ranks every layer and assigns bits with the same levels and target.
pub fn build_plan(metrics: &MetricsFile, levels: &[u32], avg_bits: f64, zeta: f64) -> Result<PlanFile> {
    validate_levels(levels)?;
    let mut layers = Vec::with_capacity(metrics.layers.len());
    for lm in &metrics.layers {
        let order = rank_experts(lm.layer_id, &lm.experts, zeta)?;
        let plan = match *levels {
            [h, l] => two_level_assign(&order, h, l, avg_bits)?,
            [h, m, l] => three_level_assign(&order, h, m, l, avg_bits)?,
            _ => unreachable!("levels validated"),
        };
        let ranking = order
            .order
            .iter()
            .map(|id| {
                let m = lm
                    .experts
                    .iter()
                    .find(|m| m.expert_id == *id)
                    .expect("ranked ids come from the metrics");
                RankingEntry {
                    expert_id: m.expert_id,
                    lambda: m.lambda,
                    lambda_is_surrogate: m.lambda_is_surrogate,
                    maxvar: m.maxvar,
                    promoted: order.promoted.contains(id),
                }
            })
            .collect();
        layers.push(LayerPlan {
            layer_id: lm.layer_id,
            ranking,
            plan,
        });
    }
    let (total, count) = layers
        .iter()
        .flat_map(|l| l.plan.assignment.iter())
        .fold((0.0, 0usize), |(t, c), a| (t + f64::from(a.bits), c + 1));
    Ok(PlanFile {
        schema_version: SCHEMA_VERSION,
        model_name: metrics.model_name.clone(),
        global: PlanGlobal {
            zeta,
            levels: levels.to_vec(),
            target_avg_bits: avg_bits,
            achieved_avg_bits: if count == 0 { 0.0 } else { total / count as f64 },
        },
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertQuantReport {
    pub layer_id: usize,
    pub expert_id: usize,
    pub bits: u32,
    pub max_abs_error: f64,
    /// Largest per-neuron `error / (Δ/2)`; at most 1 up to rounding.
    pub max_error_over_half_delta: f64,
    pub frobenius_error: f64,
    pub max_distinct_levels: usize,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReportFile {
    pub schema_version: u32,
    pub model_name: String,
    pub mode: QuantMode,
    /// Errors are measured before the weights are stored as `f32`.
    pub experts: Vec<ExpertQuantReport>,
    pub all_within_bound: bool,
}

/// Quantizes every expert's first layer, neuron by neuron, at the bits the
/// plan gives it. Routers are left untouched.
pub fn apply_plan(
    model: &LoadedModel,
    plan: &PlanFile,
    mode: QuantMode,
) -> Result<(Vec<LoadedLayer>, QuantReportFile)> {
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut reports = Vec::new();
    for layer in &model.layers {
        let mut experts = Vec::with_capacity(layer.experts.len());
        for e in &layer.experts {
            let bits = plan.bits_for(layer.layer_id, e.expert_id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "plan has no bits for layer {} expert {}",
                    layer.layer_id, e.expert_id
                ))
            })?;
            let q = quantize_dequantize(&e.w1, bits, e.neuron_axis, mode)?;
            let rep = reconstruction_report(&e.w1, &q.values, &q.params)?;
            let ratio = rep
                .per_group_max_abs_error
                .iter()
                .zip(&q.params)
                .filter(|(_, p)| p.delta > 0.0)
                .map(|(err, p)| err / (p.delta / 2.0))
                .fold(0.0, f64::max);
            reports.push(ExpertQuantReport {
                layer_id: layer.layer_id,
                expert_id: e.expert_id,
                bits,
                max_abs_error: rep.max_abs_error,
                max_error_over_half_delta: ratio,
                frobenius_error: rep.frobenius_error,
                max_distinct_levels: rep.max_distinct_levels,
                within_bound: rep.within_bound,
            });
            experts.push(LoadedExpert {
                w1: q.values,
                ..e.clone()
            });
        }
        layers.push(LoadedLayer {
            layer_id: layer.layer_id,
            experts,
        });
    }
    Ok((
        layers,
        QuantReportFile {
            schema_version: SCHEMA_VERSION,
            model_name: model.manifest.model_name.clone(),
            mode,
            all_within_bound: reports.iter().all(|r| r.within_bound),
            experts: reports,
        },
    ))
}

/// Random checkpoint with neurons as rows. Each router drifts from its
/// initial value by an expert-specific amount, and every fourth expert has
/// one neuron with a much wider spread than the rest.
pub fn random_checkpoint(layers: usize, experts: usize, d: usize, m: usize, seed: u64) -> Vec<LoadedLayer> {
    let mut rng = stream_rng(seed, seeding::FIXTURE);
    let mut normal = move |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
    (0..layers)
        .map(|layer_id| LoadedLayer {
            layer_id,
            experts: (0..experts)
                .map(|expert_id| {
                    let init: Vec<f64> = (0..d).map(|_| normal(0.1)).collect();
                    let drift = 0.02 * (1 + (expert_id * 7 + layer_id * 3) % experts) as f64;
                    let fin = init.iter().map(|v| v + normal(drift)).collect();
                    let mut w1 = DMatrix::from_fn(m, d, |_, _| normal(0.05));
                    if expert_id % 4 == 3 {
                        for v in w1.row_mut(0).iter_mut() {
                            *v *= 10.0;
                        }
                    }
                    LoadedExpert {
                        expert_id,
                        router_init: Some(init),
                        router_final: fin,
                        w1,
                        neuron_axis: GroupAxis::Row,
                    }
                })
                .collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::ModelManifest;

    fn expert(id: usize, init: Option<Vec<f64>>, fin: Vec<f64>) -> LoadedExpert {
        LoadedExpert {
            expert_id: id,
            router_init: init,
            router_final: fin,
            w1: DMatrix::from_row_slice(2, 2, &[0.1, -0.3, 0.7, 0.2]),
            neuron_axis: GroupAxis::Row,
        }
    }

    fn toy() -> LoadedModel {
        LoadedModel {
            manifest: ModelManifest {
                model_name: "toy".into(),
                layers: vec![],
            },
            layers: vec![LoadedLayer {
                layer_id: 0,
                experts: vec![
                    expert(0, Some(vec![1.0, 0.0]), vec![1.1, 0.0]),
                    expert(1, Some(vec![1.0, 0.0]), vec![1.9, 0.0]),
                ],
            }],
        }
    }

    #[test]
    fn small_lambda_gets_high_bits() {
        let metrics = compute_metrics(&toy(), false).unwrap();
        let lambdas: Vec<f64> = metrics.layers[0].experts.iter().map(|e| e.lambda).collect();
        assert!((lambdas[0] - 0.1).abs() < 1e-12 && (lambdas[1] - 0.9).abs() < 1e-12);
        let plan = build_plan(&metrics, &[3, 2], 2.5, 3.0).unwrap();
        assert_eq!(plan.bits_for(0, 0), Some(3));
        assert_eq!(plan.bits_for(0, 1), Some(2));
        assert_eq!(plan.global.achieved_avg_bits, 2.5);
    }

    #[test]
    fn missing_initial_router_forces_surrogate() {
        let mut model = toy();
        model.layers[0].experts[1].router_init = None;
        let m = compute_metrics(&model, false).unwrap();
        assert!(m.layers[0].surrogate);
        assert!(m.layers[0].experts.iter().all(|e| e.lambda_is_surrogate));
        assert!((m.layers[0].experts[0].lambda - 1.1).abs() < 1e-12);
    }

    #[test]
    fn level_validation() {
        assert!(validate_levels(&[3, 2]).is_ok());
        assert!(validate_levels(&[4, 3, 2]).is_ok());
        assert!(validate_levels(&[2, 3]).is_err());
        assert!(validate_levels(&[3]).is_err());
        assert!(validate_levels(&[5, 4, 3, 2]).is_err());
        assert!(validate_levels(&[3, 0]).is_err());
    }

    #[test]
    fn apply_plan_stays_within_half_bin() {
        let model = toy();
        let plan = build_plan(&compute_metrics(&model, false).unwrap(), &[3, 2], 2.5, 3.0).unwrap();
        let (layers, report) = apply_plan(&model, &plan, QuantMode::Affine).unwrap();
        assert!(report.all_within_bound);
        assert!(report.experts.iter().all(|r| r.max_error_over_half_delta <= 1.0 + 1e-9));
        assert_eq!(
            layers[0].experts[0].router_final,
            model.layers[0].experts[0].router_final
        );
    }

    #[test]
    fn random_checkpoint_is_seeded() {
        let a = random_checkpoint(2, 8, 6, 4, 7);
        assert_eq!(a, random_checkpoint(2, 8, 6, 4, 7));
        assert_ne!(a, random_checkpoint(2, 8, 6, 4, 8));
        let model = LoadedModel {
            manifest: ModelManifest {
                model_name: "r".into(),
                layers: vec![],
            },
            layers: a,
        };
        let plan = build_plan(&compute_metrics(&model, false).unwrap(), &[3, 2, 1], 2.0, 3.0).unwrap();
        assert!(plan.layers.iter().any(|l| l.ranking.iter().any(|r| r.promoted)));
    }
}
