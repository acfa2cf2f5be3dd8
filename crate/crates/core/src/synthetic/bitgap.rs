//! How many fewer bits the least sensitive experts tolerate.
//!
//! After training, first-layer weights are quantized per neuron without a
//! zero point. `b_h` is the smallest uniform bit-width that keeps zero test
//! error; experts are then ranked by router-norm change inside each sign
//! group, the top `κ` fraction stays at `b_h` and the rest drop to the
//! smallest `b_l` that still keeps zero error.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{init_diagnostics, max_intra_neuron_variance, ExpertMetrics};
use crate::quantizer::{quantize_dequantize, QuantMode};
use crate::ranking::rank_experts;
use crate::synthetic::config::SyntheticConfig;
use crate::synthetic::model::MoEModel;
use crate::synthetic::train::{test_error, train, TrainRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitGapRow {
    pub alpha: f64,
    pub b_h: u32,
    pub b_l: u32,
    pub gap: i64,
    /// `log2((1 - 2α) / (2α))`.
    pub bound: f64,
    pub kappa: f64,
    /// Experts kept at `b_h`.
    pub high: Vec<usize>,
    pub mixed_test_error: f64,
}

impl BitGapRow {
    pub const CSV_HEADER: &'static str = "alpha,b_h,b_l,gap,bound,kappa,mixed_test_error";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.alpha, self.b_h, self.b_l, self.gap, self.bound, self.kappa, self.mixed_test_error
        )
    }
}

pub fn gap_bound(alpha: f64) -> f64 {
    ((1.0 - 2.0 * alpha) / (2.0 * alpha)).log2()
}

/// Quantizes every expert's first layer at its own bit-width. Routers stay
/// in full precision.
pub fn quantize_experts(model: &MoEModel, bits: &[u32], cfg: &SyntheticConfig) -> Result<MoEModel> {
    if bits.len() != model.experts.len() {
        return Err(Error::DimensionMismatch {
            expected: model.experts.len(),
            actual: bits.len(),
        });
    }
    let mut out = model.clone();
    for (w1, &b) in out.experts.iter_mut().zip(bits) {
        *w1 = quantize_dequantize(w1, b, cfg.quant_axis, QuantMode::ZeroPointFree)?.values;
    }
    Ok(out)
}

/// Experts kept at high precision: per sign group, the first
/// `⌈κ · |group|⌉` of the Λ ranking after MaxVar promotion.
pub fn high_precision_experts(run: &TrainRun, ambient: &MoEModel, kappa: f64) -> Result<Vec<usize>> {
    let lambdas = run.lambdas();
    let mut high = Vec::new();
    for sign in [1.0, -1.0] {
        let metrics = (0..ambient.experts.len())
            .filter(|&s| ambient.signs[s] == sign)
            .map(|s| {
                let maxvar = max_intra_neuron_variance(&ambient.experts[s], run.config.quant_axis)?;
                Ok(ExpertMetrics::new(s, lambdas[s], false, maxvar))
            })
            .collect::<Result<Vec<_>>>()?;
        if metrics.is_empty() {
            continue;
        }
        let order = rank_experts(0, &metrics, run.config.zeta)?;
        let keep = ((kappa * metrics.len() as f64).ceil() as usize).min(metrics.len());
        high.extend_from_slice(&order.order[..keep]);
    }
    high.sort_unstable();
    Ok(high)
}

/// Bit-gap row for a finished run.
pub fn bit_gap_for_run(run: &TrainRun) -> Result<BitGapRow> {
    let cfg = &run.config;
    let ts = &run.tokens;
    let ambient = run.final_model.embed(ts);
    let k = ambient.experts.len();
    let error_with = |bits: &[u32]| -> Result<f64> {
        let q = quantize_experts(&ambient, bits, cfg)?.project(ts);
        Ok(test_error(&q, ts, &run.test_set))
    };

    let full = test_error(&run.final_model, ts, &run.test_set);
    if full > 0.0 {
        return Err(Error::ExperimentFailed(format!(
            "alpha {}: full-precision test error is {full}, not 0",
            cfg.alpha
        )));
    }
    let mut b_h = None;
    for b in 1..=cfg.max_bits {
        if error_with(&vec![b; k])? == 0.0 {
            b_h = Some(b);
            break;
        }
    }
    let b_h = b_h.ok_or_else(|| {
        Error::ExperimentFailed(format!(
            "alpha {}: no uniform bit-width up to {} reaches zero test error",
            cfg.alpha, cfg.max_bits
        ))
    })?;

    let gamma_init = init_diagnostics(&run.initial, ts, &run.probe, cfg.alignment_threshold)?.gamma;
    let gamma_final = init_diagnostics(&run.final_model, ts, &run.probe, cfg.alignment_threshold)?.gamma;
    let kappa = gamma_init.max(gamma_final);
    let high = high_precision_experts(run, &ambient, kappa)?;
    let is_high: HashMap<usize, bool> = (0..k).map(|s| (s, high.contains(&s))).collect();
    let bits_for = |b_l: u32| -> Vec<u32> { (0..k).map(|s| if is_high[&s] { b_h } else { b_l }).collect() };

    let mut b_l = b_h;
    let mut mixed_test_error = 0.0;
    if high.len() < k {
        for b in 1..=b_h {
            let err = error_with(&bits_for(b))?;
            if err == 0.0 {
                b_l = b;
                mixed_test_error = err;
                break;
            }
        }
    }
    Ok(BitGapRow {
        alpha: cfg.alpha,
        b_h,
        b_l,
        gap: i64::from(b_h) - i64::from(b_l),
        bound: gap_bound(cfg.alpha),
        kappa,
        high,
        mixed_test_error,
    })
}

/// Trains one model per `alpha` and measures its bit gap.
pub fn bit_gap_experiment(cfg: &SyntheticConfig, alphas: &[f64]) -> Result<Vec<BitGapRow>> {
    alphas
        .iter()
        .map(|&alpha| bit_gap_for_run(&train(&cfg.clone().with_alpha(alpha))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn bound_values() {
        assert!((gap_bound(0.1) - 2.0).abs() < 1e-12);
        assert!(gap_bound(0.25).abs() < 1e-12);
        assert!((gap_bound(0.05) - 9f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn quantize_experts_respects_per_expert_bits() {
        let cfg = SyntheticConfig::ci();
        let mut model = MoEModel::zeros(2, 2, 3, 1);
        let w = DMatrix::from_row_slice(2, 3, &[0.1, -0.7, 0.35, 1.0, 0.2, -0.4]);
        model.experts = vec![w.clone(), w.clone()];
        let q = quantize_experts(&model, &[12, 1], &cfg).unwrap();
        let fine = (&q.experts[0] - &w).abs().max();
        let coarse = (&q.experts[1] - &w).abs().max();
        assert!(fine < coarse);
        assert!(quantize_experts(&model, &[2], &cfg).is_err());
    }

    #[test]
    fn failed_training_is_reported() {
        let cfg = SyntheticConfig::ci().with_steps(0);
        let run = train(&SyntheticConfig {
            probe_size: 50,
            test_size: 50,
            ..cfg
        })
        .unwrap();
        assert!(matches!(bit_gap_for_run(&run), Err(Error::ExperimentFailed(_))));
    }
}
