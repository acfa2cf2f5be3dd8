//! Browser bindings: quantize a weight row, plan bit-widths for a layer,
//! and train a tiny synthetic MoE. Every function returns a JSON string.

use moequant::allocation::{three_level_assign, two_level_assign};
use moequant::metrics::ExpertMetrics;
use moequant::quantizer::{quantize_dequantize, GroupAxis, QuantMode};
use moequant::ranking::rank_experts;
use moequant::synthetic::{lemma1_report, train, LemmaReport, SyntheticConfig};
use moequant::{Error, Result};
use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct QuantizedRow {
    delta: f64,
    zero_point: i64,
    values: Vec<f64>,
    max_abs_error: f64,
    distinct_levels: usize,
}

pub fn quantize_row_json(values: &[f64], bits: u32, zero_point_free: bool) -> Result<String> {
    let w = DMatrix::from_row_slice(1, values.len(), values);
    let mode = if zero_point_free {
        QuantMode::ZeroPointFree
    } else {
        QuantMode::Affine
    };
    let q = quantize_dequantize(&w, bits, GroupAxis::Row, mode)?;
    let recon: Vec<f64> = q.values.iter().copied().collect();
    let mut levels: Vec<u64> = recon.iter().map(|v| (v + 0.0).to_bits()).collect();
    levels.sort_unstable();
    levels.dedup();
    let row = QuantizedRow {
        delta: q.params[0].delta,
        zero_point: q.params[0].zero_point,
        max_abs_error: values
            .iter()
            .zip(&recon)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        distinct_levels: levels.len(),
        values: recon,
    };
    Ok(serde_json::to_string(&row)?)
}

#[derive(Serialize)]
struct PlannedExpert {
    expert_id: usize,
    bits: u32,
    promoted: bool,
}

#[derive(Serialize)]
struct LayerPlan {
    experts: Vec<PlannedExpert>,
    achieved_avg_bits: f64,
}

pub fn plan_layer_json(lambdas: &[f64], maxvars: &[f64], levels: &[u32], avg_bits: f64, zeta: f64) -> Result<String> {
    if lambdas.len() != maxvars.len() {
        return Err(Error::DimensionMismatch {
            expected: lambdas.len(),
            actual: maxvars.len(),
        });
    }
    let metrics: Vec<ExpertMetrics> = lambdas
        .iter()
        .zip(maxvars)
        .enumerate()
        .map(|(e, (&l, &v))| ExpertMetrics::new(e, l, false, v))
        .collect();
    let order = rank_experts(0, &metrics, zeta)?;
    let plan = match *levels {
        [h, l] => two_level_assign(&order, h, l, avg_bits)?,
        [h, m, l] => three_level_assign(&order, h, m, l, avg_bits)?,
        _ => return Err(Error::InvalidArgument("give two or three bit levels".into())),
    };
    let experts = plan
        .assignment
        .iter()
        .map(|a| PlannedExpert {
            expert_id: a.expert_id,
            bits: a.bits,
            promoted: order.promoted.contains(&a.expert_id),
        })
        .collect();
    Ok(serde_json::to_string(&LayerPlan {
        experts,
        achieved_avg_bits: plan.achieved_avg_bits,
    })?)
}

#[derive(Serialize)]
struct TinyRun {
    /// `(step, test error)` at every checkpoint.
    test_error: Vec<(usize, f64)>,
    report: LemmaReport,
}

/// A model small enough to train in the browser within a second or two.
pub fn tiny_config(seed: u64, alpha: f64, steps: usize) -> SyntheticConfig {
    SyntheticConfig {
        d: 32,
        k: 10,
        m: 32,
        n: 12,
        l: 2,
        batch_size: 64,
        steps,
        checkpoint_every: (steps / 20).max(1),
        probe_size: 300,
        test_size: 500,
        ..SyntheticConfig::ci().with_seed(seed).with_alpha(alpha)
    }
}

pub fn train_tiny_json(seed: u64, alpha: f64, steps: usize) -> Result<String> {
    let run = train(&tiny_config(seed, alpha, steps))?;
    let mut test_error: Vec<(usize, f64)> = run.traces.iter().map(|r| (r.step, r.test_error)).collect();
    test_error.dedup();
    Ok(serde_json::to_string(&TinyRun {
        test_error,
        report: lemma1_report(&run),
    })?)
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = quantizeRow)]
pub fn quantize_row(values: &[f64], bits: u32, zero_point_free: bool) -> std::result::Result<String, JsError> {
    js(quantize_row_json(values, bits, zero_point_free))
}

#[wasm_bindgen(js_name = planLayer)]
pub fn plan_layer(
    lambdas: &[f64],
    maxvars: &[f64],
    levels: &[u32],
    avg_bits: f64,
    zeta: f64,
) -> std::result::Result<String, JsError> {
    js(plan_layer_json(lambdas, maxvars, levels, avg_bits, zeta))
}

#[wasm_bindgen(js_name = trainTiny)]
pub fn train_tiny(seed: u64, alpha: f64, steps: usize) -> std::result::Result<String, JsError> {
    js(train_tiny_json(seed, alpha, steps))
}
