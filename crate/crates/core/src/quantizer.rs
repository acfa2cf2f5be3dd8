//! Uniform quantize-dequantize with per-group bin size and zero point.
//!
//! A group is one row or one column of a weight matrix. For a group with
//! range `[lo, hi]` and `b` bits the bin size is `Δ = (hi - lo) / (2^b - 1)`
//! and the zero point is `z = -⌊lo/Δ⌉ - 2^(b-1)`; values are reconstructed as
//! `Δ · (⌊w/Δ + z⌉ - z)`. The zero-point-free variant reconstructs
//! `Δ · ⌊w/Δ⌉`. Rounding is round-half-to-even everywhere.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    /// One group per column.
    Column,
    /// One group per row.
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Affine,
    ZeroPointFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantGroupParams {
    pub bits: u32,
    /// Bin size. Zero marks a constant group that is passed through.
    pub delta: f64,
    pub zero_point: i64,
    pub group_axis: GroupAxis,
}

impl QuantGroupParams {
    pub fn is_passthrough(&self) -> bool {
        self.delta == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub per_group_max_abs_error: Vec<f64>,
    pub max_abs_error: f64,
    pub frobenius_error: f64,
    pub distinct_levels_per_group: Vec<usize>,
    pub max_distinct_levels: usize,
    /// Every group with `Δ > 0` stays within `Δ/2` (up to rounding slack).
    pub within_bound: bool,
}

/// Output of [`quantize_dequantize`]: the reconstructed matrix and the
/// parameters used for each group, in group order.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub values: DMatrix<f64>,
    pub params: Vec<QuantGroupParams>,
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::InvalidArgument(format!(
            "bits must be in 1..={MAX_BITS}, got {bits}"
        )));
    }
    Ok(())
}

/// Rounds `x` to 40 significant bits.
///
/// Recomputing `Δ` from an already-dequantized group reproduces the original
/// `Δ` only up to a few ulps; snapping to a coarser mantissa absorbs that
/// drift so re-quantization is bitwise idempotent.
fn snap_delta(x: f64) -> f64 {
    const DROP: u32 = 13;
    let bits = x.to_bits();
    let mask = (1u64 << DROP) - 1;
    let half = 1u64 << (DROP - 1);
    let rem = bits & mask;
    let mut kept = bits & !mask;
    if rem > half || (rem == half && (kept >> DROP) & 1 == 1) {
        kept += 1 << DROP;
    }
    f64::from_bits(kept)
}

/// Bin size and zero point for one group.
pub fn quant_params(group: &[f64], bits: u32) -> Result<QuantGroupParams> {
    group_params(group.iter().copied(), bits, GroupAxis::Row)
}

fn group_params(values: impl Iterator<Item = f64>, bits: u32, group_axis: GroupAxis) -> Result<QuantGroupParams> {
    check_bits(bits)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut count = 0usize;
    for v in values {
        if !v.is_finite() {
            return Err(Error::InvalidTensor("non-finite value in group".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidTensor("empty group".into()));
    }
    if hi == lo {
        return Ok(QuantGroupParams {
            bits,
            delta: 0.0,
            zero_point: 0,
            group_axis,
        });
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let delta = snap_delta((hi - lo) / levels);
    let half_range = 1i64 << (bits - 1);
    let zero_point = -((lo / delta).round_ties_even() as i64) - half_range;
    Ok(QuantGroupParams {
        bits,
        delta,
        zero_point,
        group_axis,
    })
}

#[inline]
fn reconstruct(w: f64, p: &QuantGroupParams, mode: QuantMode) -> f64 {
    if p.is_passthrough() {
        return w;
    }
    match mode {
        QuantMode::Affine => {
            let z = p.zero_point as f64;
            p.delta * ((w / p.delta + z).round_ties_even() - z)
        }
        QuantMode::ZeroPointFree => p.delta * (w / p.delta).round_ties_even(),
    }
}

fn group_count(w: &DMatrix<f64>, axis: GroupAxis) -> usize {
    match axis {
        GroupAxis::Row => w.nrows(),
        GroupAxis::Column => w.ncols(),
    }
}

fn group_values(w: &DMatrix<f64>, axis: GroupAxis, g: usize) -> Vec<f64> {
    match axis {
        GroupAxis::Row => w.row(g).iter().copied().collect(),
        GroupAxis::Column => w.column(g).iter().copied().collect(),
    }
}

/// Quantizes then dequantizes every group of `w` along `axis`.
pub fn quantize_dequantize(w: &DMatrix<f64>, bits: u32, axis: GroupAxis, mode: QuantMode) -> Result<Quantized> {
    check_bits(bits)?;
    if w.is_empty() {
        return Err(Error::InvalidTensor("empty matrix".into()));
    }
    let mut out = w.clone();
    let mut params = Vec::with_capacity(group_count(w, axis));
    for g in 0..group_count(w, axis) {
        let mut p = group_params(group_values(w, axis, g).into_iter(), bits, axis)?;
        if mode == QuantMode::ZeroPointFree {
            p.zero_point = 0;
        }
        match axis {
            GroupAxis::Row => {
                for v in out.row_mut(g).iter_mut() {
                    *v = reconstruct(*v, &p, mode);
                }
            }
            GroupAxis::Column => {
                for v in out.column_mut(g).iter_mut() {
                    *v = reconstruct(*v, &p, mode);
                }
            }
        }
        params.push(p);
    }
    Ok(Quantized { values: out, params })
}

/// Slack allowed on top of `Δ/2` for floating-point rounding in the
/// division, rounding and multiplication of the reconstruction.
pub fn bound_slack(group_abs_max: f64) -> f64 {
    8.0 * f64::EPSILON * group_abs_max
}

pub fn reconstruction_report(
    w: &DMatrix<f64>,
    w_hat: &DMatrix<f64>,
    params: &[QuantGroupParams],
) -> Result<QuantReport> {
    if w.shape() != w_hat.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", w.shape(), w_hat.shape())));
    }
    let axis = params.first().map(|p| p.group_axis).unwrap_or(GroupAxis::Row);
    let groups = group_count(w, axis);
    if params.len() != groups {
        return Err(Error::ShapeMismatch(format!(
            "{} group parameters for {} groups",
            params.len(),
            groups
        )));
    }

    let mut per_group_max_abs_error = Vec::with_capacity(groups);
    let mut distinct_levels_per_group = Vec::with_capacity(groups);
    let mut within_bound = true;
    for (g, p) in params.iter().enumerate() {
        let orig = group_values(w, axis, g);
        let recon = group_values(w_hat, axis, g);
        let mut max_err = 0.0f64;
        let mut abs_max = 0.0f64;
        for (a, b) in orig.iter().zip(&recon) {
            max_err = max_err.max((a - b).abs());
            abs_max = abs_max.max(a.abs()).max(b.abs());
        }
        if p.delta > 0.0 && max_err > p.delta / 2.0 + bound_slack(abs_max) {
            within_bound = false;
        }
        let mut levels: Vec<u64> = recon.iter().map(|v| v.to_bits()).collect();
        levels.sort_unstable();
        levels.dedup();
        per_group_max_abs_error.push(max_err);
        distinct_levels_per_group.push(levels.len());
    }

    let frobenius_error = (w - w_hat).norm();
    Ok(QuantReport {
        max_abs_error: per_group_max_abs_error.iter().copied().fold(0.0, f64::max),
        max_distinct_levels: distinct_levels_per_group.iter().copied().max().unwrap_or(0),
        per_group_max_abs_error,
        frobenius_error,
        distinct_levels_per_group,
        within_bound,
    })
}
