//! Two-layer MoE with expert-choice routing.
//!
//! Each expert `s` has a router `w_s ∈ ℝ^d`, a first layer `W1 ∈ ℝ^{m×d}`
//! (one neuron per row) and a fixed second layer `a_s · 1` with
//! `a_s ∈ {+1, -1}`. On a sequence, expert `s` keeps the `l` tokens with the
//! highest routing score `⟨w_s, x_j⟩` (ties go to the earlier position),
//! gates them with a softmax over the kept scores and contributes
//! `a_s Σ_j G_j Σ_r ReLU(⟨w_r, x_j⟩)` to the output.
//!
//! Two parameterizations are provided. [`MoEModel`] stores weights in the
//! ambient space and works with arbitrary token vectors. [`TokenSpaceModel`]
//! stores the same weights as coordinates in the orthonormal token basis,
//! where every token is a signed unit vector; forward passes become table
//! lookups and SGD updates touch only the coordinates of routed tokens.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeding::{self, stream_rng};
use crate::synthetic::config::SyntheticConfig;
use crate::synthetic::tokens::{Sequence, Token, TokenSet};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPass {
    /// Sequence positions kept by the expert, highest score first.
    pub selected: Vec<usize>,
    pub gates: Vec<f64>,
    /// `Σ_r ReLU(⟨w_r, x_j⟩)` for each kept position.
    pub activations: Vec<f64>,
}

impl ExpertPass {
    pub fn output(&self) -> f64 {
        self.gates.iter().zip(&self.activations).map(|(g, a)| g * a).sum()
    }

    pub fn gate_of(&self, position: usize) -> Option<f64> {
        self.selected.iter().position(|&p| p == position).map(|i| self.gates[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub output: f64,
    pub experts: Vec<ExpertPass>,
}

/// Positions of the `l` largest scores, ties to the lower position.
pub fn top_l(scores: &[f64], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let l = l.min(scores.len());
    if l < idx.len() && l > 0 {
        idx.select_nth_unstable_by(l - 1, cmp);
        idx.truncate(l);
    }
    idx.sort_unstable_by(cmp);
    idx.truncate(l);
    idx
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Anything that can run the routed forward pass over a token sequence.
pub trait MoeForward {
    fn num_experts(&self) -> usize;
    fn top_l(&self) -> usize;
    fn expert_sign(&self, s: usize) -> f64;
    fn forward(&self, ts: &TokenSet, seq: &Sequence) -> ForwardPass;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub routers: Vec<DVector<f64>>,
    /// `m × d`, one neuron per row.
    pub experts: Vec<DMatrix<f64>>,
    /// Second-layer sign `a_s`, `+1` for the first half of the experts.
    pub signs: Vec<f64>,
    pub top_l: usize,
}

/// Gradients of the unclipped loss `1 - y f` for one sequence or a batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub routers: Vec<DVector<f64>>,
    pub experts: Vec<DMatrix<f64>>,
}

pub fn balanced_signs(k: usize) -> Vec<f64> {
    (0..k).map(|s| if s < k.div_ceil(2) { 1.0 } else { -1.0 }).collect()
}

impl MoEModel {
    pub fn zeros(k: usize, m: usize, d: usize, top_l: usize) -> Self {
        MoEModel {
            routers: vec![DVector::zeros(d); k],
            experts: vec![DMatrix::zeros(m, d); k],
            signs: balanced_signs(k),
            top_l,
        }
    }

    /// Every router and first-layer entry drawn i.i.d. from `N(0, init_std²)`.
    pub fn init(cfg: &SyntheticConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, seeding::INIT);
        let std = cfg.init_std;
        let mut draw = || std * rng.sample::<f64, _>(StandardNormal);
        let routers = (0..cfg.k).map(|_| DVector::from_fn(cfg.d, |_, _| draw())).collect();
        let experts = (0..cfg.k)
            .map(|_| DMatrix::from_fn(cfg.m, cfg.d, |_, _| draw()))
            .collect();
        MoEModel {
            routers,
            experts,
            signs: balanced_signs(cfg.k),
            top_l: cfg.l,
        }
    }

    pub fn dim(&self) -> usize {
        self.routers.first().map_or(0, |r| r.len())
    }

    pub fn neurons(&self) -> usize {
        self.experts.first().map_or(0, |e| e.nrows())
    }

    pub fn forward_vectors(&self, xs: &[DVector<f64>]) -> ForwardPass {
        let mut output = 0.0;
        let experts = self
            .routers
            .iter()
            .zip(&self.experts)
            .zip(&self.signs)
            .map(|((w, w1), a)| {
                let scores: Vec<f64> = xs.iter().map(|x| w.dot(x)).collect();
                let selected = top_l(&scores, self.top_l);
                let kept: Vec<f64> = selected.iter().map(|&j| scores[j]).collect();
                let gates = softmax(&kept);
                let activations = selected
                    .iter()
                    .map(|&j| (w1 * &xs[j]).iter().map(|v| v.max(0.0)).sum())
                    .collect();
                let pass = ExpertPass {
                    selected,
                    gates,
                    activations,
                };
                output += a * pass.output();
                pass
            })
            .collect();
        ForwardPass { output, experts }
    }

    /// Analytic gradients of `1 - y f(x)` with routing sets and gates held
    /// at their forward-pass values.
    pub fn loss_gradients(&self, xs: &[DVector<f64>], label: f64) -> (ForwardPass, Gradients) {
        let pass = self.forward_vectors(xs);
        let d = self.dim();
        let mut routers = Vec::with_capacity(self.routers.len());
        let mut experts = Vec::with_capacity(self.experts.len());
        for (s, e) in pass.experts.iter().enumerate() {
            let ya = label * self.signs[s];
            let w1 = &self.experts[s];
            let mut ge = DMatrix::zeros(w1.nrows(), d);
            let mut gr = DVector::zeros(d);
            let mean_act: f64 = e.gates.iter().zip(&e.activations).map(|(g, a)| g * a).sum();
            for ((&j, &g), &act) in e.selected.iter().zip(&e.gates).zip(&e.activations) {
                let x = &xs[j];
                let pre = w1 * x;
                for r in 0..w1.nrows() {
                    if pre[r] >= 0.0 {
                        for (c, xc) in x.iter().enumerate() {
                            ge[(r, c)] -= ya * g * xc;
                        }
                    }
                }
                gr.axpy(-ya * g * (act - mean_act), x, 1.0);
            }
            routers.push(gr);
            experts.push(ge);
        }
        (pass, Gradients { routers, experts })
    }

    /// One SGD step on the batch-averaged gradients. Returns the mean hinge
    /// loss `max(1 - y f, 0)` of the batch before the update.
    pub fn sgd_step(&mut self, ts: &TokenSet, batch: &[Sequence], eta_e: f64, eta_r: f64) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let b = batch.len() as f64;
        let mut acc: Option<Gradients> = None;
        let mut loss = 0.0;
        for seq in batch {
            let xs: Vec<DVector<f64>> = seq.tokens.iter().map(|t| ts.vector(*t)).collect();
            let y = f64::from(seq.label);
            let (pass, g) = self.loss_gradients(&xs, y);
            loss += (1.0 - y * pass.output).max(0.0);
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (x, y) in a.routers.iter_mut().zip(&g.routers) {
                        *x += y;
                    }
                    for (x, y) in a.experts.iter_mut().zip(&g.experts) {
                        *x += y;
                    }
                }
            }
        }
        let g = acc.expect("non-empty batch");
        for (w, gw) in self.routers.iter_mut().zip(&g.routers) {
            w.axpy(-eta_r / b, gw, 1.0);
        }
        for (w, gw) in self.experts.iter_mut().zip(&g.experts) {
            *w -= gw * (eta_e / b);
        }
        loss / b
    }

    /// Coordinates of this model in the orthonormal basis of `ts`.
    pub fn project(&self, ts: &TokenSet) -> TokenSpaceModel {
        let p = &ts.basis;
        let routers = self
            .routers
            .iter()
            .map(|w| (p.transpose() * w).as_slice().to_vec())
            .collect();
        let experts = self.experts.iter().map(|w1| (w1 * p).as_slice().to_vec()).collect();
        let mut model = TokenSpaceModel {
            dim: self.dim(),
            neurons: self.neurons(),
            top_l: self.top_l,
            routers,
            experts,
            signs: self.signs.clone(),
            act: Vec::new(),
        };
        model.refresh_activations();
        model
    }

    pub fn is_finite(&self) -> bool {
        self.routers.iter().all(|r| r.iter().all(|v| v.is_finite()))
            && self.experts.iter().all(|e| e.iter().all(|v| v.is_finite()))
    }
}

impl MoeForward for MoEModel {
    fn num_experts(&self) -> usize {
        self.routers.len()
    }

    fn top_l(&self) -> usize {
        self.top_l
    }

    fn expert_sign(&self, s: usize) -> f64 {
        self.signs[s]
    }

    fn forward(&self, ts: &TokenSet, seq: &Sequence) -> ForwardPass {
        let xs: Vec<DVector<f64>> = seq.tokens.iter().map(|t| ts.vector(*t)).collect();
        self.forward_vectors(&xs)
    }
}

/// The model in token-basis coordinates.
///
/// `routers[s][i] = ⟨w_s, p_i⟩` and `experts[s][i * m + r] = ⟨w_r, p_i⟩`
/// where `p_i` is column `i` of the token basis.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSpaceModel {
    dim: usize,
    neurons: usize,
    top_l: usize,
    routers: Vec<Vec<f64>>,
    experts: Vec<Vec<f64>>,
    signs: Vec<f64>,
    /// `act[(s * d + i) * 2 + neg]`: summed ReLU response of expert `s` to
    /// token `±p_i`, `neg = 1` for the negative sign.
    act: Vec<f64>,
}

#[inline]
fn sign_slot(t: Token) -> usize {
    usize::from(t.sign < 0)
}

impl TokenSpaceModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn router(&self, s: usize) -> &[f64] {
        &self.routers[s]
    }

    pub fn router_norm(&self, s: usize) -> f64 {
        self.routers[s].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `⟨w_s, t⟩`.
    pub fn score(&self, s: usize, t: Token) -> f64 {
        f64::from(t.sign) * self.routers[s][t.index]
    }

    /// `Σ_r ReLU(⟨w_r, t⟩)` for expert `s`.
    pub fn activation(&self, s: usize, t: Token) -> f64 {
        self.act[(s * self.dim + t.index) * 2 + sign_slot(t)]
    }

    /// Largest neuron norm of expert `s`.
    pub fn max_neuron_norm(&self, s: usize) -> f64 {
        let m = self.neurons;
        let coords = &self.experts[s];
        (0..m)
            .map(|r| (0..self.dim).map(|i| coords[i * m + r].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn refresh_activations(&mut self) {
        let (d, m) = (self.dim, self.neurons);
        self.act.clear();
        self.act.resize(self.experts.len() * d * 2, 0.0);
        for (s, coords) in self.experts.iter().enumerate() {
            for i in 0..d {
                let (mut pos, mut neg) = (0.0, 0.0);
                for &v in &coords[i * m..(i + 1) * m] {
                    if v > 0.0 {
                        pos += v;
                    } else {
                        neg -= v;
                    }
                }
                self.act[(s * d + i) * 2] = pos;
                self.act[(s * d + i) * 2 + 1] = neg;
            }
        }
    }

    pub fn forward_seq(&self, seq: &Sequence) -> ForwardPass {
        let mut output = 0.0;
        let mut scores = vec![0.0; seq.tokens.len()];
        let experts = (0..self.routers.len())
            .map(|s| {
                for (sc, t) in scores.iter_mut().zip(&seq.tokens) {
                    *sc = self.score(s, *t);
                }
                let selected = top_l(&scores, self.top_l);
                let kept: Vec<f64> = selected.iter().map(|&j| scores[j]).collect();
                let gates = softmax(&kept);
                let activations = selected.iter().map(|&j| self.activation(s, seq.tokens[j])).collect();
                let pass = ExpertPass {
                    selected,
                    gates,
                    activations,
                };
                output += self.signs[s] * pass.output();
                pass
            })
            .collect();
        ForwardPass { output, experts }
    }

    pub fn output(&self, seq: &Sequence) -> f64 {
        self.forward_seq(seq).output
    }

    /// Same update as [`MoEModel::sgd_step`], carried out in coordinates.
    pub fn sgd_step(&mut self, batch: &[Sequence], eta_e: f64, eta_r: f64) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let (k, d, m) = (self.routers.len(), self.dim, self.neurons);
        let b = batch.len() as f64;
        let mut router_grad = vec![0.0; k * d];
        // Coefficient of token ±p_i in the neuron gradient of expert s.
        let mut expert_coef = vec![0.0; k * d * 2];
        let mut loss = 0.0;
        for seq in batch {
            let pass = self.forward_seq(seq);
            let y = f64::from(seq.label);
            loss += (1.0 - y * pass.output).max(0.0);
            for (s, e) in pass.experts.iter().enumerate() {
                let ya = y * self.signs[s];
                let mean_act = e.output();
                for ((&j, &g), &act) in e.selected.iter().zip(&e.gates).zip(&e.activations) {
                    let t = seq.tokens[j];
                    expert_coef[(s * d + t.index) * 2 + sign_slot(t)] -= ya * g / b;
                    router_grad[s * d + t.index] -= ya * g * (act - mean_act) * f64::from(t.sign) / b;
                }
            }
        }
        for s in 0..k {
            for i in 0..d {
                self.routers[s][i] -= eta_r * router_grad[s * d + i];
                let c_pos = expert_coef[(s * d + i) * 2];
                let c_neg = expert_coef[(s * d + i) * 2 + 1];
                if c_pos == 0.0 && c_neg == 0.0 {
                    continue;
                }
                for v in &mut self.experts[s][i * m..(i + 1) * m] {
                    // ⟨w_r, +p_i⟩ ≥ 0 and ⟨w_r, -p_i⟩ ≥ 0 gate the two terms.
                    let mut grad = 0.0;
                    if *v >= 0.0 {
                        grad += c_pos;
                    }
                    if *v <= 0.0 {
                        grad -= c_neg;
                    }
                    *v -= eta_e * grad;
                }
            }
        }
        self.refresh_activations();
        loss / b
    }

    /// Back to ambient weights: `w = P u`.
    pub fn embed(&self, ts: &TokenSet) -> MoEModel {
        let p = &ts.basis;
        let routers = self.routers.iter().map(|u| p * DVector::from_column_slice(u)).collect();
        let experts = self
            .experts
            .iter()
            .map(|u| DMatrix::from_column_slice(self.neurons, self.dim, u) * p.transpose())
            .collect();
        MoEModel {
            routers,
            experts,
            signs: self.signs.clone(),
            top_l: self.top_l,
        }
    }

    pub fn check_finite(&self, step: usize) -> Result<()> {
        let bad = self.routers.iter().flatten().any(|v| !v.is_finite()) || self.act.iter().any(|v| !v.is_finite());
        if bad {
            return Err(Error::NumericOverflow {
                step,
                detail: "non-finite weights; lower the learning rates".into(),
            });
        }
        Ok(())
    }
}

impl MoeForward for TokenSpaceModel {
    fn num_experts(&self) -> usize {
        self.routers.len()
    }

    fn top_l(&self) -> usize {
        self.top_l
    }

    fn expert_sign(&self, s: usize) -> f64 {
        self.signs[s]
    }

    fn forward(&self, _ts: &TokenSet, seq: &Sequence) -> ForwardPass {
        self.forward_seq(seq)
    }
}
