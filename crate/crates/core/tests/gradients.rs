use moequant::synthetic::model::{softmax, top_l, MoEModel};
use moequant::synthetic::{make_token_set, sample_sequences, MoeForward, Relevant, SyntheticConfig, TokenSet};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;
/// Minimum clearance of routing-score gaps and pre-activations from zero,
/// so a perturbation of size `STEP` cannot cross a kink.
const CLEARANCE: f64 = 1e-3;

struct Case {
    model: MoEModel,
    xs: Vec<DVector<f64>>,
    label: f64,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let d = rng.random_range(2..=16);
    let k = rng.random_range(1..=4);
    let m = rng.random_range(1..=8);
    let n = rng.random_range(1..=6);
    let l = rng.random_range(1..=3.min(n));
    let mut model = MoEModel::zeros(k, m, d, l);
    for s in 0..k {
        model.routers[s] = gaussian_vec(rng, d);
        model.experts[s] = DMatrix::from_fn(m, d, |_, _| rng.sample(StandardNormal));
        model.signs[s] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    let xs = (0..n).map(|_| gaussian_vec(rng, d) / (d as f64).sqrt()).collect();
    let label = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    Case { model, xs, label }
}

/// Routing sets and ReLU patterns stay fixed within `CLEARANCE`.
fn kink_free(c: &Case) -> bool {
    for (w, w1) in c.model.routers.iter().zip(&c.model.experts) {
        let scores: Vec<f64> = c.xs.iter().map(|x| w.dot(x)).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let l = c.model.top_l;
        if l < sorted.len() && sorted[l - 1] - sorted[l] < CLEARANCE {
            return false;
        }
        for &j in &top_l(&scores, l) {
            if (w1 * &c.xs[j]).iter().any(|v| v.abs() < CLEARANCE) {
                return false;
            }
        }
    }
    true
}

fn loss(model: &MoEModel, xs: &[DVector<f64>], label: f64) -> f64 {
    1.0 - label * model.forward_vectors(xs).output
}

fn check(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= TOL * analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Every analytic partial derivative against a central difference.
fn worst_case_mismatch(c: &Case) -> Option<String> {
    let (_, g) = c.model.loss_gradients(&c.xs, c.label);
    let central = |perturb: &dyn Fn(&mut MoEModel, f64)| {
        let mut plus = c.model.clone();
        perturb(&mut plus, STEP);
        let mut minus = c.model.clone();
        perturb(&mut minus, -STEP);
        (loss(&plus, &c.xs, c.label) - loss(&minus, &c.xs, c.label)) / (2.0 * STEP)
    };
    for s in 0..c.model.routers.len() {
        for i in 0..c.model.dim() {
            let num = central(&|m: &mut MoEModel, h| m.routers[s][i] += h);
            if !check(g.routers[s][i], num) {
                return Some(format!("router {s}[{i}]: {} vs {num}", g.routers[s][i]));
            }
        }
        for r in 0..c.model.neurons() {
            for i in 0..c.model.dim() {
                let num = central(&|m: &mut MoEModel, h| m.experts[s][(r, i)] += h);
                if !check(g.experts[s][(r, i)], num) {
                    return Some(format!("neuron {s}/{r}[{i}]: {} vs {num}", g.experts[s][(r, i)]));
                }
            }
        }
    }
    None
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 60 {
        let case = random_case(&mut rng);
        if !kink_free(&case) {
            continue;
        }
        if let Some(msg) = worst_case_mismatch(&case) {
            panic!("case {checked}: {msg}");
        }
        checked += 1;
    }
}

#[test]
fn router_gradient_equals_pairwise_form() {
    // Σ_j σ_j G_j Σ_{i≠j} G_i (x_j - x_i) is the centred sum Σ_j G_j (σ_j - σ̄) x_j.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let c = random_case(&mut rng);
        let (pass, g) = c.model.loss_gradients(&c.xs, c.label);
        for (s, e) in pass.experts.iter().enumerate() {
            let mut pairwise = DVector::zeros(c.model.dim());
            for (a, &j) in e.selected.iter().enumerate() {
                for (b, &i) in e.selected.iter().enumerate() {
                    if a != b {
                        pairwise += (&c.xs[j] - &c.xs[i]) * (e.activations[a] * e.gates[a] * e.gates[b]);
                    }
                }
            }
            let expected = pairwise * (-c.label * c.model.signs[s]);
            assert!((&expected - &g.routers[s]).amax() < 1e-10);
        }
    }
}

#[test]
fn gates_sum_to_one_and_keep_l_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let c = random_case(&mut rng);
        let pass = c.model.forward_vectors(&c.xs);
        let mut recomputed = 0.0;
        for (s, e) in pass.experts.iter().enumerate() {
            assert_eq!(e.selected.len(), c.model.top_l);
            assert!(e.gates.iter().all(|&g| g > 0.0));
            assert!((e.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            recomputed += c.model.signs[s] * e.output();
        }
        assert!((recomputed - pass.output).abs() < 1e-12);

        // Changing an unselected token leaves the output alone.
        let selected: Vec<usize> = pass.experts.iter().flat_map(|e| e.selected.clone()).collect();
        if let Some(j) = (0..c.xs.len()).find(|j| !selected.contains(j)) {
            let mut xs = c.xs.clone();
            xs[j] *= 1e-3;
            let again = c.model.forward_vectors(&xs);
            let still_unselected = again.experts.iter().all(|e| !e.selected.contains(&j));
            if still_unselected {
                assert!((again.output - pass.output).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_of_single_score_is_one() {
    assert_eq!(softmax(&[3.7]), vec![1.0]);
}

/// One expert that keeps every token, with a zero router so the gates are
/// uniform whatever the sign of the router.
fn sign_case(neuron: &[f64], xs: &[[f64; 3]]) -> (MoEModel, Vec<DVector<f64>>) {
    let mut model = MoEModel::zeros(1, 1, 3, xs.len());
    model.experts[0] = DMatrix::from_row_slice(1, 3, neuron);
    let xs = xs.iter().map(|x| DVector::from_column_slice(x)).collect();
    (model, xs)
}

fn negate_expert(model: &MoEModel) -> MoEModel {
    let mut out = model.clone();
    out.routers[0] = -&out.routers[0];
    out.experts[0] = -&out.experts[0];
    out.signs[0] = -out.signs[0];
    out
}

#[test]
fn sign_flip_invariance_on_constructed_cases() {
    // Neuron orthogonal to every token: all ReLU arguments are exactly 0
    // before and after the flip.
    let (model, xs) = sign_case(&[0.0, 0.0, 1.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    let before = model.forward_vectors(&xs).output;
    let after = negate_expert(&model).forward_vectors(&xs).output;
    assert_eq!(before, 0.0);
    assert_eq!(after, before);

    // Strictly negative arguments: the expert is silent before the flip but
    // not after, so the output moves by -a Σ_j G_j Σ_r |⟨w_r, x_j⟩|.
    let (model, xs) = sign_case(&[-1.0, 0.0, 0.0], &[[1.0, 0.0, 0.0], [0.5, 0.0, 0.0]]);
    let before = model.forward_vectors(&xs).output;
    let after = negate_expert(&model).forward_vectors(&xs).output;
    assert_eq!(before, 0.0);
    assert!((after + (0.5 * 1.0 + 0.5 * 0.5)).abs() < 1e-12);
}

#[test]
fn label_swap_symmetry() {
    let cfg = SyntheticConfig::ci();
    let ts = make_token_set(cfg.d, 4).unwrap();
    let swapped: TokenSet = ts.swapped();
    let mut model = MoEModel::init(&cfg.clone().with_init_std(0.3));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seqs = sample_sequences(&ts, cfg.alpha, cfg.n, 200, &mut rng);
    let outputs: Vec<f64> = seqs.iter().map(|s| model.forward(&ts, s).output).collect();
    for a in model.signs.iter_mut() {
        *a = -*a;
    }
    for (seq, f) in seqs.iter().zip(outputs) {
        let r = swapped.classify(seq.relevant_token()).expect("relevant token");
        assert_eq!(r.label(), -seq.label);
        let g = model.forward(&swapped, seq).output;
        assert_eq!(g, -f);
        assert_eq!(f64::from(r.label()) * g, f64::from(seq.label) * f);
    }
    assert_eq!(swapped.relevant(Relevant::O1).index, ts.relevant(Relevant::O2).index);
}
