use moequant::quantizer::{quantize_dequantize, GroupAxis, QuantMode};
use moequant::synthetic::{
    make_token_set, sample_sequences, test_error, train, MoEModel, MoeForward, Relevant, Sequence, SyntheticConfig,
    Token,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn token_sets_are_orthonormal() {
    for d in [4, 16, 64, 200] {
        for seed in 0..3 {
            let ts = make_token_set(d, seed).unwrap();
            assert!(ts.orthonormality_error() <= 1e-6, "d={d} seed={seed}");
        }
    }
}

#[test]
fn sequences_follow_the_data_distribution() {
    let ts = make_token_set(16, 1).unwrap();
    let alpha = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let seqs = sample_sequences(&ts, alpha, 10, 100_000, &mut rng);

    let positive = seqs.iter().filter(|s| s.label == 1).count();
    let balance = positive as f64 / seqs.len() as f64;
    assert!((balance - 0.5).abs() <= 0.01, "class balance {balance}");

    for (label, plus, minus) in [(1, Relevant::O1, Relevant::NegO1), (-1, Relevant::O2, Relevant::NegO2)] {
        let class: Vec<&Sequence> = seqs.iter().filter(|s| s.label == label).collect();
        let rare = class.iter().filter(|s| s.relevant_token() == ts.relevant(plus)).count();
        let common = class
            .iter()
            .filter(|s| s.relevant_token() == ts.relevant(minus))
            .count();
        assert_eq!(rare + common, class.len());
        let frac = rare as f64 / class.len() as f64;
        assert!((frac - alpha).abs() <= 0.01, "label {label}: +o fraction {frac}");
    }

    for s in &seqs {
        let relevant = s.tokens.iter().filter(|t| ts.classify(**t).is_some()).count();
        assert_eq!(relevant, 1);
        assert!(ts.classify(s.relevant_token()).is_some());
        assert!(s.tokens.iter().all(|t| t.sign == 1 || ts.classify(*t).is_some()));
    }
}

#[test]
fn init_variance_matches_config() {
    let cfg = SyntheticConfig::paper_scale();
    assert!(cfg.m * cfg.d >= 100_000);
    let model = MoEModel::init(&cfg);
    let target = cfg.init_std.powi(2);
    for w in &model.experts {
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / target - 1.0).abs() <= 0.1, "variance {var} vs {target}");
    }
    assert_eq!(model.signs.iter().filter(|&&a| a > 0.0).count(), cfg.k / 2);
    assert_eq!(MoEModel::init(&cfg).experts[3], model.experts[3]);
}

#[test]
fn zero_init_gives_zero_output_and_full_error() {
    let cfg = SyntheticConfig::ci().with_init_std(0.0);
    let ts = make_token_set(cfg.d, 0).unwrap();
    let model = MoEModel::init(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seqs = sample_sequences(&ts, cfg.alpha, cfg.n, 100, &mut rng);
    assert!(seqs.iter().all(|s| model.forward(&ts, s).output == 0.0));
    assert_eq!(test_error(&model, &ts, &seqs), 1.0);
}

#[test]
fn test_error_is_stable_across_samples() {
    let cfg = SyntheticConfig::ci().with_init_std(0.3);
    let ts = make_token_set(cfg.d, 0).unwrap();
    let model = MoEModel::init(&cfg).project(&ts);
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let reference = test_error(&model, &ts, &sample_sequences(&ts, cfg.alpha, cfg.n, 200_000, &mut rng));
    assert!(reference > 0.05 && reference < 0.95, "reference error {reference}");
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = test_error(&model, &ts, &sample_sequences(&ts, cfg.alpha, cfg.n, 10_000, &mut rng));
        assert!((err - reference).abs() <= 0.01, "seed {seed}: {err} vs {reference}");
    }
}

#[test]
fn single_token_forward_by_hand() {
    let mut model = MoEModel::zeros(1, 1, 2, 1);
    model.experts[0] = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    model.signs[0] = 1.0;
    let x = [DVector::from_column_slice(&[2.0, 0.0])];
    assert_eq!(model.forward_vectors(&x).output, 2.0);
    model.signs[0] = -1.0;
    assert_eq!(model.forward_vectors(&x).output, -2.0);
}

#[test]
fn single_sequence_update_by_hand() {
    let ts = make_token_set(4, 0).unwrap();
    let mut model = MoEModel::zeros(1, 1, 4, 1);
    model.signs[0] = 1.0;
    model.experts[0] = DMatrix::from_row_slice(1, 4, &[0.2, -0.1, 0.3, 0.05]);
    model.routers[0] = DVector::from_column_slice(&[0.5, 0.0, -0.5, 1.0]);
    let token = Token::new(ts.irrelevant()[0], 1);
    let x = ts.vector(token);
    let pre = (model.experts[0].row(0) * &x)[0];
    assert!(pre > 0.0);
    let seq = Sequence {
        tokens: vec![token],
        label: -1,
        relevant_position: 0,
    };
    let before = model.clone();
    let eta = 0.25;
    let loss = model.sgd_step(&ts, std::slice::from_ref(&seq), eta, 0.7);
    // l = 1 + f, f = pre, so ∂l/∂w = x and the router gradient vanishes with one token.
    assert!((loss - (1.0 + pre)).abs() < 1e-12);
    let expected = before.experts[0].row(0) - x.transpose() * eta;
    assert!((model.experts[0].row(0) - expected).amax() < 1e-12);
    assert_eq!(model.routers[0], before.routers[0]);

    let mut frozen = before.clone();
    frozen.sgd_step(&ts, &[seq], 0.0, 0.0);
    assert_eq!(frozen, before);
}

#[test]
fn token_space_step_matches_ambient_step() {
    let cfg = SyntheticConfig::ci().with_init_std(0.05);
    let ts = make_token_set(cfg.d, 2).unwrap();
    let mut ambient = MoEModel::init(&cfg);
    let mut reduced = ambient.project(&ts);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..5 {
        let batch = sample_sequences(&ts, cfg.alpha, cfg.n, 16, &mut rng);
        let la = ambient.sgd_step(&ts, &batch, cfg.eta_e, 0.2);
        let lr = reduced.sgd_step(&batch, cfg.eta_e, 0.2);
        assert!((la - lr).abs() < 1e-10);
    }
    let back = reduced.embed(&ts);
    for s in 0..cfg.k {
        assert!((&back.routers[s] - &ambient.routers[s]).amax() < 1e-10);
        assert!((&back.experts[s] - &ambient.experts[s]).amax() < 1e-10);
    }
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let cfg = SyntheticConfig {
        probe_size: 50,
        test_size: 50,
        ..SyntheticConfig::ci().with_steps(0)
    };
    let run = train(&cfg).unwrap();
    assert_eq!(run.initial, run.final_model);
    assert!(run.lambdas().iter().all(|&l| l == 0.0));
}

#[test]
fn zero_point_free_noise_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = DMatrix::<f64>::from_fn(64, 2000, |_, _| rng.sample(StandardNormal));
    for bits in [2, 4, 8] {
        let q = quantize_dequantize(&w, bits, GroupAxis::Column, QuantMode::ZeroPointFree).unwrap();
        let mut scaled = Vec::with_capacity(w.len());
        for (c, p) in q.params.iter().enumerate() {
            for r in 0..w.nrows() {
                let e = q.values[(r, c)] - w[(r, c)];
                assert!(
                    e.abs() <= p.delta / 2.0 * (1.0 + 1e-12),
                    "bits {bits}: {e} vs {}",
                    p.delta
                );
                scaled.push(e / p.delta);
            }
        }
        let n = scaled.len() as f64;
        let mean = scaled.iter().sum::<f64>() / n;
        let third = scaled.iter().map(|u| u.powi(3)).sum::<f64>() / n;
        let positive = scaled.iter().filter(|&&u| u > 0.0).count() as f64 / n;
        assert!(mean.abs() <= 0.01, "bits {bits}: mean {mean}");
        assert!(third.abs() <= 0.005, "bits {bits}: third moment {third}");
        assert!(
            (positive - 0.5).abs() <= 0.01,
            "bits {bits}: positive fraction {positive}"
        );
    }
}
