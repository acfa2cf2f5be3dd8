use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::proficiency_table;
use crate::seeding::{self, stream_rng};
use crate::synthetic::config::SyntheticConfig;
use crate::synthetic::model::{MoEModel, MoeForward, TokenSpaceModel};
use crate::synthetic::tokens::{make_token_set, sample_sequences, Relevant, Sequence, TokenSet};

/// One expert at one checkpoint. Columns of `traces.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub expert_id: usize,
    pub lambda: f64,
    pub sigma_o1: f64,
    pub sigma_neg_o1: f64,
    pub sigma_o2: f64,
    pub sigma_neg_o2: f64,
    pub prof_o1: Option<f64>,
    pub prof_neg_o1: Option<f64>,
    pub prof_o2: Option<f64>,
    pub prof_neg_o2: Option<f64>,
    /// Mean hinge loss of the last batch; absent before training.
    pub train_loss: Option<f64>,
    pub test_error: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,expert_id,lambda,sigma_o1,sigma_neg_o1,sigma_o2,\
sigma_neg_o2,prof_o1,prof_neg_o1,prof_o2,prof_neg_o2,train_loss,test_error";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.expert_id,
            self.lambda,
            self.sigma_o1,
            self.sigma_neg_o1,
            self.sigma_o2,
            self.sigma_neg_o2,
            opt(self.prof_o1),
            opt(self.prof_neg_o1),
            opt(self.prof_o2),
            opt(self.prof_neg_o2),
            opt(self.train_loss),
            self.test_error
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: SyntheticConfig,
    pub tokens: TokenSet,
    pub initial: TokenSpaceModel,
    pub final_model: TokenSpaceModel,
    pub probe: Vec<Sequence>,
    pub test_set: Vec<Sequence>,
    pub traces: Vec<TraceRow>,
    pub final_test_error: f64,
}

impl TrainRun {
    /// `‖w_T‖ - ‖w_0‖` for every expert.
    pub fn lambdas(&self) -> Vec<f64> {
        (0..self.config.k)
            .map(|s| self.final_model.router_norm(s) - self.initial.router_norm(s))
            .collect()
    }
}

/// Fraction of `samples` with `y f(X) <= 0`.
pub fn test_error<M: MoeForward>(model: &M, ts: &TokenSet, samples: &[Sequence]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let wrong = samples
        .iter()
        .filter(|s| f64::from(s.label) * model.forward(ts, s).output <= 0.0)
        .count();
    wrong as f64 / samples.len() as f64
}

fn checkpoint(
    step: usize,
    model: &TokenSpaceModel,
    initial: &TokenSpaceModel,
    ts: &TokenSet,
    probe: &[Sequence],
    test_set: &[Sequence],
    train_loss: Option<f64>,
) -> Vec<TraceRow> {
    let profs = proficiency_table(model, ts, probe);
    let err = test_error(model, ts, test_set);
    let sigma = |s: usize, r: Relevant| model.activation(s, ts.relevant(r));
    (0..model.num_experts())
        .map(|s| TraceRow {
            step,
            expert_id: s,
            lambda: model.router_norm(s) - initial.router_norm(s),
            sigma_o1: sigma(s, Relevant::O1),
            sigma_neg_o1: sigma(s, Relevant::NegO1),
            sigma_o2: sigma(s, Relevant::O2),
            sigma_neg_o2: sigma(s, Relevant::NegO2),
            prof_o1: profs[s][0],
            prof_neg_o1: profs[s][1],
            prof_o2: profs[s][2],
            prof_neg_o2: profs[s][3],
            train_loss,
            test_error: err,
        })
        .collect()
}

/// Train a freshly initialized model with minibatch SGD, recording traces
/// every `checkpoint_every` steps and at the end.
pub fn train(cfg: &SyntheticConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let ts = make_token_set(cfg.d, cfg.seed)?;
    let initial = MoEModel::init(cfg).project(&ts);
    train_from(cfg, ts, initial)
}

/// As [`train`], from a given token set and starting point.
pub fn train_from(cfg: &SyntheticConfig, ts: TokenSet, initial: TokenSpaceModel) -> Result<TrainRun> {
    cfg.validate()?;
    let probe = sample_sequences(
        &ts,
        cfg.alpha,
        cfg.n,
        cfg.probe_size,
        &mut stream_rng(cfg.seed, seeding::PROBE),
    );
    let test_set = sample_sequences(
        &ts,
        cfg.alpha,
        cfg.n,
        cfg.test_size,
        &mut stream_rng(cfg.seed, seeding::TEST),
    );
    let mut batches = stream_rng(cfg.seed, seeding::BATCHES);
    let mut model = initial.clone();
    let mut traces = checkpoint(0, &model, &initial, &ts, &probe, &test_set, None);
    for step in 1..=cfg.steps {
        let batch = sample_sequences(&ts, cfg.alpha, cfg.n, cfg.batch_size, &mut batches);
        let loss = model.sgd_step(&batch, cfg.eta_e, cfg.eta_r);
        model.check_finite(step)?;
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            traces.extend(checkpoint(step, &model, &initial, &ts, &probe, &test_set, Some(loss)));
        }
    }
    let final_test_error = test_error(&model, &ts, &test_set);
    Ok(TrainRun {
        config: cfg.clone(),
        tokens: ts,
        initial,
        final_model: model,
        probe,
        test_set,
        traces,
        final_test_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traces_cover_checkpoints() {
        let mut cfg = SyntheticConfig::ci().with_steps(20);
        cfg.checkpoint_every = 8;
        cfg.probe_size = 100;
        cfg.test_size = 100;
        let run = train(&cfg).unwrap();
        let steps: Vec<usize> = run.traces.iter().map(|r| r.step).collect();
        let mut distinct = steps.clone();
        distinct.dedup();
        assert_eq!(distinct, vec![0, 8, 16, 20]);
        assert_eq!(steps.len(), 4 * cfg.k);
        assert!(run.traces[..cfg.k].iter().all(|r| r.lambda == 0.0));
        assert_eq!(run.traces[0].csv_line().split(',').count(), 13);
        assert_eq!(TraceRow::CSV_HEADER.split(',').count(), 13);
    }

    #[test]
    fn training_is_deterministic() {
        let mut cfg = SyntheticConfig::ci().with_steps(10);
        cfg.probe_size = 50;
        cfg.test_size = 50;
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.final_model, b.final_model);
        assert_eq!(a.traces, b.traces);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = SyntheticConfig::ci().with_steps(200);
        cfg.eta_e = 1e300;
        cfg.eta_r = 1e300;
        cfg.probe_size = 10;
        cfg.test_size = 10;
        assert!(matches!(train(&cfg), Err(crate::error::Error::NumericOverflow { .. })));
    }
}
