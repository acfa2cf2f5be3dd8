use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::GroupAxis;

/// Every knob of a synthetic run. Serialized verbatim as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Token dimension.
    pub d: usize,
    /// Experts; the first half connect positively to the output.
    pub k: usize,
    /// Neurons per expert.
    pub m: usize,
    /// Tokens per sequence.
    pub n: usize,
    /// Tokens kept by each expert.
    pub l: usize,
    /// Probability of the less prevalent relevant token.
    pub alpha: f64,
    pub batch_size: usize,
    pub eta_e: f64,
    pub eta_r: f64,
    pub steps: usize,
    pub init_std: f64,
    pub seed: u64,
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: usize,
    /// Sequences used to estimate proficiencies.
    #[serde(default = "defaults::probe_size")]
    pub probe_size: usize,
    /// Held-out sequences for test error.
    #[serde(default = "defaults::test_size")]
    pub test_size: usize,
    /// Minimum proficiency for an expert to count as aligned to a token.
    #[serde(default = "defaults::alignment_threshold")]
    pub alignment_threshold: f64,
    /// Grouping of first-layer weights during quantization. `row` gives
    /// one bin size per neuron.
    #[serde(default = "defaults::quant_axis")]
    pub quant_axis: GroupAxis,
    #[serde(default = "defaults::zeta")]
    pub zeta: f64,
    #[serde(default = "defaults::max_bits")]
    pub max_bits: u32,
}

mod defaults {
    use crate::quantizer::GroupAxis;

    pub fn checkpoint_every() -> usize {
        50
    }
    pub fn probe_size() -> usize {
        1000
    }
    pub fn test_size() -> usize {
        2000
    }
    pub fn alignment_threshold() -> f64 {
        0.1
    }
    pub fn quant_axis() -> GroupAxis {
        GroupAxis::Row
    }
    pub fn zeta() -> f64 {
        3.0
    }
    pub fn max_bits() -> u32 {
        12
    }
}

impl SyntheticConfig {
    /// d = 200, k = 20, m = 800, n = 100, l = 5, α = 0.1, init variance
    /// 1e-4, learning rate 0.2.
    pub fn paper_scale() -> Self {
        SyntheticConfig {
            d: 200,
            k: 20,
            m: 800,
            n: 100,
            l: 5,
            alpha: 0.1,
            batch_size: 256,
            eta_e: 0.2,
            eta_r: 0.2,
            steps: 1000,
            init_std: 0.01,
            seed: 0,
            checkpoint_every: defaults::checkpoint_every(),
            probe_size: defaults::probe_size(),
            test_size: defaults::test_size(),
            alignment_threshold: defaults::alignment_threshold(),
            quant_axis: defaults::quant_axis(),
            zeta: defaults::zeta(),
            max_bits: defaults::max_bits(),
        }
    }

    /// Reduced configuration that trains in seconds. The router rate is
    /// well below the expert rate, as the convergence analysis asks for;
    /// with equal rates the small model rarely keeps every relevant token
    /// covered by an expert of its own class.
    pub fn ci() -> Self {
        SyntheticConfig {
            d: 64,
            k: 8,
            m: 64,
            n: 20,
            l: 3,
            eta_r: 0.003,
            ..Self::paper_scale()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_init_std(mut self, init_std: f64) -> Self {
        self.init_std = init_std;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d < 4 {
            return fail(format!("d must be >= 4, got {}", self.d));
        }
        if self.k < 2 || !self.k.is_multiple_of(2) {
            return fail(format!("k must be even and >= 2, got {}", self.k));
        }
        if self.m == 0 || self.n == 0 || self.l == 0 {
            return fail("m, n and l must be positive".into());
        }
        if self.l > self.n {
            return fail(format!("l = {} exceeds n = {}", self.l, self.n));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.25) {
            return fail(format!("alpha must be in (0, 0.25), got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        for (name, v) in [
            ("eta_e", self.eta_e),
            ("eta_r", self.eta_r),
            ("init_std", self.init_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.checkpoint_every == 0 || self.probe_size == 0 || self.test_size == 0 {
            return fail("checkpoint_every, probe_size and test_size must be positive".into());
        }
        if self.alignment_threshold.is_nan() || self.alignment_threshold <= 0.0 || self.alignment_threshold > 1.0 {
            return fail("alignment_threshold must be in (0, 1]".into());
        }
        if self.zeta.is_nan() || self.zeta <= 1.0 {
            return fail(format!("zeta must be > 1, got {}", self.zeta));
        }
        if self.max_bits == 0 || self.max_bits > crate::quantizer::MAX_BITS {
            return fail(format!("max_bits out of range: {}", self.max_bits));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        SyntheticConfig::paper_scale().validate().unwrap();
        SyntheticConfig::ci().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let base = SyntheticConfig::ci();
        assert!(base.clone().with_alpha(0.25).validate().is_err());
        assert!(base.clone().with_alpha(0.0).validate().is_err());
        let mut c = base.clone();
        c.k = 7;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.l = c.n + 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_defaults_fill_optional_fields() {
        let json = r#"{"d":16,"k":4,"m":8,"n":6,"l":2,"alpha":0.1,"batch_size":32,
            "eta_e":0.2,"eta_r":0.2,"steps":10,"init_std":0.01,"seed":3}"#;
        let c: SyntheticConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.test_size, 2000);
        assert_eq!(c.quant_axis, GroupAxis::Row);
        c.validate().unwrap();
    }
}
