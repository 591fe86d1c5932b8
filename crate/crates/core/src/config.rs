//! The aggregated configuration document: one struct per subsystem, every
//! default in one place. Unknown keys are rejected on parse; missing keys
//! fall back to the defaults below.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::episodes::GeneratorConfig;
use crate::eval::DetectConfig;
use crate::proposal::ProposalConfig;
use crate::trainer::TrainConfig;

/// Evaluation settings beyond the per-detection thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Meta-test iterations.
    pub iterations: usize,
    pub detect: DetectConfig,
    /// Proposal-score thresholds visited by the sweep.
    pub sweep_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            detect: DetectConfig::default(),
            sweep_thresholds: (1..=19).map(|k| 0.05 * k as f64).collect(),
        }
    }
}

/// Everything a run needs, resolvable from defaults alone.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub proposal: ProposalConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_values() {
        let cfg = Config::default();
        assert_eq!(cfg.generator.seq_len, 512);
        assert_eq!(cfg.encoder.fc_dim, 64);
        assert_eq!(cfg.proposal.scales, vec![8, 16, 32, 64, 128]);
        assert_eq!(cfg.proposal.nms_thresh, 0.7);
        assert_eq!(cfg.trainer.learning_rate, 1e-4);
        assert_eq!(cfg.trainer.lambda, 1.0);
        assert_eq!(cfg.eval.iterations, 1000);
        assert_eq!(cfg.eval.detect.similarity_thresh, 0.02);
        assert_eq!(cfg.eval.sweep_thresholds.len(), 19);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<Config>("{\"not_a_key\": 1}");
        assert!(err.is_err());
    }

    #[test]
    fn missing_keys_fill_from_defaults() {
        let cfg: Config = serde_json::from_str("{\"trainer\": {\"seed\": 7}}").unwrap();
        assert_eq!(cfg.trainer.seed, 7);
        assert_eq!(cfg.trainer.learning_rate, 1e-4);
        assert_eq!(cfg.generator.num_classes, 15);
    }
}
