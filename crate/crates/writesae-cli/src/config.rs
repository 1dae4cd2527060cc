//! Experiment configuration: one JSON document drives the whole pipeline.

use serde::{Deserialize, Serialize};
use writesae::hosts::{HostConfig, HostTrainConfig, WriteRule};
use writesae::sae::{DecoderKind, EncoderKind, SparsitySpec, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    #[serde(default = "one")]
    pub threads: usize,
    pub host: HostConfig,
    pub corpus: CorpusConfig,
    pub host_train: HostTrainStage,
    /// Fixed (layer, head) cell, or absent to sweep cells by median
    /// dominant-firing cosine.
    #[serde(default)]
    pub capture_cell: Option<(usize, usize)>,
    pub sae: SaeStage,
    #[serde(default)]
    pub partition: PartitionStage,
    #[serde(default)]
    pub replace: ReplaceStage,
    #[serde(default)]
    pub predict: PredictStage,
    #[serde(default)]
    pub steer: SteerStage,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub train_len: usize,
    pub n_capture: usize,
    pub capture_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HostTrainStage {
    pub budget: usize,
    #[serde(flatten)]
    pub opt: HostTrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SaeStage {
    pub n_f: usize,
    pub decoder: DecoderKind,
    pub encoder: EncoderKind,
    pub sparsity: SparsitySpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PartitionStage {
    pub tau: f64,
}

impl Default for PartitionStage {
    fn default() -> Self {
        PartitionStage { tau: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Δ scaled by the firing coefficient.
    Coefficient,
    /// Δ rescaled to the native write's Frobenius norm.
    MatchedNorm,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReplaceStage {
    pub cap_per_feature: usize,
    pub max_firings: usize,
    pub scale: ScaleMode,
}

impl Default for ReplaceStage {
    fn default() -> Self {
        ReplaceStage { cap_per_feature: 30, max_firings: 1000, scale: ScaleMode::MatchedNorm }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PredictStage {
    pub eps: Vec<f64>,
    pub n_features: usize,
    pub n_seqs: usize,
    /// Injection happens this many positions before the sequence end.
    pub horizon: usize,
}

impl Default for PredictStage {
    fn default() -> Self {
        PredictStage { eps: vec![0.1, 0.3, 1.0, 3.0], n_features: 10, n_seqs: 10, horizon: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SteerStage {
    pub sign_trials: usize,
    pub gen_prompts: usize,
    pub gen_doses: Vec<f64>,
    pub gen_positions: usize,
    pub horizon: usize,
    pub install_magnitudes: Vec<f64>,
    pub amplify_prompts: usize,
    pub amplify_doses: Vec<f64>,
    pub amplify_top: usize,
}

impl Default for SteerStage {
    fn default() -> Self {
        SteerStage {
            sign_trials: 150,
            gen_prompts: 60,
            gen_doses: vec![1.5, 3.0, 6.0],
            gen_positions: 3,
            horizon: 20,
            install_magnitudes: vec![1.0, 2.0, 4.0],
            amplify_prompts: 40,
            amplify_doses: vec![2.0, 5.0, 10.0],
            amplify_top: 4,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.host.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.corpus.n_train == 0 || self.corpus.n_capture == 0 {
            return Err(CliError::Config("corpus sizes must be positive".into()));
        }
        if self.corpus.train_len < 8 || self.corpus.capture_len < 8 {
            return Err(CliError::Config("sequence lengths must be at least 8".into()));
        }
        if let Some((l, h)) = self.capture_cell {
            if l >= self.host.n_layers || h >= self.host.n_heads {
                return Err(CliError::Config(format!("capture cell ({l}, {h}) outside the host")));
            }
        }
        self.sae.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.host.vocab_size != writesae::corpus::RECALL_VOCAB {
            return Err(CliError::Config(format!(
                "the recall grammar needs vocab {}, config has {}",
                writesae::corpus::RECALL_VOCAB,
                self.host.vocab_size
            )));
        }
        Ok(())
    }

    /// Reference demo configuration (gated delta rule host).
    pub fn demo(out_dir: &str) -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: out_dir.to_string(),
            threads: 1,
            host: HostConfig::toy(WriteRule::GatedDelta, 0),
            corpus: CorpusConfig { seed: 11, n_train: 300, train_len: 64, n_capture: 300, capture_len: 16 },
            host_train: HostTrainStage {
                budget: 1600,
                opt: HostTrainConfig { batch: 8, lr_peak: 3e-3, lr_min: 3e-4, warmup: 30, clip: 1.0, eval_every: 100 },
            },
            capture_cell: None,
            sae: SaeStage {
                n_f: 128,
                decoder: DecoderKind::Rank1,
                encoder: EncoderKind::DenseLinear,
                sparsity: SparsitySpec::TopK { k: 4 },
                train: TrainConfig { epochs: 25, k_aux: 32, ..TrainConfig::toy(0) },
            },
            partition: PartitionStage::default(),
            replace: ReplaceStage::default(),
            predict: PredictStage { eps: vec![0.1, 0.3], ..PredictStage::default() },
            steer: SteerStage::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_losslessly() {
        let cfg = ExperimentConfig::demo("runs/x");
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_rejects_bad_cell_and_unknown_fields() {
        let mut cfg = ExperimentConfig::demo("runs/x");
        cfg.capture_cell = Some((9, 0));
        assert!(cfg.validate().is_err());
        let mut json: serde_json::Value =
            serde_json::to_value(ExperimentConfig::demo("runs/x")).unwrap();
        json["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(json).is_err());
    }
}
