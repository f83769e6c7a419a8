//! Experiment configuration.
//!
//! One TOML file drives every subcommand. Relative paths inside it resolve
//! against the directory holding the file. See the README for the schema.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use skoplab::calibration::CalibrationParams;
use skoplab::metrics::{CompareOptions, DEFAULT_THRESHOLDS};
use skoplab::steering::SteeringMode;
use skoplab::synth::SynthConfig;
use skoplab::ModelConfig;

use crate::error::CliError;

pub const SEED_ENV: &str = "SKOPLAB_SEED";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub steering: SteeringSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub synth: SynthSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config parses")
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Existing weights to use instead of `<output_dir>/model.skt`.
    pub weights: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 32,
            mlp_hidden: 64,
            vocab_size: 64,
            max_seq_len: 64,
            weights: None,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            mlp_hidden: self.mlp_hidden,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub calibration: Option<PathBuf>,
    pub positive: Option<PathBuf>,
    pub negative: Option<PathBuf>,
    /// Defaults to the calibration corpus.
    pub evaluation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringSection {
    pub mode: SteeringMode,
    pub lambdas: Vec<f64>,
    /// Existing vectors to use instead of `<output_dir>/steering.skt`.
    pub vectors: Option<PathBuf>,
}

impl Default for SteeringSection {
    fn default() -> Self {
        Self {
            mode: SteeringMode::QuerySpace,
            lambdas: CompareOptions::default().lambdas,
            vectors: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub tau_high: Option<f64>,
    pub gamma_energy: Option<f64>,
    pub risk_fraction: Option<f64>,
    pub epsilon: Option<f64>,
    pub pair_samples_per_step: Option<usize>,
    pub record_all_positions: Option<bool>,
    pub key_gamma: Option<f64>,
}

impl CalibrationSection {
    pub fn params(&self, seed: u64) -> CalibrationParams {
        let d = CalibrationParams::default();
        CalibrationParams {
            tau_high: self.tau_high.unwrap_or(d.tau_high),
            gamma_energy: self.gamma_energy.unwrap_or(d.gamma_energy),
            risk_fraction: self.risk_fraction.unwrap_or(d.risk_fraction),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            pair_samples_per_step: self.pair_samples_per_step.unwrap_or(d.pair_samples_per_step),
            record_all_positions: self.record_all_positions.unwrap_or(d.record_all_positions),
            key_gamma: self.key_gamma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub thresholds: Vec<f64>,
    pub allow_provenance_mismatch: bool,
    /// Existing artifact to use instead of `<output_dir>/calibration.skt`.
    pub artifact: Option<PathBuf>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            allow_provenance_mismatch: false,
            artifact: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub num_sequences: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub class_tokens: Option<usize>,
    pub min_focus: Option<usize>,
    pub max_focus: Option<usize>,
    pub cluster_norm: Option<f64>,
    pub key_noise: Option<f64>,
    pub embed_noise: Option<f64>,
    pub query_gain: Option<f64>,
    pub aligned_fraction: Option<f64>,
    pub steering_norm: Option<f64>,
    pub model_dim: Option<usize>,
    pub mlp_hidden: Option<usize>,
}

impl SynthSection {
    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            num_sequences: self.num_sequences.unwrap_or(d.num_sequences),
            min_len: self.min_len.unwrap_or(d.min_len),
            max_len: self.max_len.unwrap_or(d.max_len),
            class_tokens: self.class_tokens.unwrap_or(d.class_tokens),
            min_focus: self.min_focus.unwrap_or(d.min_focus),
            max_focus: self.max_focus.unwrap_or(d.max_focus),
            cluster_norm: self.cluster_norm.unwrap_or(d.cluster_norm),
            key_noise: self.key_noise.unwrap_or(d.key_noise),
            embed_noise: self.embed_noise.unwrap_or(d.embed_noise),
            query_gain: self.query_gain.unwrap_or(d.query_gain),
            aligned_fraction: self.aligned_fraction.unwrap_or(d.aligned_fraction),
            steering_norm: self.steering_norm.unwrap_or(d.steering_norm),
            model_dim: self.model_dim.unwrap_or(d.model_dim),
            mlp_hidden: self.mlp_hidden.unwrap_or(d.mlp_hidden),
            seed,
        }
    }
}

/// Parses config text; relative paths are resolved against `base_dir`.
pub fn parse(text: &str, base_dir: &Path) -> Result<ExperimentConfig, CliError> {
    let mut cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::invalid(format!("config: {e}")))?;
    let resolve = |p: &mut PathBuf| {
        if p.as_os_str() == "." {
            *p = base_dir.to_path_buf();
        } else if p.is_relative() {
            *p = base_dir.join(&*p);
        }
    };
    resolve(&mut cfg.output_dir);
    let optional = [
        &mut cfg.model.weights,
        &mut cfg.corpus.calibration,
        &mut cfg.corpus.positive,
        &mut cfg.corpus.negative,
        &mut cfg.corpus.evaluation,
        &mut cfg.steering.vectors,
        &mut cfg.compare.artifact,
    ];
    for p in optional.into_iter().flatten() {
        resolve(p);
    }
    if cfg.steering.lambdas.is_empty() {
        return Err(CliError::invalid("config: steering.lambdas must not be empty"));
    }
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse(&text, base)
}

/// `--seed` beats `SKOPLAB_SEED`, which beats the config file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = parse("", Path::new("/base")).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/base/out"));
        assert_eq!(cfg.model.model_config().total_heads(), 16);
        assert_eq!(cfg.steering.lambdas, vec![0.0, 1.0, 2.0, 4.0]);
        assert_eq!(cfg.calibration.params(3), CalibrationParams { seed: 3, ..Default::default() });
        assert_eq!(cfg.synth.synth_config(0), SynthConfig::default());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let text = r#"
            output_dir = "/abs/out"
            [corpus]
            calibration = "data/calib.txt"
            [steering]
            mode = "attention_input"
            lambdas = [1.0]
        "#;
        let cfg = parse(text, Path::new("/exp")).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/abs/out"));
        assert_eq!(cfg.corpus.calibration, Some(PathBuf::from("/exp/data/calib.txt")));
        assert_eq!(cfg.steering.mode, SteeringMode::AttentionInput);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(parse("[steering]\nlambdas = []", Path::new(".")).is_err());
        assert!(parse("[model]\nheads = 3", Path::new(".")).is_err());
        assert!(parse("[calibration]\nseed = 3", Path::new(".")).is_err());
        assert!(parse("seed = -1", Path::new(".")).is_err());
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some("2"), 3).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some("2"), 3).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, 3).unwrap(), 3);
        assert!(resolve_seed(None, Some("x"), 3).is_err());
    }
}
