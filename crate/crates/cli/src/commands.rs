//! Subcommand implementations. Each returns the text destined for stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skoplab::calibration::{run_calibration, CalibrationArtifact};
use skoplab::corpus::{self, Sequence};
use skoplab::metrics::{compare_steering_modes, CompareOptions};
use skoplab::steering::{self, SteeringMode, SteeringVector};
use skoplab::synth;
use skoplab::{Execution, ModelConfig, ModelWeights};

use crate::config::ExperimentConfig;
use crate::error::{CliError, ExitKind};

const WEIGHTS_FORMAT: &str = "skoplab.weights.v1";
const STEERING_FORMAT: &str = "skoplab.steering.v1";

pub struct Context {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub exec: Execution,
}

/// Sidecar written next to a weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub digest: String,
}

/// Sidecar written next to a steering file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringMeta {
    pub format: String,
    pub mode: SteeringMode,
    pub model_digest: String,
    pub steering_digest: String,
    pub positive_corpus_digest: Option<String>,
    pub negative_corpus_digest: Option<String>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

/// Maps a missing-file error to one with a remediation hint.
fn missing_hint(err: CliError, path: &Path, hint: &str) -> CliError {
    if err.kind == ExitKind::Io && !path.exists() {
        err.with_hint(hint)
    } else {
        err
    }
}

impl Context {
    fn out_dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn weights_path(&self) -> PathBuf {
        self.config
            .model
            .weights
            .clone()
            .unwrap_or_else(|| self.out_dir().join("model.skt"))
    }

    pub fn steering_path(&self) -> PathBuf {
        self.config
            .steering
            .vectors
            .clone()
            .unwrap_or_else(|| self.out_dir().join("steering.skt"))
    }

    pub fn artifact_path(&self) -> PathBuf {
        self.config
            .compare
            .artifact
            .clone()
            .unwrap_or_else(|| self.out_dir().join("calibration.skt"))
    }

    fn corpus(&self, key: &str, path: Option<&PathBuf>) -> Result<Vec<Sequence>, CliError> {
        let path = path.ok_or_else(|| CliError::invalid(format!("config: corpus.{key} is not set")))?;
        Ok(corpus::read(path)?)
    }

    pub fn load_weights(&self) -> Result<ModelWeights, CliError> {
        let path = self.weights_path();
        let hint = "run `skoplab init-model` first, or point model.weights at an existing file";
        let meta_file = meta_path(&path);
        let (config, expected) = if meta_file.exists() {
            let meta: WeightsMeta = read_json(&meta_file)?;
            if self.config.model.weights.is_none() && meta.config != self.config.model.model_config() {
                log::warn!(
                    "{} was written for a different [model] section; using the configuration stored with it",
                    path.display()
                );
            }
            (meta.config, Some(meta.digest))
        } else {
            log::warn!("{} has no .meta sidecar; assuming the [model] section", path.display());
            (self.config.model.model_config(), None)
        };
        let weights = ModelWeights::load(&path, config).map_err(|e| missing_hint(e.into(), &path, hint))?;
        if let Some(d) = expected {
            if d != weights.digest() {
                return Err(CliError::provenance(format!(
                    "{} does not match the digest recorded in its sidecar",
                    path.display()
                )));
            }
        }
        Ok(weights)
    }

    pub fn load_steering(&self, weights: &ModelWeights) -> Result<Vec<SteeringVector>, CliError> {
        let path = self.steering_path();
        let hint = "run `skoplab build-steering` first, or point steering.vectors at an existing file";
        let vectors =
            steering::load(&path, &weights.config).map_err(|e| missing_hint(e.into(), &path, hint))?;
        let meta_file = meta_path(&path);
        if meta_file.exists() {
            let meta: SteeringMeta = read_json(&meta_file)?;
            if meta.model_digest != weights.digest() {
                return Err(CliError::provenance(format!(
                    "steering vectors in {} were built for model {}, but the weights are {}",
                    path.display(),
                    meta.model_digest,
                    weights.digest()
                ))
                .with_hint("rebuild the steering vectors for these weights"));
            }
        } else {
            log::warn!("{} has no .meta sidecar; skipping its model check", path.display());
        }
        if let Some(v) = vectors.first() {
            if v.mode != self.config.steering.mode {
                log::warn!("steering file holds {} vectors; steering.mode says {}", v.mode, self.config.steering.mode);
            }
        }
        Ok(vectors)
    }
}

fn save_weights(weights: &ModelWeights, seed: u64, path: &Path) -> Result<String, CliError> {
    weights.save(path)?;
    let meta = WeightsMeta {
        format: WEIGHTS_FORMAT.to_string(),
        config: weights.config,
        seed,
        digest: weights.digest(),
    };
    write_file(&meta_path(path), to_json(&meta).as_bytes())?;
    Ok(meta.digest)
}

fn save_steering(
    vectors: &[SteeringVector],
    weights: &ModelWeights,
    corpora: Option<(&[Sequence], &[Sequence])>,
    path: &Path,
) -> Result<String, CliError> {
    steering::save(vectors, path)?;
    let meta = SteeringMeta {
        format: STEERING_FORMAT.to_string(),
        mode: vectors.first().map_or(SteeringMode::QuerySpace, |v| v.mode),
        model_digest: weights.digest(),
        steering_digest: steering::digest(vectors)?,
        positive_corpus_digest: corpora.map(|(p, _)| corpus::digest(p)),
        negative_corpus_digest: corpora.map(|(_, n)| corpus::digest(n)),
    };
    write_file(&meta_path(path), to_json(&meta).as_bytes())?;
    Ok(meta.steering_digest)
}

pub fn cmd_init_model(ctx: &Context) -> Result<String, CliError> {
    let config = ctx.config.model.model_config();
    config.validate()?;
    let weights = ModelWeights::init_random(config, ctx.seed)?;
    ensure_dir(ctx.out_dir())?;
    let path = ctx.out_dir().join("model.skt");
    let digest = save_weights(&weights, ctx.seed, &path)?;
    if ctx.config.model.weights.is_some() {
        log::warn!("model.weights is set, so later commands will not read {}", path.display());
    }
    Ok(format!("wrote {}\nsha256: {digest}\n", path.display()))
}

pub fn cmd_build_steering(ctx: &Context) -> Result<String, CliError> {
    let weights = ctx.load_weights()?;
    let pos = ctx.corpus("positive", ctx.config.corpus.positive.as_ref())?;
    let neg = ctx.corpus("negative", ctx.config.corpus.negative.as_ref())?;
    if pos.is_empty() || neg.is_empty() {
        return Err(CliError::invalid("contrastive corpora must both be non-empty"));
    }
    corpus::validate(&pos, &weights.config)?;
    corpus::validate(&neg, &weights.config)?;
    let mode = ctx.config.steering.mode;
    let vectors = steering::build_mean_difference_vectors(&weights, &pos, &neg, mode, ctx.exec)?;
    ensure_dir(ctx.out_dir())?;
    let path = ctx.out_dir().join("steering.skt");
    let digest = save_steering(&vectors, &weights, Some((&pos, &neg)), &path)?;

    let mut s = String::new();
    writeln!(s, "head\tnorm").unwrap();
    for v in &vectors {
        writeln!(s, "{}\t{:.6e}", v.head, skoplab::linalg::norm(&v.direction)).unwrap();
    }
    writeln!(s, "wrote {} {mode} vectors to {}", vectors.len(), path.display()).unwrap();
    writeln!(s, "sha256: {digest}").unwrap();
    Ok(s)
}

pub fn cmd_calibrate(ctx: &Context) -> Result<String, CliError> {
    let weights = ctx.load_weights()?;
    let vectors = ctx.load_steering(&weights)?;
    let seqs = ctx.corpus("calibration", ctx.config.corpus.calibration.as_ref())?;
    let params = ctx.config.calibration.params(ctx.seed);
    let art = run_calibration(&weights, &seqs, &vectors, &params, ctx.exec)?;
    ensure_dir(ctx.out_dir())?;
    let path = ctx.out_dir().join("calibration.skt");
    art.save(&path)?;

    let mut s = String::new();
    writeln!(s, "head\trank\tenergy\trisk\tkey_rank\tselected").unwrap();
    for h in &art.heads {
        writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.6e}\t{}\t{}",
            h.head,
            h.rank,
            h.energy_captured,
            h.risk,
            h.key_rank,
            if h.selected { "yes" } else { "no" }
        )
        .unwrap();
    }
    let d = &art.diagnostics;
    if d.skipped_empty_tail > 0 {
        writeln!(s, "skipped steps with empty tail: {}", d.skipped_empty_tail).unwrap();
    }
    if !d.heads_without_pairs.is_empty() {
        let names: Vec<String> = d.heads_without_pairs.iter().map(|h| h.to_string()).collect();
        writeln!(s, "heads without focus/tail pairs: {}", names.join(", ")).unwrap();
    }
    writeln!(s, "selected: {} of {} heads", art.selected_heads().count(), art.heads.len()).unwrap();
    writeln!(s, "wrote {}", path.display()).unwrap();
    Ok(s)
}

pub fn cmd_compare(ctx: &Context) -> Result<String, CliError> {
    let weights = ctx.load_weights()?;
    let vectors = ctx.load_steering(&weights)?;
    let art_path = ctx.artifact_path();
    let art = CalibrationArtifact::load(&art_path)
        .map_err(|e| missing_hint(e.into(), &art_path, "run `skoplab calibrate` first"))?;
    let eval_path = ctx
        .config
        .corpus
        .evaluation
        .as_ref()
        .or(ctx.config.corpus.calibration.as_ref());
    let seqs = ctx.corpus("evaluation", eval_path)?;
    let options = CompareOptions {
        lambdas: ctx.config.steering.lambdas.clone(),
        thresholds: ctx.config.compare.thresholds.clone(),
        allow_provenance_mismatch: ctx.config.compare.allow_provenance_mismatch,
    };
    let report = compare_steering_modes(&weights, &seqs, &vectors, &art, &options, ctx.exec)?;
    ensure_dir(ctx.out_dir())?;
    let csv = ctx.out_dir().join("compare.csv");
    let json = ctx.out_dir().join("compare.json");
    write_file(&csv, report.to_csv().as_bytes())?;
    write_file(&json, report.summary_json().as_bytes())?;

    let mut s = String::new();
    writeln!(s, "lambda\tmode\tmean_tail_prob\tmin_delta_m\tmean_norm_retention").unwrap();
    for r in &report.rows {
        let p = &r.curve.probabilities;
        writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            r.lambda,
            r.mode.as_str(),
            p.iter().sum::<f64>() / p.len() as f64,
            r.min_delta_m,
            r.mean_norm_retention
        )
        .unwrap();
    }
    writeln!(s, "population: {}", report.population).unwrap();
    writeln!(s, "wrote {} and {}", csv.display(), json.display()).unwrap();
    Ok(s)
}

pub fn cmd_synth(ctx: &Context) -> Result<String, CliError> {
    let sc = ctx.config.synth.synth_config(ctx.seed);
    let lab = synth::generate(&sc)?;
    let dir = ctx.out_dir().join("synth");
    ensure_dir(&dir)?;
    corpus::write(&lab.corpus, &dir.join("corpus.txt"))?;
    write_file(&dir.join("truth.json"), lab.truth.to_json().as_bytes())?;
    save_weights(&lab.weights, sc.seed, &dir.join("model.skt"))?;
    save_steering(&lab.steering, &lab.weights, None, &dir.join("steering.skt"))?;
    let experiment = format!(
        "# Planted-cluster experiment written by `skoplab synth`.\n\
         output_dir = \".\"\n\
         seed = {}\n\n\
         [model]\n\
         weights = \"model.skt\"\n\n\
         [corpus]\n\
         calibration = \"corpus.txt\"\n\n\
         [steering]\n\
         vectors = \"steering.skt\"\n\
         lambdas = [0.0, 1.0, 2.0, 4.0]\n",
        sc.seed
    );
    write_file(&dir.join("experiment.toml"), experiment.as_bytes())?;
    Ok(format!(
        "wrote {} sequences, ground truth, model and steering vectors to {}\n\
         next: skoplab --config {} calibrate\n",
        lab.corpus.len(),
        dir.display(),
        dir.join("experiment.toml").display()
    ))
}
