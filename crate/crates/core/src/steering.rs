//! Steering vectors: mean-difference construction and the two application
//! modes.
//!
//! In query-space mode a head's queries move by `λ r_q` and the only change
//! to its logits is `λ⟨r_q, k_j⟩/√d'`. In attention-input mode a `d`-vector
//! `r` is added to the layer-normalised input of that head, so queries,
//! keys and values all move (`r_q = r W_q`, `r_k = r W_k`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::exec::Execution;
use crate::linalg::{self, Matrix};
use crate::model::{HeadId, ModelConfig, ModelWeights, Recording};
use crate::tensorfile::{self, TensorFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMode {
    QuerySpace,
    AttentionInput,
}

impl SteeringMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SteeringMode::QuerySpace => "query_space",
            SteeringMode::AttentionInput => "attention_input",
        }
    }

    /// Length of a direction in this mode: `d'` or `d`.
    pub fn dim(self, config: &ModelConfig) -> usize {
        match self {
            SteeringMode::QuerySpace => config.head_dim(),
            SteeringMode::AttentionInput => config.model_dim,
        }
    }
}

impl fmt::Display for SteeringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SteeringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_space" => Ok(SteeringMode::QuerySpace),
            "attention_input" => Ok(SteeringMode::AttentionInput),
            other => Err(Error::invalid(format!("unknown steering mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub head: HeadId,
    pub direction: Vec<f64>,
    pub strength: f64,
    pub mode: SteeringMode,
}

impl SteeringVector {
    pub fn new(head: HeadId, direction: Vec<f64>, strength: f64, mode: SteeringMode) -> Self {
        Self {
            head,
            direction,
            strength,
            mode,
        }
    }

    pub fn with_strength(&self, strength: f64) -> Self {
        Self {
            strength,
            ..self.clone()
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.check_head(self.head)?;
        let want = self.mode.dim(config);
        if self.direction.len() != want {
            return Err(Error::invalid(format!(
                "{} steering vector for {} has dimension {}, expected {want}",
                self.mode,
                self.head,
                self.direction.len()
            )));
        }
        if !self.strength.is_finite() || self.direction.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("steering vector for {} is not finite", self.head)));
        }
        Ok(())
    }

    /// The query-space direction `r_q` this vector induces on its head.
    pub fn query_direction(&self, weights: &ModelWeights) -> Result<Vec<f64>> {
        match self.mode {
            SteeringMode::QuerySpace => Ok(self.direction.clone()),
            SteeringMode::AttentionInput => weights.head(self.head).wq.vecmat(&self.direction),
        }
    }

    /// The key-space shift `r_k`; zero in query-space mode.
    pub fn key_direction(&self, weights: &ModelWeights) -> Result<Vec<f64>> {
        match self.mode {
            SteeringMode::QuerySpace => Ok(vec![0.0; weights.config.head_dim()]),
            SteeringMode::AttentionInput => weights.head(self.head).wk.vecmat(&self.direction),
        }
    }
}

/// At most one steering vector per head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SteeringPlan {
    vectors: BTreeMap<HeadId, SteeringVector>,
}

impl SteeringPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_vectors(vectors: impl IntoIterator<Item = SteeringVector>) -> Result<Self> {
        let mut plan = Self::new();
        for v in vectors {
            plan.insert(v)?;
        }
        Ok(plan)
    }

    pub fn insert(&mut self, v: SteeringVector) -> Result<()> {
        if self.vectors.contains_key(&v.head) {
            return Err(Error::invalid(format!("two steering vectors for {}", v.head)));
        }
        self.vectors.insert(v.head, v);
        Ok(())
    }

    pub fn get(&self, id: HeadId) -> Option<&SteeringVector> {
        self.vectors.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SteeringVector> {
        self.vectors.values()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.vectors.values().try_for_each(|v| v.validate(config))
    }

    /// Same directions, every strength replaced by `strength`.
    pub fn with_strength(&self, strength: f64) -> Self {
        Self {
            vectors: self
                .vectors
                .iter()
                .map(|(k, v)| (*k, v.with_strength(strength)))
                .collect(),
        }
    }
}

/// Positive and negative activations for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveActivations {
    pub head: HeadId,
    pub space: SteeringMode,
    pub positive: Vec<Vec<f64>>,
    pub negative: Vec<Vec<f64>>,
}

fn mean_of(vs: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    for v in vs {
        if v.len() != dim {
            return Err(Error::invalid("contrastive activations have differing dimensions"));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = vs.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// `mean(positive) - mean(negative)`, returned with strength 1.
pub fn mean_difference_vector(acts: &ContrastiveActivations) -> Result<SteeringVector> {
    let dim = acts
        .positive
        .first()
        .ok_or_else(|| Error::invalid("no positive activations"))?
        .len();
    if acts.negative.is_empty() {
        return Err(Error::invalid("no negative activations"));
    }
    let pos = mean_of(&acts.positive, dim)?;
    let neg = mean_of(&acts.negative, dim)?;
    Ok(SteeringVector::new(
        acts.head,
        linalg::sub_vec(&pos, &neg),
        1.0,
        acts.space,
    ))
}

/// `q + λ r` for a query-space vector.
pub fn apply_query_steering(q: &[f64], sv: &SteeringVector) -> Result<Vec<f64>> {
    if sv.mode != SteeringMode::QuerySpace {
        return Err(Error::invalid("query steering needs a query_space vector"));
    }
    if q.len() != sv.direction.len() {
        return Err(Error::invalid("query and steering vector dimensions differ"));
    }
    Ok(linalg::axpy(q, sv.strength, &sv.direction))
}

/// `z + λ r` for an attention-input vector.
pub fn apply_attention_input_steering(z: &[f64], sv: &SteeringVector) -> Result<Vec<f64>> {
    if sv.mode != SteeringMode::AttentionInput {
        return Err(Error::invalid("attention-input steering needs an attention_input vector"));
    }
    if z.len() != sv.direction.len() {
        return Err(Error::invalid("input and steering vector dimensions differ"));
    }
    Ok(linalg::axpy(z, sv.strength, &sv.direction))
}

/// The expansion of `⟨q + λr_q, k + λr_k⟩/√d' - ⟨q, k⟩/√d'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitShift {
    /// `λ⟨q, r_k⟩/√d'`: constant across keys in a row.
    pub query_term: f64,
    /// `λ⟨r_q, k⟩/√d'`: the only key-dependent term.
    pub key_term: f64,
    /// `λ²⟨r_q, r_k⟩/√d'`: constant everywhere.
    pub cross_term: f64,
    pub total: f64,
}

pub fn decompose_logit_shift(
    q: &[f64],
    k: &[f64],
    r_q: &[f64],
    r_k: &[f64],
    strength: f64,
    head_dim: usize,
) -> Result<LogitShift> {
    let n = q.len();
    if k.len() != n || r_q.len() != n || r_k.len() != n {
        return Err(Error::invalid("logit decomposition inputs differ in length"));
    }
    if [q, k, r_q, r_k].iter().any(|v| v.iter().any(|x| !x.is_finite())) || !strength.is_finite() {
        return Err(Error::invalid("logit decomposition inputs must be finite"));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let query_term = strength * linalg::dot(q, r_k) * scale;
    let key_term = strength * linalg::dot(r_q, k) * scale;
    let cross_term = strength * strength * linalg::dot(r_q, r_k) * scale;
    Ok(LogitShift {
        query_term,
        key_term,
        cross_term,
        total: query_term + key_term + cross_term,
    })
}

/// Final-position activations of every head over two corpora: queries in
/// query-space mode, layer-normalised attention inputs otherwise.
pub fn collect_contrastive(
    weights: &ModelWeights,
    positive: &[Vec<usize>],
    negative: &[Vec<usize>],
    space: SteeringMode,
    exec: Execution,
) -> Result<Vec<ContrastiveActivations>> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::invalid("contrastive corpora must both be non-empty"));
    }
    let config = weights.config;
    let gather = |corpus: &[Vec<usize>]| -> Result<Vec<Vec<Vec<f64>>>> {
        let outs = weights.forward_batch(corpus, None, Recording::FinalPosition, exec)?;
        let mut per_head = vec![Vec::with_capacity(corpus.len()); config.total_heads()];
        for out in &outs {
            for id in config.heads() {
                let act = match space {
                    SteeringMode::QuerySpace => out
                        .last_trace(id)
                        .expect("final position recorded")
                        .query
                        .clone(),
                    SteeringMode::AttentionInput => out.attention_inputs[id.layer].row(0).to_vec(),
                };
                per_head[id.flat_index(config.num_heads)].push(act);
            }
        }
        Ok(per_head)
    };
    let pos = gather(positive)?;
    let neg = gather(negative)?;
    Ok(config
        .heads()
        .zip(pos.into_iter().zip(neg))
        .map(|(head, (positive, negative))| ContrastiveActivations {
            head,
            space,
            positive,
            negative,
        })
        .collect())
}

/// One mean-difference vector per head, in `(layer, head)` order.
pub fn build_mean_difference_vectors(
    weights: &ModelWeights,
    positive: &[Vec<usize>],
    negative: &[Vec<usize>],
    space: SteeringMode,
    exec: Execution,
) -> Result<Vec<SteeringVector>> {
    collect_contrastive(weights, positive, negative, space, exec)?
        .iter()
        .map(mean_difference_vector)
        .collect()
}

pub fn tensor_name(mode: SteeringMode, head: HeadId) -> String {
    format!("steer.{}.layer.{}.head.{}", mode.as_str(), head.layer, head.head)
}

pub fn to_tensor_file(vectors: &[SteeringVector]) -> Result<TensorFile> {
    let mut f = TensorFile::new();
    for v in vectors {
        f.push_vector(tensor_name(v.mode, v.head), &v.direction)?;
    }
    Ok(f)
}

/// Reads a complete set (one vector per head, a single mode) with unit
/// strength.
pub fn from_tensor_file(file: &TensorFile, config: &ModelConfig) -> Result<Vec<SteeringVector>> {
    let mode = match file.tensors().first() {
        Some(t) if t.name.starts_with("steer.attention_input.") => SteeringMode::AttentionInput,
        Some(_) => SteeringMode::QuerySpace,
        None => return Err(Error::invalid("steering file is empty")),
    };
    if file.len() != config.total_heads() {
        return Err(Error::invalid(format!(
            "steering file has {} tensors, expected {}",
            file.len(),
            config.total_heads()
        )));
    }
    config
        .heads()
        .map(|head| {
            let name = tensor_name(mode, head);
            let dir = file.vector(&name, mode.dim(config))?;
            let sv = SteeringVector::new(head, dir, 1.0, mode);
            sv.validate(config)?;
            Ok(sv)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Format(FormatError::MissingTensor(n)) => {
                Error::invalid(format!("steering file is missing {n} (mixed modes?)"))
            }
            other => other,
        })
}

pub fn save(vectors: &[SteeringVector], path: &Path) -> Result<()> {
    to_tensor_file(vectors)?.write(path)
}

pub fn load(path: &Path, config: &ModelConfig) -> Result<Vec<SteeringVector>> {
    from_tensor_file(&TensorFile::read(path)?, config)
}

pub fn digest(vectors: &[SteeringVector]) -> Result<String> {
    Ok(tensorfile::digest(&to_tensor_file(vectors)?.to_bytes()))
}

/// Stacks directions as rows; handy for inspecting a full set.
pub fn direction_matrix(vectors: &[SteeringVector]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = vectors.iter().map(|v| v.direction.as_slice()).collect();
    Matrix::from_rows(&rows)
}
