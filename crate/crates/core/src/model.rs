//! Minimal decoder-only transformer.
//!
//! Pre-norm residual blocks: `g = h + attn(LN1(h))`, `h' = g + mlp(LN2(g))`,
//! learned absolute position embeddings, no projection biases, and a GELU
//! MLP. Each head maps the layer-normalised input `z` through `d x d'`
//! projections: `q = z W_q`, `k = z W_k`, `v = z W_v`, and its output is
//! folded back into the residual as `W_o o`.
//!
//! Tensor names used by [`ModelWeights::to_tensor_file`]:
//!
//! | name                        | shape        |
//! |-----------------------------|--------------|
//! | `embed.token`               | `V x d`      |
//! | `embed.position`            | `T x d`      |
//! | `layer.{l}.head.{h}.wq`     | `d x d'`     |
//! | `layer.{l}.head.{h}.wk`     | `d x d'`     |
//! | `layer.{l}.head.{h}.wv`     | `d x d'`     |
//! | `layer.{l}.head.{h}.wo`     | `d x d'`     |
//! | `layer.{l}.ln1.gain`/`bias` | `d`          |
//! | `layer.{l}.ln2.gain`/`bias` | `d`          |
//! | `layer.{l}.mlp.w_in`        | `d x m`      |
//! | `layer.{l}.mlp.w_out`       | `m x d`      |
//! | `unembed`                   | `d x V`      |

use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{self, Matrix};
use crate::rng::{self, stream};
use crate::steering::{SteeringMode, SteeringPlan};
use crate::tensorfile::{self, TensorFile};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Pre-softmax value for masked (future) key positions.
pub const MASK_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn total_heads(&self) -> usize {
        self.num_layers * self.num_heads
    }

    /// All heads in `(layer, head)` order.
    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.num_layers)
            .flat_map(move |layer| (0..self.num_heads).map(move |head| HeadId { layer, head }))
    }

    pub fn check_head(&self, id: HeadId) -> Result<()> {
        if id.layer >= self.num_layers || id.head >= self.num_heads {
            return Err(Error::invalid(format!("{id} is outside the model")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    /// Position in `(layer, head)` order.
    pub fn flat_index(&self, num_heads: usize) -> usize {
        self.layer * num_heads + self.head
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub mlp_in: Matrix,
    pub mlp_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub unembedding: Matrix,
}

fn normal_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec_unchecked(rows, cols, data)
}

impl ModelWeights {
    /// Seeded random initialisation. Attention and MLP-input projections
    /// use `N(0, 1/d)`, the MLP output `N(0, 1/m)`, embeddings `N(0, 1)`,
    /// the unembedding `N(0, 1/d)`; layer-norm gains are 1 and biases 0.
    /// Draw order: token embedding, position embedding, then per layer the
    /// per-head `wq, wk, wv, wo` followed by the MLP, then the unembedding.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let dh = config.head_dim();
        let m = config.mlp_hidden;
        let proj_std = 1.0 / (d as f64).sqrt();
        let mut rng = rng::stream_rng(seed, stream::WEIGHTS, 0);

        let token_embedding = normal_matrix(&mut rng, config.vocab_size, d, 1.0);
        let position_embedding = normal_matrix(&mut rng, config.max_seq_len, d, 1.0);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let heads = (0..config.num_heads)
                .map(|_| HeadWeights {
                    wq: normal_matrix(&mut rng, d, dh, proj_std),
                    wk: normal_matrix(&mut rng, d, dh, proj_std),
                    wv: normal_matrix(&mut rng, d, dh, proj_std),
                    wo: normal_matrix(&mut rng, d, dh, proj_std),
                })
                .collect();
            layers.push(LayerWeights {
                heads,
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                mlp_in: normal_matrix(&mut rng, d, m, proj_std),
                mlp_out: normal_matrix(&mut rng, m, d, 1.0 / (m as f64).sqrt()),
            });
        }
        let unembedding = normal_matrix(&mut rng, d, config.vocab_size, proj_std);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            unembedding,
        })
    }

    pub fn head(&self, id: HeadId) -> &HeadWeights {
        &self.layers[id.layer].heads[id.head]
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new();
        let push = |f: &mut TensorFile, name: String, m: &Matrix| {
            f.push_matrix(name, m).expect("unique weight names");
        };
        push(&mut f, "embed.token".into(), &self.token_embedding);
        push(&mut f, "embed.position".into(), &self.position_embedding);
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, hw) in layer.heads.iter().enumerate() {
                push(&mut f, format!("layer.{l}.head.{h}.wq"), &hw.wq);
                push(&mut f, format!("layer.{l}.head.{h}.wk"), &hw.wk);
                push(&mut f, format!("layer.{l}.head.{h}.wv"), &hw.wv);
                push(&mut f, format!("layer.{l}.head.{h}.wo"), &hw.wo);
            }
            for (name, v) in [
                ("ln1.gain", &layer.ln1_gain),
                ("ln1.bias", &layer.ln1_bias),
                ("ln2.gain", &layer.ln2_gain),
                ("ln2.bias", &layer.ln2_bias),
            ] {
                f.push_vector(format!("layer.{l}.{name}"), v).expect("unique weight names");
            }
            push(&mut f, format!("layer.{l}.mlp.w_in"), &layer.mlp_in);
            push(&mut f, format!("layer.{l}.mlp.w_out"), &layer.mlp_out);
        }
        push(&mut f, "unembed".into(), &self.unembedding);
        f
    }

    /// Reads weights back, checking every tensor's shape against `config`.
    pub fn from_tensor_file(file: &TensorFile, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let dh = config.head_dim();
        let m = config.mlp_hidden;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut heads = Vec::with_capacity(config.num_heads);
            for h in 0..config.num_heads {
                let get = |suffix: &str| file.matrix(&format!("layer.{l}.head.{h}.{suffix}"), d, dh);
                heads.push(HeadWeights {
                    wq: get("wq")?,
                    wk: get("wk")?,
                    wv: get("wv")?,
                    wo: get("wo")?,
                });
            }
            let vec = |name: &str| file.vector(&format!("layer.{l}.{name}"), d);
            layers.push(LayerWeights {
                heads,
                ln1_gain: vec("ln1.gain")?,
                ln1_bias: vec("ln1.bias")?,
                ln2_gain: vec("ln2.gain")?,
                ln2_bias: vec("ln2.bias")?,
                mlp_in: file.matrix(&format!("layer.{l}.mlp.w_in"), d, m)?,
                mlp_out: file.matrix(&format!("layer.{l}.mlp.w_out"), m, d)?,
            });
        }
        Ok(Self {
            config,
            token_embedding: file.matrix("embed.token", config.vocab_size, d)?,
            position_embedding: file.matrix("embed.position", config.max_seq_len, d)?,
            layers,
            unembedding: file.matrix("unembed", d, config.vocab_size)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: &Path, config: ModelConfig) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?, config)
    }

    /// SHA-256 of the serialized weights, used for provenance checks.
    pub fn digest(&self) -> String {
        tensorfile::digest(&self.to_tensor_file().to_bytes())
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {t} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the model over one sequence.
    pub fn forward(
        &self,
        tokens: &[usize],
        steering: Option<&SteeringPlan>,
        record: Recording,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        if let Some(plan) = steering {
            plan.validate(&self.config)?;
        }
        let cfg = &self.config;
        let t = tokens.len();
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let recorded_rows: Vec<usize> = match record {
            Recording::Off => vec![],
            Recording::FinalPosition => vec![t - 1],
            Recording::AllPositions => (0..t).collect(),
        };

        let mut h = Matrix::zeros(t, d);
        for (i, &tok) in tokens.iter().enumerate() {
            let row = h.row_mut(i);
            for ((x, e), p) in row
                .iter_mut()
                .zip(self.token_embedding.row(tok))
                .zip(self.position_embedding.row(i))
            {
                *x = e + p;
            }
        }

        let mut traces = Vec::new();
        let mut attention_inputs = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer_norm(&h, &layer.ln1_gain, &layer.ln1_bias);
            if record != Recording::Off {
                let rows: Vec<&[f64]> = recorded_rows.iter().map(|&i| z.row(i)).collect();
                attention_inputs.push(Matrix::from_rows(&rows)?);
            }
            let mut attn_out = Matrix::zeros(t, d);
            for (hi, hw) in layer.heads.iter().enumerate() {
                let id = HeadId::new(l, hi);
                let sv = steering.and_then(|p| p.get(id));

                let steered_input;
                let z_head = match sv {
                    Some(sv) if sv.mode == SteeringMode::AttentionInput => {
                        let mut zs = z.clone();
                        for i in 0..t {
                            let row = zs.row_mut(i);
                            for (x, r) in row.iter_mut().zip(&sv.direction) {
                                *x += sv.strength * r;
                            }
                        }
                        steered_input = zs;
                        &steered_input
                    }
                    _ => &z,
                };
                let mut q = z_head.matmul(&hw.wq)?;
                let k = z_head.matmul(&hw.wk)?;
                let v = z_head.matmul(&hw.wv)?;
                if let Some(sv) = sv.filter(|sv| sv.mode == SteeringMode::QuerySpace) {
                    for i in 0..t {
                        for (x, r) in q.row_mut(i).iter_mut().zip(&sv.direction) {
                            *x += sv.strength * r;
                        }
                    }
                }

                let mut next_record = recorded_rows.iter().peekable();
                let mut logits = vec![0.0; t];
                for i in 0..t {
                    for (j, s) in logits.iter_mut().enumerate() {
                        *s = if j <= i {
                            linalg::dot(q.row(i), k.row(j)) * inv_sqrt
                        } else {
                            MASK_LOGIT
                        };
                    }
                    let weights = linalg::softmax_unchecked(&logits);
                    let mut o = vec![0.0; dh];
                    for (j, &w) in weights[..=i].iter().enumerate() {
                        for (acc, x) in o.iter_mut().zip(v.row(j)) {
                            *acc += w * x;
                        }
                    }
                    let out_row = attn_out.row_mut(i);
                    for (c, acc) in out_row.iter_mut().enumerate() {
                        *acc += linalg::dot(hw.wo.row(c), &o);
                    }

                    if next_record.peek() == Some(&&i) {
                        next_record.next();
                        let keys = Matrix::from_vec_unchecked(i + 1, dh, k.data()[..(i + 1) * dh].to_vec());
                        traces.push(AttentionTrace {
                            head: id,
                            query_position: i,
                            logits: logits[..=i].to_vec(),
                            weights: weights[..=i].to_vec(),
                            keys,
                            query: q.row(i).to_vec(),
                        });
                    }
                }
            }
            for (x, a) in h.data_mut().iter_mut().zip(attn_out.data()) {
                *x += a;
            }

            let z2 = layer_norm(&h, &layer.ln2_gain, &layer.ln2_bias);
            let mut hidden = z2.matmul(&layer.mlp_in)?;
            hidden.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
            let mlp = hidden.matmul(&layer.mlp_out)?;
            for (x, a) in h.data_mut().iter_mut().zip(mlp.data()) {
                *x += a;
            }
        }

        let logits = h.matmul(&self.unembedding)?;
        Ok(ForwardOutput {
            logits,
            traces,
            attention_inputs,
        })
    }

    /// [`ModelWeights::forward`] over many sequences with the given strategy.
    pub fn forward_batch(
        &self,
        sequences: &[Vec<usize>],
        steering: Option<&SteeringPlan>,
        record: Recording,
        exec: Execution,
    ) -> Result<Vec<ForwardOutput>> {
        exec.try_map(sequences, |_, seq| self.forward(seq, steering, record))
    }

    /// Greedy next-token choice at the last position.
    pub fn greedy_next(&self, tokens: &[usize], steering: Option<&SteeringPlan>) -> Result<usize> {
        let out = self.forward(tokens, steering, Recording::Off)?;
        let last = out.logits.row(tokens.len() - 1);
        Ok(last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("vocab is non-empty"))
    }
}

fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Matrix {
    let (t, d) = x.shape();
    let mut out = Matrix::zeros(t, d);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (c, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (row[c] - mean) * inv * gain[c] + bias[c];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Which query rows to keep traces for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recording {
    Off,
    #[default]
    FinalPosition,
    AllPositions,
}

impl Recording {
    pub fn rows(all_positions: bool) -> Self {
        if all_positions {
            Recording::AllPositions
        } else {
            Recording::FinalPosition
        }
    }
}

/// One attention row of one head: logits and weights over the causal
/// prefix `0..=query_position`, the (possibly steered) query, and the keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub head: HeadId,
    pub query_position: usize,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub keys: Matrix,
    pub query: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Next-token logits, one row per position.
    pub logits: Matrix,
    /// Ordered by layer, head, then query position.
    pub traces: Vec<AttentionTrace>,
    /// Per layer, the layer-normalised attention input at the recorded rows.
    pub attention_inputs: Vec<Matrix>,
}

impl ForwardOutput {
    pub fn traces_for(&self, id: HeadId) -> impl Iterator<Item = &AttentionTrace> {
        self.traces.iter().filter(move |t| t.head == id)
    }

    /// The trace of the last recorded row for `id`, whose keys cover every
    /// position of the sequence.
    pub fn last_trace(&self, id: HeadId) -> Option<&AttentionTrace> {
        self.traces_for(id).last()
    }
}
