//! Planted-cluster rerouting lab.
//!
//! A one-layer, two-head model whose head `L0H0` sees keys from two tight
//! clusters: "focus" tokens map to keys near `+μ` and "tail" tokens near
//! `-μ`, while the final query token attends along `μ̂`. Each sequence has a
//! few focus tokens among many tail tokens, so the base attention sits on
//! the focus set. The steering vector for `L0H0` mixes an isotropic part
//! with a controllable share (`aligned_fraction` of its squared norm)
//! pointing along `-μ̂`; that share is what moves mass from focus to tail,
//! and it is exactly the direction the key-difference projector removes.
//! Head `L0H1` keeps random weights and a zero steering vector.
//!
//! Construction: orthonormal, zero-mean directions `â, b̂, ĉ` in model
//! space; focus tokens embed as `√d (â + η)`, tail tokens as `√d (b̂ + η)`
//! with per-token noise `η` orthogonal to `{1, â, b̂, ĉ}`, and the query
//! token as `√d ĉ`. Position embeddings are zero, so each token has one
//! fixed key. `W_k` sends `â ↦ μ`, `b̂ ↦ -μ`, `ĉ ↦ 0` and maps the noise
//! subspace to small random key offsets; `W_q` sends `ĉ ↦ κ μ̂`.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::Sequence;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{HeadId, ModelConfig, ModelWeights, LAYER_NORM_EPS};
use crate::rng::{self, stream};
use crate::steering::{SteeringMode, SteeringVector};

pub const PLANTED_HEAD: HeadId = HeadId { layer: 0, head: 0 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Distinct token ids per cluster.
    pub class_tokens: usize,
    pub min_focus: usize,
    pub max_focus: usize,
    /// `‖μ‖`.
    pub cluster_norm: f64,
    /// Std of each key coordinate around its cluster centre.
    pub key_noise: f64,
    /// `‖η‖` relative to the unit cluster direction in the embeddings.
    pub embed_noise: f64,
    /// `κ`: the query is `κ μ̂`.
    pub query_gain: f64,
    /// Share of the steering vector's squared norm along `-μ̂`.
    pub aligned_fraction: f64,
    pub steering_norm: f64,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_sequences: 200,
            min_len: 12,
            max_len: 40,
            class_tokens: 24,
            min_focus: 1,
            max_focus: 5,
            cluster_norm: 2.0,
            key_noise: 0.15,
            embed_noise: 0.3,
            query_gain: 4.2,
            aligned_fraction: 0.08,
            steering_norm: 2.0,
            model_dim: 16,
            mlp_hidden: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: self.model_dim,
            mlp_hidden: self.mlp_hidden,
            vocab_size: 2 * self.class_tokens + 1,
            max_seq_len: self.max_len,
        }
    }

    pub fn query_token(&self) -> usize {
        2 * self.class_tokens
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.model_dim < 8 {
            return Err(Error::invalid("synthetic lab needs model_dim >= 8"));
        }
        if self.class_tokens == 0 || self.num_sequences == 0 {
            return Err(Error::invalid("class_tokens and num_sequences must be positive"));
        }
        if self.min_focus == 0 || self.min_focus > self.max_focus {
            return Err(Error::invalid("need 1 <= min_focus <= max_focus"));
        }
        if self.min_len < self.max_focus + 2 || self.min_len > self.max_len {
            return Err(Error::invalid("need max_focus + 2 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.aligned_fraction) {
            return Err(Error::invalid("aligned_fraction must lie in [0, 1]"));
        }
        let nonneg = [
            self.cluster_norm,
            self.key_noise,
            self.embed_noise,
            self.query_gain,
            self.steering_norm,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("synthetic magnitudes must be finite and non-negative"));
        }
        if self.embed_noise == 0.0 && self.key_noise > 0.0 {
            return Err(Error::invalid("key_noise needs a nonzero embed_noise"));
        }
        Ok(())
    }
}

/// What the generator planted, for checking recovered statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted_head: HeadId,
    pub mu: Vec<f64>,
    /// Unit vector along the focus-to-tail key difference `2μ`.
    pub dominant_direction: Vec<f64>,
    pub focus_tokens: Vec<usize>,
    pub tail_tokens: Vec<usize>,
    pub query_token: usize,
    pub aligned_fraction: f64,
    pub config: SynthConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthLab {
    pub weights: ModelWeights,
    pub corpus: Vec<Sequence>,
    /// One query-space vector per head; `L0H1`'s is zero.
    pub steering: Vec<SteeringVector>,
    pub truth: GroundTruth,
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn remove_components(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = linalg::dot(v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= c * y;
        }
    }
}

/// `m += s · a bᵀ`.
fn add_outer(m: &mut Matrix, a: &[f64], b: &[f64], s: f64) {
    for (i, &x) in a.iter().enumerate() {
        for (o, &y) in m.row_mut(i).iter_mut().zip(b) {
            *o += s * x * y;
        }
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = linalg::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// A random unit vector orthogonal to the (orthonormal) `basis`.
fn orthogonal_unit(rng: &mut impl Rng, n: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut v = gaussian(rng, n);
    remove_components(&mut v, basis);
    remove_components(&mut v, basis);
    unit(v)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthLab> {
    cfg.validate()?;
    if cfg.cluster_norm == 0.0 {
        log::warn!("cluster_norm is 0: the synthetic corpus has no planted focus/tail structure");
    }
    let mc = cfg.model_config();
    let d = mc.model_dim;
    let dh = mc.head_dim();
    let mut weights = ModelWeights::init_random(mc, cfg.seed)?;
    let mut rng = rng::stream_rng(cfg.seed, stream::SYNTH, 0);

    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let a_hat = orthogonal_unit(&mut rng, d, std::slice::from_ref(&ones));
    let b_hat = orthogonal_unit(&mut rng, d, &[ones.clone(), a_hat.clone()]);
    let c_hat = orthogonal_unit(&mut rng, d, &[ones.clone(), a_hat.clone(), b_hat.clone()]);
    let reserved = [ones, a_hat.clone(), b_hat.clone(), c_hat.clone()];

    let mu: Vec<f64> = linalg::axpy(&vec![0.0; dh], cfg.cluster_norm, &unit(gaussian(&mut rng, dh)));
    let mu_hat = if cfg.cluster_norm > 0.0 { unit(mu.clone()) } else { vec![0.0; dh] };

    // Token embeddings.
    let sqrt_d = (d as f64).sqrt();
    let mut emb = Matrix::zeros(mc.vocab_size, d);
    for t in 0..2 * cfg.class_tokens {
        let dir = if t < cfg.class_tokens { &a_hat } else { &b_hat };
        let eta = orthogonal_unit(&mut rng, d, &reserved);
        let row = linalg::axpy(dir, cfg.embed_noise, &eta);
        for (o, x) in emb.row_mut(t).iter_mut().zip(&row) {
            *o = sqrt_d * x;
        }
    }
    for (o, x) in emb.row_mut(cfg.query_token()).iter_mut().zip(&c_hat) {
        *o = sqrt_d * x;
    }
    weights.token_embedding = emb;
    weights.position_embedding = Matrix::zeros(mc.max_seq_len, d);

    // After layer norm a class token is `c_cls (dir + η)` and the query is
    // `c_q ĉ`, since every row is zero-mean with a known norm.
    let c_cls = sqrt_d / (1.0 + cfg.embed_noise * cfg.embed_noise + LAYER_NORM_EPS).sqrt();
    let c_q = sqrt_d / (1.0 + LAYER_NORM_EPS).sqrt();

    // Orthonormal basis of the noise subspace.
    let mut noise_basis: Vec<Vec<f64>> = Vec::new();
    for _ in 0..d - reserved.len() {
        let mut all = reserved.to_vec();
        all.extend(noise_basis.iter().cloned());
        noise_basis.push(orthogonal_unit(&mut rng, d, &all));
    }
    // A key offset is `c_cls ηᵀ G` with `G = Σ e_i g_iᵀ` and `g_i ~ N(0, s²)`;
    // since `‖η‖ = embed_noise`, each coordinate has std `c_cls · embed_noise · s`.
    let s = if cfg.embed_noise > 0.0 {
        cfg.key_noise / (c_cls * cfg.embed_noise)
    } else {
        0.0
    };
    let mut wk = Matrix::zeros(d, dh);
    add_outer(&mut wk, &linalg::sub_vec(&a_hat, &b_hat), &mu, 1.0 / c_cls);
    for e in &noise_basis {
        let g = gaussian(&mut rng, dh);
        add_outer(&mut wk, e, &g, s);
    }
    let mut wq = Matrix::zeros(d, dh);
    add_outer(&mut wq, &c_hat, &mu_hat, cfg.query_gain / c_q);
    weights.layers[0].heads[0].wk = wk;
    weights.layers[0].heads[0].wq = wq;

    // Corpus.
    let mut corpus = Vec::with_capacity(cfg.num_sequences);
    for _ in 0..cfg.num_sequences {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let n_focus = rng.random_range(cfg.min_focus..=cfg.max_focus);
        let mut seq: Sequence = (0..len - 1)
            .map(|_| cfg.class_tokens + rng.random_range(0..cfg.class_tokens))
            .collect();
        for p in index::sample(&mut rng, len - 1, n_focus) {
            seq[p] = rng.random_range(0..cfg.class_tokens);
        }
        seq.push(cfg.query_token());
        corpus.push(seq);
    }

    // Steering: isotropic part orthogonal to μ̂ plus an aligned share on -μ̂.
    let w = if cfg.cluster_norm > 0.0 {
        orthogonal_unit(&mut rng, dh, std::slice::from_ref(&mu_hat))
    } else {
        unit(gaussian(&mut rng, dh))
    };
    let f = cfg.aligned_fraction;
    let r: Vec<f64> = mu_hat
        .iter()
        .zip(&w)
        .map(|(m, w)| cfg.steering_norm * (-f.sqrt() * m + (1.0 - f).sqrt() * w))
        .collect();
    let steering = vec![
        SteeringVector::new(PLANTED_HEAD, r, 1.0, SteeringMode::QuerySpace),
        SteeringVector::new(HeadId::new(0, 1), vec![0.0; dh], 1.0, SteeringMode::QuerySpace),
    ];

    let truth = GroundTruth {
        planted_head: PLANTED_HEAD,
        dominant_direction: mu_hat.clone(),
        mu,
        focus_tokens: (0..cfg.class_tokens).collect(),
        tail_tokens: (cfg.class_tokens..2 * cfg.class_tokens).collect(),
        query_token: cfg.query_token(),
        aligned_fraction: f,
        config: cfg.clone(),
    };
    Ok(SynthLab {
        weights,
        corpus,
        steering,
        truth,
    })
}

impl GroundTruth {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("truth serializes");
        s.push('\n');
        s
    }
}
