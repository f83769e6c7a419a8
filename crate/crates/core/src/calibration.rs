//! Calibration: per-head focus/tail statistics on an unsteered corpus,
//! key-difference second moments, projector ranks, and risk scores.
//!
//! For every recorded attention row the focus set is the smallest set of
//! key positions holding at least `tau_high` of the row's mass (greedy by
//! descending weight, lower index first on ties) and the tail is the rest.
//! Differences `k_focus - k_tail` over sampled pairs are pooled into
//! `Σ_Δk`, whose top eigendirections (enough to cover `gamma_energy` of
//! its trace) form the SKOP basis. Keys at every position also feed the
//! centred covariance `Σ_k` behind the key-invariant projector.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Sequence};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{self, Matrix, MomentAccumulator};
use crate::model::{HeadId, ModelConfig, ModelWeights, Recording};
use crate::rng::{self, stream};
use crate::steering::{self, SteeringVector};
use crate::tensorfile::TensorFile;

/// Slack allowed when comparing a focus set's mass against `tau_high`.
pub const FOCUS_MASS_SLACK: f64 = 1e-12;
/// Eigenvalues above `-EIGEN_CLAMP_TOL` but below zero are treated as zero.
pub const EIGEN_CLAMP_TOL: f64 = 1e-12;
/// An eigenvalue counts as nonzero when above this fraction of the largest.
pub const NONZERO_EIGEN_REL_TOL: f64 = 1e-9;

const ARTIFACT_FORMAT: &str = "skoplab.calibration.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationParams {
    pub tau_high: f64,
    pub gamma_energy: f64,
    pub risk_fraction: f64,
    pub epsilon: f64,
    pub pair_samples_per_step: usize,
    pub record_all_positions: bool,
    /// Energy fraction for the key-invariant basis; `None` keeps every
    /// nonzero eigendirection of `Σ_k`.
    pub key_gamma: Option<f64>,
    /// Seed for pair sampling.
    pub seed: u64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            tau_high: 0.8,
            gamma_energy: 0.9,
            risk_fraction: 0.20,
            epsilon: 1e-8,
            pair_samples_per_step: 64,
            record_all_positions: false,
            key_gamma: None,
            seed: 0,
        }
    }
}

fn in_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::invalid(format!("{name} must lie in (0, 1], got {v}")));
    }
    Ok(())
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<()> {
        in_unit_interval("tau_high", self.tau_high)?;
        in_unit_interval("gamma_energy", self.gamma_energy)?;
        in_unit_interval("risk_fraction", self.risk_fraction)?;
        if let Some(g) = self.key_gamma {
            in_unit_interval("key_gamma", g)?;
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon must be a small positive number"));
        }
        if self.pair_samples_per_step == 0 {
            return Err(Error::invalid("pair_samples_per_step must be positive"));
        }
        Ok(())
    }

    pub fn recording(&self) -> Recording {
        Recording::rows(self.record_all_positions)
    }
}

/// Focus and tail positions of one attention row. `focus` is in greedy
/// order (descending weight); `tail` is ascending by position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FocusTail {
    pub focus: Vec<usize>,
    pub tail: Vec<usize>,
}

impl FocusTail {
    pub fn focus_mass(&self, weights: &[f64]) -> f64 {
        self.focus.iter().map(|&j| weights[j]).sum()
    }
}

/// Per-step focus/tail sets of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusTailSets {
    pub head: HeadId,
    pub steps: Vec<FocusTail>,
}

pub fn extract_focus_set(weights: &[f64], tau_high: f64) -> Result<FocusTail> {
    in_unit_interval("tau_high", tau_high)?;
    if weights.is_empty() {
        return Err(Error::invalid("attention row is empty"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("attention row is not a probability vector"));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));

    let mut mass = 0.0;
    let mut size = weights.len();
    for (n, &j) in order.iter().enumerate() {
        mass += weights[j];
        if mass >= tau_high - FOCUS_MASS_SLACK {
            size = n + 1;
            break;
        }
    }
    let mut tail: Vec<usize> = order[size..].to_vec();
    tail.sort_unstable();
    order.truncate(size);
    Ok(FocusTail { focus: order, tail })
}

/// Focus/tail sets for every recorded row of `head` across a batch.
pub fn focus_tail_sets(
    outputs: &[crate::model::ForwardOutput],
    head: HeadId,
    tau_high: f64,
) -> Result<FocusTailSets> {
    let steps = outputs
        .iter()
        .flat_map(|o| o.traces_for(head))
        .map(|tr| extract_focus_set(&tr.weights, tau_high))
        .collect::<Result<_>>()?;
    Ok(FocusTailSets { head, steps })
}

/// Pairs `(focus_slot, tail_slot)` to accumulate for one step: all of them
/// when there are at most `pair_samples`, else a uniform sample without
/// replacement, returned in ascending order.
pub fn select_pairs(
    n_focus: usize,
    n_tail: usize,
    pair_samples: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let total = n_focus * n_tail;
    let mut flat: Vec<usize> = if total <= pair_samples {
        (0..total).collect()
    } else {
        rand::seq::index::sample(rng, total, pair_samples).into_vec()
    };
    flat.sort_unstable();
    flat.into_iter().map(|k| (k / n_tail, k % n_tail)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum KeyDiffStep {
    Accumulated(MomentAccumulator),
    /// The focus set covered every position, so no pair exists.
    EmptyTail,
}

/// Accumulates `Δk Δkᵀ` with `Δk = k_focus - k_tail` for one step.
/// `keys` has one row per key position referenced by `sets`.
pub fn estimate_keydiff_moment(
    keys: &Matrix,
    sets: &FocusTail,
    pair_samples: usize,
    rng: &mut impl Rng,
) -> Result<KeyDiffStep> {
    if sets.focus.is_empty() {
        return Err(Error::invalid("focus set is empty"));
    }
    if pair_samples == 0 {
        return Err(Error::invalid("pair_samples must be positive"));
    }
    if sets.tail.is_empty() {
        return Ok(KeyDiffStep::EmptyTail);
    }
    if let Some(&j) = sets.focus.iter().chain(&sets.tail).find(|&&j| j >= keys.rows()) {
        return Err(Error::invalid(format!("key position {j} out of range")));
    }
    let mut acc = MomentAccumulator::new(keys.cols());
    for (f, t) in select_pairs(sets.focus.len(), sets.tail.len(), pair_samples, rng) {
        acc.add(&linalg::sub_vec(keys.row(sets.focus[f]), keys.row(sets.tail[t])));
    }
    Ok(KeyDiffStep::Accumulated(acc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyDiffMoment {
    pub head: HeadId,
    pub sigma: Matrix,
    pub pair_count: usize,
}

impl KeyDiffMoment {
    /// Zero matrix when nothing was accumulated.
    pub fn from_accumulator(head: HeadId, acc: &MomentAccumulator) -> Self {
        Self {
            head,
            sigma: acc.mean().unwrap_or_else(|| Matrix::zeros(acc.dim(), acc.dim())),
            pair_count: acc.count(),
        }
    }
}

/// Streaming mean and centred scatter (Welford, with Chan's merge).
#[derive(Debug, Clone, PartialEq)]
pub struct KeyStats {
    dim: usize,
    count: usize,
    mean: Vec<f64>,
    scatter: Vec<f64>,
}

impl KeyStats {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            mean: vec![0.0; dim],
            scatter: vec![0.0; dim * dim],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn add_outer(&mut self, delta: &[f64], w: f64) {
        let d = self.dim;
        for i in 0..d {
            for j in i..d {
                self.scatter[i * d + j] += w * delta[i] * delta[j];
            }
        }
    }

    pub fn add(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        self.count += 1;
        let n = self.count as f64;
        let delta = linalg::sub_vec(x, &self.mean);
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        self.add_outer(&delta, (n - 1.0) / n);
    }

    pub fn merge(&mut self, other: &KeyStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = linalg::sub_vec(&other.mean, &self.mean);
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        for (s, o) in self.scatter.iter_mut().zip(&other.scatter) {
            *s += o;
        }
        self.add_outer(&delta, na * nb / n);
        self.count += other.count;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population covariance `(1/n) Σ (k - k̄)(k - k̄)ᵀ`.
    pub fn covariance(&self) -> Matrix {
        let d = self.dim;
        let n = self.count.max(1) as f64;
        let mut out = Matrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = self.scatter[i * d + j] / n;
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyCovariance {
    pub head: HeadId,
    pub mean_key: Vec<f64>,
    pub sigma_k: Matrix,
    pub count: usize,
}

pub fn estimate_key_covariance<K: AsRef<[f64]>>(head: HeadId, keys: &[K]) -> Result<KeyCovariance> {
    if keys.len() < 2 {
        return Err(Error::invalid("key covariance needs at least two keys"));
    }
    let dim = keys[0].as_ref().len();
    let mut stats = KeyStats::new(dim);
    for k in keys {
        let k = k.as_ref();
        if k.len() != dim {
            return Err(Error::invalid("keys have differing dimensions"));
        }
        stats.add(k);
    }
    Ok(KeyCovariance {
        head,
        mean_key: stats.mean().to_vec(),
        sigma_k: stats.covariance(),
        count: stats.count(),
    })
}

fn clamp_eigenvalues(eigenvalues: &[f64]) -> Vec<f64> {
    eigenvalues
        .iter()
        .map(|&v| {
            if v < -EIGEN_CLAMP_TOL {
                log::warn!("eigenvalue {v:e} is below the PSD clamp tolerance");
            }
            v.max(0.0)
        })
        .collect()
}

/// Smallest `p` whose leading eigenvalues hold at least `gamma` of the
/// total; `0` when every eigenvalue is zero.
pub fn select_rank(eigenvalues: &[f64], gamma_energy: f64) -> usize {
    let clamped = clamp_eigenvalues(eigenvalues);
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut cumulative = 0.0;
    for (i, v) in clamped.iter().enumerate() {
        cumulative += v;
        if cumulative / total >= gamma_energy {
            return i + 1;
        }
    }
    clamped.len()
}

/// Fraction of the clamped spectrum held by the leading `p` eigenvalues.
pub fn energy_captured(eigenvalues: &[f64], p: usize) -> f64 {
    let clamped = clamp_eigenvalues(eigenvalues);
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    clamped[..p].iter().sum::<f64>() / total
}

/// Number of eigenvalues above `NONZERO_EIGEN_REL_TOL` times the largest.
pub fn nonzero_rank(eigenvalues: &[f64]) -> usize {
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    eigenvalues.iter().take_while(|&&v| v > NONZERO_EIGEN_REL_TOL * top).count()
}

/// Rayleigh-type risk `rᵀ Σ r / (‖r‖² + ε)`, clamped at zero.
pub fn risk_score(r: &[f64], sigma: &Matrix, epsilon: f64) -> Result<f64> {
    let num = sigma.quadratic_form(r)?;
    Ok((num / (linalg::dot(r, r) + epsilon)).max(0.0))
}

/// `ceil(fraction * n)` clamped to `[1, n]`, with a small slack so that
/// products like `0.1 * 30` do not round up past the intended count.
pub fn risk_head_count(n: usize, fraction: f64) -> usize {
    let k = (fraction * n as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(n)
}

/// The highest-scoring `ceil(fraction * n)` heads; ties go to the lower
/// `(layer, head)`.
pub fn select_risk_heads(scores: &BTreeMap<HeadId, f64>, fraction: f64) -> Result<BTreeSet<HeadId>> {
    in_unit_interval("risk_fraction", fraction)?;
    let mut ranked: Vec<(&HeadId, &f64)> = scores.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
    let k = risk_head_count(scores.len(), fraction);
    Ok(ranked.into_iter().take(k).map(|(h, _)| *h).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCalibration {
    pub head: HeadId,
    pub pair_count: usize,
    pub valid_steps: usize,
    pub skipped_steps: usize,
    pub sigma_dk: Matrix,
    pub eigenvalues_dk: Vec<f64>,
    /// Top-`rank` eigenvectors of `Σ_Δk`, `d' x rank`.
    pub skop_basis: Matrix,
    pub rank: usize,
    pub energy_captured: f64,
    pub risk: f64,
    pub selected: bool,
    pub key_count: usize,
    pub mean_key: Vec<f64>,
    pub sigma_k: Matrix,
    pub eigenvalues_k: Vec<f64>,
    pub key_basis: Matrix,
    pub key_rank: usize,
}

impl HeadCalibration {
    pub fn skop_projector(&self) -> Result<Matrix> {
        linalg::build_projector(&self.skop_basis)
    }

    pub fn key_projector(&self) -> Result<Matrix> {
        linalg::build_projector(&self.key_basis)
    }

    /// `P_Δk r` if this head is selected, else `r` unchanged.
    pub fn skop_steering(&self, r: &[f64]) -> Result<Vec<f64>> {
        if self.selected {
            linalg::project(&self.skop_projector()?, r)
        } else {
            Ok(r.to_vec())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_digest: String,
    pub corpus_digest: String,
    pub steering_digest: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Recorded rows per head summed over the corpus.
    pub steps_per_head: usize,
    /// Steps skipped because the focus set covered every position, summed
    /// over heads.
    pub skipped_empty_tail: usize,
    pub heads_without_pairs: Vec<HeadId>,
    pub population: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationArtifact {
    pub params: CalibrationParams,
    pub model_config: ModelConfig,
    pub heads: Vec<HeadCalibration>,
    pub provenance: Provenance,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone)]
struct PartialHead {
    keydiff: MomentAccumulator,
    keys: KeyStats,
    valid: usize,
    skipped: usize,
}

impl PartialHead {
    fn new(dim: usize) -> Self {
        Self {
            keydiff: MomentAccumulator::new(dim),
            keys: KeyStats::new(dim),
            valid: 0,
            skipped: 0,
        }
    }

    fn merge(&mut self, other: &PartialHead) {
        self.keydiff.merge(&other.keydiff);
        self.keys.merge(&other.keys);
        self.valid += other.valid;
        self.skipped += other.skipped;
    }
}

/// Substream id for pair sampling at `(head, sequence, row)`.
fn pair_substream(head_flat: usize, seq: usize, row: usize) -> u64 {
    ((head_flat as u64) << 48) ^ ((seq as u64) << 20) ^ row as u64
}

/// Checks that `steering` holds exactly one valid vector per head and
/// returns them keyed by head.
pub fn steering_by_head(
    config: &ModelConfig,
    steering: &[SteeringVector],
) -> Result<BTreeMap<HeadId, SteeringVector>> {
    let mut map = BTreeMap::new();
    for sv in steering {
        sv.validate(config)?;
        if map.insert(sv.head, sv.clone()).is_some() {
            return Err(Error::invalid(format!("two steering vectors for {}", sv.head)));
        }
    }
    if let Some(missing) = config.heads().find(|h| !map.contains_key(h)) {
        return Err(Error::invalid(format!("no steering vector for {missing}")));
    }
    Ok(map)
}

fn build_head(
    head: HeadId,
    partial: &PartialHead,
    r_q: &[f64],
    params: &CalibrationParams,
) -> Result<HeadCalibration> {
    let moment = KeyDiffMoment::from_accumulator(head, &partial.keydiff);
    let eig = linalg::sym_eig(&moment.sigma)?;
    let rank = select_rank(&eig.eigenvalues, params.gamma_energy);
    let energy = energy_captured(&eig.eigenvalues, rank);
    let risk = risk_score(r_q, &moment.sigma, params.epsilon)?;

    let sigma_k = partial.keys.covariance();
    let key_eig = linalg::sym_eig(&sigma_k)?;
    let key_rank = match params.key_gamma {
        Some(g) => select_rank(&key_eig.eigenvalues, g),
        None => nonzero_rank(&key_eig.eigenvalues),
    };
    Ok(HeadCalibration {
        head,
        pair_count: moment.pair_count,
        valid_steps: partial.valid,
        skipped_steps: partial.skipped,
        skop_basis: eig.top_basis(rank),
        sigma_dk: moment.sigma,
        eigenvalues_dk: eig.eigenvalues,
        rank,
        energy_captured: energy,
        risk,
        selected: false,
        key_count: partial.keys.count(),
        mean_key: partial.keys.mean().to_vec(),
        key_basis: key_eig.top_basis(key_rank),
        sigma_k,
        eigenvalues_k: key_eig.eigenvalues,
        key_rank,
    })
}

/// Runs the calibration phase over `corpus` with no steering applied.
///
/// Sequences are processed independently (in parallel under
/// [`Execution::Parallel`]) and reduced in corpus order, so the artifact
/// is identical for any thread count.
pub fn run_calibration(
    weights: &ModelWeights,
    corpus_seqs: &[Sequence],
    steering: &[SteeringVector],
    params: &CalibrationParams,
    exec: Execution,
) -> Result<CalibrationArtifact> {
    params.validate()?;
    let config = weights.config;
    corpus::validate(corpus_seqs, &config)?;
    let by_head = steering_by_head(&config, steering)?;
    let dh = config.head_dim();
    let heads: Vec<HeadId> = config.heads().collect();
    let recording = params.recording();

    let per_sequence = exec.try_map(corpus_seqs, |seq_idx, seq| -> Result<Vec<PartialHead>> {
        let out = weights.forward(seq, None, recording)?;
        heads
            .iter()
            .map(|&head| {
                let mut partial = PartialHead::new(dh);
                let flat = head.flat_index(config.num_heads);
                let mut last_keys = None;
                for tr in out.traces_for(head) {
                    let sets = extract_focus_set(&tr.weights, params.tau_high)?;
                    let mut rng = rng::stream_rng(
                        params.seed,
                        stream::PAIR_SAMPLING,
                        pair_substream(flat, seq_idx, tr.query_position),
                    );
                    match estimate_keydiff_moment(&tr.keys, &sets, params.pair_samples_per_step, &mut rng)? {
                        KeyDiffStep::Accumulated(acc) => {
                            partial.keydiff.merge(&acc);
                            partial.valid += 1;
                        }
                        KeyDiffStep::EmptyTail => partial.skipped += 1,
                    }
                    last_keys = Some(&tr.keys);
                }
                if let Some(keys) = last_keys {
                    for j in 0..keys.rows() {
                        partial.keys.add(keys.row(j));
                    }
                }
                Ok(partial)
            })
            .collect()
    })?;

    let mut totals: Vec<PartialHead> = heads.iter().map(|_| PartialHead::new(dh)).collect();
    for seq_partials in &per_sequence {
        for (total, p) in totals.iter_mut().zip(seq_partials) {
            total.merge(p);
        }
    }

    let mut head_cals = Vec::with_capacity(heads.len());
    for (&head, partial) in heads.iter().zip(&totals) {
        let r_q = by_head[&head].query_direction(weights)?;
        head_cals.push(build_head(head, partial, &r_q, params)?);
    }
    let scores: BTreeMap<HeadId, f64> = head_cals.iter().map(|h| (h.head, h.risk)).collect();
    let selected = select_risk_heads(&scores, params.risk_fraction)?;
    for h in &mut head_cals {
        h.selected = selected.contains(&h.head);
    }

    let heads_without_pairs: Vec<HeadId> =
        head_cals.iter().filter(|h| h.pair_count == 0).map(|h| h.head).collect();
    for h in &heads_without_pairs {
        log::warn!("{h}: no valid focus/tail steps; Σ_Δk = 0 and rank 0");
    }
    let steps_per_head = totals.first().map_or(0, |p| p.valid + p.skipped);
    let ordered: Vec<SteeringVector> = heads.iter().map(|h| by_head[h].clone()).collect();
    Ok(CalibrationArtifact {
        params: params.clone(),
        model_config: config,
        provenance: Provenance {
            model_digest: weights.digest(),
            corpus_digest: corpus::digest(corpus_seqs),
            steering_digest: steering::digest(&ordered)?,
            seed: params.seed,
        },
        diagnostics: Diagnostics {
            steps_per_head,
            skipped_empty_tail: totals.iter().map(|p| p.skipped).sum(),
            heads_without_pairs,
            population: format!(
                "all {} heads; {} per sequence; {} sequences",
                heads.len(),
                if params.record_all_positions { "every query position" } else { "final query position" },
                corpus_seqs.len()
            ),
        },
        heads: head_cals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub layer: usize,
    pub head: usize,
    pub rank: usize,
    pub energy_captured: f64,
    pub risk: f64,
    pub selected: bool,
    pub pair_count: usize,
    pub valid_steps: usize,
    pub skipped_steps: usize,
    pub key_rank: usize,
    pub key_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub format: String,
    pub params: CalibrationParams,
    pub model_config: ModelConfig,
    pub provenance: Provenance,
    pub selected_heads: usize,
    pub heads: Vec<HeadSummary>,
    pub diagnostics: Diagnostics,
}

fn tensor_prefix(h: HeadId) -> String {
    format!("calib.layer.{}.head.{}", h.layer, h.head)
}

impl CalibrationArtifact {
    pub fn head(&self, id: HeadId) -> Option<&HeadCalibration> {
        self.heads.iter().find(|h| h.head == id)
    }

    pub fn selected_heads(&self) -> impl Iterator<Item = &HeadCalibration> {
        self.heads.iter().filter(|h| h.selected)
    }

    pub fn meta(&self) -> ArtifactMeta {
        ArtifactMeta {
            format: ARTIFACT_FORMAT.to_string(),
            params: self.params.clone(),
            model_config: self.model_config,
            provenance: self.provenance.clone(),
            selected_heads: self.selected_heads().count(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadSummary {
                    layer: h.head.layer,
                    head: h.head.head,
                    rank: h.rank,
                    energy_captured: h.energy_captured,
                    risk: h.risk,
                    selected: h.selected,
                    pair_count: h.pair_count,
                    valid_steps: h.valid_steps,
                    skipped_steps: h.skipped_steps,
                    key_rank: h.key_rank,
                    key_count: h.key_count,
                })
                .collect(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn meta_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        s.push('\n');
        s
    }

    /// Tensors per head: `sigma_dk`, `eigvals_dk`, `skop_basis`, `mean_key`,
    /// `sigma_k`, `eigvals_k`, `key_basis`, each under
    /// `calib.layer.{l}.head.{h}.`.
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        for h in &self.heads {
            let p = tensor_prefix(h.head);
            f.push_matrix(format!("{p}.sigma_dk"), &h.sigma_dk)?;
            f.push_vector(format!("{p}.eigvals_dk"), &h.eigenvalues_dk)?;
            f.push_matrix(format!("{p}.skop_basis"), &h.skop_basis)?;
            f.push_vector(format!("{p}.mean_key"), &h.mean_key)?;
            f.push_matrix(format!("{p}.sigma_k"), &h.sigma_k)?;
            f.push_vector(format!("{p}.eigvals_k"), &h.eigenvalues_k)?;
            f.push_matrix(format!("{p}.key_basis"), &h.key_basis)?;
        }
        Ok(f)
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        path.with_extension("meta")
    }

    /// Writes the tensor container at `path` and the JSON sidecar next to
    /// it with a `.meta` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.write(path)?;
        let meta = Self::meta_path(path);
        fs::write(&meta, self.meta_json()).map_err(|e| Error::io(meta, e))
    }

    pub fn from_parts(meta: ArtifactMeta, file: &TensorFile) -> Result<Self> {
        if meta.format != ARTIFACT_FORMAT {
            return Err(Error::invalid(format!("unknown artifact format {:?}", meta.format)));
        }
        let cfg = meta.model_config;
        cfg.validate()?;
        let dh = cfg.head_dim();
        if meta.heads.len() != cfg.total_heads() {
            return Err(Error::invalid("artifact meta does not list every head"));
        }
        let mut heads = Vec::with_capacity(meta.heads.len());
        for (s, id) in meta.heads.iter().zip(cfg.heads()) {
            if (s.layer, s.head) != (id.layer, id.head) {
                return Err(Error::invalid("artifact heads are out of order"));
            }
            let p = tensor_prefix(id);
            let skop_basis = file.matrix(&format!("{p}.skop_basis"), dh, s.rank)?;
            let key_basis = file.matrix(&format!("{p}.key_basis"), dh, s.key_rank)?;
            heads.push(HeadCalibration {
                head: id,
                pair_count: s.pair_count,
                valid_steps: s.valid_steps,
                skipped_steps: s.skipped_steps,
                sigma_dk: file.matrix(&format!("{p}.sigma_dk"), dh, dh)?,
                eigenvalues_dk: file.vector(&format!("{p}.eigvals_dk"), dh)?,
                skop_basis,
                rank: s.rank,
                energy_captured: s.energy_captured,
                risk: s.risk,
                selected: s.selected,
                key_count: s.key_count,
                mean_key: file.vector(&format!("{p}.mean_key"), dh)?,
                sigma_k: file.matrix(&format!("{p}.sigma_k"), dh, dh)?,
                eigenvalues_k: file.vector(&format!("{p}.eigvals_k"), dh)?,
                key_basis,
                key_rank: s.key_rank,
            });
        }
        if file.len() != 7 * heads.len() {
            return Err(Error::invalid("artifact tensor file has unexpected extra tensors"));
        }
        Ok(Self {
            params: meta.params,
            model_config: cfg,
            heads,
            provenance: meta.provenance,
            diagnostics: meta.diagnostics,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path)?;
        let meta_path = Self::meta_path(path);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ArtifactMeta = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", meta_path.display())))?;
        Self::from_parts(meta, &file)
    }
}
