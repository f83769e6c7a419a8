//! Rerouting diagnostics and the vanilla / SKOP / key-invariant comparison.
//!
//! The central quantity is the focus-mass change
//! `ΔM = Σ_{j∈F} α̃_j - Σ_{j∈F} α_j`, where the focus set `F` always comes
//! from the unsteered row and is held fixed for the steered one.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationArtifact};
use crate::corpus::{self, Sequence};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{self, Matrix};
use crate::model::{ForwardOutput, HeadId, ModelWeights};
use crate::steering::{self, SteeringMode, SteeringPlan, SteeringVector};

pub const CSV_HEADER: &str = "lambda,mode,threshold,prob,mean_norm_retention";
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassDelta {
    pub head: HeadId,
    pub step: usize,
    pub delta_m: f64,
}

pub fn mass_delta(base: &[f64], steered: &[f64], focus: &[usize]) -> Result<f64> {
    if base.len() != steered.len() {
        return Err(Error::invalid(format!(
            "attention rows differ in length ({} vs {})",
            base.len(),
            steered.len()
        )));
    }
    if let Some(j) = focus.iter().find(|&&j| j >= base.len()) {
        return Err(Error::invalid(format!("focus index {j} out of range")));
    }
    Ok(focus.iter().map(|&j| steered[j]).sum::<f64>() - focus.iter().map(|&j| base[j]).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailProbCurve {
    pub thresholds: Vec<f64>,
    /// `Pr(ΔM ≤ -x)` for each threshold `x`.
    pub probabilities: Vec<f64>,
}

impl TailProbCurve {
    pub fn at(&self, x: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == x).map(|i| self.probabilities[i])
    }
}

pub fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::invalid("no thresholds given"));
    }
    if thresholds.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::invalid("thresholds must lie in [0, 1]"));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("thresholds must be strictly ascending"));
    }
    Ok(())
}

pub fn tail_prob_curve(deltas: &[MassDelta], thresholds: &[f64]) -> Result<TailProbCurve> {
    if deltas.is_empty() {
        return Err(Error::invalid("no mass deltas to summarise"));
    }
    check_thresholds(thresholds)?;
    let n = deltas.len() as f64;
    let probabilities = thresholds
        .iter()
        .map(|&x| deltas.iter().filter(|d| d.delta_m <= -x).count() as f64 / n)
        .collect();
    Ok(TailProbCurve {
        thresholds: thresholds.to_vec(),
        probabilities,
    })
}

/// A ratio that is undefined for a zero reference vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    /// Set when the reference vector was zero and `value` is a convention.
    pub degenerate: bool,
}

/// `‖K_c r‖ / (‖r‖ ‖K_c‖_F + tiny)` for centred keys `K_c` stored one per
/// row. Zero exactly when `r` is orthogonal to every centred key.
pub fn invariance_residual(r: &[f64], centered_keys: &Matrix) -> Result<Ratio> {
    if centered_keys.cols() != r.len() {
        return Err(Error::invalid("steering vector and keys differ in dimension"));
    }
    let rn = linalg::norm(r);
    if rn == 0.0 {
        return Ok(Ratio {
            value: 0.0,
            degenerate: true,
        });
    }
    let kr = centered_keys.matvec(r)?;
    Ok(Ratio {
        value: linalg::norm(&kr) / (rn * centered_keys.frobenius_norm() + f64::MIN_POSITIVE),
        degenerate: false,
    })
}

/// Subtracts the mean row.
pub fn center_keys(keys: &Matrix) -> Matrix {
    let (n, d) = keys.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, k) in mean.iter_mut().zip(keys.row(i)) {
            *m += k / n as f64;
        }
    }
    let mut out = keys.clone();
    for i in 0..n {
        for (o, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *o -= m;
        }
    }
    out
}

/// `‖r_projected‖ / ‖r‖`; 1 by convention for zero `r`.
pub fn norm_retention(r: &[f64], r_projected: &[f64]) -> Result<Ratio> {
    if r.len() != r_projected.len() {
        return Err(Error::invalid("vectors differ in dimension"));
    }
    let rn = linalg::norm(r);
    if rn == 0.0 {
        return Ok(Ratio {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Ratio {
        value: linalg::norm(r_projected) / rn,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMode {
    Vanilla,
    Skop,
    KeyInvariant,
}

impl CompareMode {
    pub const ALL: [CompareMode; 3] = [CompareMode::Vanilla, CompareMode::Skop, CompareMode::KeyInvariant];

    pub fn as_str(self) -> &'static str {
        match self {
            CompareMode::Vanilla => "vanilla",
            CompareMode::Skop => "skop",
            CompareMode::KeyInvariant => "key_invariant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    pub lambdas: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Proceed (with a warning) when model or steering digests differ from
    /// the artifact's.
    pub allow_provenance_mismatch: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 1.0, 2.0, 4.0],
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            allow_provenance_mismatch: false,
        }
    }
}

/// Per-head query-space vector actually applied in one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeVectors {
    pub mode: CompareMode,
    pub vectors: BTreeMap<HeadId, Vec<f64>>,
    pub retention: BTreeMap<HeadId, f64>,
    /// Heads whose vector was altered by a projector in this mode.
    pub projected: Vec<HeadId>,
}

impl ModeVectors {
    pub fn mean_retention(&self) -> f64 {
        self.retention.values().sum::<f64>() / self.retention.len().max(1) as f64
    }

    pub fn min_projected_retention(&self) -> Option<f64> {
        self.projected.iter().map(|h| self.retention[h]).min_by(f64::total_cmp)
    }

    pub fn plan(&self, lambda: f64) -> SteeringPlan {
        let mut plan = SteeringPlan::new();
        for (&head, r) in &self.vectors {
            plan.insert(SteeringVector::new(head, r.clone(), lambda, SteeringMode::QuerySpace))
                .expect("one vector per head");
        }
        plan
    }
}

/// Builds the applied vectors for `mode`. Attention-input vectors are
/// mapped to their query-space image `r W_q` first.
pub fn mode_vectors(
    weights: &ModelWeights,
    steering: &[SteeringVector],
    artifact: &CalibrationArtifact,
    mode: CompareMode,
) -> Result<ModeVectors> {
    let by_head = calibration::steering_by_head(&weights.config, steering)?;
    let mut vectors = BTreeMap::new();
    let mut retention = BTreeMap::new();
    let mut projected = Vec::new();
    for (&head, sv) in &by_head {
        let r_q = sv.query_direction(weights)?;
        let cal = artifact
            .head(head)
            .ok_or_else(|| Error::invalid(format!("artifact has no entry for {head}")))?;
        let used = match mode {
            CompareMode::Vanilla => r_q.clone(),
            CompareMode::Skop if cal.selected => {
                projected.push(head);
                linalg::project(&cal.skop_projector()?, &r_q)?
            }
            CompareMode::Skop => r_q.clone(),
            CompareMode::KeyInvariant => {
                projected.push(head);
                linalg::project(&cal.key_projector()?, &r_q)?
            }
        };
        retention.insert(head, norm_retention(&r_q, &used)?.value);
        vectors.insert(head, used);
    }
    Ok(ModeVectors {
        mode,
        vectors,
        retention,
        projected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeReport {
    pub lambda: f64,
    pub mode: CompareMode,
    pub curve: TailProbCurve,
    /// Ordered by head, then step.
    pub deltas: Vec<MassDelta>,
    pub mean_norm_retention: f64,
    pub min_projected_retention: Option<f64>,
    pub mean_delta_m: f64,
    pub min_delta_m: f64,
    pub max_abs_delta_m: f64,
    /// Largest entrywise change of any recorded attention row.
    pub max_weight_change: f64,
    /// Mean L2 change of the next-token logits at recorded rows. A proxy
    /// for how strongly the steering acts, not a measure of its efficacy.
    pub mean_logit_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompareProvenance {
    pub model_digest: String,
    pub steering_digest: String,
    pub calibration_corpus_digest: String,
    pub evaluation_corpus_digest: String,
    pub artifact_seed: u64,
    pub provenance_overridden: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<ModeReport>,
    pub provenance: CompareProvenance,
    pub population: String,
    pub steps_per_head: usize,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    lambda: f64,
    mode: &'a str,
    mean_tail_prob: f64,
    tail_probs: &'a [f64],
    mean_delta_m: f64,
    min_delta_m: f64,
    max_abs_delta_m: f64,
    max_weight_change: f64,
    mean_norm_retention: f64,
    min_projected_retention: Option<f64>,
    mean_logit_shift_proxy: f64,
    steps: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    thresholds: &'a [f64],
    population: &'a str,
    steps_per_head: usize,
    provenance: &'a CompareProvenance,
    rows: Vec<SummaryRow<'a>>,
}

impl CompareReport {
    pub fn get(&self, lambda: f64, mode: CompareMode) -> Option<&ModeReport> {
        self.rows.iter().find(|r| r.lambda == lambda && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for row in &self.rows {
            for (x, p) in row.curve.thresholds.iter().zip(&row.curve.probabilities) {
                writeln!(s, "{},{},{x},{p},{}", row.lambda, row.mode.as_str(), row.mean_norm_retention)
                    .expect("write to string");
            }
        }
        s
    }

    pub fn summary_json(&self) -> String {
        let summary = Summary {
            thresholds: self.rows.first().map_or(&[][..], |r| &r.curve.thresholds),
            population: &self.population,
            steps_per_head: self.steps_per_head,
            provenance: &self.provenance,
            rows: self
                .rows
                .iter()
                .map(|r| SummaryRow {
                    lambda: r.lambda,
                    mode: r.mode.as_str(),
                    mean_tail_prob: r.curve.probabilities.iter().sum::<f64>() / r.curve.probabilities.len() as f64,
                    tail_probs: &r.curve.probabilities,
                    mean_delta_m: r.mean_delta_m,
                    min_delta_m: r.min_delta_m,
                    max_abs_delta_m: r.max_abs_delta_m,
                    max_weight_change: r.max_weight_change,
                    mean_norm_retention: r.mean_norm_retention,
                    min_projected_retention: r.min_projected_retention,
                    mean_logit_shift_proxy: r.mean_logit_shift,
                    steps: r.deltas.len(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
        s.push('\n');
        s
    }
}

fn check_provenance(
    weights: &ModelWeights,
    steering: &[SteeringVector],
    artifact: &CalibrationArtifact,
    allow: bool,
) -> Result<(String, String, bool)> {
    let model_digest = weights.digest();
    let ordered: Vec<SteeringVector> = calibration::steering_by_head(&weights.config, steering)?
        .into_values()
        .collect();
    let steering_digest = steering::digest(&ordered)?;
    let mut problems = Vec::new();
    if artifact.model_config != weights.config {
        problems.push("model configuration".to_string());
    }
    if artifact.provenance.model_digest != model_digest {
        problems.push(format!(
            "model digest (artifact {}, given {model_digest})",
            artifact.provenance.model_digest
        ));
    }
    if artifact.provenance.steering_digest != steering_digest {
        problems.push(format!(
            "steering digest (artifact {}, given {steering_digest})",
            artifact.provenance.steering_digest
        ));
    }
    if problems.is_empty() {
        return Ok((model_digest, steering_digest, false));
    }
    let msg = format!("calibration artifact does not match: {}", problems.join("; "));
    if !allow || artifact.model_config != weights.config {
        return Err(Error::Provenance(msg));
    }
    log::warn!("{msg}; continuing because the mismatch override is set");
    Ok((model_digest, steering_digest, true))
}

struct StepResult {
    deltas: Vec<Vec<f64>>,
    max_weight_change: f64,
    logit_shift_sum: f64,
    logit_rows: usize,
}

fn measure(
    weights: &ModelWeights,
    seq: &[usize],
    base: &ForwardOutput,
    focus: &[Vec<Vec<usize>>],
    heads: &[HeadId],
    plan: &SteeringPlan,
    record: crate::model::Recording,
) -> Result<StepResult> {
    let steered = weights.forward(seq, Some(plan), record)?;
    let mut deltas = Vec::with_capacity(heads.len());
    let mut max_weight_change: f64 = 0.0;
    for (hi, &head) in heads.iter().enumerate() {
        let mut per_head = Vec::new();
        for ((b, s), f) in base.traces_for(head).zip(steered.traces_for(head)).zip(&focus[hi]) {
            per_head.push(mass_delta(&b.weights, &s.weights, f)?);
            for (x, y) in b.weights.iter().zip(&s.weights) {
                max_weight_change = max_weight_change.max((x - y).abs());
            }
        }
        deltas.push(per_head);
    }
    let rows: Vec<usize> = base
        .traces_for(heads[0])
        .map(|t| t.query_position)
        .collect();
    let logit_shift_sum = rows
        .iter()
        .map(|&i| linalg::norm(&linalg::sub_vec(steered.logits.row(i), base.logits.row(i))))
        .sum();
    Ok(StepResult {
        deltas,
        max_weight_change,
        logit_shift_sum,
        logit_rows: rows.len(),
    })
}

/// Runs every `(λ, mode)` combination over `corpus_seqs`, steering all
/// heads of all layers at once, and measures ΔM for every head at every
/// recorded row (the artifact's recording setting).
///
/// Rows come back ordered by λ (as given), then mode (vanilla, skop,
/// key_invariant); deltas within a row by head then step.
pub fn compare_steering_modes(
    weights: &ModelWeights,
    corpus_seqs: &[Sequence],
    steering: &[SteeringVector],
    artifact: &CalibrationArtifact,
    options: &CompareOptions,
    exec: Execution,
) -> Result<CompareReport> {
    if options.lambdas.is_empty() {
        return Err(Error::invalid("no steering strengths given"));
    }
    if options.lambdas.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("steering strengths must be finite"));
    }
    check_thresholds(&options.thresholds)?;
    corpus::validate(corpus_seqs, &weights.config)?;
    let (model_digest, steering_digest, overridden) =
        check_provenance(weights, steering, artifact, options.allow_provenance_mismatch)?;

    let params = &artifact.params;
    let record = params.recording();
    let heads: Vec<HeadId> = weights.config.heads().collect();
    let base = weights.forward_batch(corpus_seqs, None, record, exec)?;
    let focus: Vec<Vec<Vec<Vec<usize>>>> = base
        .iter()
        .map(|out| {
            heads
                .iter()
                .map(|&h| {
                    out.traces_for(h)
                        .map(|t| calibration::extract_focus_set(&t.weights, params.tau_high).map(|f| f.focus))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let modes: Vec<ModeVectors> = CompareMode::ALL
        .iter()
        .map(|&m| mode_vectors(weights, steering, artifact, m))
        .collect::<Result<_>>()?;

    let indices: Vec<usize> = (0..corpus_seqs.len()).collect();
    let mut rows = Vec::with_capacity(options.lambdas.len() * modes.len());
    for &lambda in &options.lambdas {
        for mv in &modes {
            let plan = mv.plan(lambda);
            let results = exec.try_map(&indices, |_, &s| {
                measure(weights, &corpus_seqs[s], &base[s], &focus[s], &heads, &plan, record)
            })?;

            let mut deltas = Vec::new();
            for (hi, &head) in heads.iter().enumerate() {
                let mut step = 0;
                for r in &results {
                    for &delta_m in &r.deltas[hi] {
                        deltas.push(MassDelta { head, step, delta_m });
                        step += 1;
                    }
                }
            }
            let curve = tail_prob_curve(&deltas, &options.thresholds)?;
            let values = deltas.iter().map(|d| d.delta_m);
            let logit_rows: usize = results.iter().map(|r| r.logit_rows).sum();
            rows.push(ModeReport {
                lambda,
                mode: mv.mode,
                curve,
                mean_norm_retention: mv.mean_retention(),
                min_projected_retention: mv.min_projected_retention(),
                mean_delta_m: values.clone().sum::<f64>() / deltas.len() as f64,
                min_delta_m: values.clone().fold(f64::INFINITY, f64::min),
                max_abs_delta_m: values.fold(0.0, |m, v| m.max(v.abs())),
                max_weight_change: results.iter().map(|r| r.max_weight_change).fold(0.0, f64::max),
                mean_logit_shift: results.iter().map(|r| r.logit_shift_sum).sum::<f64>() / logit_rows.max(1) as f64,
                deltas,
            });
        }
    }

    let steps_per_head = base.iter().map(|o| o.traces_for(heads[0]).count()).sum();
    Ok(CompareReport {
        rows,
        provenance: CompareProvenance {
            model_digest,
            steering_digest,
            calibration_corpus_digest: artifact.provenance.corpus_digest.clone(),
            evaluation_corpus_digest: corpus::digest(corpus_seqs),
            artifact_seed: artifact.provenance.seed,
            provenance_overridden: overridden,
        },
        population: format!(
            "all {} heads steered together; {}; {} sequences",
            heads.len(),
            if params.record_all_positions { "every query position" } else { "final query position" },
            corpus_seqs.len()
        ),
        steps_per_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{run_calibration, CalibrationParams};
    use crate::model::ModelConfig;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    const H0: HeadId = HeadId { layer: 0, head: 0 };

    fn md(delta_m: f64) -> MassDelta {
        MassDelta {
            head: H0,
            step: 0,
            delta_m,
        }
    }

    #[test]
    fn mass_delta_examples() {
        let w = [0.2, 0.5, 0.3];
        assert_eq!(mass_delta(&w, &w, &[1, 2]).unwrap(), 0.0);
        assert!((mass_delta(&[0.9, 0.1], &[0.0, 1.0], &[0]).unwrap() + 0.9).abs() < 1e-15);
        assert!(mass_delta(&w, &[0.5, 0.5], &[0]).is_err());
        assert!(mass_delta(&w, &w, &[3]).is_err());
    }

    #[test]
    fn mass_delta_matches_summation() {
        let mut rng = stream_rng(2, 99, 0);
        let mut row = |n: usize| {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (a, b) = (row(9), row(9));
        let focus = [7, 1, 4];
        let mut oracle = 0.0;
        for &j in &focus {
            oracle += b[j] - a[j];
        }
        assert!((mass_delta(&a, &b, &focus).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn tail_curve_examples() {
        let zeros = vec![md(0.0); 4];
        let c = tail_prob_curve(&zeros, &[0.0, 0.1, 0.5]).unwrap();
        assert_eq!(c.probabilities, vec![1.0, 0.0, 0.0]);
        let c = tail_prob_curve(&[md(-0.2), md(-0.05), md(0.1)], &[0.1]).unwrap();
        assert_eq!(c.probabilities, vec![1.0 / 3.0]);
        assert!(tail_prob_curve(&[], &[0.1]).is_err());
        assert!(tail_prob_curve(&zeros, &[0.2, 0.1]).is_err());
        assert!(tail_prob_curve(&zeros, &[1.5]).is_err());
    }

    #[test]
    fn tail_curve_matches_counting() {
        let mut rng = stream_rng(6, 99, 0);
        let deltas: Vec<MassDelta> = (0..1000).map(|_| md(rng.random_range(-1.0..1.0))).collect();
        let xs: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let c = tail_prob_curve(&deltas, &xs).unwrap();
        for (x, p) in xs.iter().zip(&c.probabilities) {
            let mut count = 0;
            for d in &deltas {
                if d.delta_m <= -x {
                    count += 1;
                }
            }
            assert_eq!(*p, count as f64 / 1000.0);
        }
    }

    proptest! {
        #[test]
        fn tail_curve_is_non_increasing(
            vals in proptest::collection::vec(-1.0f64..=1.0, 1..50),
            mut xs in proptest::collection::btree_set(0u32..=100, 1..10),
        ) {
            let xs: Vec<f64> = std::mem::take(&mut xs).into_iter().map(|x| x as f64 / 100.0).collect();
            let deltas: Vec<MassDelta> = vals.into_iter().map(md).collect();
            let c = tail_prob_curve(&deltas, &xs).unwrap();
            prop_assert!(c.probabilities.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(c.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn invariance_residual_examples() {
        let keys = Matrix::from_rows(&[[1.0, 0.0, 2.0], [3.0, 0.0, 2.0], [2.0, 0.0, 2.0]]).unwrap();
        let kc = center_keys(&keys);
        let r = invariance_residual(&[0.0, 1.0, 5.0], &kc).unwrap();
        assert!(r.value <= 1e-12 && !r.degenerate);
        let r = invariance_residual(kc.row(0), &kc).unwrap();
        assert!(r.value > 0.0);
        let r = invariance_residual(&[0.0; 3], &kc).unwrap();
        assert!(r.degenerate && r.value == 0.0);
        assert!(invariance_residual(&[1.0], &kc).is_err());
    }

    #[test]
    fn full_key_projector_gives_tiny_residual() {
        let mut rng = stream_rng(9, 99, 0);
        // 5 keys in 8 dims: rank-deficient centred keys
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let keys = Matrix::from_rows(&rows).unwrap();
        let kc = calibration::estimate_key_covariance(H0, &rows).unwrap();
        let eig = linalg::sym_eig(&kc.sigma_k).unwrap();
        let p = calibration::nonzero_rank(&eig.eigenvalues);
        assert_eq!(p, 4);
        let proj = linalg::build_projector(&eig.top_basis(p)).unwrap();
        let r: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let pr = linalg::project(&proj, &r).unwrap();
        assert!(invariance_residual(&pr, &center_keys(&keys)).unwrap().value <= 1e-6);
        assert!(linalg::norm(&pr) > 0.1);
    }

    #[test]
    fn retention_examples() {
        let r = [3.0, 4.0];
        assert_eq!(norm_retention(&r, &r).unwrap().value, 1.0);
        assert_eq!(norm_retention(&r, &[0.0, 0.0]).unwrap().value, 0.0);
        let z = norm_retention(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(z.degenerate && z.value == 1.0);
        assert!(norm_retention(&r, &[1.0]).is_err());
    }

    #[test]
    fn retention_pythagoras() {
        let mut rng = stream_rng(10, 99, 0);
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..7).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let sigma = linalg::second_moment(&cols).unwrap();
        let u = linalg::sym_eig(&sigma).unwrap().top_basis(3);
        let proj = linalg::build_projector(&u).unwrap();
        for _ in 0..20 {
            let r: Vec<f64> = (0..7).map(|_| StandardNormal.sample(&mut rng)).collect();
            let ret = norm_retention(&r, &linalg::project(&proj, &r).unwrap()).unwrap().value;
            let ur = u.vecmat(&r).unwrap(); // Uᵀ r
            let removed = linalg::dot(&ur, &ur) / linalg::dot(&r, &r);
            assert!((ret * ret + removed - 1.0).abs() <= 1e-10);
            assert!(ret <= 1.0 + 1e-12);
        }
    }

    fn setup() -> (ModelWeights, Vec<Sequence>, Vec<SteeringVector>, CalibrationArtifact) {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            mlp_hidden: 16,
            vocab_size: 10,
            max_seq_len: 20,
        };
        let w = ModelWeights::init_random(cfg, 3).unwrap();
        let corpus: Vec<Sequence> = (0..8).map(|s| (0..(6 + s)).map(|i| (i * 7 + s) % 10).collect()).collect();
        let mut rng = stream_rng(5, 99, 0);
        let sv: Vec<SteeringVector> = cfg
            .heads()
            .map(|h| {
                let r = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
                SteeringVector::new(h, r, 1.0, SteeringMode::QuerySpace)
            })
            .collect();
        let params = CalibrationParams {
            risk_fraction: 0.5,
            ..Default::default()
        };
        let art = run_calibration(&w, &corpus, &sv, &params, Execution::Sequential).unwrap();
        (w, corpus, sv, art)
    }

    #[test]
    fn zero_strength_gives_zero_curves() {
        let (w, corpus, sv, art) = setup();
        let opts = CompareOptions {
            lambdas: vec![0.0, 2.0],
            ..Default::default()
        };
        let rep = compare_steering_modes(&w, &corpus, &sv, &art, &opts, Execution::Sequential).unwrap();
        assert_eq!(rep.rows.len(), 6);
        for m in CompareMode::ALL {
            let row = rep.get(0.0, m).unwrap();
            assert!(row.curve.probabilities.iter().all(|&p| p == 0.0));
            assert_eq!(row.max_abs_delta_m, 0.0);
            assert_eq!(row.deltas.len(), 4 * 8);
            assert!(row.mean_norm_retention <= 1.0);
        }
        let csv = rep.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + 6 * DEFAULT_THRESHOLDS.len());
        let json: serde_json::Value = serde_json::from_str(&rep.summary_json()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 6);

        let par = compare_steering_modes(&w, &corpus, &sv, &art, &opts, Execution::Parallel).unwrap();
        assert_eq!(par, rep);
    }

    #[test]
    fn provenance_mismatch_is_refused() {
        let (w, corpus, mut sv, art) = setup();
        sv[0].direction[0] += 1.0;
        let opts = CompareOptions::default();
        let err = compare_steering_modes(&w, &corpus, &sv, &art, &opts, Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::Provenance(_)));
        let lenient = CompareOptions {
            allow_provenance_mismatch: true,
            ..opts
        };
        let rep = compare_steering_modes(&w, &corpus, &sv, &art, &lenient, Execution::Sequential).unwrap();
        assert!(rep.provenance.provenance_overridden);

        let other = ModelWeights::init_random(w.config, 4).unwrap();
        let err = compare_steering_modes(&other, &corpus, &sv, &art, &lenient, Execution::Sequential);
        assert!(err.is_ok(), "override also covers a different model");
        let strict = CompareOptions::default();
        let err = compare_steering_modes(&other, &corpus, &sv, &art, &strict, Execution::Sequential);
        assert!(matches!(err, Err(Error::Provenance(_))));
    }
}
