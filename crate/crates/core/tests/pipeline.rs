//! End-to-end runs of the library pipeline through on-disk artifacts.

use skoplab::calibration::{run_calibration, CalibrationArtifact, CalibrationParams};
use skoplab::corpus;
use skoplab::metrics::{compare_steering_modes, CompareMode, CompareOptions};
use skoplab::steering::{self, SteeringMode};
use skoplab::synth::{generate, SynthConfig, PLANTED_HEAD};
use skoplab::{Execution, ModelConfig, ModelWeights};

fn small_synth() -> SynthConfig {
    SynthConfig {
        num_sequences: 40,
        ..Default::default()
    }
}

#[test]
fn artifacts_survive_disk_round_trip() {
    let lab = generate(&small_synth()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let wpath = dir.path().join("model.skt");
    let spath = dir.path().join("steering.skt");
    let cpath = dir.path().join("corpus.txt");
    lab.weights.save(&wpath).unwrap();
    steering::save(&lab.steering, &spath).unwrap();
    corpus::write(&lab.corpus, &cpath).unwrap();

    let cfg = lab.weights.config;
    let weights = ModelWeights::load(&wpath, cfg).unwrap();
    let vectors = steering::load(&spath, &cfg).unwrap();
    let seqs = corpus::read(&cpath).unwrap();
    assert_eq!(weights, lab.weights);
    assert_eq!(vectors, lab.steering);
    assert_eq!(seqs, lab.corpus);

    let params = CalibrationParams::default();
    let art = run_calibration(&weights, &seqs, &vectors, &params, Execution::Parallel).unwrap();
    let apath = dir.path().join("calibration.skt");
    art.save(&apath).unwrap();
    let loaded = CalibrationArtifact::load(&apath).unwrap();
    assert_eq!(loaded, art);
    assert_eq!(loaded.provenance.model_digest, weights.digest());

    let opts = CompareOptions {
        lambdas: vec![0.0, 4.0],
        ..Default::default()
    };
    let a = compare_steering_modes(&weights, &seqs, &vectors, &loaded, &opts, Execution::Parallel).unwrap();
    let b = compare_steering_modes(&lab.weights, &lab.corpus, &lab.steering, &art, &opts, Execution::Sequential)
        .unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.summary_json(), b.summary_json());
}

#[test]
fn attention_input_vectors_flow_through_query_space() {
    let cfg = ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 16,
        mlp_hidden: 32,
        vocab_size: 20,
        max_seq_len: 16,
    };
    let w = ModelWeights::init_random(cfg, 11).unwrap();
    let pos: Vec<Vec<usize>> = (0..6).map(|s| (0..10).map(|i| (i + s) % 10).collect()).collect();
    let neg: Vec<Vec<usize>> = (0..6).map(|s| (0..10).map(|i| 10 + (i * 3 + s) % 10).collect()).collect();
    let vectors =
        steering::build_mean_difference_vectors(&w, &pos, &neg, SteeringMode::AttentionInput, Execution::Parallel)
            .unwrap();
    assert_eq!(vectors.len(), 4);
    assert!(vectors.iter().all(|v| v.direction.len() == 16));

    let calib: Vec<Vec<usize>> = pos.iter().chain(&neg).cloned().collect();
    let params = CalibrationParams {
        risk_fraction: 0.5,
        ..Default::default()
    };
    let art = run_calibration(&w, &calib, &vectors, &params, Execution::Parallel).unwrap();
    for h in &art.heads {
        let r_q = vectors[h.head.flat_index(2)].query_direction(&w).unwrap();
        let expect = skoplab::calibration::risk_score(&r_q, &h.sigma_dk, params.epsilon).unwrap();
        assert_eq!(h.risk, expect);
    }

    let opts = CompareOptions {
        lambdas: vec![1.0],
        ..Default::default()
    };
    let rep = compare_steering_modes(&w, &calib, &vectors, &art, &opts, Execution::Parallel).unwrap();
    for m in CompareMode::ALL {
        let row = rep.get(1.0, m).unwrap();
        assert!(row.mean_norm_retention <= 1.0 + 1e-12);
        assert!(row.deltas.iter().all(|d| d.delta_m.abs() <= 1.0 + 1e-12));
    }
}

#[test]
fn planted_head_is_the_risky_one() {
    let lab = generate(&small_synth()).unwrap();
    let art = run_calibration(
        &lab.weights,
        &lab.corpus,
        &lab.steering,
        &CalibrationParams::default(),
        Execution::Parallel,
    )
    .unwrap();
    let selected: Vec<_> = art.selected_heads().map(|h| h.head).collect();
    assert_eq!(selected, vec![PLANTED_HEAD]);
    let other = art.heads.iter().find(|h| h.head != PLANTED_HEAD).unwrap();
    assert_eq!(other.risk, 0.0);
}
