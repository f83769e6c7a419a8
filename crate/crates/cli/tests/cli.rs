//! End-to-end runs of the `skoplab` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use skoplab::calibration::{risk_score, CalibrationArtifact};
use skoplab::corpus;
use skoplab::linalg;
use skoplab::model::{HeadId, Recording};
use skoplab::steering::{self, SteeringMode};
use skoplab::tensorfile::TensorFile;
use skoplab::{ModelConfig, ModelWeights};

const BIN: &str = env!("CARGO_BIN_EXE_skoplab");

fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy")
}

fn skoplab(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SKOPLAB_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = skoplab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small experiment in `dir`, reusing the toy corpora.
fn small_config(dir: &Path) -> PathBuf {
    let toy = toy_dir();
    let text = format!(
        r#"
seed = 3

[model]
num_layers = 2
num_heads = 2
model_dim = 16
mlp_hidden = 32
vocab_size = 64
max_seq_len = 64

[corpus]
calibration = "{cal}"
positive = "{pos}"
negative = "{neg}"
evaluation = "{eval}"

[steering]
lambdas = [0.0, 2.0]
"#,
        cal = s(&toy.join("calibration.txt")),
        pos = s(&toy.join("positive.txt")),
        neg = s(&toy.join("negative.txt")),
        eval = s(&toy.join("evaluation.txt")),
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

fn small_model() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 16,
        mlp_hidden: 32,
        vocab_size: 64,
        max_seq_len: 64,
    }
}

#[test]
fn unknown_config_key_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nnot_a_key = 2\n").unwrap();
    let out = skoplab(&["--config", s(&cfg), "init-model"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn indivisible_head_dim_exits_one_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nnum_heads = 3\nmodel_dim = 16\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = skoplab(&["--config", s(&cfg), "--out", s(&out_dir), "init-model"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.join("model.skt").exists());
}

#[test]
fn missing_weights_exits_three_with_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = skoplab(&["--config", s(&cfg), "--out", s(&tmp.path().join("empty")), "calibrate"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("hint:"), "{err}");
    assert!(err.contains("init-model"), "{err}");
}

#[test]
fn steering_for_other_model_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let base = ["--config", s(&cfg), "--out", s(&out_dir)];
    ok(&[&base[..], &["init-model"]].concat());
    ok(&[&base[..], &["build-steering"]].concat());
    // Replace the weights; the steering sidecar still names the old digest.
    ok(&[&base[..], &["--seed", "99", "init-model"]].concat());
    let out = skoplab(&[&base[..], &["calibrate"]].concat());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn init_model_is_reproducible_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = |name: &str, seed: &str| {
        let dir = tmp.path().join(name);
        ok(&["--config", s(&cfg), "--out", s(&dir), "--seed", seed, "init-model"]);
        fs::read(dir.join("model.skt")).unwrap()
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));

    let w = ModelWeights::load(&tmp.path().join("a/model.skt"), small_model()).unwrap();
    assert_eq!(w, ModelWeights::init_random(small_model(), 5).unwrap());
}

#[test]
fn seed_precedence_flag_over_env_over_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let digest = |seed: u64| ModelWeights::init_random(small_model(), seed).unwrap().digest();
    let run = |name: &str, flag: Option<&str>, env: Option<&str>| {
        let dir = tmp.path().join(name);
        let mut cmd = Command::new(BIN);
        cmd.args(["--config", s(&cfg), "--out", s(&dir)]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        cmd.env_remove("SKOPLAB_SEED");
        if let Some(e) = env {
            cmd.env("SKOPLAB_SEED", e);
        }
        cmd.arg("init-model");
        assert!(cmd.output().unwrap().status.success());
        ModelWeights::load(&dir.join("model.skt"), small_model()).unwrap().digest()
    };
    assert_eq!(run("cfg", None, None), digest(3));
    assert_eq!(run("env", None, Some("11")), digest(11));
    assert_eq!(run("flag", Some("12"), Some("11")), digest(12));
}

#[test]
fn identical_contrastive_corpora_give_zero_vectors() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = toy_dir();
    let cfg = small_config(tmp.path());
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace(s(&toy.join("negative.txt")), s(&toy.join("positive.txt")));
    fs::write(&cfg, text).unwrap();
    let out_dir = tmp.path().join("out");
    ok(&["--config", s(&cfg), "--out", s(&out_dir), "init-model"]);
    ok(&["--config", s(&cfg), "--out", s(&out_dir), "build-steering"]);

    let file = TensorFile::read(&out_dir.join("steering.skt")).unwrap();
    let m = small_model();
    assert_eq!(file.len(), m.num_layers * m.num_heads);
    let vectors = steering::load(&out_dir.join("steering.skt"), &m).unwrap();
    assert!(vectors.iter().all(|v| v.direction.iter().all(|&x| x == 0.0)));
}

/// Mean final-position query over a corpus, summed in a second pass
/// around a first-pass mean.
fn two_pass_mean(w: &ModelWeights, seqs: &[Vec<usize>], head: HeadId) -> Vec<f64> {
    let qs: Vec<Vec<f64>> = seqs
        .iter()
        .map(|t| w.forward(t, None, Recording::FinalPosition).unwrap().last_trace(head).unwrap().query.clone())
        .collect();
    let n = qs.len() as f64;
    let dim = qs[0].len();
    let first: Vec<f64> = (0..dim).map(|i| qs.iter().map(|q| q[i]).sum::<f64>() / n).collect();
    (0..dim)
        .map(|i| first[i] + qs.iter().map(|q| q[i] - first[i]).sum::<f64>() / n)
        .collect()
}

#[test]
fn steering_vectors_match_mean_difference_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out_dir = tmp.path().join("out");
    ok(&["--config", s(&cfg), "--out", s(&out_dir), "init-model"]);
    let stdout = ok(&["--config", s(&cfg), "--out", s(&out_dir), "build-steering"]);
    assert!(stdout.contains("L1H1"), "{stdout}");

    let m = small_model();
    let w = ModelWeights::load(&out_dir.join("model.skt"), m).unwrap();
    let pos = corpus::read(&toy_dir().join("positive.txt")).unwrap();
    let neg = corpus::read(&toy_dir().join("negative.txt")).unwrap();
    let vectors = steering::load(&out_dir.join("steering.skt"), &m).unwrap();
    assert_eq!(vectors.len(), m.total_heads());
    for v in &vectors {
        assert_eq!(v.mode, SteeringMode::QuerySpace);
        let expect = linalg::sub_vec(&two_pass_mean(&w, &pos, v.head), &two_pass_mean(&w, &neg, v.head));
        for (a, b) in v.direction.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12, "{}: {a} vs {b}", v.head);
        }
    }
}

#[test]
fn toy_calibration_selects_four_heads_and_risk_recomputes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_dir().join("experiment.toml");
    let out_dir = tmp.path().join("out");
    let base = ["--config", s(&cfg), "--out", s(&out_dir)];
    ok(&[&base[..], &["init-model"]].concat());
    ok(&[&base[..], &["build-steering"]].concat());
    let stdout = ok(&[&base[..], &["calibrate"]].concat());
    assert!(stdout.contains("selected: 4 of 16 heads"), "{stdout}");

    let art = CalibrationArtifact::load(&out_dir.join("calibration.skt")).unwrap();
    let vectors = steering::load(&out_dir.join("steering.skt"), &art.model_config).unwrap();
    assert_eq!(art.selected_heads().count(), 4);
    for v in &vectors {
        let h = art.head(v.head).unwrap();
        let r = &v.direction;
        let oracle = (h.sigma_dk.quadratic_form(r).unwrap() / (linalg::dot(r, r) + art.params.epsilon)).max(0.0);
        assert!((h.risk - oracle).abs() <= 1e-12 * oracle.max(1.0));
        assert_eq!(risk_score(r, &h.sigma_dk, art.params.epsilon).unwrap(), h.risk);
    }
    // Every unselected head scores no higher than any selected one.
    let min_sel = art.selected_heads().map(|h| h.risk).fold(f64::INFINITY, f64::min);
    assert!(art.heads.iter().filter(|h| !h.selected).all(|h| h.risk <= min_sel));
}

fn run_compare(tmp: &Path, lambdas: &str) -> PathBuf {
    let cfg = small_config(tmp);
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("lambdas = [0.0, 2.0]", &format!("lambdas = {lambdas}"));
    fs::write(&cfg, text).unwrap();
    let out_dir = tmp.join("out");
    for cmd in ["init-model", "build-steering", "calibrate", "compare"] {
        ok(&["--config", s(&cfg), "--out", s(&out_dir), cmd]);
    }
    out_dir
}

#[test]
fn zero_strength_compare_is_all_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = run_compare(tmp.path(), "[0.0]");
    let csv = fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,mode,threshold,prob,mean_norm_retention");
    assert_eq!(lines.len() - 1, 3 * 5);
    for l in &lines[1..] {
        let prob: f64 = l.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(prob, 0.0, "{l}");
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("compare.json")).unwrap()).unwrap();
    for row in json["rows"].as_array().unwrap() {
        assert_eq!(row["max_abs_delta_m"].as_f64(), Some(0.0));
        assert_eq!(row["max_weight_change"].as_f64(), Some(0.0));
    }
}

#[test]
fn compare_csv_agrees_with_json_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = run_compare(tmp.path(), "[0.0, 1.0, 3.0]");
    let csv = fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("compare.json")).unwrap()).unwrap();
    let thresholds: Vec<f64> = json["thresholds"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3 * 3);
    let body: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(body.len(), rows.len() * thresholds.len());

    for (i, row) in rows.iter().enumerate() {
        let chunk = &body[i * thresholds.len()..(i + 1) * thresholds.len()];
        let mut sum = 0.0;
        for (j, fields) in chunk.iter().enumerate() {
            assert_eq!(fields[0].parse::<f64>().unwrap(), row["lambda"].as_f64().unwrap());
            assert_eq!(fields[1], row["mode"].as_str().unwrap());
            assert_eq!(fields[2].parse::<f64>().unwrap(), thresholds[j]);
            let p: f64 = fields[3].parse().unwrap();
            assert_eq!(p, row["tail_probs"][j].as_f64().unwrap());
            assert_eq!(fields[4].parse::<f64>().unwrap(), row["mean_norm_retention"].as_f64().unwrap());
            sum += p;
        }
        assert_eq!(sum / thresholds.len() as f64, row["mean_tail_prob"].as_f64().unwrap());
    }
}

#[test]
fn synth_output_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["--out", s(&a), "synth"]);
    ok(&["--out", s(&b), "synth"]);
    let mut names: Vec<_> = fs::read_dir(a.join("synth"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 6, "{names:?}");
    for n in names {
        let fa = fs::read(a.join("synth").join(&n)).unwrap();
        let fb = fs::read(b.join("synth").join(&n)).unwrap();
        assert_eq!(fa, fb, "{n:?}");
    }
}

#[test]
fn stale_artifact_blocks_compare_unless_overridden() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let base = ["--config", s(&cfg), "--out", s(&out_dir)];
    for cmd in ["init-model", "build-steering", "calibrate"] {
        ok(&[&base[..], &[cmd]].concat());
    }
    // Fresh weights and vectors, but the artifact belongs to the old pair.
    ok(&[&base[..], &["--seed", "42", "init-model"]].concat());
    ok(&[&base[..], &["--seed", "42", "build-steering"]].concat());
    let out = skoplab(&[&base[..], &["compare"]].concat());
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.join("compare.json").exists());

    let text = fs::read_to_string(&cfg).unwrap() + "\n[compare]\nallow_provenance_mismatch = true\n";
    fs::write(&cfg, text).unwrap();
    ok(&[&base[..], &["compare"]].concat());
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("compare.json")).unwrap()).unwrap();
    assert_eq!(json["provenance"]["provenance_overridden"], serde_json::Value::Bool(true));
}
