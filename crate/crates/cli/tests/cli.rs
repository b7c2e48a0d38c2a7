use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use ullsnn_core::convert::find_scaling_factors;
use ullsnn_core::dnn::LayerStats;
use ullsnn_core::netcore::LayerKind;
use ullsnn_core::snn::SpikingNetwork;
use ullsnn_core::tensor::Tensor;
use ullsnn_core::weights::{decode_snn, encode_snn, sha256_hex};
use ullsnn_core::Topology;

const TOY: &str = r#"
name = "toy"
seed = 7
time_steps = 2

[dataset.synthetic]
generator = "blobs"
classes = 3
dim = 4
samples_per_class = 80
separation = 2.5
spread = 1.0

[network]
hidden = [{ type = "dense", units = 64 }, { type = "dense", units = 64 }]

[dnn]
epochs = 8
learning_rate = 0.05
batch_size = 16

[snn]
epochs = 2
batch_size = 16

[analysis]
time_steps = [1, 2]
resamples = 20
"#;

struct Env {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Env {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("exp.toml");
        fs::write(&path, config).unwrap();
        let out = tmp.path().join("out");
        Self { config: path, out, _tmp: tmp }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ullsnn"))
            .arg("-c")
            .arg(&self.config)
            .arg("-o")
            .arg(&self.out)
            .args(args)
            .env_remove("ULLSNN_OUTPUT_ROOT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().expect("terminated by signal")
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_slice(&fs::read(self.file(name)).unwrap()).unwrap()
    }
}

fn with_extra(extra: &str) -> String {
    format!("{extra}\n{TOY}")
}

fn sha(path: &Path) -> String {
    sha256_hex(&fs::read(path).unwrap())
}

#[test]
fn pipeline_produces_verified_artifacts() {
    let env = Env::new(TOY);
    env.ok(&["pipeline"]);
    for name in ["dnn.weights", "snn.weights", "plan.json", "metrics.json", "analysis.csv", "energy.json"] {
        assert!(env.file(name).is_file(), "{name}");
    }
    assert!(!env.file(".ullsnn.lock").exists());
    env.ok(&["verify"]);

    let manifest = env.json("manifest.json");
    for stage in ["train-dnn", "calibrate-convert", "finetune", "evaluate", "analyze", "energy-report"] {
        assert!(manifest["stages"][stage]["outputs"].as_array().is_some_and(|o| !o.is_empty()), "{stage}");
    }
    for entry in fs::read_dir(&env.out).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let v: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
            assert_eq!(v["schema_version"], 1, "{}", path.display());
            assert!(v["kind"].is_string() || path.ends_with("manifest.json"), "{}", path.display());
        }
    }

    let schema: Value = serde_json::from_str(include_str!("../schemas/metrics.schema.json")).unwrap();
    let validator = jsonschema::JSONSchema::compile(&schema).unwrap();
    let metrics = env.json("metrics.json");
    if let Err(errors) = validator.validate(&metrics) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("metrics.json fails its schema: {msgs:#?}");
    }
    assert_eq!(metrics["snn_weights"], "snn.weights");
    assert!(metrics["accuracy"].as_f64().unwrap() > 0.8);
    assert!(env.json("train_log.json")["train_accuracy"].as_f64().unwrap() >= 0.95);

    // On the trained net h may only fall between neighbouring T by noise.
    env.ok(&["analyze", "--sweep", "1,2,3,4,5"]);
    let reports = env.json("analysis.json")["reports"].as_array().unwrap().clone();
    for layer in 0..2 {
        let h: Vec<(f64, f64)> = reports
            .iter()
            .filter(|r| r["layer"] == layer)
            .map(|r| (r["h"]["value"].as_f64().unwrap(), r["h"]["std_error"].as_f64().unwrap()))
            .collect();
        assert_eq!(h.len(), 5);
        for w in h.windows(2) {
            let tol = 3.0 * w[0].1.hypot(w[1].1);
            assert!(w[1].0 >= w[0].0 - tol, "layer {layer}: {h:?}");
        }
    }
}

#[test]
fn reruns_are_byte_identical() {
    let env = Env::new(TOY);
    env.ok(&["pipeline"]);
    let snapshot = || {
        let mut files: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(&env.out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| !p.ends_with("manifest.json"))
            .map(|p| {
                let bytes = fs::read(&p).unwrap();
                (p, bytes)
            })
            .collect();
        files.sort();
        files
    };
    let first = snapshot();
    assert!(first.len() > 10);
    env.ok(&["evaluate"]);
    assert_eq!(first, snapshot());
    env.ok(&["pipeline"]);
    assert_eq!(first, snapshot());
}

#[test]
fn same_seed_gives_identical_weights() {
    let a = Env::new(TOY);
    let b = Env::new(TOY);
    let c = Env::new(TOY);
    for env in [&a, &b] {
        env.ok(&["train-dnn"]);
        env.ok(&["calibrate-convert"]);
    }
    c.ok(&["--seed", "8", "train-dnn"]);
    for name in ["dnn.weights", "snn_converted.weights", "stats.json", "plan.json"] {
        assert_eq!(sha(&a.file(name)), sha(&b.file(name)), "{name}");
    }
    assert_ne!(sha(&a.file("dnn.weights")), sha(&c.file("dnn.weights")));
}

#[test]
fn scaled_mode_uses_the_grid_search_and_naive_mode_does_not_scale() {
    let env = Env::new(TOY);
    env.ok(&["train-dnn"]);
    env.ok(&["calibrate-convert"]);
    let stats: Vec<LayerStats> = serde_json::from_value(env.json("stats.json")["layers"].clone()).unwrap();
    let plan = env.json("plan.json");
    for (s, p) in stats.iter().zip(plan["plan"]["layers"].as_array().unwrap()) {
        let want = find_scaling_factors(s.calibration_table().unwrap(), s.mu, 2).unwrap();
        assert_eq!(p["scale"]["alpha"].as_f64().unwrap(), want.alpha);
        assert_eq!(p["scale"]["beta"].as_f64().unwrap(), want.beta);
        assert_eq!(p["vth"].as_f64().unwrap(), want.alpha * s.mu);
    }

    env.ok(&["--mode", "naive", "calibrate-convert"]);
    for p in env.json("plan.json")["plan"]["layers"].as_array().unwrap() {
        assert_eq!(p["scale"]["alpha"], 1.0);
        assert_eq!(p["scale"]["beta"], 1.0);
        assert_eq!(p["vth"], p["mu"]);
    }
    let snn = decode_snn(&fs::read(env.file("snn_converted.weights")).unwrap()).unwrap();
    assert!(snn.layers().iter().filter_map(|l| l.neuron).all(|n| n.beta == 1.0));
}

#[test]
fn silent_network_costs_no_accumulates() {
    let env = Env::new(TOY);
    env.ok(&["train-dnn"]);
    env.ok(&["calibrate-convert"]);
    let snn = decode_snn(&fs::read(env.file("snn_converted.weights")).unwrap()).unwrap();
    let silent = SpikingNetwork::new(
        snn.input_shape().to_vec(),
        snn.layers()
            .iter()
            .cloned()
            .map(|mut l| {
                if let LayerKind::Dense { weight } | LayerKind::Conv2d { weight, .. } = &mut l.kind {
                    *weight = Tensor::filled(weight.shape(), 0.0);
                }
                l
            })
            .collect(),
    )
    .unwrap();
    let path = env.out.join("silent.weights");
    fs::write(&path, encode_snn(&silent)).unwrap();
    env.ok(&["evaluate", "--snn", path.to_str().unwrap()]);
    let metrics = env.json("metrics.json");
    assert!((metrics["accuracy"].as_f64().unwrap() - 1.0 / 3.0).abs() < 0.15, "{}", metrics["accuracy"]);
    for l in &metrics["cost"]["layers"].as_array().unwrap()[1..] {
        assert_eq!(l["snn_acs"], 0.0, "{l}");
    }
    env.ok(&["energy-report", "--snn", path.to_str().unwrap()]);
    let report = env.json("energy.json");
    let layers = report["layers"].as_array().unwrap();
    assert!(layers[0]["snn_macs"].as_f64().unwrap() > 0.0);
    for l in &layers[1..] {
        assert_eq!(l["snn_acs"], 0.0, "{l}");
    }
    assert_eq!(report["hidden_activity"], 0.0);
}

#[test]
fn config_errors_exit_with_2() {
    let env = Env::new(&with_extra("tiem_steps = 3"));
    assert_eq!(env.code(&["train-dnn"]), 2);

    let idx = TOY.replace(
        "[dataset.synthetic]\ngenerator = \"blobs\"\nclasses = 3\ndim = 4\nsamples_per_class = 80\nseparation = 2.5\nspread = 1.0",
        "[dataset.idx]\nimages = \"missing-images.idx\"\nlabels = \"missing-labels.idx\"",
    );
    assert_ne!(idx, TOY);
    let env = Env::new(&idx);
    let o = env.run(&["train-dnn"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing-images.idx"));

    let env = Env::new(TOY);
    assert_eq!(env.code(&["-t", "0", "train-dnn"]), 2);
    let missing = Command::new(env!("CARGO_BIN_EXE_ullsnn"))
        .args(["-c", "/nonexistent/exp.toml", "train-dnn"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn artifact_errors_exit_with_4() {
    let env = Env::new(TOY);
    assert_eq!(env.code(&["calibrate-convert"]), 4, "no source network yet");
    env.ok(&["train-dnn"]);
    env.ok(&["calibrate-convert"]);

    let path = env.file("snn_converted.weights");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    assert_eq!(env.code(&["energy-report"]), 4);
    assert_eq!(env.code(&["verify"]), 4);

    // Statistics from a differently shaped network.
    let other = Env::new(&TOY.replace("units = 64 }]", "units = 32 }]"));
    other.ok(&["train-dnn"]);
    other.ok(&["calibrate-convert"]);
    let stats = other.file("stats.json");
    assert_eq!(env.code(&["calibrate-convert", "--stats", stats.to_str().unwrap()]), 4);

    fs::write(env.file(".ullsnn.lock"), "").unwrap();
    assert_eq!(env.code(&["calibrate-convert"]), 4);
}

#[test]
fn time_step_mismatch_exits_with_5() {
    let env = Env::new(TOY);
    env.ok(&["train-dnn"]);
    env.ok(&["calibrate-convert"]);
    let o = env.run(&["-t", "3", "evaluate"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("T=2"));
    assert_eq!(env.code(&["-t", "3", "finetune"]), 5);
}

#[test]
fn too_few_samples_exit_with_6() {
    let env = Env::new(&TOY.replace(
        "resamples = 20",
        "resamples = 20\ninject = { family = \"uniform\", mu = 1.0, samples = 500 }",
    ));
    assert_eq!(env.code(&["analyze"]), 6);
}

#[test]
fn uniform_injection_reports_no_gap() {
    let env = Env::new(&TOY.replace(
        "resamples = 20",
        "resamples = 20\ninject = { family = \"uniform\", mu = 2.0, samples = 20000 }",
    ));
    env.ok(&["analyze", "--sweep", "1,2,4"]);
    let doc = env.json("analysis.json");
    assert_eq!(doc["source"], "injected");
    let reports = doc["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        let e = &r["delta_empirical"];
        let (v, se) = (e["value"].as_f64().unwrap(), e["std_error"].as_f64().unwrap());
        assert!(v.abs() < 3.0 * se, "{r}");
        for q in ["k", "h"] {
            let (v, se) = (r[q]["value"].as_f64().unwrap(), r[q]["std_error"].as_f64().unwrap());
            assert!((v - 0.5).abs() < 3.0 * se, "{q}: {r}");
        }
        assert!(r["layer"].is_null());
    }
}

#[test]
fn skewed_injection_h_rises_with_t() {
    let env = Env::new(&TOY.replace(
        "resamples = 20",
        "resamples = 50\ninject = { family = \"exponential\", rate = 1.5, mu = 2.0, samples = 50000 }",
    ));
    env.ok(&["analyze", "--sweep", "1,2,3,4,5"]);
    let h: Vec<f64> = env.json("analysis.json")["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["h"]["value"].as_f64().unwrap())
        .collect();
    assert_eq!(h.len(), 5);
    assert!(h.windows(2).all(|w| w[1] >= w[0]), "{h:?}");
    assert!(h[0] < h[4]);
}

#[test]
fn divergence_exits_with_3() {
    let env = Env::new(&TOY.replace("learning_rate = 0.05", "learning_rate = 1e308"));
    let o = env.run(&["train-dnn"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!env.file("dnn.weights").exists());
}
