//! The pipeline stages. Each reads its inputs from the run directory (or an
//! explicit path), writes its artifacts and records itself in the manifest.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use ullsnn_core::analysis::{
    error_report, estimate_delta_simulated, Bootstrap, DistributionTag, EmpiricalDistribution, ErrorReport,
};
use ullsnn_core::arch::build_network;
use ullsnn_core::convert::{convert_dnn_to_snn, ConversionMode, ConversionPlan};
use ullsnn_core::data::Dataset;
use ullsnn_core::dnn::{
    collect_activation_stats, evaluate_dnn, train_dnn, ActivationStats, EpochLog, LayerStats,
};
use ullsnn_core::energy::{CostAccumulator, CostReport};
use ullsnn_core::par::map_range;
use ullsnn_core::snn::{evaluate_snn, finetune_sgl, snn_forward, LayerActivity, SpikingNetwork};
use ullsnn_core::weights::{decode_dnn, decode_snn, encode_dnn, encode_snn, sha256_hex};
use ullsnn_core::{NetworkSpec, Topology};

use crate::artifacts::RunDir;
use crate::config::{ExperimentConfig, Injection, Stage};
use crate::exit::CliError;

pub const DNN_WEIGHTS: &str = "dnn.weights";
pub const CONVERTED_WEIGHTS: &str = "snn_converted.weights";
pub const TUNED_WEIGHTS: &str = "snn.weights";
pub const PLAN: &str = "plan.json";
pub const STATS: &str = "stats.json";
pub const METRICS: &str = "metrics.json";

/// Explicit input paths; `None` means the run directory's default.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    pub dnn: Option<PathBuf>,
    pub snn: Option<PathBuf>,
    pub stats: Option<PathBuf>,
}

pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: RunDir,
    config_sha256: String,
    train: Dataset,
    test: Dataset,
}

impl Run {
    pub fn open(cfg: ExperimentConfig) -> Result<Self, CliError> {
        let mut dir = RunDir::open(&cfg.output_dir())?;
        let (train, test) = cfg.datasets()?;
        dir.write_json("config.json", "config", &cfg)?;
        let config_sha256 = sha256_hex(&std::fs::read(dir.path("config.json")).map_err(|e| CliError::artifact("config.json", e))?);
        dir.record_stage("config", &config_sha256, Default::default())?;
        Ok(Self { cfg, dir, config_sha256, train, test })
    }

    fn finish(&mut self, stage: &str, start: Instant) -> Result<(), CliError> {
        self.dir.record_stage(stage, &self.config_sha256, start.elapsed())
    }

    fn input(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.dir.path(default))
    }

    fn load_dnn(&mut self, inputs: &Inputs) -> Result<NetworkSpec, CliError> {
        let path = self.input(&inputs.dnn, DNN_WEIGHTS);
        let bytes = self.dir.read_input(&path, "train-dnn")?;
        decode_dnn(&bytes).map_err(|e| CliError::artifact(path.display(), e))
    }

    /// Explicit path, else the fine-tuned network, else the converted one.
    fn load_snn(&mut self, inputs: &Inputs) -> Result<(SpikingNetwork, String), CliError> {
        let path = match &inputs.snn {
            Some(p) => p.clone(),
            None if self.dir.path(TUNED_WEIGHTS).is_file() => self.dir.path(TUNED_WEIGHTS),
            None => self.dir.path(CONVERTED_WEIGHTS),
        };
        let bytes = self.dir.read_input(&path, "calibrate-convert")?;
        let snn = decode_snn(&bytes).map_err(|e| CliError::artifact(path.display(), e))?;
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        Ok((snn, name))
    }

    /// The persisted plan, checked against the requested step count.
    fn load_plan(&mut self) -> Result<ConversionPlan, CliError> {
        let path = self.dir.path(PLAN);
        let doc: PlanDoc = self.dir.read_json(&path, "calibrate-convert")?;
        if doc.plan.time_steps != self.cfg.time_steps {
            return Err(CliError::Mismatch(format!(
                "the spiking network was calibrated for T={} but T={} was requested; \
                 re-run calibrate-convert with --time-steps {} or request T={}",
                doc.plan.time_steps, self.cfg.time_steps, self.cfg.time_steps, doc.plan.time_steps
            )));
        }
        Ok(doc.plan)
    }

    fn check_shapes<N: Topology>(&self, net: &N, what: &str) -> Result<(), CliError> {
        if net.input_shape() != self.train.input_shape() {
            return Err(CliError::Artifact(format!(
                "{what} expects inputs of shape {:?} but the dataset has {:?}",
                net.input_shape(),
                self.train.input_shape()
            )));
        }
        Ok(())
    }

    fn bootstrap(&self) -> Bootstrap {
        Bootstrap {
            resamples: self.cfg.analysis.resamples,
            seed: self.cfg.stage_seed(Stage::Analysis),
            execution: self.cfg.execution(),
        }
    }
}

fn epoch_rows(log: &[EpochLog]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for e in log {
        let mut push = |metric: String, value: f64| rows.push(vec![e.epoch.to_string(), metric, value.to_string()]);
        push("loss".into(), e.loss);
        push("accuracy".into(), e.accuracy);
        push("learning_rate".into(), e.learning_rate);
        for (i, mu) in e.thresholds.iter().enumerate() {
            push(format!("threshold_{i}"), *mu);
        }
    }
    rows
}

#[derive(Serialize, Deserialize)]
struct TrainDoc {
    train_accuracy: f64,
    test_accuracy: f64,
    parameters: usize,
    epochs: Vec<EpochLog>,
}

pub fn train_dnn_stage(run: &mut Run) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = &run.cfg;
    let init = build_network(
        run.train.input_shape(),
        &cfg.network.hidden,
        run.train.classes().max(run.test.classes()),
        cfg.stage_seed(Stage::Init),
    )?;
    let (net, log) = train_dnn(&init, &run.train, &cfg.dnn_training())?;
    let exec = cfg.execution();
    let doc = TrainDoc {
        train_accuracy: evaluate_dnn(&net, &run.train, exec)?,
        test_accuracy: evaluate_dnn(&net, &run.test, exec)?,
        parameters: net.parameter_count(),
        epochs: log,
    };
    run.dir.write_bytes(DNN_WEIGHTS, &encode_dnn(&net))?;
    run.dir.write_json("train_log.json", "train_log", &doc)?;
    run.dir.write_csv("train_log.csv", &["epoch", "metric", "value"], epoch_rows(&doc.epochs))?;
    println!(
        "train-dnn: train accuracy {:.4}, test accuracy {:.4}",
        doc.train_accuracy, doc.test_accuracy
    );
    run.finish("train-dnn", start)
}

#[derive(Serialize, Deserialize)]
struct PlanDoc {
    plan: ConversionPlan,
}

#[derive(Serialize, Deserialize)]
struct StatsDoc {
    layers: Vec<LayerStats>,
}

pub fn calibrate_convert_stage(run: &mut Run, inputs: &Inputs) -> Result<(), CliError> {
    let start = Instant::now();
    let net = run.load_dnn(inputs)?;
    run.check_shapes(&net, "the source network")?;
    let stats = match &inputs.stats {
        Some(path) => {
            let doc: StatsDoc = run.dir.read_json(path, "calibrate-convert")?;
            ActivationStats { layers: doc.layers }
        }
        None => collect_activation_stats(&net, &run.train, &run.cfg.stats())?,
    };
    let (snn, plan) = convert_dnn_to_snn(&net, &stats, run.cfg.time_steps, run.cfg.mode)
        .map_err(|e| CliError::Artifact(format!("statistics do not match the weights: {e}")))?;
    run.dir.write_bytes(CONVERTED_WEIGHTS, &encode_snn(&snn))?;
    // A fine-tuned network from an earlier conversion is stale now.
    let _ = std::fs::remove_file(run.dir.path(TUNED_WEIGHTS));
    run.dir.write_json(STATS, "activation_stats", &StatsDoc { layers: stats.layers })?;
    let mut rows = Vec::new();
    for l in &plan.layers {
        for r in &l.landscape {
            rows.push(vec![
                l.layer.to_string(),
                r.percentile.to_string(),
                r.alpha.to_string(),
                r.best_beta.to_string(),
                r.best_loss.to_string(),
                r.loss_at_unit_beta.to_string(),
            ]);
        }
        for w in &l.warnings {
            eprintln!("calibrate-convert: layer {}: {w}", l.layer);
        }
    }
    run.dir.write_csv(
        "landscape.csv",
        &["layer", "percentile", "alpha", "best_beta", "best_loss", "loss_at_unit_beta"],
        rows,
    )?;
    let accuracy = evaluate_snn(&snn, &run.test, run.cfg.time_steps, run.cfg.execution())?.accuracy;
    run.dir.write_json(PLAN, "conversion_plan", &PlanDoc { plan })?;
    println!(
        "calibrate-convert: mode {}, T={}, converted test accuracy {accuracy:.4}",
        run.cfg.mode, run.cfg.time_steps
    );
    run.finish("calibrate-convert", start)
}

#[derive(Serialize, Deserialize)]
struct FinetuneDoc {
    time_steps: usize,
    test_accuracy_before: f64,
    test_accuracy_after: f64,
    epochs: Vec<EpochLog>,
}

pub fn finetune_stage(run: &mut Run, inputs: &Inputs) -> Result<(), CliError> {
    let start = Instant::now();
    let t = run.cfg.time_steps;
    run.load_plan()?;
    let path = run.input(&inputs.snn, CONVERTED_WEIGHTS);
    let bytes = run.dir.read_input(&path, "calibrate-convert")?;
    let snn = decode_snn(&bytes).map_err(|e| CliError::artifact(path.display(), e))?;
    run.check_shapes(&snn, "the spiking network")?;
    let exec = run.cfg.execution();
    let before = evaluate_snn(&snn, &run.test, t, exec)?.accuracy;
    let (tuned, log) = finetune_sgl(&snn, &run.train, t, &run.cfg.snn_training())?;
    let after = evaluate_snn(&tuned, &run.test, t, exec)?.accuracy;
    run.dir.write_bytes(TUNED_WEIGHTS, &encode_snn(&tuned))?;
    let doc = FinetuneDoc { time_steps: t, test_accuracy_before: before, test_accuracy_after: after, epochs: log };
    run.dir.write_json("finetune_log.json", "finetune_log", &doc)?;
    run.dir.write_csv("finetune_log.csv", &["epoch", "metric", "value"], epoch_rows(&doc.epochs))?;
    println!("finetune: test accuracy {before:.4} -> {after:.4} at T={t}");
    run.finish("finetune", start)
}

/// Average per-input costs of `snn` over `data`.
pub fn cost_report(run: &Run, snn: &SpikingNetwork, data: &Dataset) -> Result<CostReport, CliError> {
    const CHUNK: usize = 256;
    let t = run.cfg.time_steps;
    let mut acc = CostAccumulator::new(snn, t);
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let traces = map_range(run.cfg.execution(), end - start, |i| {
            snn_forward(snn, &data.inputs()[start + i], t).map(|o| o.trace)
        });
        for trace in traces {
            acc.add(&trace?)?;
        }
    }
    Ok(acc.report(&run.cfg.energy)?)
}

/// Gap reports for every spiking layer at `t`, using the source network's
/// calibration pre-activations and the spiking layer's actual scales.
fn layer_reports(run: &Run, dnn: &NetworkSpec, snn: &SpikingNetwork, t: usize) -> Result<Vec<ErrorReport>, CliError> {
    if dnn.shapes()? != snn.shapes()? {
        return Err(CliError::Artifact("source and spiking networks differ in shape".into()));
    }
    let stats = collect_activation_stats(dnn, &run.train, &run.cfg.stats())?;
    let boot = run.bootstrap();
    let mut out = Vec::new();
    for ls in &stats.layers {
        let Some(p) = snn.layers()[ls.layer].neuron else {
            return Err(CliError::Artifact(format!("layer {} does not spike", ls.layer)));
        };
        let dist = EmpiricalDistribution::new(ls.reservoir.clone(), DistributionTag::Custom)?;
        let mut r = error_report(&dist, ls.mu, t, p.vth / ls.mu, p.beta, &boot)?;
        r.layer = Some(ls.layer);
        r.delta_simulated = Some(estimate_delta_simulated(dnn, snn, &run.test, ls.layer, t, run.cfg.execution())?);
        out.push(r);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct MetricsDoc {
    time_steps: usize,
    mode: ConversionMode,
    snn_weights: String,
    samples: usize,
    accuracy: f64,
    dnn_accuracy: f64,
    mean_spikes_per_neuron: f64,
    layers: Vec<LayerActivity>,
    cost: CostReport,
    error: Vec<ErrorReport>,
}

pub fn evaluate_stage(run: &mut Run, inputs: &Inputs) -> Result<(), CliError> {
    let start = Instant::now();
    let t = run.cfg.time_steps;
    let plan = run.load_plan()?;
    let dnn = run.load_dnn(inputs)?;
    let (snn, snn_weights) = run.load_snn(inputs)?;
    run.check_shapes(&snn, "the spiking network")?;
    let exec = run.cfg.execution();
    let eval = evaluate_snn(&snn, &run.test, t, exec)?;
    let cost = cost_report(run, &snn, &run.test)?;
    let doc = MetricsDoc {
        time_steps: t,
        mode: plan.mode,
        snn_weights,
        samples: eval.samples,
        accuracy: eval.accuracy,
        dnn_accuracy: evaluate_dnn(&dnn, &run.test, exec)?,
        mean_spikes_per_neuron: eval.mean_activity(&snn),
        layers: eval.layers.clone(),
        error: layer_reports(run, &dnn, &snn, t)?,
        cost,
    };
    let rows = doc.cost.layers.iter().flat_map(|l| {
        l.spike_histogram.iter().flat_map(move |h| {
            h.iter().enumerate().map(move |(k, n)| vec![l.layer.to_string(), k.to_string(), n.to_string()])
        })
    });
    run.dir.write_csv("spikes.csv", &["layer", "spike_count", "neurons"], rows.collect::<Vec<_>>())?;
    run.dir.write_json(METRICS, "metrics", &doc)?;
    println!(
        "evaluate: SNN accuracy {:.4} (DNN {:.4}) at T={t}, {:.3} spikes/neuron, energy ratio {:.2}x",
        doc.accuracy, doc.dnn_accuracy, doc.mean_spikes_per_neuron, doc.cost.energy_ratio
    );
    run.finish("evaluate", start)
}

#[derive(Serialize, Deserialize)]
struct AnalysisDoc {
    source: String,
    reports: Vec<ErrorReport>,
}

pub fn analyze_stage(run: &mut Run, inputs: &Inputs) -> Result<(), CliError> {
    let start = Instant::now();
    let sweep = run.cfg.analysis.time_steps.clone();
    let boot = run.bootstrap();
    let mut reports = Vec::new();
    let source = match run.cfg.analysis.inject.clone() {
        Some(inj) => {
            let seed = run.cfg.stage_seed(Stage::Analysis);
            let (dist, mu) = match inj {
                Injection::Uniform { mu, samples } => (EmpiricalDistribution::uniform(mu, samples, seed)?, mu),
                Injection::Exponential { rate, mu, samples } => {
                    (EmpiricalDistribution::exponential(rate, samples, seed)?, mu)
                }
            };
            for &t in &sweep {
                reports.push(error_report(&dist, mu, t, 1.0, 1.0, &boot)?);
            }
            "injected".to_string()
        }
        None => {
            let dnn = run.load_dnn(inputs)?;
            let (snn, name) = run.load_snn(inputs)?;
            run.check_shapes(&dnn, "the source network")?;
            for &t in &sweep {
                reports.extend(layer_reports(run, &dnn, &snn, t)?);
            }
            name
        }
    };
    let mut rows = Vec::new();
    for r in &reports {
        let layer = r.layer.map_or_else(|| "injected".to_string(), |l| l.to_string());
        for (q, v) in r.flatten() {
            rows.push(vec![layer.clone(), r.time_steps.to_string(), q, v.to_string()]);
        }
    }
    run.dir.write_csv("analysis.csv", &["layer", "time_steps", "quantity", "value"], rows)?;
    let count = reports.len();
    run.dir.write_json("analysis.json", "error_reports", &AnalysisDoc { source, reports })?;
    println!("analyze: {count} reports over T in {sweep:?}");
    run.finish("analyze", start)
}

#[derive(Serialize, Deserialize)]
struct EnergyDoc {
    snn_weights: String,
    snn_energy_joules: f64,
    dnn_energy_joules: f64,
    #[serde(flatten)]
    report: CostReport,
}

pub fn energy_report_stage(run: &mut Run, inputs: &Inputs) -> Result<(), CliError> {
    let start = Instant::now();
    run.load_plan()?;
    let (snn, snn_weights) = run.load_snn(inputs)?;
    run.check_shapes(&snn, "the spiking network")?;
    let report = cost_report(run, &snn, &run.test)?;
    let mut rows = Vec::new();
    for l in &report.layers {
        let mut push = |q: &str, v: f64| rows.push(vec![l.layer.to_string(), l.kind.clone(), q.into(), v.to_string()]);
        push("snn_macs", l.snn_macs);
        push("snn_acs", l.snn_acs);
        push("dnn_macs", l.dnn_macs);
        push("snn_energy_pj", l.snn_energy_pj);
        push("dnn_energy_pj", l.dnn_energy_pj);
        if let Some(a) = l.spikes_per_neuron {
            push("spikes_per_neuron", a);
        }
    }
    for n in &report.neuromorphic {
        rows.push(vec!["total".into(), n.preset.name().into(), "neuromorphic_energy".into(), n.snn.to_string()]);
    }
    run.dir.write_csv("energy.csv", &["layer", "kind", "quantity", "value"], rows)?;
    let doc = EnergyDoc {
        snn_weights,
        snn_energy_joules: report.snn_energy_joules(),
        dnn_energy_joules: report.dnn_energy_joules(),
        report,
    };
    run.dir.write_json("energy.json", "energy_report", &doc)?;
    println!(
        "energy-report: SNN {:.4e} J, DNN {:.4e} J per input ({:.2}x)",
        doc.snn_energy_joules, doc.dnn_energy_joules, doc.report.energy_ratio
    );
    run.finish("energy-report", start)
}

pub fn pipeline(run: &mut Run, inputs: &Inputs) -> Result<(), CliError> {
    train_dnn_stage(run)?;
    calibrate_convert_stage(run, inputs)?;
    finetune_stage(run, inputs)?;
    evaluate_stage(run, inputs)?;
    analyze_stage(run, inputs)?;
    energy_report_stage(run, inputs)
}
