//! DNN-to-SNN conversion: threshold balancing, the bias-shift baseline and
//! the percentile-driven threshold/spike scale search.

use serde::{Deserialize, Serialize};

use crate::dnn::{ActivationStats, LayerStats};
use crate::error::{Error, Result};
use crate::netcore::{NetworkSpec, Topology};
use crate::snn::{NeuronParams, SpikingLayer, SpikingNetwork};

/// Number of steps in the `β` grid `{0, 0.01, …, 2}`.
pub const BETA_STEPS: usize = 200;

/// Threshold scale `α` (threshold `= α·μ`) and spike scale `β` (spike value
/// `= β·V_th`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalePair {
    pub alpha: f64,
    pub beta: f64,
}

impl ScalePair {
    pub const UNIT: ScalePair = ScalePair { alpha: 1.0, beta: 1.0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionMode {
    /// `V_th = μ`.
    Naive,
    /// `V_th` = largest observed pre-activation, drive shifted by `V_th/2T`.
    MaxActBias,
    /// `V_th = α·μ`, spikes worth `β·V_th`.
    Scaled,
}

impl std::fmt::Display for ConversionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Naive => "naive",
            Self::MaxActBias => "max_act_bias",
            Self::Scaled => "scaled",
        })
    }
}

impl std::str::FromStr for ConversionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "max_act_bias" | "max-act-bias" => Ok(Self::MaxActBias),
            "scaled" => Ok(Self::Scaled),
            other => Err(Error::Config(format!(
                "unknown conversion mode {other:?} (expected naive, max_act_bias or scaled)"
            ))),
        }
    }
}

/// Signed staircase mismatch between a clipped-linear activation with
/// ceiling `mu` and a `T`-step spiking activation with threshold `α·μ` and
/// spike value `β·α·μ`, summed over the percentile values `p`.
///
/// A value `0 ≤ p ≤ αμ` falls in step `j = min(floor(pT/(αμ)), T−1)` and adds
/// `p − jαβμ/T`; `αμ < p ≤ μ` adds `p − αβμ`; `p > μ` adds `μ(1 − αβ)`.
/// Negative values add nothing.
pub fn compute_loss(p: &[f64], mu: f64, alpha: f64, beta: f64, time_steps: usize) -> f64 {
    let steps = time_steps as f64;
    let top = alpha * mu;
    let mut loss = 0.0;
    for &v in p {
        if v < 0.0 {
            continue;
        }
        if v <= top {
            let j = ((v * steps / top).floor()).min(steps - 1.0);
            loss += v - j * alpha * beta * mu / steps;
        } else if v <= mu {
            loss += v - alpha * beta * mu;
        } else {
            loss += mu * (1.0 - alpha * beta);
        }
    }
    loss
}

/// `β` grid value `k/100`.
pub fn beta_grid(k: usize) -> f64 {
    k as f64 / 100.0
}

/// Best `β` for one `α` candidate, kept for plotting the search landscape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub percentile: usize,
    pub alpha: f64,
    pub best_beta: f64,
    pub best_loss: f64,
    pub loss_at_unit_beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSearch {
    pub pair: ScalePair,
    pub loss: f64,
    pub landscape: Vec<LandscapeRow>,
}

/// Scans `α = P[j]/μ` over the table in order and, for each, `β` over the
/// grid in ascending order, starting from `(1, 1)` and replacing the
/// incumbent only on a strictly smaller `|loss|`. Non-positive percentiles
/// are not proposed as `α`.
pub fn find_scaling_factors(p: &[f64], mu: f64, time_steps: usize) -> Result<ScalePair> {
    Ok(search_scaling_factors(p, mu, time_steps)?.pair)
}

/// [`find_scaling_factors`] plus the optimum loss and a per-`α` landscape.
pub fn search_scaling_factors(p: &[f64], mu: f64, time_steps: usize) -> Result<ScaleSearch> {
    if p.is_empty() {
        return Err(Error::Calibration("empty percentile table".into()));
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Calibration(format!("threshold {mu} must be positive")));
    }
    if time_steps == 0 {
        return Err(Error::arg("the number of time steps must be at least 1"));
    }
    let mut best = ScalePair::UNIT;
    let mut best_loss = compute_loss(p, mu, 1.0, 1.0, time_steps);
    let mut landscape = Vec::new();
    for (j, &v) in p.iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        let alpha = v / mu;
        let mut row = LandscapeRow {
            percentile: j,
            alpha,
            best_beta: 0.0,
            best_loss: f64::INFINITY,
            loss_at_unit_beta: compute_loss(p, mu, alpha, 1.0, time_steps),
        };
        for k in 0..=BETA_STEPS {
            let beta = beta_grid(k);
            let loss = compute_loss(p, mu, alpha, beta, time_steps);
            if loss.abs() < row.best_loss.abs() {
                row.best_beta = beta;
                row.best_loss = loss;
            }
            if loss.abs() < best_loss.abs() {
                best = ScalePair { alpha, beta };
                best_loss = loss;
            }
        }
        landscape.push(row);
    }
    Ok(ScaleSearch {
        pair: best,
        loss: best_loss,
        landscape,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub mode: ConversionMode,
    pub mu: f64,
    pub d_max: f64,
    pub scale: ScalePair,
    pub vth: f64,
    pub delta: f64,
    /// Staircase loss of the chosen scales over `P[0..=M]`; absent when the
    /// table is unusable or the mode does not use it.
    pub loss: Option<f64>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub landscape: Vec<LandscapeRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionPlan {
    pub mode: ConversionMode,
    pub time_steps: usize,
    pub layers: Vec<LayerPlan>,
}

fn plan_layer(stats: &LayerStats, mode: ConversionMode, time_steps: usize) -> Result<LayerPlan> {
    let mu = stats.mu;
    let mut warnings = Vec::new();
    let table = stats.calibration_table();
    let mut plan = LayerPlan {
        layer: stats.layer,
        mode,
        mu,
        d_max: stats.d_max,
        scale: ScalePair::UNIT,
        vth: mu,
        delta: 0.0,
        loss: None,
        warnings: Vec::new(),
        landscape: Vec::new(),
    };
    match mode {
        ConversionMode::Naive => {
            plan.loss = table.ok().map(|p| compute_loss(p, mu, 1.0, 1.0, time_steps));
        }
        ConversionMode::MaxActBias => {
            if stats.d_max > 0.0 && stats.d_max.is_finite() {
                plan.vth = stats.d_max;
            } else {
                warnings.push(format!(
                    "largest pre-activation {} is not positive; keeping the threshold at mu",
                    stats.d_max
                ));
            }
            plan.delta = plan.vth / (2.0 * time_steps as f64);
        }
        ConversionMode::Scaled => {
            let search = search_scaling_factors(table?, mu, time_steps)?;
            if search.pair.beta == 0.0 {
                warnings.push("beta = 0 silences this layer".into());
            }
            plan.scale = search.pair;
            plan.vth = search.pair.alpha * mu;
            plan.loss = Some(search.loss);
            plan.landscape = search.landscape;
        }
    }
    plan.warnings = warnings;
    Ok(plan)
}

/// Copies the weights verbatim and sets every neuron layer's threshold,
/// spike scale and shift according to `mode`. Leaks start at 1.
pub fn convert_dnn_to_snn(
    net: &NetworkSpec,
    stats: &ActivationStats,
    time_steps: usize,
    mode: ConversionMode,
) -> Result<(SpikingNetwork, ConversionPlan)> {
    if time_steps == 0 {
        return Err(Error::arg("the number of time steps must be at least 1"));
    }
    let mut plans = Vec::new();
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let neuron = match layer.mu {
            None => None,
            Some(mu) => {
                let s = stats
                    .layer(i)
                    .ok_or_else(|| Error::Calibration(format!("no activation statistics for layer {i}")))?;
                if s.mu != mu {
                    return Err(Error::Calibration(format!(
                        "statistics for layer {i} were collected at threshold {} but the network has {mu}",
                        s.mu
                    )));
                }
                let plan = plan_layer(s, mode, time_steps)?;
                let params = NeuronParams {
                    vth: plan.vth,
                    beta: plan.scale.beta,
                    leak: 1.0,
                    delta: plan.delta,
                };
                plans.push(plan);
                Some(params)
            }
        };
        layers.push(SpikingLayer {
            kind: layer.kind.clone(),
            neuron,
        });
    }
    let snn = SpikingNetwork::new(net.input_shape().to_vec(), layers)?;
    Ok((
        snn,
        ConversionPlan {
            mode,
            time_steps,
            layers: plans,
        },
    ))
}

/// Moves every layer's spike scale `β` into the weights of the next weighted
/// layer, leaving `β = 1` everywhere. Pooling and dropout between the two
/// commute with a non-negative scale, so the network function is unchanged.
pub fn absorb_beta(snn: &SpikingNetwork) -> Result<SpikingNetwork> {
    let mut out = snn.clone();
    let layers = out.layers_mut();
    let mut pending = 1.0;
    for layer in layers.iter_mut() {
        if pending != 1.0 {
            if let Some(w) = layer.kind.weight_mut() {
                w.data_mut().iter_mut().for_each(|v| *v *= pending);
                pending = 1.0;
            }
        }
        if let Some(p) = layer.neuron.as_mut() {
            pending = p.beta;
            p.beta = 1.0;
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::mlp;
    use crate::data::Synthetic;
    use crate::dnn::{collect_activation_stats, StatsConfig};
    use crate::snn::snn_forward;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the interval loop with half-open steps and
    /// the last step closed.
    fn loss_oracle(p: &[f64], mu: f64, alpha: f64, beta: f64, t: usize) -> f64 {
        let mut loss = 0.0;
        for &v in p {
            let mut seg1 = false;
            for j in 0..t {
                let lo = j as f64 * alpha * mu / t as f64;
                let hi = (j + 1) as f64 * alpha * mu / t as f64;
                let inside = if j + 1 == t { lo <= v && v <= alpha * mu } else { lo <= v && v < hi };
                if inside {
                    loss += v - j as f64 * alpha * beta * mu / t as f64;
                    seg1 = true;
                }
            }
            if !seg1 && alpha * mu < v && v <= mu {
                loss += v - alpha * beta * mu;
            } else if v > mu {
                loss += mu * (1.0 - alpha * beta);
            }
        }
        loss
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in [ConversionMode::Naive, ConversionMode::MaxActBias, ConversionMode::Scaled] {
            assert_eq!(m.to_string().parse::<ConversionMode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.to_string());
        }
    }

    #[test]
    fn loss_cases() {
        assert_eq!(compute_loss(&[0.25, 0.75], 1.0, 1.0, 1.0, 2), 0.5);
        assert_eq!(compute_loss(&[1.5], 1.0, 0.5, 1.0, 2), 0.5);
        assert_eq!(compute_loss(&[0.0], 1.0, 0.3, 1.7, 3), 0.0);
        assert_eq!(compute_loss(&[0.0], 2.0, 1.0, 0.0, 1), 0.0);
    }

    proptest! {
        #[test]
        fn loss_matches_interval_loop(
            raw in proptest::collection::vec(0.0f64..1.5, 1..30),
            a in 1u32..=64, b in 0u32..=200, t in 1usize..=6,
        ) {
            // dyadic values keep every interval boundary exact
            let p: Vec<f64> = raw.iter().map(|v| (v * 64.0).round() / 64.0).collect();
            let alpha = a as f64 / 64.0;
            let beta = b as f64 / 100.0;
            let got = compute_loss(&p, 1.0, alpha, beta, t);
            prop_assert!((got - loss_oracle(&p, 1.0, alpha, beta, t)).abs() < 1e-9);
        }

        #[test]
        fn search_is_grid_optimal(raw in proptest::collection::vec(0.0f64..1.0, 1..12), mu in 0.5f64..2.0, t in 1usize..=4) {
            let mut p: Vec<f64> = raw.iter().map(|v| v * v * mu).collect();
            p.sort_by(f64::total_cmp);
            let found = search_scaling_factors(&p, mu, t).unwrap();
            prop_assert_eq!(found.loss, compute_loss(&p, mu, found.pair.alpha, found.pair.beta, t));
            let mut best = compute_loss(&p, mu, 1.0, 1.0, t).abs();
            for &v in p.iter().filter(|&&v| v > 0.0) {
                for k in 0..=200 {
                    best = best.min(compute_loss(&p, mu, v / mu, k as f64 / 100.0, t).abs());
                }
            }
            prop_assert_eq!(found.loss.abs(), best);
        }
    }

    #[test]
    fn unit_pair_kept_when_exact() {
        // every value sits on a step floor: zero loss at (1, 1)
        let p = [0.0, 0.0, 0.5, 0.5];
        assert_eq!(compute_loss(&p, 1.0, 1.0, 1.0, 2), 0.0);
        assert_eq!(find_scaling_factors(&p, 1.0, 2).unwrap(), ScalePair::UNIT);
    }

    #[test]
    fn skewed_table_prefers_smaller_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p: Vec<f64> = (0..=100).map(|_| rng.gen_range(0.0f64..1.0).powi(4) * 0.3).collect();
        p.sort_by(f64::total_cmp);
        let pair = find_scaling_factors(&p, 1.0, 2).unwrap();
        assert!(pair.alpha < 1.0);
        let best = compute_loss(&p, 1.0, pair.alpha, pair.beta, 2).abs();
        let unit_alpha_best = (0..=200).map(|k| compute_loss(&p, 1.0, 1.0, k as f64 / 100.0, 2).abs()).fold(f64::INFINITY, f64::min);
        assert!(best < unit_alpha_best);
    }

    #[test]
    fn uniform_table_has_small_loss_at_large_t() {
        let p: Vec<f64> = (0..=100).map(|j| j as f64 / 100.0).collect();
        let sum: f64 = p.iter().sum();
        assert!(compute_loss(&p, 1.0, 1.0, 1.0, 64) / sum < 0.02);
    }

    #[test]
    fn empty_table_rejected() {
        assert!(matches!(find_scaling_factors(&[], 1.0, 2), Err(Error::Calibration(_))));
    }

    fn setup() -> (NetworkSpec, ActivationStats) {
        let data = Synthetic::Blobs { classes: 3, dim: 5, samples_per_class: 30, separation: 1.0, spread: 0.5 }
            .generate(1)
            .unwrap();
        let net = mlp(5, &[12, 10], 3, Some(0.1), 2).unwrap();
        let stats = collect_activation_stats(&net, &data, &StatsConfig::default()).unwrap();
        (net, stats)
    }

    #[test]
    fn modes_set_thresholds() {
        let (net, stats) = setup();
        let (snn, plan) = convert_dnn_to_snn(&net, &stats, 4, ConversionMode::Naive).unwrap();
        for l in snn.neuron_layers() {
            let p = snn.layers()[l].neuron.unwrap();
            assert_eq!((p.vth, p.beta, p.delta, p.leak), (net.layers()[l].mu.unwrap(), 1.0, 0.0, 1.0));
        }
        assert_eq!(plan.layers.len(), 2);

        let (snn, _) = convert_dnn_to_snn(&net, &stats, 4, ConversionMode::MaxActBias).unwrap();
        for l in snn.neuron_layers() {
            let p = snn.layers()[l].neuron.unwrap();
            let d_max = stats.layer(l).unwrap().d_max;
            assert_eq!((p.vth, p.delta), (d_max, d_max / 8.0));
        }

        let (snn, plan) = convert_dnn_to_snn(&net, &stats, 2, ConversionMode::Scaled).unwrap();
        for (l, lp) in snn.neuron_layers().into_iter().zip(&plan.layers) {
            let s = stats.layer(l).unwrap();
            let pair = find_scaling_factors(s.calibration_table().unwrap(), s.mu, 2).unwrap();
            let p = snn.layers()[l].neuron.unwrap();
            assert_eq!(lp.scale, pair);
            assert_eq!((p.vth, p.beta, p.delta), (pair.alpha * s.mu, pair.beta, 0.0));
        }

        // weights copied bit-exactly in every mode
        for mode in [ConversionMode::Naive, ConversionMode::MaxActBias, ConversionMode::Scaled] {
            let (snn, _) = convert_dnn_to_snn(&net, &stats, 3, mode).unwrap();
            for (a, b) in net.layers().iter().zip(snn.layers()) {
                assert_eq!(a.kind, b.kind);
            }
        }
    }

    #[test]
    fn missing_stats_rejected() {
        let (net, mut stats) = setup();
        stats.layers.remove(0);
        assert!(matches!(
            convert_dnn_to_snn(&net, &stats, 2, ConversionMode::Naive),
            Err(Error::Calibration(_))
        ));
    }

    fn random_snn(seed: u64, beta: f64) -> SpikingNetwork {
        let net = crate::arch::build_network(
            &[1, 4, 4],
            &[
                crate::arch::LayerDesc::Conv2d { channels: 2, kernel: 3, stride: 1, padding: 1 },
                crate::arch::LayerDesc::MaxPool2d { window: 2, stride: None },
                crate::arch::LayerDesc::Dense { units: 6 },
            ],
            3,
            seed,
        )
        .unwrap();
        let layers = net
            .layers()
            .iter()
            .map(|l| SpikingLayer {
                kind: l.kind.clone(),
                neuron: l.mu.map(|_| NeuronParams { beta, ..NeuronParams::new(0.4) }),
            })
            .collect();
        SpikingNetwork::new(net.input_shape().to_vec(), layers).unwrap()
    }

    #[test]
    fn absorption_preserves_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..6 {
            let snn = random_snn(seed, 0.5);
            let absorbed = absorb_beta(&snn).unwrap();
            assert!(absorbed.neuron_layers().iter().all(|&l| absorbed.layers()[l].neuron.unwrap().beta == 1.0));
            assert_eq!(absorb_beta(&absorbed).unwrap(), absorbed);
            for t in 1..=4 {
                let x = Tensor::new(vec![1, 4, 4], (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
                let a = snn_forward(&snn, &x, t).unwrap();
                let b = snn_forward(&absorbed, &x, t).unwrap();
                for (u, v) in a.scores.data().iter().zip(b.scores.data()) {
                    assert!((u - v).abs() <= 1e-9);
                }
            }
        }
        let unit = random_snn(1, 1.0);
        assert_eq!(absorb_beta(&unit).unwrap(), unit);
    }
}
