use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netcore::{forward, Mode, NetworkSpec};
use crate::par::{derive_seed, map_range, Execution};

/// Percentiles `P[0..=100]` with the lower-value estimator:
/// `P[j] = sorted[floor(j·(n−1)/100)]`.
pub fn percentile_table(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Statistics("no samples for percentile table".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok((0..=100).map(|j| sorted[j * (n - 1) / 100]).collect())
}

/// Largest `j` with `P[j] ≤ mu`.
pub(crate) fn largest_index_within(p: &[f64], mu: f64) -> Option<usize> {
    p.iter().rposition(|&v| v <= mu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// Index of the layer in the network.
    pub layer: usize,
    pub mu: f64,
    pub percentiles: Vec<f64>,
    /// Largest `j` with `P[j] ≤ mu`; `None` if every percentile exceeds it.
    pub m: Option<usize>,
    pub d_max: f64,
    /// Pre-activations observed (before reservoir subsampling).
    pub observed: u64,
    /// Share of non-negative pre-activations in `[0, d_max/3]`.
    pub coverage_third_of_max: f64,
    /// Largest gap between the percentile tables of the two halves of the
    /// reservoir over `j ≤ M`, relative to `mu`.
    pub split_half_drift: f64,
    #[serde(skip)]
    pub reservoir: Vec<f64>,
}

impl LayerStats {
    /// `P[0..=M]`, the table the scaling search runs on.
    pub fn calibration_table(&self) -> Result<&[f64]> {
        let m = self.m.ok_or_else(|| {
            Error::Calibration(format!(
                "layer {}: every percentile exceeds the threshold {}",
                self.layer, self.mu
            ))
        })?;
        Ok(&self.percentiles[..=m])
    }

    pub fn mu_below_max(&self) -> bool {
        self.mu <= self.d_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub layers: Vec<LayerStats>,
}

impl ActivationStats {
    pub fn layer(&self, index: usize) -> Option<&LayerStats> {
        self.layers.iter().find(|l| l.layer == index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    /// Per-layer reservoir capacity.
    pub reservoir_cap: usize,
    /// Use at most this many calibration inputs (all when `None`).
    pub max_inputs: Option<usize>,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            reservoir_cap: 1_000_000,
            max_inputs: None,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Uniform reservoir sampling (Algorithm R).
struct Reservoir {
    cap: usize,
    seen: u64,
    items: Vec<f64>,
    max: f64,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(cap: usize, seed: u64) -> Self {
        Self {
            cap,
            seen: 0,
            items: Vec::new(),
            max: f64::NEG_INFINITY,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, v: f64) {
        self.seen += 1;
        self.max = self.max.max(v);
        if self.items.len() < self.cap {
            self.items.push(v);
        } else {
            let k = self.rng.gen_range(0..self.seen);
            if (k as usize) < self.cap {
                self.items[k as usize] = v;
            }
        }
    }
}

const CHUNK: usize = 256;

/// Runs the calibration inputs through the network in inference mode and
/// tabulates the pre-activation distribution of every thresholded layer.
pub fn collect_activation_stats(net: &NetworkSpec, data: &Dataset, cfg: &StatsConfig) -> Result<ActivationStats> {
    if data.is_empty() {
        return Err(Error::Statistics("calibration set is empty".into()));
    }
    if cfg.reservoir_cap == 0 {
        return Err(Error::Config("reservoir capacity must be positive".into()));
    }
    let layers = net.thresholded_layers();
    let n = cfg.max_inputs.map_or(data.len(), |m| m.min(data.len()));
    let mut reservoirs: Vec<Reservoir> = layers
        .iter()
        .map(|&l| Reservoir::new(cfg.reservoir_cap, derive_seed(cfg.seed, &[l as u64])))
        .collect();

    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let outs = map_range(cfg.execution, len, |k| forward(net, &data.inputs()[start + k], Mode::Infer));
        for out in outs {
            let out = out?;
            for (r, &l) in reservoirs.iter_mut().zip(&layers) {
                if let Some(z) = &out.preacts[l] {
                    z.data().iter().for_each(|&v| r.push(v));
                }
            }
        }
    }

    let mut result = Vec::with_capacity(layers.len());
    for (r, &l) in reservoirs.into_iter().zip(&layers) {
        let mu = net.layers()[l].mu.expect("thresholded layer");
        let percentiles = percentile_table(&r.items)?;
        let m = largest_index_within(&percentiles, mu);
        let nonneg: Vec<f64> = r.items.iter().copied().filter(|&v| v >= 0.0).collect();
        let coverage = if nonneg.is_empty() {
            0.0
        } else {
            nonneg.iter().filter(|&&v| v <= r.max / 3.0).count() as f64 / nonneg.len() as f64
        };
        let split_half_drift = split_half_drift(&r.items, m, mu);
        result.push(LayerStats {
            layer: l,
            mu,
            percentiles,
            m,
            d_max: r.max,
            observed: r.seen,
            coverage_third_of_max: coverage,
            split_half_drift,
            reservoir: r.items,
        });
    }
    Ok(ActivationStats { layers: result })
}

fn split_half_drift(items: &[f64], m: Option<usize>, mu: f64) -> f64 {
    let (Some(m), true) = (m, items.len() >= 4) else {
        return f64::NAN;
    };
    let even: Vec<f64> = items.iter().step_by(2).copied().collect();
    let odd: Vec<f64> = items.iter().skip(1).step_by(2).copied().collect();
    let (Ok(a), Ok(b)) = (percentile_table(&even), percentile_table(&odd)) else {
        return f64::NAN;
    };
    (0..=m).map(|j| (a[j] - b[j]).abs()).fold(0.0, f64::max) / mu
}
