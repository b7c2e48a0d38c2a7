//! Plug-in estimators of the gap between a clipped-linear activation and
//! its spiking staircase, and a teacher-forced measurement of that gap in
//! real networks.
//!
//! With `d` the source pre-activation and `s` the spiking one:
//!
//! - `K(μ) = E[d·1(0 ≤ d ≤ μ)]/μ`
//! - `g_i(T, μ)` is the mass of `s` in `[(i−½)μ/T, (i+½)μ/T)` for `1 ≤ i < T`
//! - `h(T, μ) = Σ (i/T)·g_i + mass of s in [T′, μ]` with `T′ = (T−½)μ/T`,
//!   the staircase expectation of a neuron whose drive is shifted by half a
//!   step (round to nearest)
//! - `h′(T, θ)` is the expectation of the unshifted staircase
//!   `⌈Ts/θ⌉−1` over `0 ≤ s ≤ θ`, in units of `θ`
//!
//! Every estimate is a mean of per-sample scores and carries a bootstrap
//! standard error.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dnn::{clip, threshold_relu};
use crate::error::{Error, Result};
use crate::netcore::{maxpool2d_forward, weighted_forward, LayerKind, NetworkSpec, Topology};
use crate::par::{derive_seed, map_range, Execution};
use crate::snn::{closed_form_activation, SpikingNetwork};
use crate::tensor::Tensor;

/// Smallest sample on which any estimator runs.
pub const MIN_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DistributionTag {
    Uniform { mu: f64 },
    Exponential { rate: f64 },
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDistribution {
    samples: Vec<f64>,
    pub tag: DistributionTag,
}

impl EmpiricalDistribution {
    pub fn new(samples: Vec<f64>, tag: DistributionTag) -> Result<Self> {
        if let Some(v) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::Statistics(format!("non-finite sample {v}")));
        }
        Ok(Self { samples, tag })
    }

    /// `n` draws from `Uniform[0, mu]`.
    pub fn uniform(mu: f64, n: usize, seed: u64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::arg(format!("uniform ceiling {mu} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n).map(|_| rng.gen::<f64>() * mu).collect();
        Self::new(samples, DistributionTag::Uniform { mu })
    }

    /// `n` draws from the exponential distribution with the given rate.
    pub fn exponential(rate: f64, n: usize, seed: u64) -> Result<Self> {
        let exp = Exp::new(rate).map_err(|e| Error::arg(format!("exponential rate {rate}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n).map(|_| exp.sample(&mut rng)).collect();
        Self::new(samples, DistributionTag::Exponential { rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn checked(&self) -> Result<&[f64]> {
        if self.samples.len() < MIN_SAMPLES {
            return Err(Error::Statistics(format!(
                "{} samples is below the minimum of {MIN_SAMPLES}",
                self.samples.len()
            )));
        }
        Ok(&self.samples)
    }

    /// Share of samples above `mu`, which every estimator here ignores.
    pub fn mass_above(&self, mu: f64) -> f64 {
        self.samples.iter().filter(|&&v| v > mu).count() as f64 / self.samples.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bootstrap {
    pub resamples: usize,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for Bootstrap {
    fn default() -> Self {
        Self {
            resamples: 200,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// A point estimate with its bootstrap standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    /// Normal-approximation 95% interval.
    pub fn ci95(&self) -> (f64, f64) {
        (self.value - 1.96 * self.std_error, self.value + 1.96 * self.std_error)
    }

    /// Whether `|value − target|` is within `k` standard errors.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Uniform index below `n` by 64-bit multiply-shift; the bias is below
/// `n / 2^64`.
#[inline]
fn draw_index(rng: &mut Xoshiro256PlusPlus, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Standard deviation of `combine(resampled means)` over bootstrap draws.
/// Each group is resampled independently with replacement.
fn bootstrap_se(groups: &[&[f64]], combine: impl Fn(&[f64]) -> f64 + Sync, cfg: &Bootstrap) -> f64 {
    if cfg.resamples < 2 {
        return f64::NAN;
    }
    let stats = map_range(cfg.execution, cfg.resamples, |r| {
        let means: Vec<f64> = groups
            .iter()
            .enumerate()
            .map(|(g, xs)| {
                let mut rng = Xoshiro256PlusPlus::seed_from_u64(derive_seed(cfg.seed, &[r as u64, g as u64]));
                let n = xs.len();
                (0..n).map(|_| xs[draw_index(&mut rng, n)]).sum::<f64>() / n as f64
            })
            .collect();
        combine(&means)
    });
    let m = mean(&stats);
    (stats.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (stats.len() - 1) as f64).sqrt()
}

fn estimate_mean(scores: &[f64], cfg: &Bootstrap) -> Estimate {
    Estimate {
        value: mean(scores),
        std_error: bootstrap_se(&[scores], |m| m[0], cfg),
        samples: scores.len(),
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} {v} must be positive")))
    }
}

fn check_steps(t: usize) -> Result<()> {
    if t == 0 {
        Err(Error::arg("the number of time steps must be at least 1"))
    } else {
        Ok(())
    }
}

/// `K(μ)`: the clipped-linear expectation over `[0, μ]` in units of `μ`.
pub fn compute_k(dist_d: &EmpiricalDistribution, mu: f64, cfg: &Bootstrap) -> Result<Estimate> {
    check_positive("threshold", mu)?;
    let d = dist_d.checked()?;
    if !d.iter().any(|&v| (0.0..=mu).contains(&v)) {
        return Err(Error::Statistics(format!("no samples in [0, {mu}]")));
    }
    let scores: Vec<f64> = d
        .iter()
        .map(|&v| if (0.0..=mu).contains(&v) { v / mu } else { 0.0 })
        .collect();
    Ok(estimate_mean(&scores, cfg))
}

/// Lower edge `(i − ½)·μ/T` of the `i`-th half-shifted bin; `i = T` gives `T′`.
fn shifted_edge(i: usize, t: usize, mu: f64) -> f64 {
    (i as f64 - 0.5) * mu / t as f64
}

/// Half-shifted bin of `s`: `i` in `1..T` for `[(i−½)μ/T, (i+½)μ/T)`, `T`
/// for `[T′, μ]`, `None` below `μ/2T` or outside `[0, μ]`.
fn shifted_bin(s: f64, t: usize, mu: f64) -> Option<usize> {
    if !(s >= shifted_edge(1, t, mu) && s <= mu) {
        return None;
    }
    let mut i = ((s * t as f64 / mu + 0.5).floor() as usize).clamp(1, t);
    while i > 1 && s < shifted_edge(i, t, mu) {
        i -= 1;
    }
    while i < t && s >= shifted_edge(i + 1, t, mu) {
        i += 1;
    }
    Some(i)
}

/// `T′ = (T − ½)·μ/T`, the lower edge of the saturating bin.
pub fn t_prime(t: usize, mu: f64) -> f64 {
    shifted_edge(t, t, mu)
}

/// `g_i(T, μ)`: mass of `s` in `[(i−½)μ/T, (i+½)μ/T)`, for `1 ≤ i < T`.
pub fn compute_g(dist_s: &EmpiricalDistribution, i: usize, t: usize, mu: f64, cfg: &Bootstrap) -> Result<Estimate> {
    check_positive("threshold", mu)?;
    if i == 0 || i >= t {
        return Err(Error::arg(format!("bin index {i} outside 1..{t}")));
    }
    let s = dist_s.checked()?;
    let scores: Vec<f64> = s
        .iter()
        .map(|&v| if shifted_bin(v, t, mu) == Some(i) { 1.0 } else { 0.0 })
        .collect();
    Ok(estimate_mean(&scores, cfg))
}

fn h_score(s: f64, t: usize, theta: f64, biased: bool) -> f64 {
    if biased {
        shifted_bin(s, t, theta).map_or(0.0, |i| i as f64 / t as f64)
    } else if (0.0..=theta).contains(&s) {
        closed_form_activation(s, theta, t, 0.0, 1.0) / theta
    } else {
        0.0
    }
}

/// `h(T, θ)` when `biased`, otherwise `h′(T, θ)`; see the module notes.
pub fn compute_h(dist_s: &EmpiricalDistribution, t: usize, theta: f64, biased: bool, cfg: &Bootstrap) -> Result<Estimate> {
    check_steps(t)?;
    check_positive("threshold", theta)?;
    let s = dist_s.checked()?;
    let scores: Vec<f64> = s.iter().map(|&v| h_score(v, t, theta, biased)).collect();
    Ok(estimate_mean(&scores, cfg))
}

/// `μ(K − h)`.
pub fn predicted_delta(k: f64, h: f64, mu: f64) -> f64 {
    mu * (k - h)
}

/// Terms of the scaled-staircase gap with `θ = αμ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaAlphaBeta {
    pub k_theta: Estimate,
    pub h_prime: Estimate,
    /// `E[d·1(θ < d ≤ μ)]`.
    pub upper_mean: Estimate,
    /// Mass of `s` in `(θ, μ]`.
    pub upper_mass: Estimate,
    /// `θ(K(θ) − βh′) + E[d·1(θ<d≤μ)] − θβ·P(θ < s ≤ μ)`.
    pub delta: Estimate,
}

/// Plug-in estimate of the gap between the clipped-linear activation with
/// ceiling `μ` and the staircase with threshold `αμ` and spike value `βαμ`,
/// restricted to `[0, μ]`.
pub fn predicted_delta_alpha_beta(
    dist_d: &EmpiricalDistribution,
    dist_s: &EmpiricalDistribution,
    mu: f64,
    alpha: f64,
    beta: f64,
    t: usize,
    cfg: &Bootstrap,
) -> Result<DeltaAlphaBeta> {
    check_steps(t)?;
    check_positive("threshold", mu)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::arg(format!("alpha {alpha} outside (0, 1]")));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::arg(format!("beta {beta} must be non-negative")));
    }
    let theta = alpha * mu;
    let (d, s) = (dist_d.checked()?, dist_s.checked()?);
    let k_theta = compute_k(dist_d, theta, cfg)?;
    let h_prime = compute_h(dist_s, t, theta, false, cfg)?;
    let upper = |v: f64| v > theta && v <= mu;
    let upper_d: Vec<f64> = d.iter().map(|&v| if upper(v) { v } else { 0.0 }).collect();
    let upper_s: Vec<f64> = s.iter().map(|&v| if upper(v) { 1.0 } else { 0.0 }).collect();
    let upper_mean = estimate_mean(&upper_d, cfg);
    let upper_mass = estimate_mean(&upper_s, cfg);
    let value = theta * (k_theta.value - beta * h_prime.value) + upper_mean.value - theta * beta * upper_mass.value;

    // per-sample contributions of each side, for the joint standard error
    let u: Vec<f64> = d.iter().map(|&v| if (0.0..=mu).contains(&v) { v } else { 0.0 }).collect();
    let w: Vec<f64> = s
        .iter()
        .map(|&v| theta * beta * (h_score(v, t, theta, false) + if upper(v) { 1.0 } else { 0.0 }))
        .collect();
    let std_error = if std::ptr::eq(d, s) || d == s {
        let diff: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a - b).collect();
        bootstrap_se(&[&diff], |m| m[0], cfg)
    } else {
        bootstrap_se(&[&u, &w], |m| m[0] - m[1], cfg)
    };
    Ok(DeltaAlphaBeta {
        k_theta,
        h_prime,
        upper_mean,
        upper_mass,
        delta: Estimate {
            value,
            std_error,
            samples: d.len().min(s.len()),
        },
    })
}

/// Staircase used by [`direct_delta`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Staircase {
    pub vth: f64,
    pub beta: f64,
    pub shift: f64,
    pub time_steps: usize,
}

impl Staircase {
    /// The shift-by-half-a-step staircase that `h(T, μ)` describes.
    pub fn bias_shifted(mu: f64, time_steps: usize) -> Self {
        Self {
            vth: mu,
            beta: 1.0,
            shift: mu / (2.0 * time_steps as f64),
            time_steps,
        }
    }

    pub fn scaled(mu: f64, alpha: f64, beta: f64, time_steps: usize) -> Self {
        Self {
            vth: alpha * mu,
            beta,
            shift: 0.0,
            time_steps,
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        closed_form_activation(s, self.vth, self.time_steps, self.shift, self.beta)
    }
}

/// `E[clip(d, 0, μ)] − E[staircase(s)]`, each over `[0, μ]`, by direct
/// averaging. Paired when both sides share one sample.
pub fn direct_delta(
    dist_d: &EmpiricalDistribution,
    dist_s: &EmpiricalDistribution,
    mu: f64,
    stair: &Staircase,
    cfg: &Bootstrap,
) -> Result<Estimate> {
    check_positive("threshold", mu)?;
    check_steps(stair.time_steps)?;
    check_positive("spiking threshold", stair.vth)?;
    let (d, s) = (dist_d.checked()?, dist_s.checked()?);
    let inside = |v: f64| (0.0..=mu).contains(&v);
    let u: Vec<f64> = d.iter().map(|&v| if inside(v) { clip(v, mu) } else { 0.0 }).collect();
    let w: Vec<f64> = s.iter().map(|&v| if inside(v) { stair.eval(v) } else { 0.0 }).collect();
    if std::ptr::eq(d, s) || d == s {
        let diff: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a - b).collect();
        Ok(estimate_mean(&diff, cfg))
    } else {
        Ok(Estimate {
            value: mean(&u) - mean(&w),
            std_error: bootstrap_se(&[&u, &w], |m| m[0] - m[1], cfg),
            samples: d.len().min(s.len()),
        })
    }
}

/// All gap quantities for one distribution, threshold and step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub layer: Option<usize>,
    pub time_steps: usize,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k: Estimate,
    /// `g_1 … g_{T−1}`.
    pub g: Vec<Estimate>,
    pub h: Estimate,
    /// `h′(T, αμ)`.
    pub h_prime: Estimate,
    /// `(T − ½)·μ/T`.
    pub t_prime: f64,
    /// `μ(K − h)`.
    pub delta_predicted: f64,
    /// Direct average gap against the half-step-shifted staircase.
    pub delta_empirical: Estimate,
    pub delta_alpha_beta: Estimate,
    /// Teacher-forced network measurement, when networks are available.
    pub delta_simulated: Option<DeltaMeasurement>,
    /// Share of samples above `μ`, excluded from every term above.
    pub mass_above_mu: f64,
    /// `Σ g_i + mass below μ/2T + mass in [T′, μ] − mass in [0, μ]`.
    pub partition_residual: f64,
}

impl ErrorReport {
    /// Flat `(name, value)` pairs for tabular export.
    pub fn flatten(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("time_steps".to_string(), self.time_steps as f64),
            ("mu".into(), self.mu),
            ("alpha".into(), self.alpha),
            ("beta".into(), self.beta),
        ];
        let mut est = |name: &str, e: &Estimate| {
            rows.push((name.to_string(), e.value));
            rows.push((format!("{name}_se"), e.std_error));
        };
        est("k", &self.k);
        for (i, g) in self.g.iter().enumerate() {
            est(&format!("g_{}", i + 1), g);
        }
        est("h", &self.h);
        est("h_prime", &self.h_prime);
        est("delta_empirical", &self.delta_empirical);
        est("delta_alpha_beta", &self.delta_alpha_beta);
        rows.push(("t_prime".into(), self.t_prime));
        rows.push(("delta_predicted".into(), self.delta_predicted));
        if let Some(m) = &self.delta_simulated {
            rows.push(("delta_simulated".into(), m.mean));
            rows.push(("delta_simulated_se".into(), m.std_error));
        }
        rows.push(("mass_above_mu".into(), self.mass_above_mu));
        rows.push(("partition_residual".into(), self.partition_residual));
        rows
    }
}

/// Builds an [`ErrorReport`] treating `dist` as both the source and the
/// spiking pre-activation distribution.
pub fn error_report(
    dist: &EmpiricalDistribution,
    mu: f64,
    t: usize,
    alpha: f64,
    beta: f64,
    cfg: &Bootstrap,
) -> Result<ErrorReport> {
    check_steps(t)?;
    let k = compute_k(dist, mu, cfg)?;
    let g = (1..t).map(|i| compute_g(dist, i, t, mu, cfg)).collect::<Result<Vec<_>>>()?;
    let h = compute_h(dist, t, mu, true, cfg)?;
    let dab = predicted_delta_alpha_beta(dist, dist, mu, alpha, beta, t, cfg)?;
    let delta_empirical = direct_delta(dist, dist, mu, &Staircase::bias_shifted(mu, t), cfg)?;

    let s = dist.samples();
    let n = s.len() as f64;
    let frac = |f: &dyn Fn(f64) -> bool| s.iter().filter(|&&v| f(v)).count() as f64 / n;
    let below = frac(&|v| v >= 0.0 && v < shifted_edge(1, t, mu));
    let tail = frac(&|v| v >= t_prime(t, mu) && v <= mu);
    let inside = frac(&|v| (0.0..=mu).contains(&v));
    let partition_residual = g.iter().map(|e| e.value).sum::<f64>() + below + tail - inside;

    Ok(ErrorReport {
        layer: None,
        time_steps: t,
        mu,
        alpha,
        beta,
        k,
        g,
        h,
        h_prime: dab.h_prime,
        t_prime: t_prime(t, mu),
        delta_predicted: predicted_delta(k.value, h.value, mu),
        delta_empirical,
        delta_alpha_beta: dab.delta,
        delta_simulated: None,
        mass_above_mu: dist.mass_above(mu),
        partition_residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaMeasurement {
    pub layer: usize,
    pub time_steps: usize,
    /// Mean over inputs and neurons of source output minus spiking average.
    pub mean: f64,
    /// Standard error over inputs of the per-input mean.
    pub std_error: f64,
    pub inputs: usize,
    pub neurons: usize,
}

/// Input of layer `layer` in inference mode.
fn layer_input(net: &NetworkSpec, x: &Tensor, layer: usize) -> Result<Tensor> {
    let mut h = x.clone();
    for l in &net.layers()[..layer] {
        h = match &l.kind {
            LayerKind::MaxPool2d { window, stride } => maxpool2d_forward(&h, *window, *stride)?,
            LayerKind::Dropout { .. } => h,
            kind => {
                let z = weighted_forward(kind, &h)?;
                match l.mu {
                    Some(mu) => threshold_relu(&z, mu),
                    None => z,
                }
            }
        };
    }
    Ok(h)
}

/// Feeds the source network's input of `layer` into both the source layer
/// and its spiking counterpart, runs the spiking layer for `t` steps under
/// that constant drive, and averages the output gap.
pub fn estimate_delta_simulated(
    dnn: &NetworkSpec,
    snn: &SpikingNetwork,
    data: &Dataset,
    layer: usize,
    t: usize,
    exec: Execution,
) -> Result<DeltaMeasurement> {
    check_steps(t)?;
    if data.is_empty() {
        return Err(Error::arg("no inputs to measure on"));
    }
    let (Some(src), Some(dst)) = (dnn.layers().get(layer), snn.layers().get(layer)) else {
        return Err(Error::arg(format!("layer {layer} is out of range")));
    };
    let (Some(mu), Some(p)) = (src.mu, dst.neuron) else {
        return Err(Error::arg(format!("layer {layer} is not a thresholded/spiking layer pair")));
    };
    if dnn.shapes()? != snn.shapes()? {
        return Err(Error::dim("source and spiking networks differ in shape"));
    }
    let per_input = map_range(exec, data.len(), |i| {
        let h = layer_input(dnn, &data.inputs()[i], layer)?;
        let z = weighted_forward(&src.kind, &h)?;
        let drive = weighted_forward(&dst.kind, &h)?;
        let mut u = vec![0.0; drive.len()];
        let mut counts = vec![0u32; drive.len()];
        for _ in 0..t {
            for ((u, c), &d) in u.iter_mut().zip(counts.iter_mut()).zip(drive.data()) {
                let temp = p.leak * *u + d + p.delta;
                if temp > p.vth {
                    *u = temp - p.vth;
                    *c += 1;
                } else {
                    *u = temp;
                }
            }
        }
        let value = p.spike_value();
        let gap: f64 = z
            .data()
            .iter()
            .zip(&counts)
            .map(|(&z, &c)| clip(z, mu) - value * c as f64 / t as f64)
            .sum();
        Ok::<_, Error>((gap / z.len() as f64, z.len()))
    });
    let mut means = Vec::with_capacity(data.len());
    let mut neurons = 0;
    for r in per_input {
        let (m, n) = r?;
        means.push(m);
        neurons = n;
    }
    let n = means.len() as f64;
    let m = mean(&means);
    let var = if means.len() > 1 {
        means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(DeltaMeasurement {
        layer,
        time_steps: t,
        mean: m,
        std_error: (var / n).sqrt(),
        inputs: means.len(),
        neurons,
    })
}
