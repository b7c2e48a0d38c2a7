//! Threshold-ReLU source networks: activation, gradients, SGD training and
//! calibration statistics.

mod stats;

pub use stats::{collect_activation_stats, percentile_table, ActivationStats, LayerStats, StatsConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netcore::{
    dropout_mask, maxpool2d_backward, maxpool2d_with_argmax, weighted_backward, weighted_forward, LayerKind,
    NetworkSpec, Topology,
};
use crate::par::{derive_seed, map_range, Execution};
use crate::tensor::Tensor;

/// Smallest threshold training may shrink a layer to.
pub const MU_FLOOR: f64 = 1e-3;

/// `clip(x, 0, mu)` elementwise.
pub fn threshold_relu(x: &Tensor, mu: f64) -> Tensor {
    x.map(|v| clip(v, mu))
}

#[inline]
pub(crate) fn clip(v: f64, mu: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else if v > mu {
        mu
    } else {
        v
    }
}

/// Partial derivatives of [`threshold_relu`]: `d/dx` is 1 on the open
/// interval `(0, mu)`, `d/dmu` is 1 where `x > mu`; both are 0 elsewhere,
/// including at the kinks.
pub fn threshold_relu_grad(x: &Tensor, mu: f64) -> (Tensor, Tensor) {
    (
        x.map(|v| if v > 0.0 && v < mu { 1.0 } else { 0.0 }),
        x.map(|v| if v > mu { 1.0 } else { 0.0 }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative decay applied at each milestone.
    pub lr_decay: f64,
    /// Fractions of `epochs` at which the learning rate decays.
    pub milestones: Vec<f64>,
    pub batch_size: usize,
    /// Overrides the rate of every dropout layer during training.
    pub dropout: Option<f64>,
    pub momentum: f64,
    /// Scales the learning rate of thresholds (and leaks, for spiking nets).
    pub threshold_lr_scale: f64,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.01,
            lr_decay: 0.1,
            milestones: vec![0.6, 0.8, 0.9],
            batch_size: 32,
            dropout: None,
            momentum: 0.0,
            threshold_lr_scale: 1.0,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr decay {} outside (0, 1]", self.lr_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if let Some(rate) = self.dropout {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout {rate} outside [0, 1)")));
            }
        }
        let ok = self.milestones.iter().all(|m| *m > 0.0 && *m < 1.0)
            && self.milestones.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Config(format!(
                "milestones {:?} must be strictly increasing in (0, 1)",
                self.milestones
            )));
        }
        Ok(())
    }

    /// Step schedule: the base rate times `lr_decay` per milestone passed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub accuracy: f64,
    /// Thresholds after the epoch, one per thresholded layer.
    pub thresholds: Vec<f64>,
}

/// Numerically stable softmax cross-entropy. Returns the loss and the
/// gradient with respect to the logits.
pub(crate) fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Per-layer gradient buffers. Non-weighted layers keep empty buffers.
#[derive(Clone, Debug)]
pub(crate) struct Gradients {
    pub weights: Vec<Vec<f64>>,
    /// Threshold gradient per layer (0 for unthresholded layers).
    pub thresholds: Vec<f64>,
    /// Leak gradient per layer; only spiking networks use it.
    pub leaks: Vec<f64>,
    pub loss: f64,
    pub correct: usize,
}

impl Gradients {
    pub fn zeros<N: Topology>(net: &N) -> Self {
        let n = net.layer_count();
        Self {
            weights: (0..n)
                .map(|i| vec![0.0; net.layer_kind(i).weight().map_or(0, Tensor::len)])
                .collect(),
            thresholds: vec![0.0; n],
            leaks: vec![0.0; n],
            loss: 0.0,
            correct: 0,
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.thresholds
            .iter_mut()
            .zip(&other.thresholds)
            .for_each(|(x, y)| *x += y);
        self.leaks.iter_mut().zip(&other.leaks).for_each(|(x, y)| *x += y);
        self.loss += other.loss;
        self.correct += other.correct;
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.thresholds.iter().all(|v| v.is_finite())
            && self.leaks.iter().all(|v| v.is_finite())
            && self.weights.iter().flatten().all(|v| v.is_finite())
    }
}

enum Cache {
    Weighted { input: Tensor, preact: Tensor },
    Pool { input_len: usize, argmax: Vec<usize> },
    Dropout { mask: Vec<f64> },
}

fn sample_gradients(
    net: &NetworkSpec,
    x: &Tensor,
    label: usize,
    dropout: Option<f64>,
    seed: u64,
) -> Result<Gradients> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut caches = Vec::with_capacity(net.layers().len());
    let mut h = x.clone();
    for layer in net.layers() {
        match &layer.kind {
            LayerKind::MaxPool2d { window, stride } => {
                let (out, argmax) = maxpool2d_with_argmax(&h, *window, *stride)?;
                caches.push(Cache::Pool {
                    input_len: h.len(),
                    argmax,
                });
                h = out;
            }
            LayerKind::Dropout { rate } => {
                let mask = dropout_mask(h.len(), dropout.unwrap_or(*rate), &mut rng);
                h.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                caches.push(Cache::Dropout { mask });
            }
            kind => {
                let z = weighted_forward(kind, &h)?;
                let next = match layer.mu {
                    Some(mu) => threshold_relu(&z, mu),
                    None => z.clone(),
                };
                caches.push(Cache::Weighted {
                    input: std::mem::replace(&mut h, next),
                    preact: z,
                });
            }
        }
    }

    let (loss, mut grad) = softmax_xent(h.data(), label);
    let mut grads = Gradients::zeros(net);
    grads.loss = loss;
    grads.correct = usize::from(h.argmax() == label);

    for (i, (layer, cache)) in net.layers().iter().zip(&caches).enumerate().rev() {
        grad = match cache {
            Cache::Weighted { input, preact } => {
                if let Some(mu) = layer.mu {
                    let mut dmu = 0.0;
                    for (g, &z) in grad.iter_mut().zip(preact.data()) {
                        if z > mu {
                            dmu += *g;
                        }
                        if !(z > 0.0 && z < mu) {
                            *g = 0.0;
                        }
                    }
                    grads.thresholds[i] = dmu;
                }
                weighted_backward(&layer.kind, input, &grad, &mut grads.weights[i])?.into_data()
            }
            Cache::Pool { input_len, argmax } => maxpool2d_backward(*input_len, argmax, &grad),
            Cache::Dropout { mask } => grad.iter().zip(mask).map(|(g, m)| g * m).collect(),
        };
    }
    Ok(grads)
}

/// Sums per-sample gradients of one mini-batch in sample order.
pub(crate) fn batch_gradients<F>(exec: Execution, batch: &[usize], per_sample: F) -> Result<Option<Gradients>>
where
    F: Fn(usize, usize) -> Result<Gradients> + Sync + Send,
{
    let parts = map_range(exec, batch.len(), |k| per_sample(k, batch[k]));
    let mut total: Option<Gradients> = None;
    for part in parts {
        let part = part?;
        match total.as_mut() {
            Some(t) => t.accumulate(&part),
            None => total = Some(part),
        }
    }
    Ok(total)
}

/// SGD state with optional momentum.
pub(crate) struct Sgd {
    momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    /// Returns the step direction for `grads` (already averaged).
    pub fn direction(&mut self, grads: Gradients) -> Gradients {
        if self.momentum == 0.0 {
            return grads;
        }
        match self.velocity.as_mut() {
            None => {
                self.velocity = Some(grads.clone());
                grads
            }
            Some(v) => {
                for (a, b) in v.weights.iter_mut().zip(&grads.weights) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x = self.momentum * *x + y);
                }
                for (x, y) in v.thresholds.iter_mut().zip(&grads.thresholds) {
                    *x = self.momentum * *x + y;
                }
                for (x, y) in v.leaks.iter_mut().zip(&grads.leaks) {
                    *x = self.momentum * *x + y;
                }
                v.clone()
            }
        }
    }
}

pub(crate) fn scale_gradients(g: &mut Gradients, factor: f64) {
    g.weights.iter_mut().flatten().for_each(|v| *v *= factor);
    g.thresholds.iter_mut().for_each(|v| *v *= factor);
    g.leaks.iter_mut().for_each(|v| *v *= factor);
}

/// Mini-batch SGD on softmax cross-entropy with the configured step schedule.
/// Thresholds are trained jointly with the weights and clamped at
/// [`MU_FLOOR`].
pub fn train_dnn(net: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(NetworkSpec, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if data.input_shape() != net.input_shape() {
        return Err(Error::dim(format!(
            "data shape {:?} does not match network input {:?}",
            data.input_shape(),
            net.input_shape()
        )));
    }
    let outputs: usize = net.output_shape()?.iter().product();
    if data.classes() > outputs {
        return Err(Error::dim(format!(
            "{} classes but only {outputs} outputs",
            data.classes()
        )));
    }

    let mut net = net.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let mut sgd = Sgd::new(cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = &net;
            let grads = batch_gradients(cfg.execution, batch, |k, idx| {
                let seed = derive_seed(cfg.seed, &[1, epoch as u64, b as u64, k as u64]);
                sample_gradients(snapshot, &data.inputs()[idx], data.labels()[idx], cfg.dropout, seed)
            })?;
            let Some(mut grads) = grads else { continue };
            if !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: grads.loss,
                });
            }
            loss_sum += grads.loss;
            correct += grads.correct;
            scale_gradients(&mut grads, 1.0 / batch.len() as f64);
            let step = sgd.direction(grads);
            for (i, layer) in net.layers_mut().iter_mut().enumerate() {
                if let Some(w) = layer.kind.weight_mut() {
                    w.data_mut()
                        .iter_mut()
                        .zip(&step.weights[i])
                        .for_each(|(w, g)| *w -= lr * g);
                }
                if let Some(mu) = layer.mu.as_mut() {
                    *mu = (*mu - lr * cfg.threshold_lr_scale * step.thresholds[i]).max(MU_FLOOR);
                }
            }
        }
        let loss = loss_sum / data.len() as f64;
        if !loss.is_finite() || net.layers().iter().filter_map(|l| l.kind.weight()).any(|w| !w.is_finite()) {
            return Err(Error::Divergence { epoch, loss });
        }
        log.push(EpochLog {
            epoch,
            learning_rate: lr,
            loss,
            accuracy: correct as f64 / data.len() as f64,
            thresholds: net.layers().iter().filter_map(|l| l.mu).collect(),
        });
    }
    Ok((net, log))
}

/// Inference-mode classification accuracy.
pub fn evaluate_dnn(net: &NetworkSpec, data: &Dataset, exec: Execution) -> Result<f64> {
    let hits = map_range(exec, data.len(), |i| {
        crate::netcore::predict(net, &data.inputs()[i]).map(|p| usize::from(p == data.labels()[i]))
    });
    let mut correct = 0;
    for h in hits {
        correct += h?;
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::mlp;
    use crate::data::Synthetic;
    use crate::netcore::{forward, Layer, Mode};
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn threshold_relu_cases() {
        let y = threshold_relu(&t(&[-1.0, 0.5, 2.0]), 1.0);
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn threshold_relu_grad_cases() {
        let (dx, dmu) = threshold_relu_grad(&t(&[0.5, 2.0, -0.3, 0.0, 1.0]), 1.0);
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(dmu.data(), &[0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn threshold_relu_idempotent_and_monotone(x in -5.0f64..5.0, dx in 0.0f64..2.0, mu in 0.01f64..4.0, dmu in 0.0f64..2.0) {
            let once = clip(x, mu);
            prop_assert_eq!(clip(once, mu), once);
            prop_assert!(clip(x + dx, mu) >= once);
            prop_assert!(clip(x, mu + dmu) >= once);
        }
    }

    #[test]
    fn lr_schedule_steps_at_milestones() {
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(5), 0.01);
        assert!((cfg.lr_at(6) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(8) - 1e-4).abs() < 1e-15);
        assert!((cfg.lr_at(9) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            milestones: vec![0.8, 0.6],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn softmax_xent_gradient_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.0];
        let (_, g) = softmax_xent(&logits, 1);
        for k in 0..3 {
            let h = 1e-6;
            let mut p = logits;
            p[k] += h;
            let mut m = logits;
            m[k] -= h;
            let fd = (softmax_xent(&p, 1).0 - softmax_xent(&m, 1).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7);
        }
    }

    fn loss_of(net: &NetworkSpec, x: &Tensor, label: usize) -> f64 {
        let out = forward(net, x, Mode::Infer).unwrap();
        softmax_xent(out.output.data(), label).0
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = crate::arch::build_network(
            &[1, 4, 4],
            &[
                crate::arch::LayerDesc::Conv2d { channels: 2, kernel: 3, stride: 1, padding: 1 },
                crate::arch::LayerDesc::MaxPool2d { window: 2, stride: None },
                crate::arch::LayerDesc::Dense { units: 5 },
            ],
            3,
            4,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect()).unwrap();
        let g = sample_gradients(&net, &x, 2, None, 0).unwrap();
        let h = 1e-6;
        for li in net.weighted_layers() {
            for wi in [0usize, 3, 7] {
                let mut p = net.clone();
                p.layers_mut()[li].kind.weight_mut().unwrap().data_mut()[wi] += h;
                let mut m = net.clone();
                m.layers_mut()[li].kind.weight_mut().unwrap().data_mut()[wi] -= h;
                let fd = (loss_of(&p, &x, 2) - loss_of(&m, &x, 2)) / (2.0 * h);
                assert!((fd - g.weights[li][wi]).abs() < 1e-5, "layer {li} w{wi}: fd {fd} vs {}", g.weights[li][wi]);
            }
        }
    }

    #[test]
    fn threshold_gradient_matches_finite_differences() {
        let w1 = Tensor::matrix(&[vec![2.0, 0.0], vec![0.5, 0.5], vec![-1.0, 3.0]]).unwrap();
        let w2 = Tensor::matrix(&[vec![1.0, -1.0, 0.5], vec![0.2, 0.3, -0.7]]).unwrap();
        let net = NetworkSpec::new(vec![2], vec![Layer::dense(w1, Some(0.8)), Layer::dense(w2, None)]).unwrap();
        let x = t(&[0.9, 0.4]);
        let g = sample_gradients(&net, &x, 0, None, 0).unwrap();
        let h = 1e-6;
        let mut p = net.clone();
        *p.layers_mut()[0].mu.as_mut().unwrap() += h;
        let mut m = net.clone();
        *m.layers_mut()[0].mu.as_mut().unwrap() -= h;
        let fd = (loss_of(&p, &x, 0) - loss_of(&m, &x, 0)) / (2.0 * h);
        assert!((fd - g.thresholds[0]).abs() < 1e-6);
        assert!(g.thresholds[0] != 0.0);
    }

    fn toy() -> Dataset {
        Synthetic::Blobs {
            classes: 4,
            dim: 4,
            samples_per_class: 4,
            separation: 1.5,
            spread: 0.2,
        }
        .generate(3)
        .unwrap()
    }

    #[test]
    fn overfits_sixteen_samples() {
        let data = toy();
        assert_eq!(data.len(), 16);
        let net = mlp(4, &[32, 32], 4, None, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 0.05,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (trained, log) = train_dnn(&net, &data, &cfg).unwrap();
        assert_eq!(evaluate_dnn(&trained, &data, Execution::Sequential).unwrap(), 1.0);
        // trailing-window loss is non-increasing
        let w = 20;
        let avg = |s: usize| log[s..s + w].iter().map(|e| e.loss).sum::<f64>() / w as f64;
        assert!(avg(log.len() - w) <= avg(0));
        assert!(trained.layers().iter().filter_map(|l| l.mu).all(|m| m >= MU_FLOOR));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let data = toy();
        let net = mlp(4, &[8], 4, Some(0.2), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            momentum: 0.9,
            ..TrainConfig::default()
        };
        let (trained, _) = train_dnn(&net, &data, &cfg).unwrap();
        assert_eq!(trained, net);
    }

    #[test]
    fn training_is_deterministic_across_strategies() {
        let data = toy();
        let net = mlp(4, &[8], 4, Some(0.2), 1).unwrap();
        let mut cfg = TrainConfig {
            epochs: 5,
            batch_size: 5,
            momentum: 0.5,
            ..TrainConfig::default()
        };
        let (a, _) = train_dnn(&net, &data, &cfg).unwrap();
        let (b, _) = train_dnn(&net, &data, &cfg).unwrap();
        cfg.execution = Execution::Sequential;
        let (c, _) = train_dnn(&net, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = toy();
        let net = mlp(4, &[8], 4, None, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e308,
            ..TrainConfig::default()
        };
        assert!(matches!(train_dnn(&net, &data, &cfg), Err(Error::Divergence { .. })));
    }
}
