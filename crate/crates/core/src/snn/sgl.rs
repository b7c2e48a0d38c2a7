//! Surrogate-gradient fine-tuning through the unrolled time steps.
//!
//! Spikes are treated as `S = β·V_th·H(U_temp − V_th)` with the surrogate
//! `∂S/∂U_temp = β·1[0 ≤ U_temp ≤ 2·V_th]` evaluated at the live threshold.
//! Splitting the same surrogate between `U_temp` and `V_th` gives
//! `∂S/∂V_th = β·(H − sg)`. The reset term is detached from the graph apart
//! from its direct `−V_th` dependence.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{surrogate_grad, SpikingNetwork};
use crate::data::Dataset;
use crate::dnn::{
    batch_gradients, scale_gradients, softmax_xent, EpochLog, Gradients, Sgd, TrainConfig, MU_FLOOR,
};
use crate::error::{Error, Result};
use crate::netcore::{
    dropout_mask, maxpool2d_backward, maxpool2d_with_argmax, weighted_backward, weighted_forward, LayerKind,
    Topology,
};
use crate::par::{derive_seed, map_range, Execution};
use crate::tensor::Tensor;

/// Smallest leak fine-tuning may shrink a layer to.
const LEAK_FLOOR: f64 = 1e-3;

enum StepCache {
    Neuron { input: Tensor, u_prev: Tensor, u_temp: Tensor },
    Readout { input: Tensor },
    Pool { input_len: usize, argmax: Vec<usize> },
    Dropout,
}

fn check_data<N: Topology>(snn: &N, data: &Dataset, time_steps: usize) -> Result<()> {
    if time_steps == 0 {
        return Err(Error::arg("the number of time steps must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if data.input_shape() != snn.input_shape() {
        return Err(Error::dim(format!(
            "data shape {:?} does not match network input {:?}",
            data.input_shape(),
            snn.input_shape()
        )));
    }
    Ok(())
}

fn sample_gradients(
    snn: &SpikingNetwork,
    x: &Tensor,
    label: usize,
    time_steps: usize,
    dropout: Option<f64>,
    seed: u64,
) -> Result<Gradients> {
    let layers = snn.layers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<Option<Vec<f64>>> = {
        let shapes = snn.shapes()?;
        layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l.kind {
                LayerKind::Dropout { rate } => {
                    Some(dropout_mask(shapes[i].iter().product(), dropout.unwrap_or(rate), &mut rng))
                }
                _ => None,
            })
            .collect()
    };
    let mut membranes = super::MembraneState::new(snn)?.layers;
    let mut acc: Option<Tensor> = None;
    let mut caches: Vec<Vec<StepCache>> = Vec::with_capacity(time_steps);

    for _ in 0..time_steps {
        let mut h = x.clone();
        let mut step = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::MaxPool2d { window, stride } => {
                    let (out, argmax) = maxpool2d_with_argmax(&h, *window, *stride)?;
                    step.push(StepCache::Pool { input_len: h.len(), argmax });
                    h = out;
                }
                LayerKind::Dropout { .. } => {
                    let mask = masks[i].as_ref().expect("dropout mask");
                    h.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                    step.push(StepCache::Dropout);
                }
                kind => {
                    let drive = weighted_forward(kind, &h)?;
                    match layer.neuron {
                        None => {
                            match acc.as_mut() {
                                Some(a) => a.add_assign(&drive)?,
                                None => acc = Some(drive.clone()),
                            }
                            step.push(StepCache::Readout { input: std::mem::replace(&mut h, drive) });
                        }
                        Some(p) => {
                            let u = membranes[i].as_mut().expect("neuron layer has a membrane");
                            let u_prev = u.clone();
                            let u_temp = Tensor::from_parts(
                                drive.shape().to_vec(),
                                u_prev
                                    .data()
                                    .iter()
                                    .zip(drive.data())
                                    .map(|(&u, &d)| p.leak * u + d + p.delta)
                                    .collect(),
                            );
                            let value = p.spike_value();
                            let mut spikes = Tensor::zeros(drive.shape());
                            for ((s, u), &ut) in spikes.data_mut().iter_mut().zip(u.data_mut()).zip(u_temp.data()) {
                                if ut > p.vth {
                                    *s = value;
                                    *u = ut - p.vth;
                                } else {
                                    *u = ut;
                                }
                            }
                            step.push(StepCache::Neuron {
                                input: std::mem::replace(&mut h, spikes),
                                u_prev,
                                u_temp,
                            });
                        }
                    }
                }
            }
        }
        caches.push(step);
    }

    let acc = acc.expect("readout ran at least once");
    let steps = time_steps as f64;
    let logits: Vec<f64> = acc.data().iter().map(|v| v / steps).collect();
    let (loss, g_logits) = softmax_xent(&logits, label);
    let d_acc: Vec<f64> = g_logits.iter().map(|g| g / steps).collect();

    let mut grads = Gradients::zeros(snn);
    grads.loss = loss;
    grads.correct = usize::from(acc.argmax() == label);
    let mut carry: Vec<Vec<f64>> = membranes
        .iter()
        .map(|m| m.as_ref().map_or_else(Vec::new, |t| vec![0.0; t.len()]))
        .collect();

    for step in caches.iter().rev() {
        let mut grad = d_acc.clone();
        for (i, cache) in step.iter().enumerate().rev() {
            let layer = &layers[i];
            grad = match cache {
                StepCache::Readout { input } => {
                    weighted_backward(&layer.kind, input, &grad, &mut grads.weights[i])?.into_data()
                }
                StepCache::Neuron { input, u_prev, u_temp } => {
                    let p = layer.neuron.expect("neuron layer");
                    let (mut dvth, mut dleak) = (0.0, 0.0);
                    let mut d_temp = vec![0.0; u_temp.len()];
                    for k in 0..d_temp.len() {
                        let ut = u_temp.data()[k];
                        let fired = if ut > p.vth { 1.0 } else { 0.0 };
                        let sg = surrogate_grad(ut, p.vth);
                        let du = carry[i][k];
                        let d = grad[k] * p.beta * sg + du;
                        dvth += grad[k] * p.beta * (fired - sg) - du * fired;
                        dleak += d * u_prev.data()[k];
                        carry[i][k] = d * p.leak;
                        d_temp[k] = d;
                    }
                    grads.thresholds[i] += dvth;
                    grads.leaks[i] += dleak;
                    weighted_backward(&layer.kind, input, &d_temp, &mut grads.weights[i])?.into_data()
                }
                StepCache::Pool { input_len, argmax } => maxpool2d_backward(*input_len, argmax, &grad),
                StepCache::Dropout => {
                    let mask = masks[i].as_ref().expect("dropout mask");
                    grad.iter().zip(mask).map(|(g, m)| g * m).collect()
                }
            };
        }
    }
    Ok(grads)
}

/// Mean softmax cross-entropy of `scores/T` over a data set.
pub fn snn_loss(snn: &SpikingNetwork, data: &Dataset, time_steps: usize, exec: Execution) -> Result<f64> {
    check_data(snn, data, time_steps)?;
    let losses = map_range(exec, data.len(), |i| {
        let out = super::snn_forward(snn, &data.inputs()[i], time_steps)?;
        let logits: Vec<f64> = out.scores.data().iter().map(|v| v / time_steps as f64).collect();
        Ok::<_, Error>(softmax_xent(&logits, data.labels()[i]).0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}

/// Backpropagation through the `T` unrolled steps with the surrogate spike
/// derivative. Weights, thresholds and leaks are updated; thresholds stay at
/// or above [`MU_FLOOR`] and leaks inside `(0, 1]`. Shifts and spike scales
/// are held fixed.
pub fn finetune_sgl(
    snn: &SpikingNetwork,
    data: &Dataset,
    time_steps: usize,
    cfg: &TrainConfig,
) -> Result<(SpikingNetwork, Vec<EpochLog>)> {
    cfg.validate()?;
    check_data(snn, data, time_steps)?;

    let mut net = snn.clone();
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
                sample_gradients(snapshot, &data.inputs()[idx], data.labels()[idx], time_steps, cfg.dropout, seed)
            })?;
            let Some(mut grads) = grads else { continue };
            if !grads.is_finite() {
                return Err(Error::Divergence { epoch, loss: grads.loss });
            }
            loss_sum += grads.loss;
            correct += grads.correct;
            scale_gradients(&mut grads, 1.0 / batch.len() as f64);
            let step = sgd.direction(grads);
            let side_lr = lr * cfg.threshold_lr_scale;
            for (i, layer) in net.layers_mut().iter_mut().enumerate() {
                if let Some(w) = layer.kind.weight_mut() {
                    w.data_mut().iter_mut().zip(&step.weights[i]).for_each(|(w, g)| *w -= lr * g);
                }
                if let Some(p) = layer.neuron.as_mut() {
                    p.vth = (p.vth - side_lr * step.thresholds[i]).max(MU_FLOOR);
                    p.leak = (p.leak - side_lr * step.leaks[i]).clamp(LEAK_FLOOR, 1.0);
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
            thresholds: net.layers().iter().filter_map(|l| l.neuron.map(|p| p.vth)).collect(),
        });
    }
    Ok((net, log))
}
