//! Time-stepped integrate-and-fire simulation with direct input encoding.
//!
//! The analog input drives the first weighted layer at every step. Hidden
//! weighted layers integrate, fire when the membrane strictly exceeds `V_th`
//! and reset by subtracting `V_th`; a fired spike carries the value `β·V_th`.
//! The readout layer never fires: its membrane accumulates over all steps
//! and the final potential is the class score.

mod sgl;
mod trace;

pub use sgl::{finetune_sgl, snn_loss};
pub use trace::{LayerTrace, SpikeBitmap, SpikeTrace};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netcore::{dense_dims, maxpool2d_forward, weighted_forward, LayerKind, PoolGeometry, Topology};
use crate::par::{map_range, Execution};
use crate::tensor::Tensor;

/// Per-neuron-layer constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronParams {
    pub vth: f64,
    /// Value of an emitted spike relative to `vth`.
    pub beta: f64,
    pub leak: f64,
    /// Constant added to the drive at every step.
    #[serde(default)]
    pub delta: f64,
}

impl NeuronParams {
    pub fn new(vth: f64) -> Self {
        Self {
            vth,
            beta: 1.0,
            leak: 1.0,
            delta: 0.0,
        }
    }

    /// Value carried by one spike.
    pub fn spike_value(&self) -> f64 {
        self.beta * self.vth
    }

    fn validate(&self, layer: usize) -> Result<()> {
        let p = self;
        if !(p.vth > 0.0 && p.vth.is_finite()) {
            return Err(Error::arg(format!("layer {layer}: threshold {} must be positive", p.vth)));
        }
        // β = 0 is tolerated: the scaling search may pick it on degenerate tables.
        if !(p.beta >= 0.0 && p.beta.is_finite()) {
            return Err(Error::arg(format!("layer {layer}: beta {} must be non-negative", p.beta)));
        }
        if !(p.leak > 0.0 && p.leak <= 1.0) {
            return Err(Error::arg(format!("layer {layer}: leak {} outside (0, 1]", p.leak)));
        }
        if !(p.delta >= 0.0 && p.delta.is_finite()) {
            return Err(Error::arg(format!("layer {layer}: shift {} must be non-negative", p.delta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikingLayer {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub neuron: Option<NeuronParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpiking")]
pub struct SpikingNetwork {
    input_shape: Vec<usize>,
    layers: Vec<SpikingLayer>,
}

#[derive(Deserialize)]
struct RawSpiking {
    input_shape: Vec<usize>,
    layers: Vec<SpikingLayer>,
}

impl TryFrom<RawSpiking> for SpikingNetwork {
    type Error = Error;

    fn try_from(raw: RawSpiking) -> Result<Self> {
        SpikingNetwork::new(raw.input_shape, raw.layers)
    }
}

impl Topology for SpikingNetwork {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn layer_kind(&self, index: usize) -> &LayerKind {
        &self.layers[index].kind
    }
}

impl SpikingNetwork {
    pub fn new(input_shape: Vec<usize>, layers: Vec<SpikingLayer>) -> Result<Self> {
        let net = Self { input_shape, layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::dim(format!("invalid input shape {:?}", self.input_shape)));
        }
        self.shapes()?;
        let last = self.layers.last().ok_or_else(|| Error::arg("network has no layers"))?;
        if !last.kind.is_weighted() || last.neuron.is_some() {
            return Err(Error::arg("the final layer must be a non-spiking weighted readout"));
        }
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            match (layer.kind.is_weighted(), &layer.neuron) {
                (true, Some(p)) => p.validate(i)?,
                (true, None) if i + 1 != n => {
                    return Err(Error::arg(format!("hidden weighted layer {i} has no neuron parameters")));
                }
                (false, Some(_)) => {
                    return Err(Error::arg(format!("layer {i} ({}) cannot spike", layer.kind.name())));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[SpikingLayer] {
        &self.layers
    }

    /// Mutable access for training and rescaling. Shapes must not change and
    /// callers should re-run [`SpikingNetwork::validate`] afterwards.
    pub fn layers_mut(&mut self) -> &mut [SpikingLayer] {
        &mut self.layers
    }

    /// Indices of layers with integrate-and-fire neurons.
    pub fn neuron_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].neuron.is_some())
            .collect()
    }

    /// Whether the input of each layer is a spike train (as opposed to the
    /// analog input or something computed only from it).
    pub fn spiking_inputs(&self) -> Vec<bool> {
        let mut spiking = false;
        self.layers
            .iter()
            .map(|l| {
                let input = spiking;
                spiking |= l.neuron.is_some();
                input
            })
            .collect()
    }
}

/// Membrane potential of every neuron layer (`None` elsewhere) at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MembraneState {
    pub layers: Vec<Option<Tensor>>,
    pub t: usize,
}

impl MembraneState {
    /// All potentials at zero, `t = 0`.
    pub fn new(snn: &SpikingNetwork) -> Result<Self> {
        let shapes = snn.shapes()?;
        Ok(Self {
            layers: snn
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.neuron.map(|_| Tensor::zeros(&shapes[i + 1])))
                .collect(),
            t: 0,
        })
    }
}

/// One integrate-and-fire update in place. Calls `fired(i)` for every
/// neuron that spikes.
#[inline]
fn integrate(u: &mut [f64], drive: &[f64], vth: f64, leak: f64, mut fired: impl FnMut(usize)) {
    for (i, (u, &d)) in u.iter_mut().zip(drive).enumerate() {
        let temp = leak * *u + d;
        if temp > vth {
            *u = temp - vth;
            fired(i);
        } else {
            *u = temp;
        }
    }
}

/// `U_temp = leak·U + drive`; a spike of value `vth` where `U_temp > vth`,
/// followed by a soft reset `U' = U_temp − vth`. Returns `(spikes, U')`.
pub fn if_step(u: &Tensor, drive: &Tensor, vth: f64, leak: f64) -> Result<(Tensor, Tensor)> {
    scaled_if_step(u, drive, vth, 1.0, leak)
}

/// As [`if_step`], but each spike carries `beta·vth`. Firing and reset are
/// unaffected by `beta`.
pub fn scaled_if_step(u: &Tensor, drive: &Tensor, vth: f64, beta: f64, leak: f64) -> Result<(Tensor, Tensor)> {
    if u.shape() != drive.shape() {
        return Err(Error::dim(format!(
            "membrane {:?} and drive {:?} differ in shape",
            u.shape(),
            drive.shape()
        )));
    }
    let mut next = u.clone();
    let mut spikes = Tensor::zeros(u.shape());
    let value = beta * vth;
    let s = spikes.data_mut();
    integrate(next.data_mut(), drive.data(), vth, leak, |i| s[i] = value);
    Ok((spikes, next))
}

/// Time-averaged output of a neuron under a constant drive `z` for `t`
/// steps starting from rest with no leak: `β·vth/T · k` where `k` counts the
/// staircase steps strictly below `T(z+δ)/vth`, clipped to `[0, T]`. Away
/// from step boundaries this is `floor(T(z+δ)/vth)`; on a boundary the
/// membrane only reaches `vth` and does not fire.
pub fn closed_form_activation(z: f64, vth: f64, t: usize, delta: f64, beta: f64) -> f64 {
    let steps = t as f64;
    let x = steps * (z + delta) / vth;
    let count = (x.ceil() - 1.0).clamp(0.0, steps);
    beta * vth * count / steps
}

/// Straight-through window: 1 for `0 ≤ s ≤ 2·alpha_mu`, else 0.
pub fn surrogate_grad(s: f64, alpha_mu: f64) -> f64 {
    if (0.0..=2.0 * alpha_mu).contains(&s) {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
enum Signal {
    Analog(Tensor),
    Spikes { shape: Vec<usize>, bits: SpikeBitmap, scale: f64 },
}

impl Signal {
    fn to_tensor(&self) -> Tensor {
        match self {
            Signal::Analog(t) => t.clone(),
            Signal::Spikes { shape, bits, scale } => {
                let mut t = Tensor::zeros(shape);
                let d = t.data_mut();
                bits.ones().for_each(|i| d[i] = *scale);
                t
            }
        }
    }
}

/// Drive produced by a weighted layer from one step's input.
fn drive_from(kind: &LayerKind, input: &Signal) -> Result<Tensor> {
    match (kind, input) {
        (LayerKind::Dense { weight }, Signal::Spikes { bits, scale, .. }) => {
            let (out, inn) = dense_dims(weight)?;
            if bits.len() != inn {
                return Err(Error::dim(format!("dense layer expects {inn} inputs, got {}", bits.len())));
            }
            let w = weight.data();
            let mut acc = vec![0.0; out];
            for j in bits.ones() {
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += w[i * inn + j];
                }
            }
            acc.iter_mut().for_each(|a| *a *= scale);
            Tensor::new(vec![out], acc)
        }
        (kind, input) => weighted_forward(kind, &input.to_tensor()),
    }
}

fn pool_spikes(shape: &[usize], bits: &SpikeBitmap, window: usize, stride: usize) -> Result<(Vec<usize>, SpikeBitmap)> {
    let g = PoolGeometry::new(shape, window, stride)?;
    let mut out = SpikeBitmap::zeros(g.ch * g.out_h * g.out_w);
    for c in 0..g.ch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let hit = (0..window).any(|ky| {
                    (0..window).any(|kx| bits.get((c * g.in_h + oy * stride + ky) * g.in_w + ox * stride + kx))
                });
                if hit {
                    out.set((c * g.out_h + oy) * g.out_w + ox);
                }
            }
        }
    }
    Ok((vec![g.ch, g.out_h, g.out_w], out))
}

#[derive(Clone, Debug)]
pub struct SnnOutput {
    /// Readout membrane after `T` steps.
    pub scores: Tensor,
    pub trace: SpikeTrace,
    /// Time-averaged output of every layer; the readout entry is `scores/T`.
    pub averages: Vec<Tensor>,
}

/// Simulates `time_steps` steps on one input.
pub fn snn_forward(snn: &SpikingNetwork, x: &Tensor, time_steps: usize) -> Result<SnnOutput> {
    if time_steps == 0 {
        return Err(Error::arg("the number of time steps must be at least 1"));
    }
    if x.shape() != snn.input_shape() {
        return Err(Error::dim(format!(
            "network expects input {:?}, got {:?}",
            snn.input_shape(),
            x.shape()
        )));
    }
    let shapes = snn.shapes()?;
    let n = snn.layers.len();
    let mut state = MembraneState::new(snn)?;
    // Layers fed only by the analog input see the same drive every step.
    let mut analog_cache: Vec<Option<Signal>> = vec![None; n];
    let mut static_drive: Vec<Option<Tensor>> = vec![None; n];
    let mut counts: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut traces: Vec<Option<LayerTrace>> = vec![None; n];
    let mut scores = Tensor::zeros(&shapes[n]);

    for _ in 0..time_steps {
        let mut h = Signal::Analog(x.clone());
        for (i, layer) in snn.layers.iter().enumerate() {
            if let Some(cached) = &analog_cache[i] {
                h = cached.clone();
                continue;
            }
            let analog_in = matches!(h, Signal::Analog(_));
            h = match (&layer.kind, h) {
                (LayerKind::Dropout { .. }, sig) => sig,
                (LayerKind::MaxPool2d { window, stride }, Signal::Analog(t)) => {
                    Signal::Analog(maxpool2d_forward(&t, *window, *stride)?)
                }
                (LayerKind::MaxPool2d { window, stride }, Signal::Spikes { shape, bits, scale }) => {
                    let (shape, bits) = pool_spikes(&shape, &bits, *window, *stride)?;
                    Signal::Spikes { shape, bits, scale }
                }
                (kind, sig) => {
                    let mut drive = match &static_drive[i] {
                        Some(d) => d.clone(),
                        None => {
                            let d = drive_from(kind, &sig)?;
                            if analog_in {
                                static_drive[i] = Some(d.clone());
                            }
                            d
                        }
                    };
                    match layer.neuron {
                        None => {
                            scores.add_assign(&drive)?;
                            Signal::Analog(drive)
                        }
                        Some(p) => {
                            if p.delta != 0.0 {
                                drive.data_mut().iter_mut().for_each(|v| *v += p.delta);
                            }
                            let u = state.layers[i].as_mut().expect("neuron layer has a membrane");
                            let mut bits = SpikeBitmap::zeros(u.len());
                            integrate(u.data_mut(), drive.data(), p.vth, p.leak, |k| bits.set(k));
                            Signal::Spikes {
                                shape: shapes[i + 1].clone(),
                                bits,
                                scale: p.spike_value(),
                            }
                        }
                    }
                }
            };
            let dropout = matches!(layer.kind, LayerKind::Dropout { .. });
            if let (Signal::Spikes { shape, bits, scale }, false) = (&h, dropout) {
                let tr = traces[i].get_or_insert_with(|| LayerTrace {
                    layer: i,
                    shape: shape.clone(),
                    scale: *scale,
                    steps: Vec::with_capacity(time_steps),
                });
                tr.steps.push(bits.clone());
                let c = &mut counts[i];
                if c.is_empty() {
                    c.resize(bits.len(), 0);
                }
                bits.ones().for_each(|k| c[k] += 1);
            } else if matches!(h, Signal::Analog(_)) && layer.neuron.is_none() && i + 1 != n {
                analog_cache[i] = Some(h.clone());
            }
        }
        state.t += 1;
    }

    let steps = time_steps as f64;
    let mut averages: Vec<Tensor> = Vec::with_capacity(n);
    for i in 0..n {
        let avg = if let Some(tr) = &traces[i] {
            let data = counts[i].iter().map(|&c| tr.scale * c as f64 / steps).collect();
            Tensor::new(shapes[i + 1].clone(), data)?
        } else if i + 1 == n {
            let mut avg = scores.clone();
            avg.scale(1.0 / steps);
            avg
        } else if let Some(Signal::Analog(t)) = &analog_cache[i] {
            t.clone()
        } else {
            // dropout passes its input through
            let prev = if i == 0 { x.clone() } else { averages[i - 1].clone() };
            Tensor::new(shapes[i + 1].clone(), prev.into_data())?
        };
        averages.push(avg);
    }

    Ok(SnnOutput {
        scores,
        trace: SpikeTrace {
            time_steps,
            layers: traces.into_iter().flatten().collect(),
        },
        averages,
    })
}

/// Spike totals of one traced layer over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerActivity {
    pub layer: usize,
    pub neurons: usize,
    pub spikes: u64,
    /// Spikes per neuron per input, summed over the time steps.
    pub spikes_per_neuron: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnEvaluation {
    pub accuracy: f64,
    pub samples: usize,
    pub time_steps: usize,
    pub layers: Vec<LayerActivity>,
}

impl SnnEvaluation {
    /// Mean spikes per neuron across the neuron layers, weighted by size.
    pub fn mean_activity(&self, snn: &SpikingNetwork) -> f64 {
        let (spikes, neurons) = self
            .layers
            .iter()
            .filter(|l| snn.layers()[l.layer].neuron.is_some())
            .fold((0u64, 0usize), |(s, n), l| (s + l.spikes, n + l.neurons));
        if neurons == 0 || self.samples == 0 {
            0.0
        } else {
            spikes as f64 / (neurons * self.samples) as f64
        }
    }
}

/// Classification accuracy and spike activity over a data set.
pub fn evaluate_snn(snn: &SpikingNetwork, data: &Dataset, time_steps: usize, exec: Execution) -> Result<SnnEvaluation> {
    if data.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    let per_sample = map_range(exec, data.len(), |i| {
        let out = snn_forward(snn, &data.inputs()[i], time_steps)?;
        let hit = usize::from(out.scores.argmax() == data.labels()[i]);
        let spikes: Vec<(usize, usize, u64)> = out
            .trace
            .layers
            .iter()
            .map(|l| (l.layer, l.neurons(), l.total_spikes()))
            .collect();
        Ok::<_, Error>((hit, spikes))
    });
    let mut correct = 0;
    let mut layers: Vec<LayerActivity> = Vec::new();
    for r in per_sample {
        let (hit, spikes) = r?;
        correct += hit;
        if layers.is_empty() {
            layers = spikes
                .iter()
                .map(|&(layer, neurons, _)| LayerActivity {
                    layer,
                    neurons,
                    spikes: 0,
                    spikes_per_neuron: 0.0,
                })
                .collect();
        }
        for (l, (_, _, s)) in layers.iter_mut().zip(spikes) {
            l.spikes += s;
        }
    }
    let samples = data.len();
    for l in &mut layers {
        l.spikes_per_neuron = l.spikes as f64 / (l.neurons * samples) as f64;
    }
    Ok(SnnEvaluation {
        accuracy: correct as f64 / samples as f64,
        samples,
        time_steps,
        layers,
    })
}
