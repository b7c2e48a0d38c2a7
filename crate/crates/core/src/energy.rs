//! Inference cost accounting: spike activity, MAC/AC tallies and energy.
//!
//! A source network performs one MAC per weight use. A spiking network
//! re-presents the analog input at every step, so layers fed by it cost
//! `T` times their static MACs; every other weighted layer performs one AC
//! per (incoming spike, outgoing synapse) pair. Pooling, dropout and
//! comparisons are free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{ConvGeometry, LayerKind, Topology};
use crate::snn::{SpikeTrace, SpikingNetwork};

/// Energy of one multiply-accumulate in 45 nm CMOS, picojoules.
pub const E_MAC_PJ: f64 = 3.2;
/// Energy of one accumulate, picojoules.
pub const E_AC_PJ: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_mac_pj: E_MAC_PJ,
            e_ac_pj: E_AC_PJ,
        }
    }
}

impl EnergyModel {
    pub fn new(e_mac_pj: f64, e_ac_pj: f64) -> Result<Self> {
        if !(e_mac_pj > e_ac_pj && e_ac_pj > 0.0 && e_mac_pj.is_finite()) {
            return Err(Error::Config(format!(
                "energy model needs e_mac > e_ac > 0, got {e_mac_pj} and {e_ac_pj}"
            )));
        }
        Ok(Self { e_mac_pj, e_ac_pj })
    }
}

/// Normalised (compute, static) energy pairs of neuromorphic platforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuromorphicPreset {
    TrueNorth,
    #[serde(rename = "spinnaker")]
    SpiNNaker,
}

impl NeuromorphicPreset {
    pub const ALL: [NeuromorphicPreset; 2] = [NeuromorphicPreset::TrueNorth, NeuromorphicPreset::SpiNNaker];

    /// `(e_compute, e_static)`.
    pub fn pair(self) -> (f64, f64) {
        match self {
            NeuromorphicPreset::TrueNorth => (0.4, 0.6),
            NeuromorphicPreset::SpiNNaker => (0.64, 0.36),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NeuromorphicPreset::TrueNorth => "true_north",
            NeuromorphicPreset::SpiNNaker => "spinnaker",
        }
    }
}

impl std::str::FromStr for NeuromorphicPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "true_north" | "truenorth" => Ok(Self::TrueNorth),
            "spinnaker" => Ok(Self::SpiNNaker),
            _ => Err(Error::Config(format!(
                "unknown neuromorphic preset {s:?} (expected true_north or spinnaker)"
            ))),
        }
    }
}

/// Spikes per neuron of one traced layer, summed over the time steps.
pub fn spiking_activity(trace: &SpikeTrace, layer: usize) -> Result<f64> {
    let l = trace
        .layer(layer)
        .ok_or_else(|| Error::arg(format!("layer {layer} is not in the trace")))?;
    Ok(l.total_spikes() as f64 / l.neurons() as f64)
}

/// Operation counts of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub macs: u64,
    pub acs: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.macs + self.acs
    }
}

fn static_macs(kind: &LayerKind, input: &[usize]) -> Result<u64> {
    match kind {
        LayerKind::Dense { weight } => Ok(weight.len() as u64),
        LayerKind::Conv2d { weight, stride, padding } => {
            Ok(ConvGeometry::new(weight.shape(), input, *stride, *padding)?.macs())
        }
        _ => Ok(0),
    }
}

/// MACs of every layer of a source network for one input.
pub fn count_flops_dnn<N: Topology>(net: &N) -> Result<Vec<LayerFlops>> {
    let shapes = net.shapes()?;
    (0..net.layer_count())
        .map(|i| {
            Ok(LayerFlops {
                layer: i,
                macs: static_macs(net.layer_kind(i), &shapes[i])?,
                acs: 0,
            })
        })
        .collect()
}

/// Number of synapses leaving each input element of a weighted layer.
pub fn fanout(kind: &LayerKind, input: &[usize]) -> Result<Vec<u64>> {
    match kind {
        LayerKind::Dense { weight } => {
            let out = weight.shape()[0] as u64;
            Ok(vec![out; input.iter().product()])
        }
        LayerKind::Conv2d { weight, stride, padding } => {
            let g = ConvGeometry::new(weight.shape(), input, *stride, *padding)?;
            let mut per_pixel = vec![0u64; g.in_h * g.in_w];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                                per_pixel[y * g.in_w + x] += g.out_ch as u64;
                            }
                        }
                    }
                }
            }
            Ok((0..g.in_ch).flat_map(|_| per_pixel.iter().copied()).collect())
        }
        _ => Ok(vec![0; input.iter().product()]),
    }
}

/// Traced layer whose spikes feed `layer`, skipping dropout; `None` when the
/// layer is fed by the analog input.
fn spike_source(snn: &SpikingNetwork, trace: &SpikeTrace, layer: usize) -> Option<usize> {
    let mut i = layer;
    while i > 0 {
        i -= 1;
        if trace.layer(i).is_some() {
            return Some(i);
        }
        if !matches!(snn.layers()[i].kind, LayerKind::Dropout { .. }) {
            return None;
        }
    }
    None
}

/// MACs and ACs of every layer of a spiking network for the inference that
/// produced `trace`.
pub fn count_flops_snn(snn: &SpikingNetwork, trace: &SpikeTrace, time_steps: usize) -> Result<Vec<LayerFlops>> {
    if trace.time_steps != time_steps {
        return Err(Error::arg(format!(
            "trace covers {} steps but {time_steps} were requested",
            trace.time_steps
        )));
    }
    let shapes = snn.shapes()?;
    let spiking = snn.spiking_inputs();
    for l in &trace.layers {
        if shapes.get(l.layer + 1) != Some(&l.shape) || l.steps.len() != time_steps {
            return Err(Error::arg(format!("trace layer {} does not match the network", l.layer)));
        }
    }
    let mut out = Vec::with_capacity(snn.layers().len());
    for (i, layer) in snn.layers().iter().enumerate() {
        let mut f = LayerFlops {
            layer: i,
            ..LayerFlops::default()
        };
        if layer.kind.is_weighted() {
            if !spiking[i] {
                f.macs = time_steps as u64 * static_macs(&layer.kind, &shapes[i])?;
            } else {
                let src = spike_source(snn, trace, i)
                    .and_then(|s| trace.layer(s))
                    .ok_or_else(|| Error::arg(format!("trace has no spikes feeding layer {i}")))?;
                let fan = fanout(&layer.kind, &shapes[i])?;
                f.acs = src
                    .steps
                    .iter()
                    .map(|step| step.ones().map(|k| fan[k]).sum::<u64>())
                    .sum();
            }
        }
        out.push(f);
    }
    Ok(out)
}

/// Energy in picojoules of the given counts.
pub fn energy_pj(costs: &[LayerFlops], model: &EnergyModel) -> f64 {
    costs
        .iter()
        .map(|c| c.macs as f64 * model.e_mac_pj + c.acs as f64 * model.e_ac_pj)
        .sum()
}

/// Energy in joules of the given counts: MACs at `e_mac`, ACs at `e_ac`.
/// Counts from [`count_flops_dnn`] are all MACs.
pub fn compute_energy_cmos(costs: &[LayerFlops], model: &EnergyModel) -> f64 {
    energy_pj(costs, model) / 1e12
}

/// `flops·e_compute + T·e_static` in the preset's normalised units.
pub fn compute_energy_neuromorphic(total_flops: f64, time_steps: usize, preset: NeuromorphicPreset) -> Result<f64> {
    if time_steps == 0 {
        return Err(Error::arg("the number of time steps must be at least 1"));
    }
    if !(total_flops >= 0.0 && total_flops.is_finite()) {
        return Err(Error::arg(format!("flop count {total_flops} must be non-negative")));
    }
    let (compute, stat) = preset.pair();
    Ok(total_flops * compute + time_steps as f64 * stat)
}

/// Per-layer average cost over a set of inferences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: String,
    /// Spikes per neuron per input, for traced layers.
    pub spikes_per_neuron: Option<f64>,
    /// Number of neurons that fired `k` times, `k = 0..=T`, summed over inputs.
    pub spike_histogram: Option<Vec<u64>>,
    pub snn_macs: f64,
    pub snn_acs: f64,
    pub dnn_macs: f64,
    pub snn_energy_pj: f64,
    pub dnn_energy_pj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuromorphicCost {
    pub preset: NeuromorphicPreset,
    pub e_compute: f64,
    pub e_static: f64,
    pub snn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub time_steps: usize,
    pub inputs: usize,
    pub model: EnergyModel,
    pub layers: Vec<LayerCost>,
    pub snn_energy_pj: f64,
    /// Every weighted layer at `e_mac` per MAC.
    pub dnn_energy_pj: f64,
    /// As `dnn_energy_pj` without the first weighted layer.
    pub dnn_energy_pj_from_second: f64,
    pub energy_ratio: f64,
    /// Size-weighted spikes per neuron over the neuron layers.
    pub hidden_activity: f64,
    pub neuromorphic: Vec<NeuromorphicCost>,
}

impl CostReport {
    pub fn snn_energy_joules(&self) -> f64 {
        self.snn_energy_pj / 1e12
    }

    pub fn dnn_energy_joules(&self) -> f64 {
        self.dnn_energy_pj / 1e12
    }
}

/// Accumulates traces of one spiking network and reports average per-input
/// costs next to the static cost of the same topology run as a source
/// network.
#[derive(Clone, Debug)]
pub struct CostAccumulator<'a> {
    snn: &'a SpikingNetwork,
    time_steps: usize,
    inputs: usize,
    flops: Vec<LayerFlops>,
    spikes: Vec<u64>,
    histograms: Vec<Option<Vec<u64>>>,
}

impl<'a> CostAccumulator<'a> {
    pub fn new(snn: &'a SpikingNetwork, time_steps: usize) -> Self {
        let n = snn.layers().len();
        Self {
            snn,
            time_steps,
            inputs: 0,
            flops: (0..n).map(|layer| LayerFlops { layer, ..LayerFlops::default() }).collect(),
            spikes: vec![0; n],
            histograms: vec![None; n],
        }
    }

    pub fn add(&mut self, trace: &SpikeTrace) -> Result<()> {
        let counts = count_flops_snn(self.snn, trace, self.time_steps)?;
        for (acc, c) in self.flops.iter_mut().zip(&counts) {
            acc.macs += c.macs;
            acc.acs += c.acs;
        }
        for l in &trace.layers {
            self.spikes[l.layer] += l.total_spikes();
            let hist = self.histograms[l.layer].get_or_insert_with(|| vec![0; self.time_steps + 1]);
            for c in l.counts() {
                hist[c as usize] += 1;
            }
        }
        self.inputs += 1;
        Ok(())
    }

    pub fn report(&self, model: &EnergyModel) -> Result<CostReport> {
        if self.inputs == 0 {
            return Err(Error::arg("no traces accumulated"));
        }
        let shapes = self.snn.shapes()?;
        let dnn = count_flops_dnn(self.snn)?;
        let n = self.inputs as f64;
        let first_weighted = self.snn.weighted_layers().first().copied();
        let mut layers = Vec::with_capacity(dnn.len());
        let (mut snn_total, mut dnn_total, mut dnn_from_second) = (0.0, 0.0, 0.0);
        let (mut hidden_spikes, mut hidden_neurons) = (0u64, 0usize);
        for (i, (f, d)) in self.flops.iter().zip(&dnn).enumerate() {
            let neurons: usize = shapes[i + 1].iter().product();
            let traced = self.histograms[i].is_some();
            if self.snn.layers()[i].neuron.is_some() {
                hidden_spikes += self.spikes[i];
                hidden_neurons += neurons;
            }
            let snn_macs = f.macs as f64 / n;
            let snn_acs = f.acs as f64 / n;
            let snn_energy = snn_macs * model.e_mac_pj + snn_acs * model.e_ac_pj;
            let dnn_energy = d.macs as f64 * model.e_mac_pj;
            snn_total += snn_energy;
            dnn_total += dnn_energy;
            if Some(i) != first_weighted {
                dnn_from_second += dnn_energy;
            }
            layers.push(LayerCost {
                layer: i,
                kind: self.snn.layers()[i].kind.name().to_string(),
                spikes_per_neuron: traced.then(|| self.spikes[i] as f64 / (neurons as f64 * n)),
                spike_histogram: self.histograms[i].clone(),
                snn_macs,
                snn_acs,
                dnn_macs: d.macs as f64,
                snn_energy_pj: snn_energy,
                dnn_energy_pj: dnn_energy,
            });
        }
        let total_flops: f64 = layers.iter().map(|l| l.snn_macs + l.snn_acs).sum();
        let neuromorphic = NeuromorphicPreset::ALL
            .iter()
            .map(|&p| {
                let (e_compute, e_static) = p.pair();
                Ok(NeuromorphicCost {
                    preset: p,
                    e_compute,
                    e_static,
                    snn: compute_energy_neuromorphic(total_flops, self.time_steps, p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CostReport {
            time_steps: self.time_steps,
            inputs: self.inputs,
            model: *model,
            layers,
            snn_energy_pj: snn_total,
            dnn_energy_pj: dnn_total,
            dnn_energy_pj_from_second: dnn_from_second,
            energy_ratio: dnn_total / snn_total,
            hidden_activity: if hidden_neurons == 0 {
                0.0
            } else {
                hidden_spikes as f64 / (hidden_neurons as f64 * n)
            },
            neuromorphic,
        })
    }
}
