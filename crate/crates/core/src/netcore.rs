//! Feed-forward network plumbing shared by the DNN and SNN engines.
//!
//! Layers carry no bias. Convolutions use zero padding declared per layer and
//! require the padded extent minus the kernel to be a multiple of the stride;
//! pooling requires the same of its window.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dnn::threshold_relu;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// `weight` is `out × in`; any input with `in` elements is accepted.
    Dense { weight: Tensor },
    /// `weight` is `out_ch × in_ch × kh × kw`; input is `in_ch × h × w`.
    Conv2d {
        weight: Tensor,
        stride: usize,
        padding: usize,
    },
    MaxPool2d { window: usize, stride: usize },
    /// Inverted dropout. Identity at inference.
    Dropout { rate: f64 },
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            LayerKind::Dense { weight } | LayerKind::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            LayerKind::Dense { weight } | LayerKind::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Dropout { .. } => "dropout",
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerKind::Dense { weight } => {
                let (out, inn) = dense_dims(weight)?;
                let n: usize = input.iter().product();
                if n != inn {
                    return Err(Error::dim(format!(
                        "dense layer expects {inn} inputs, got shape {input:?}"
                    )));
                }
                Ok(vec![out])
            }
            LayerKind::Conv2d {
                weight,
                stride,
                padding,
            } => {
                let g = ConvGeometry::new(weight.shape(), input, *stride, *padding)?;
                Ok(vec![g.out_ch, g.out_h, g.out_w])
            }
            LayerKind::MaxPool2d { window, stride } => {
                let g = PoolGeometry::new(input, *window, *stride)?;
                Ok(vec![g.ch, g.out_h, g.out_w])
            }
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::arg(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// A layer plus its threshold-ReLU ceiling. `mu` is set on every hidden
/// weighted layer and absent on the readout layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub mu: Option<f64>,
}

impl Layer {
    pub fn dense(weight: Tensor, mu: Option<f64>) -> Self {
        Self {
            kind: LayerKind::Dense { weight },
            mu,
        }
    }

    pub fn conv2d(weight: Tensor, stride: usize, padding: usize, mu: Option<f64>) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                weight,
                stride,
                padding,
            },
            mu,
        }
    }

    pub fn maxpool2d(window: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool2d { window, stride },
            mu: None,
        }
    }

    pub fn dropout(rate: f64) -> Self {
        Self {
            kind: LayerKind::Dropout { rate },
            mu: None,
        }
    }
}

/// Read-only view of a layer stack, implemented by both network flavours so
/// shape and cost accounting can be shared.
pub trait Topology {
    fn input_shape(&self) -> &[usize];
    fn layer_count(&self) -> usize;
    fn layer_kind(&self, index: usize) -> &LayerKind;

    /// Input shape of every layer followed by the network output shape.
    fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape().to_vec()];
        for i in 0..self.layer_count() {
            let next = self.layer_kind(i).output_shape(&shapes[i])?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layer_count())
            .filter(|&i| self.layer_kind(i).is_weighted())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork")]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

#[derive(Deserialize)]
struct RawNetwork {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl TryFrom<RawNetwork> for NetworkSpec {
    type Error = Error;

    fn try_from(raw: RawNetwork) -> Result<Self> {
        NetworkSpec::new(raw.input_shape, raw.layers)
    }
}

impl Topology for NetworkSpec {
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

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            input_shape,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks shape composition and threshold placement.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::dim(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        self.shapes()?;
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::arg("network has no layers"))?;
        if !last.kind.is_weighted() || last.mu.is_some() {
            return Err(Error::arg(
                "the final layer must be a weighted readout without a threshold",
            ));
        }
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            match (layer.kind.is_weighted(), layer.mu) {
                (true, Some(mu)) if !(mu > 0.0 && mu.is_finite()) => {
                    return Err(Error::arg(format!("layer {i}: threshold {mu} must be positive")));
                }
                (true, None) if i + 1 != n => {
                    return Err(Error::arg(format!(
                        "hidden weighted layer {i} has no threshold"
                    )));
                }
                (false, Some(_)) => {
                    return Err(Error::arg(format!(
                        "layer {i} ({}) cannot carry a threshold",
                        layer.kind.name()
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for training. Shapes must not be changed.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_default())
    }

    /// Indices of layers followed by a threshold ReLU.
    pub fn thresholded_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].mu.is_some())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.kind.weight())
            .map(Tensor::len)
            .sum()
    }
}

pub(crate) fn dense_dims(weight: &Tensor) -> Result<(usize, usize)> {
    match *weight.shape() {
        [out, inn] => Ok((out, inn)),
        ref s => Err(Error::dim(format!("dense weight must be 2-D, got {s:?}"))),
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(weight: &[usize], input: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let &[out_ch, w_in_ch, kh, kw] = weight else {
            return Err(Error::dim(format!("conv weight must be 4-D, got {weight:?}")));
        };
        let &[in_ch, in_h, in_w] = input else {
            return Err(Error::dim(format!("conv input must be 3-D, got {input:?}")));
        };
        if w_in_ch != in_ch {
            return Err(Error::dim(format!(
                "conv expects {w_in_ch} input channels, got {in_ch}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv stride must be positive"));
        }
        let (ph, pw) = (in_h + 2 * padding, in_w + 2 * padding);
        if kh > ph || kw > pw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} / stride {stride} / padding {padding} does not tile input {in_h}x{in_w}"
            )));
        }
        Ok(Self {
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    /// Input pixel feeding output `(oy, ox)` through tap `(ky, kx)`, if not padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }

    pub fn macs(&self) -> u64 {
        (self.out_ch * self.out_h * self.out_w * self.in_ch * self.kh * self.kw) as u64
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeometry {
    pub ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        let &[ch, in_h, in_w] = input else {
            return Err(Error::dim(format!("pool input must be 3-D, got {input:?}")));
        };
        if window == 0 || stride == 0 {
            return Err(Error::dim("pool window and stride must be positive"));
        }
        if window > in_h || window > in_w || (in_h - window) % stride != 0 || (in_w - window) % stride != 0 {
            return Err(Error::dim(format!(
                "pool window {window} / stride {stride} does not tile input {in_h}x{in_w}"
            )));
        }
        Ok(Self {
            ch,
            in_h,
            in_w,
            window,
            stride,
            out_h: (in_h - window) / stride + 1,
            out_w: (in_w - window) / stride + 1,
        })
    }
}

/// `output[i] = Σ_j w[i][j]·x[j]`. `x` may have any shape with `in` elements.
pub fn dense_forward(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (out, inn) = dense_dims(w)?;
    if x.len() != inn {
        return Err(Error::dim(format!(
            "dense layer expects {inn} inputs, got {}",
            x.len()
        )));
    }
    let xs = x.data();
    let data = w
        .data()
        .chunks_exact(inn)
        .map(|row| row.iter().zip(xs).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::from_parts(vec![out], data))
}

/// Cross-correlation of a `C×H×W` input with an `O×C×kh×kw` kernel.
pub fn conv2d_forward(w: &Tensor, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(w.shape(), x.shape(), stride, padding)?;
    let (wd, xd) = (w.data(), x.data());
    let mut out = vec![0.0; g.out_ch * g.out_h * g.out_w];
    for oc in 0..g.out_ch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for ic in 0..g.in_ch {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                acc += wd[((oc * g.in_ch + ic) * g.kh + ky) * g.kw + kx]
                                    * xd[(ic * g.in_h + y) * g.in_w + xx];
                            }
                        }
                    }
                }
                out[(oc * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.out_ch, g.out_h, g.out_w], out))
}

/// Per-window maximum over a `C×H×W` input.
pub fn maxpool2d_forward(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    Ok(maxpool2d_with_argmax(x, window, stride)?.0)
}

/// Pooled output plus, for every output element, the flat input index of the
/// first maximum in its window.
pub(crate) fn maxpool2d_with_argmax(
    x: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let g = PoolGeometry::new(x.shape(), window, stride)?;
    let xd = x.data();
    let n = g.ch * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..g.ch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best_idx = (c * g.in_h + oy * g.stride) * g.in_w + ox * g.stride;
                for ky in 0..g.window {
                    for kx in 0..g.window {
                        let idx = (c * g.in_h + oy * g.stride + ky) * g.in_w + ox * g.stride + kx;
                        if xd[idx] > xd[best_idx] {
                            best_idx = idx;
                        }
                    }
                }
                out.push(xd[best_idx]);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![g.ch, g.out_h, g.out_w], out), arg))
}

/// Applies a weighted layer's linear map.
pub(crate) fn weighted_forward(kind: &LayerKind, x: &Tensor) -> Result<Tensor> {
    match kind {
        LayerKind::Dense { weight } => dense_forward(weight, x),
        LayerKind::Conv2d {
            weight,
            stride,
            padding,
        } => conv2d_forward(weight, x, *stride, *padding),
        _ => Err(Error::arg(format!("{} layer has no weights", kind.name()))),
    }
}

/// Backward pass of a weighted layer: accumulates `dL/dW` into `grad_w` and
/// returns `dL/dx` shaped like `x`.
pub(crate) fn weighted_backward(
    kind: &LayerKind,
    x: &Tensor,
    grad_out: &[f64],
    grad_w: &mut [f64],
) -> Result<Tensor> {
    match kind {
        LayerKind::Dense { weight } => {
            let (out, inn) = dense_dims(weight)?;
            let (wd, xd) = (weight.data(), x.data());
            let mut dx = vec![0.0; inn];
            for i in 0..out {
                let g = grad_out[i];
                if g == 0.0 {
                    continue;
                }
                let row = &wd[i * inn..(i + 1) * inn];
                let grow = &mut grad_w[i * inn..(i + 1) * inn];
                for j in 0..inn {
                    grow[j] += g * xd[j];
                    dx[j] += g * row[j];
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), dx))
        }
        LayerKind::Conv2d {
            weight,
            stride,
            padding,
        } => {
            let g = ConvGeometry::new(weight.shape(), x.shape(), *stride, *padding)?;
            let (wd, xd) = (weight.data(), x.data());
            let mut dx = vec![0.0; x.len()];
            for oc in 0..g.out_ch {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let go = grad_out[(oc * g.out_h + oy) * g.out_w + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ic in 0..g.in_ch {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                        let wi = ((oc * g.in_ch + ic) * g.kh + ky) * g.kw + kx;
                                        let xi = (ic * g.in_h + y) * g.in_w + xx;
                                        grad_w[wi] += go * xd[xi];
                                        dx[xi] += go * wd[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), dx))
        }
        _ => Err(Error::arg(format!("{} layer has no weights", kind.name()))),
    }
}

/// Routes pooled gradients back to the recorded argmax positions.
pub(crate) fn maxpool2d_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        dx[idx] += g;
    }
    dx
}

/// Inverted-dropout mask: each entry is `0` or `1/(1-rate)`.
pub(crate) fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

pub enum Mode<'a> {
    Infer,
    /// Dropout masks are drawn from the supplied generator.
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub output: Tensor,
    /// Pre-activation of every weighted layer, `None` for the others.
    pub preacts: Vec<Option<Tensor>>,
}

/// Runs the network, applying threshold ReLU after every thresholded layer.
pub fn forward(net: &NetworkSpec, x: &Tensor, mut mode: Mode<'_>) -> Result<ForwardOutput> {
    if x.shape() != net.input_shape() {
        return Err(Error::dim(format!(
            "network expects input {:?}, got {:?}",
            net.input_shape(),
            x.shape()
        )));
    }
    let mut h = x.clone();
    let mut preacts = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        match &layer.kind {
            LayerKind::MaxPool2d { window, stride } => {
                h = maxpool2d_forward(&h, *window, *stride)?;
                preacts.push(None);
            }
            LayerKind::Dropout { rate } => {
                if let Mode::Train(rng) = &mut mode {
                    let mask = dropout_mask(h.len(), *rate, rng);
                    h.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                }
                preacts.push(None);
            }
            kind => {
                let z = weighted_forward(kind, &h)?;
                h = match layer.mu {
                    Some(mu) => threshold_relu(&z, mu),
                    None => z.clone(),
                };
                preacts.push(Some(z));
            }
        }
    }
    Ok(ForwardOutput {
        output: h,
        preacts,
    })
}

/// Inference-mode class prediction.
pub fn predict(net: &NetworkSpec, x: &Tensor) -> Result<usize> {
    Ok(forward(net, x, Mode::Infer)?.output.argmax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_identity_and_sum() {
        let w = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Tensor::vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(dense_forward(&w, &x).unwrap().data(), &[3.0, 4.0]);

        let w = Tensor::matrix(&[vec![1.0, 1.0]]).unwrap();
        let x = Tensor::vector(vec![2.0, 5.0]).unwrap();
        assert_eq!(dense_forward(&w, &x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn dense_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_tensor(&[3, 4], &mut rng);
        let x = rand_tensor(&[4], &mut rng);
        let got = dense_forward(&w, &x).unwrap();
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..4 {
                acc += w.data()[i * 4 + j] * x.data()[j];
            }
            assert!((got.data()[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_shape_mismatch() {
        let w = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            dense_forward(&w, &Tensor::zeros(&[2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_identity_kernel_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[1, 5, 5], &mut rng);
        let w = Tensor::filled(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d_forward(&w, &x, 1, 0).unwrap(), x);

        let w = rand_tensor(&[2, 1, 3, 3], &mut rng);
        let y = conv2d_forward(&w, &Tensor::zeros(&[1, 5, 5]), 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let y = conv2d_forward(&w, &x, 1, 0).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        let (xd, wd) = (x.data(), w.data());
        for o in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for a in 0..3 {
                            for b in 0..3 {
                                acc += wd[o * 18 + c * 9 + a * 3 + b] * xd[c * 25 + (i + a) * 5 + (j + b)];
                            }
                        }
                    }
                    assert!((y.data()[o * 9 + i * 3 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_geometry_errors() {
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_forward(&w, &Tensor::zeros(&[1, 5, 5]), 1, 0).is_err());
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_forward(&w, &Tensor::zeros(&[1, 6, 6]), 2, 0).is_err());
        assert!(conv2d_forward(&w, &Tensor::zeros(&[1, 2, 2]), 1, 0).is_err());
    }

    #[test]
    fn maxpool_basics() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(maxpool2d_forward(&x, 2, 2).unwrap().data(), &[1.0]);
        let c = Tensor::filled(&[2, 4, 4], 0.7);
        let y = maxpool2d_forward(&c, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert!(maxpool2d_forward(&Tensor::zeros(&[1, 5, 5]), 2, 2).is_err());
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[1, 4, 4], &mut rng);
        let y = maxpool2d_forward(&x, 2, 2).unwrap();
        let xd = x.data();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for a in 0..2 {
                    for b in 0..2 {
                        m = m.max(xd[(2 * oy + a) * 4 + 2 * ox + b]);
                    }
                }
                assert_eq!(y.data()[oy * 2 + ox], m);
            }
        }
    }

    #[test]
    fn network_validation() {
        let w = Tensor::zeros(&[3, 2]);
        let r = Tensor::zeros(&[2, 3]);
        assert!(NetworkSpec::new(vec![2], vec![Layer::dense(w.clone(), Some(1.0)), Layer::dense(r.clone(), None)]).is_ok());
        // readout must not be thresholded
        assert!(NetworkSpec::new(vec![2], vec![Layer::dense(w.clone(), Some(1.0)), Layer::dense(r.clone(), Some(1.0))]).is_err());
        // hidden layers must be
        assert!(NetworkSpec::new(vec![2], vec![Layer::dense(w.clone(), None), Layer::dense(r.clone(), None)]).is_err());
        assert!(NetworkSpec::new(vec![2], vec![Layer::dense(w.clone(), Some(0.0)), Layer::dense(r.clone(), None)]).is_err());
        // shapes must compose
        assert!(NetworkSpec::new(vec![3], vec![Layer::dense(w, Some(1.0)), Layer::dense(r, None)]).is_err());
    }

    #[test]
    fn two_layer_hand_evaluation() {
        let w1 = Tensor::matrix(&[vec![1.0, -1.0], vec![2.0, 1.0]]).unwrap();
        let w2 = Tensor::matrix(&[vec![1.0, 1.0]]).unwrap();
        let net = NetworkSpec::new(vec![2], vec![Layer::dense(w1, Some(2.0)), Layer::dense(w2, None)]).unwrap();
        let x = Tensor::vector(vec![0.5, 1.0]).unwrap();
        // z1 = [-0.5, 2.0] -> clip -> [0, 2]; z2 = 2
        let out = forward(&net, &x, Mode::Infer).unwrap();
        assert_eq!(out.output.data(), &[2.0]);
        assert_eq!(out.preacts[0].as_ref().unwrap().data(), &[-0.5, 2.0]);
    }

    #[test]
    fn identity_layer_with_large_threshold() {
        let w = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let id = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let net = NetworkSpec::new(vec![2], vec![Layer::dense(w, Some(1e12)), Layer::dense(id, None)]).unwrap();
        let x = Tensor::vector(vec![0.25, 3.5]).unwrap();
        assert_eq!(forward(&net, &x, Mode::Infer).unwrap().output, x);
    }
}
