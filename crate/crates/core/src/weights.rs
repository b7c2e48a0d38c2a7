//! Portable binary weight files for both network flavours.
//!
//! All integers and floats are little-endian. The byte layout is documented
//! in `docs/weight-format.md`; the file ends with the SHA-256 of every
//! preceding byte.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::netcore::{Layer, LayerKind, NetworkSpec, Topology};
use crate::snn::{NeuronParams, SpikingLayer, SpikingNetwork};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"USNW";
pub const VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

const KIND_DNN: u8 = 0;
const KIND_SNN: u8 = 1;

const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_POOL: u8 = 3;
const TAG_DROPOUT: u8 = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum WeightFile {
    Dnn(NetworkSpec),
    Snn(SpikingNetwork),
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn shape(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        shape.iter().for_each(|&d| self.u32(d));
    }

    fn header(kind: u8, input: &[usize], layers: usize) -> Self {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.u8(kind);
        w.shape(input);
        w.u32(layers);
        w
    }

    fn kind(&mut self, kind: &LayerKind) {
        match kind {
            LayerKind::Dense { weight } => {
                self.u8(TAG_DENSE);
                self.tensor(weight);
            }
            LayerKind::Conv2d { weight, stride, padding } => {
                self.u8(TAG_CONV);
                self.u32(*stride);
                self.u32(*padding);
                self.tensor(weight);
            }
            LayerKind::MaxPool2d { window, stride } => {
                self.u8(TAG_POOL);
                self.u32(*window);
                self.u32(*stride);
            }
            LayerKind::Dropout { rate } => {
                self.u8(TAG_DROPOUT);
                self.f64(*rate);
            }
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.shape(t.shape());
        t.data().iter().for_each(|&v| self.f64(v));
    }

    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.0);
        self.0.extend_from_slice(&digest);
        self.0
    }
}

pub fn encode_dnn(net: &NetworkSpec) -> Vec<u8> {
    let mut w = Writer::header(KIND_DNN, net.input_shape(), net.layers().len());
    for layer in net.layers() {
        w.kind(&layer.kind);
        match layer.mu {
            Some(mu) => {
                w.u8(1);
                w.f64(mu);
            }
            None => w.u8(0),
        }
    }
    w.finish()
}

pub fn encode_snn(snn: &SpikingNetwork) -> Vec<u8> {
    let mut w = Writer::header(KIND_SNN, snn.input_shape(), snn.layers().len());
    for layer in snn.layers() {
        w.kind(&layer.kind);
        match &layer.neuron {
            Some(p) => {
                w.u8(1);
                for v in [p.vth, p.beta, p.leak, p.delta] {
                    w.f64(v);
                }
            }
            None => w.u8(0),
        }
    }
    w.finish()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| self.u32()).collect()
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("invalid flag byte {v}"))),
        }
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.shape()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::Format(format!("tensor {shape:?} exceeds the file")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    fn kind(&mut self) -> Result<LayerKind> {
        Ok(match self.u8()? {
            TAG_DENSE => LayerKind::Dense { weight: self.tensor()? },
            TAG_CONV => {
                let stride = self.u32()?;
                let padding = self.u32()?;
                LayerKind::Conv2d { weight: self.tensor()?, stride, padding }
            }
            TAG_POOL => LayerKind::MaxPool2d { window: self.u32()?, stride: self.u32()? },
            TAG_DROPOUT => LayerKind::Dropout { rate: self.f64()? },
            tag => return Err(Error::Format(format!("unknown layer tag {tag}"))),
        })
    }
}

/// Parses and verifies a weight file of either flavour.
pub fn decode(bytes: &[u8]) -> Result<WeightFile> {
    if bytes.len() < MAGIC.len() + 2 + DIGEST_LEN || bytes[..4] != MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    let input = r.shape()?;
    let count = r.u32()?;
    let invalid = |e: Error| Error::Format(format!("invalid network: {e}"));
    let file = match kind {
        KIND_DNN => {
            let mut layers = Vec::new();
            for _ in 0..count {
                let kind = r.kind()?;
                let mu = if r.flag()? { Some(r.f64()?) } else { None };
                layers.push(Layer { kind, mu });
            }
            WeightFile::Dnn(NetworkSpec::new(input, layers).map_err(invalid)?)
        }
        KIND_SNN => {
            let mut layers = Vec::new();
            for _ in 0..count {
                let kind = r.kind()?;
                let neuron = if r.flag()? {
                    Some(NeuronParams { vth: r.f64()?, beta: r.f64()?, leak: r.f64()?, delta: r.f64()? })
                } else {
                    None
                };
                layers.push(SpikingLayer { kind, neuron });
            }
            WeightFile::Snn(SpikingNetwork::new(input, layers).map_err(invalid)?)
        }
        k => return Err(Error::Format(format!("unknown network kind {k}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(file)
}

pub fn decode_dnn(bytes: &[u8]) -> Result<NetworkSpec> {
    match decode(bytes)? {
        WeightFile::Dnn(net) => Ok(net),
        WeightFile::Snn(_) => Err(Error::Format("expected a source network, found a spiking one".into())),
    }
}

pub fn decode_snn(bytes: &[u8]) -> Result<SpikingNetwork> {
    match decode(bytes)? {
        WeightFile::Snn(net) => Ok(net),
        WeightFile::Dnn(_) => Err(Error::Format("expected a spiking network, found a source one".into())),
    }
}

pub fn write_dnn(path: &Path, net: &NetworkSpec) -> Result<()> {
    Ok(std::fs::write(path, encode_dnn(net))?)
}

pub fn write_snn(path: &Path, snn: &SpikingNetwork) -> Result<()> {
    Ok(std::fs::write(path, encode_snn(snn))?)
}

pub fn read_dnn(path: &Path) -> Result<NetworkSpec> {
    decode_dnn(&std::fs::read(path)?)
}

pub fn read_snn(path: &Path) -> Result<SpikingNetwork> {
    decode_snn(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network, LayerDesc};
    use crate::convert::{convert_dnn_to_snn, ConversionMode};
    use crate::data::Synthetic;
    use crate::dnn::{collect_activation_stats, StatsConfig};
    use proptest::prelude::*;

    fn cnn(seed: u64) -> NetworkSpec {
        build_network(
            &[1, 6, 6],
            &[
                LayerDesc::Conv2d { channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerDesc::MaxPool2d { window: 2, stride: None },
                LayerDesc::Dropout { rate: 0.25 },
                LayerDesc::Dense { units: 5 },
            ],
            3,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn dnn_roundtrip_is_bit_exact() {
        let net = cnn(4);
        let bytes = encode_dnn(&net);
        assert_eq!(&bytes[..4], b"USNW");
        assert_eq!(decode_dnn(&bytes).unwrap(), net);
        assert_eq!(encode_dnn(&decode_dnn(&bytes).unwrap()), bytes);
        assert!(decode_snn(&bytes).is_err());
    }

    #[test]
    fn snn_roundtrip_is_bit_exact() {
        let net = cnn(5);
        let data = Synthetic::Blobs { classes: 3, dim: 36, samples_per_class: 14, separation: 2.0, spread: 0.5 }
            .generate(1)
            .unwrap();
        let data = crate::data::Dataset::new(
            data.inputs()
                .iter()
                .map(|x| Tensor::new(vec![1, 6, 6], x.data().to_vec()).unwrap())
                .collect(),
            data.labels().to_vec(),
            3,
        )
        .unwrap();
        let stats = collect_activation_stats(&net, &data, &StatsConfig::default()).unwrap();
        let (mut snn, _) = convert_dnn_to_snn(&net, &stats, 3, ConversionMode::Scaled).unwrap();
        snn.layers_mut()[0].neuron.as_mut().unwrap().leak = 0.75;
        snn.layers_mut()[0].neuron.as_mut().unwrap().delta = 0.125;
        let bytes = encode_snn(&snn);
        assert_eq!(decode_snn(&bytes).unwrap(), snn);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_dnn(&cnn(1));
        for pos in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(matches!(decode(&bad), Err(Error::Format(_))), "flip at {pos}");
        }
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(&[]).is_err());
    }

    #[test]
    fn checksummed_garbage_is_rejected() {
        // A valid digest over a body whose tensor claims more data than exists.
        let mut w = Writer::header(KIND_DNN, &[2], 1);
        w.u8(TAG_DENSE);
        w.shape(&[1_000_000, 1_000_000]);
        assert!(matches!(decode(&w.finish()), Err(Error::Format(_))));
        let mut w = Writer::header(KIND_DNN, &[2], 1);
        w.u8(9);
        assert!(matches!(decode(&w.finish()), Err(Error::Format(_))));
    }

    #[test]
    fn digest_hex() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    proptest! {
        #[test]
        fn arbitrary_weights_roundtrip(
            w in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 12),
            mu in 1e-3f64..1e3,
        ) {
            let net = NetworkSpec::new(
                vec![4],
                vec![
                    Layer::dense(Tensor::new(vec![2, 4], w[..8].to_vec()).unwrap(), Some(mu)),
                    Layer::dense(Tensor::new(vec![2, 2], w[8..].to_vec()).unwrap(), None),
                ],
            )
            .unwrap();
            let back = decode_dnn(&encode_dnn(&net)).unwrap();
            let bits = |n: &NetworkSpec| -> Vec<u64> {
                n.layers().iter().flat_map(|l| l.kind.weight().unwrap().data().iter().map(|v| v.to_bits())).collect()
            };
            prop_assert_eq!(bits(&back), bits(&net));
            prop_assert_eq!(back.layers()[0].mu, Some(mu));
        }
    }
}
