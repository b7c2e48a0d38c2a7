//! Labelled datasets: IDX binary files and seeded synthetic generators.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dataset {
    input_shape: Vec<usize>,
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::arg("dataset is empty"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let input_shape = inputs[0].shape().to_vec();
        if let Some(bad) = inputs.iter().find(|x| x.shape() != input_shape) {
            return Err(Error::dim(format!(
                "mixed input shapes {input_shape:?} and {:?}",
                bad.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::arg(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            input_shape,
            inputs,
            labels,
            classes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Subset by sample indices.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }

    /// Shuffled split into `(first, second)` with `fraction` of the samples
    /// in the first part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0 < fraction && fraction < 1.0) {
            return Err(Error::arg(format!("split fraction {fraction} outside (0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let cut = cut.clamp(1, self.len() - 1);
        Ok((self.select(&idx[..cut])?, self.select(&idx[cut..])?))
    }
}

/// Seeded synthetic classification problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum Synthetic {
    /// Isotropic Gaussian clusters around random centres.
    Blobs {
        classes: usize,
        dim: usize,
        samples_per_class: usize,
        /// Standard deviation of the cluster centres.
        separation: f64,
        /// Standard deviation of each cluster.
        spread: f64,
    },
    /// Interleaved half-circle arcs in the plane, one per class, optionally
    /// padded with pure-noise dimensions.
    Arcs {
        classes: usize,
        samples_per_class: usize,
        noise: f64,
        #[serde(default)]
        extra_dims: usize,
    },
}

impl Synthetic {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        match *self {
            Synthetic::Blobs {
                classes,
                dim,
                samples_per_class,
                separation,
                spread,
            } => {
                if classes < 2 || dim == 0 || samples_per_class == 0 {
                    return Err(Error::Config("blobs need ≥2 classes, dim ≥1 and samples".into()));
                }
                let centre_dist = normal(0.0, separation)?;
                let noise = normal(0.0, spread)?;
                let centres: Vec<Vec<f64>> = (0..classes)
                    .map(|_| (0..dim).map(|_| centre_dist.sample(&mut rng)).collect())
                    .collect();
                for _ in 0..samples_per_class {
                    for (c, centre) in centres.iter().enumerate() {
                        let x = centre.iter().map(|m| m + noise.sample(&mut rng)).collect();
                        inputs.push(Tensor::vector(x)?);
                        labels.push(c);
                    }
                }
            }
            Synthetic::Arcs {
                classes,
                samples_per_class,
                noise,
                extra_dims,
            } => {
                if classes < 2 || samples_per_class == 0 {
                    return Err(Error::Config("arcs need ≥2 classes and samples".into()));
                }
                let jitter = normal(0.0, noise)?;
                for _ in 0..samples_per_class {
                    for c in 0..classes {
                        let theta = rng.gen_range(0.0..std::f64::consts::PI);
                        let rot = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                        // unit arc, opened away from the origin and shifted
                        let (ax, ay) = (theta.cos(), theta.sin() - 0.5);
                        let (x, y) = (
                            ax * rot.cos() - ay * rot.sin() + 0.5 * rot.cos(),
                            ax * rot.sin() + ay * rot.cos() + 0.5 * rot.sin(),
                        );
                        let mut v = vec![x + jitter.sample(&mut rng), y + jitter.sample(&mut rng)];
                        v.extend((0..extra_dims).map(|_| jitter.sample(&mut rng)));
                        inputs.push(Tensor::vector(v)?);
                        labels.push(c);
                    }
                }
            }
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(inputs, labels, classes)
    }
}

fn normal(mean: f64, sd: f64) -> Result<Normal<f64>> {
    Normal::new(mean, sd).map_err(|e| Error::Config(format!("bad normal({mean}, {sd}): {e}")))
}

/// Raw contents of an unsigned-byte IDX file.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_U8: u8 = 0x08;

/// Parses an IDX file: two zero bytes, a type code, the rank, big-endian
/// `u32` extents and then the raw payload. Only the unsigned-byte type is
/// supported.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("bad IDX magic".into()));
    }
    if bytes[2] != IDX_U8 {
        return Err(Error::Format(format!(
            "unsupported IDX element type 0x{:02x}",
            bytes[2]
        )));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(Error::Format(format!(
            "IDX payload has {} bytes, header promises {n}",
            bytes.len() - header
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_U8, array.dims.len() as u8];
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

/// Loads an image/label IDX pair. Pixels are scaled to `[0, 1]`; 2-D images
/// gain a leading channel axis.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx(&fs::read(images)?)?;
    let lab = parse_idx(&fs::read(labels)?)?;
    if lab.dims.len() != 1 {
        return Err(Error::Format("label file must be one-dimensional".into()));
    }
    let (&n, rest) = img
        .dims
        .split_first()
        .ok_or_else(|| Error::Format("image file has rank 0".into()))?;
    if n != lab.dims[0] {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            lab.dims[0]
        )));
    }
    let shape = match rest {
        [h, w] => vec![1, *h, *w],
        [] => vec![1],
        other => other.to_vec(),
    };
    let per: usize = shape.iter().product();
    let inputs = img
        .data
        .chunks_exact(per)
        .map(|c| Tensor::new(shape.clone(), c.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_roundtrip_and_errors() {
        let arr = IdxArray {
            dims: vec![2, 3],
            data: (0..6).collect(),
        };
        let bytes = encode_idx(&arr);
        assert_eq!(&bytes[..4], &[0, 0, 8, 2]);
        assert_eq!(parse_idx(&bytes).unwrap(), arr);
        assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[2] = 0x0d;
        assert!(parse_idx(&bad).is_err());
    }

    #[test]
    fn idx_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let img = IdxArray {
            dims: vec![3, 2, 2],
            data: vec![0, 255, 0, 0, 51, 51, 51, 51, 255, 255, 255, 255],
        };
        let lab = IdxArray {
            dims: vec![3],
            data: vec![0, 1, 2],
        };
        let (pi, pl) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&pi, encode_idx(&img)).unwrap();
        fs::write(&pl, encode_idx(&lab)).unwrap();
        let ds = load_idx_dataset(&pi, &pl).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_shape(), &[1, 2, 2]);
        assert_eq!(ds.classes(), 3);
        assert!((ds.inputs()[1].data()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = Synthetic::Blobs {
            classes: 3,
            dim: 4,
            samples_per_class: 10,
            separation: 2.0,
            spread: 0.3,
        };
        let a = spec.generate(5).unwrap();
        let b = spec.generate(5).unwrap();
        assert_eq!(a.inputs(), b.inputs());
        assert_eq!(a.len(), 30);
        assert_ne!(a.inputs(), spec.generate(6).unwrap().inputs());

        let arcs = Synthetic::Arcs {
            classes: 4,
            samples_per_class: 5,
            noise: 0.1,
            extra_dims: 2,
        };
        let d = arcs.generate(1).unwrap();
        assert_eq!(d.input_shape(), &[4]);
        assert_eq!(d.classes(), 4);
    }

    #[test]
    fn split_partitions() {
        let spec = Synthetic::Blobs {
            classes: 2,
            dim: 2,
            samples_per_class: 50,
            separation: 1.0,
            spread: 0.1,
        };
        let ds = spec.generate(0).unwrap();
        let (a, b) = ds.split(0.8, 1).unwrap();
        assert_eq!(a.len(), 80);
        assert_eq!(b.len(), 20);
    }
}
