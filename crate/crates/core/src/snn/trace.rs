use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Packed spike flags for one layer at one time step, LSB-first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeBitmap {
    len: usize,
    words: Vec<u64>,
}

impl SpikeBitmap {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_flags(flags: impl IntoIterator<Item = bool>) -> Self {
        let mut words = Vec::new();
        let mut len = 0;
        for (i, f) in flags.into_iter().enumerate() {
            if i % 64 == 0 {
                words.push(0);
            }
            if f {
                words[i / 64] |= 1 << (i % 64);
            }
            len = i + 1;
        }
        Self { len, words }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(wi * 64 + b)
            })
        })
    }

    fn to_hex(&self) -> String {
        let bytes: Vec<u8> = self
            .words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(self.len.div_ceil(8))
            .collect();
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn from_hex(len: usize, hex: &str) -> Result<Self> {
        if hex.len() != 2 * len.div_ceil(8) {
            return Err(Error::Format(format!("bitmap of {len} bits needs {} hex digits", 2 * len.div_ceil(8))));
        }
        let mut out = Self::zeros(len);
        for (i, chunk) in hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|e| Error::Format(e.to_string()))?;
            let byte = u8::from_str_radix(s, 16).map_err(|e| Error::Format(e.to_string()))?;
            out.words[i / 8] |= (byte as u64) << (8 * (i % 8));
        }
        if len % 64 != 0 && out.words.last().is_some_and(|w| w >> (len % 64) != 0) {
            return Err(Error::Format("bitmap has bits beyond its length".into()));
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct BitmapRepr {
    len: usize,
    hex: String,
}

impl Serialize for SpikeBitmap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BitmapRepr {
            len: self.len,
            hex: self.to_hex(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpikeBitmap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = BitmapRepr::deserialize(d)?;
        SpikeBitmap::from_hex(repr.len, &repr.hex).map_err(serde::de::Error::custom)
    }
}

/// Spikes emitted by one layer over all time steps. Every spike carries the
/// value `scale` (the layer's `β·V_th`, or the upstream scale for pooling).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub shape: Vec<usize>,
    pub scale: f64,
    pub steps: Vec<SpikeBitmap>,
}

impl LayerTrace {
    pub fn neurons(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn total_spikes(&self) -> u64 {
        self.steps.iter().map(SpikeBitmap::count).sum()
    }

    /// Spike count of every neuron over all steps.
    pub fn counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.neurons()];
        for step in &self.steps {
            step.ones().for_each(|i| counts[i] += 1);
        }
        counts
    }
}

/// Record of every spiking layer's output during one inference. The analog
/// input is presented to the first layer `time_steps` times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrace {
    pub time_steps: usize,
    pub layers: Vec<LayerTrace>,
}

impl SpikeTrace {
    pub fn layer(&self, index: usize) -> Option<&LayerTrace> {
        self.layers.iter().find(|l| l.layer == index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bitmap_json_roundtrip(flags in proptest::collection::vec(any::<bool>(), 0..200)) {
            let b = SpikeBitmap::from_flags(flags.iter().copied());
            prop_assert_eq!(b.count() as usize, flags.iter().filter(|&&f| f).count());
            prop_assert_eq!(b.ones().collect::<Vec<_>>(), flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect::<Vec<_>>());
            let back: SpikeBitmap = serde_json::from_str(&serde_json::to_string(&b).unwrap()).unwrap();
            prop_assert_eq!(back, b);
        }
    }

    #[test]
    fn rejects_stray_bits() {
        assert!(serde_json::from_str::<SpikeBitmap>(r#"{"len":3,"hex":"08"}"#).is_err());
        assert!(serde_json::from_str::<SpikeBitmap>(r#"{"len":3,"hex":"0800"}"#).is_err());
        let ok: SpikeBitmap = serde_json::from_str(r#"{"len":3,"hex":"05"}"#).unwrap();
        assert!(ok.get(0) && !ok.get(1) && ok.get(2));
    }
}
