//! Named parameter storage.
//!
//! Every tensor is drawn from its own RNG stream, seeded from the store seed
//! and the parameter's hierarchical name, so initialization does not depend on
//! construction order.

use std::collections::BTreeMap;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Arc<Tensor>>,
    rng_seed: u64,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed ^ name_hash(name))
    }

    fn insert_new(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name.to_string(), Arc::new(t));
        Ok(())
    }

    /// Registers a `[fan_in, fan_out]` weight drawn uniformly from
    /// ±sqrt(6 / (fan_in + fan_out)).
    pub fn init_uniform_weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert_new(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn init_constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert_new(name, Tensor::full(shape, value))
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ParameterStore::set",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Order-sensitive checksum over every value's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.params {
            h ^= name_hash(name);
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn to_record(&self) -> ParameterRecord {
        let parameters = self
            .params
            .iter()
            .map(|(k, t)| {
                let mut bytes = Vec::with_capacity(t.len() * 8);
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                (
                    k.clone(),
                    EncodedTensor {
                        shape: t.shape().to_vec(),
                        values_f64_le: B64.encode(bytes),
                    },
                )
            })
            .collect();
        ParameterRecord {
            rng_seed: self.rng_seed,
            parameters,
        }
    }

    pub fn from_record(record: &ParameterRecord) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, enc) in &record.parameters {
            let bytes = B64
                .decode(&enc.values_f64_le)
                .map_err(|e| Error::invalid(format!("parameter {name}: {e}")))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::invalid(format!("parameter {name}: truncated values")));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(name.clone(), Arc::new(Tensor::new(enc.shape.clone(), data)?));
        }
        Ok(Self {
            params,
            rng_seed: record.rng_seed,
        })
    }
}

/// On-disk form: name → shape → little-endian f64 bytes (base64).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParameterRecord {
    pub rng_seed: u64,
    pub parameters: BTreeMap<String, EncodedTensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub values_f64_le: String,
}
