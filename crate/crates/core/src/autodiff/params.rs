use std::io::{BufRead, Write};

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::AutodiffError;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub value: Tensor<T>,
    /// Optimizer slots (for AdamW: first and second moment), created lazily.
    pub slots: Vec<Tensor<T>>,
}

/// Named trainable tensors, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<(), AutodiffError> {
        if self.params.contains_key(name) {
            return Err(AutodiffError::Contract(format!("parameter `{name}` defined twice")));
        }
        self.params.insert(name.to_string(), Param { value, slots: Vec::new() });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, p)| (k.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Values converted to another precision; optimizer slots are dropped.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), slots: Vec::new() }))
                .collect(),
        }
    }

    pub fn clear_slots(&mut self) {
        for p in self.params.values_mut() {
            p.slots.clear();
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    run_seed: u64,
    manifest: Vec<(String, Vec<usize>)>,
}

impl ParamStore<f32> {
    /// Writes one JSON header line (schema version, run seed, name→shape
    /// manifest) followed by the raw little-endian `f32` blocks in manifest
    /// order.
    pub fn save_checkpoint<W: Write>(&self, mut w: W, run_seed: u64) -> Result<(), AutodiffError> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            run_seed,
            manifest: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), p.value.shape().to_vec()))
                .collect(),
        };
        serde_json::to_writer(&mut w, &header)
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        w.write_all(b"\n")?;
        for p in self.params.values() {
            let mut buf = Vec::with_capacity(p.value.numel() * 4);
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Returns the store and the run seed recorded in the header.
    pub fn load_checkpoint<R: BufRead>(mut r: R) -> Result<(Self, u64), AutodiffError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| AutodiffError::Checkpoint(format!("bad header: {e}")))?;
        if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported schema version {}",
                header.schema_version
            )));
        }
        let mut store = ParamStore::new();
        for (name, shape) in header.manifest {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(|_| {
                AutodiffError::Checkpoint(format!("truncated data for `{name}`"))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(AutodiffError::Checkpoint("trailing bytes after last block".into()));
        }
        Ok((store, header.run_seed))
    }
}

/// Parameter initializers used when building model stores.
pub mod init {
    use super::*;

    /// Glorot-uniform `fan_in × fan_out` matrix.
    pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<f32> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        Tensor::from_parts(vec![fan_in, fan_out], data)
    }

    pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
        let dist = Normal::new(0.0, std).expect("std is positive");
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng) as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        store
            .insert("a.w", Tensor::matrix(2, 2, vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]).unwrap())
            .unwrap();
        store.insert("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let mut bytes = Vec::new();
        store.save_checkpoint(&mut bytes, 42).unwrap();
        let (back, seed) = ParamStore::load_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(back, store);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a.w", "b"]);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[4])).unwrap();
        let mut bytes = Vec::new();
        store.save_checkpoint(&mut bytes, 0).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(ParamStore::load_checkpoint(bytes.as_slice()).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1])).is_err());
    }
}
