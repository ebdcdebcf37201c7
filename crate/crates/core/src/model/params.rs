//! Named parameter storage shared by every model component.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::checkpoint::NamedArray;
use crate::autodiff::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies (matrices and kernels only).
    pub decay: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("checkpoint has no parameter named `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {expected:?} but checkpoint holds {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint parameter `{0}` is not part of this model")]
    Unexpected(String),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    meta: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store whose parameters carry shapes but no values.
    pub fn meta() -> Self {
        ParamStore { meta: true, ..Self::default() }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    pub fn add<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter `{name}`");
        let tensor = if self.meta {
            Tensor::meta_parameter(shape, trainable)
        } else {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            if trainable {
                Tensor::parameter(shape, data)
            } else {
                Tensor::frozen_parameter(shape, data)
            }
            .expect("parameter shape")
        };
        let decay = shape.len() >= 2 && !name.ends_with("pos");
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry { name: name.to_string(), tensor, decay });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replace the tensor behind `id`; the optimizer uses this with
    /// [`Tensor::with_data`] so identities survive updates.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.tensor.shape(), tensor.shape(), "shape change for `{}`", e.name);
        e.tensor = tensor;
    }

    pub fn set_decay(&mut self, id: ParamId, decay: bool) {
        self.entries[id.0].decay = decay;
    }

    /// Toggle gradient flow for every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.tensor = e.tensor.with_requires_grad(trainable);
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.tensor.requires_grad())
    }

    pub fn frozen(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| !e.tensor.requires_grad())
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|e| e.tensor.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen().map(|e| e.tensor.numel()).sum()
    }

    /// FNV-1a over the bit patterns of every frozen value.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.frozen() {
            for b in e.name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
            for v in e.tensor.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn to_named_arrays(&self) -> Vec<NamedArray> {
        self.entries
            .iter()
            .map(|e| NamedArray {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.to_vec(),
            })
            .collect()
    }

    /// Overwrite every parameter from a checkpoint. Names and shapes must
    /// match exactly.
    pub fn load_named_arrays(&mut self, arrays: &[NamedArray]) -> Result<(), ParamError> {
        if let Some(extra) = arrays.iter().find(|a| !self.by_name.contains_key(&a.name)) {
            return Err(ParamError::Unexpected(extra.name.clone()));
        }
        let lookup: HashMap<&str, &NamedArray> = arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut updated = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let a = lookup.get(e.name.as_str()).ok_or_else(|| ParamError::Missing(e.name.clone()))?;
            if a.shape != e.tensor.shape() {
                return Err(ParamError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: e.tensor.shape().to_vec(),
                    found: a.shape.clone(),
                });
            }
            updated.push(e.tensor.with_data(a.data.clone()).expect("length checked by shape"));
        }
        for (e, t) in self.entries.iter_mut().zip(updated) {
            e.tensor = t;
        }
        Ok(())
    }
}

impl Index<ParamId> for ParamStore {
    type Output = Tensor;

    fn index(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add("frozen.w", &[2, 3], Init::Normal(0.02), false, &mut rng);
        s.add("side.w", &[3, 2], Init::Normal(0.02), true, &mut rng);
        s.add("side.b", &[2], Init::Zeros, true, &mut rng);
        s
    }

    #[test]
    fn counts_and_decay_flags() {
        let s = store();
        assert_eq!(s.trainable_count(), 8);
        assert_eq!(s.frozen_count(), 6);
        assert!(s.entry(s.id("side.w").unwrap()).decay);
        assert!(!s.entry(s.id("side.b").unwrap()).decay);
    }

    #[test]
    fn checkpoint_round_trip_keeps_identity() {
        let mut s = store();
        let id = s.id("side.w").unwrap();
        let before = s[id].id();
        let mut arrays = s.to_named_arrays();
        arrays[1].data = vec![1.0; 6];
        s.load_named_arrays(&arrays).unwrap();
        assert_eq!(s[id].id(), before);
        assert_eq!(s[id].to_vec(), vec![1.0; 6]);
        assert!(s[id].requires_grad());
    }

    #[test]
    fn load_rejects_mismatch() {
        let mut s = store();
        let mut arrays = s.to_named_arrays();
        arrays[0].shape = vec![3, 2];
        assert!(matches!(s.load_named_arrays(&arrays), Err(ParamError::ShapeMismatch { .. })));
        let arrays = s.to_named_arrays()[1..].to_vec();
        assert_eq!(s.load_named_arrays(&arrays), Err(ParamError::Missing("frozen.w".into())));
    }
}
