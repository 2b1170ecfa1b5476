use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Construction(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (name, t) in other.names.into_iter().zip(other.tensors) {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// Subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n, t.clone()).expect("names are unique");
        }
        out
    }

    /// SHA-256 over names, shapes and raw parameter bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Pushes every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool, into: &mut Bindings) {
        for (name, t) in self.iter() {
            let v = tape.leaf(t.clone(), requires_grad);
            into.vars.insert(name.to_string(), v);
        }
    }
}

/// Parameter name to tape variable.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Construction(format!("parameter `{name}` is not bound")))
    }

    /// Convenience: binds all of `sets` on a fresh entry list.
    pub fn of(tape: &mut Tape, sets: &[&ParamSet], requires_grad: bool) -> Self {
        let mut b = Self::new();
        for s in sets {
            s.bind(tape, requires_grad, &mut b);
        }
        b
    }
}

/// Weight initializer with a seeded, platform-independent RNG.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Zero-mean normal weights with standard deviation `gain / sqrt(fan_in)`.
    pub fn conv_weight(&mut self, out_ch: usize, in_ch: usize, kernel: usize, gain: f64) -> Tensor {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("positive std");
        let n = out_ch * in_ch * kernel * kernel;
        let data = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        Tensor::from_vec(&[out_ch, in_ch, kernel, kernel], data).expect("shape matches")
    }
}

/// Derives a per-network seed from an experiment seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
