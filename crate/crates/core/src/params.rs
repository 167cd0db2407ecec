//! Named parameter storage, tape binding and checkpoint files.
//!
//! Names follow `component.index.branch.matrix`, e.g.
//! `encoder.1.query.q.w` or `decoder.aux0.2.conv.b`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use mafea_tensor::{io, Gradients, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{config_err, data_err, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| config_err(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| config_err(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Registers every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        io::write_archive(&mut w, self.tensors.iter().map(|(k, v)| (k.as_str(), v)))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut tensors = BTreeMap::new();
        for (name, t) in io::read_archive(&mut r)? {
            if tensors.insert(name.clone(), t).is_some() {
                return Err(data_err(format!("duplicate parameter {name} in checkpoint")));
            }
        }
        Ok(Self { tensors })
    }

    /// Fails unless `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other
                .tensors
                .get(name)
                .ok_or_else(|| config_err(format!("checkpoint lacks parameter {name}")))?;
            if o.shape() != t.shape() {
                return Err(config_err(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    o.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(config_err(format!("checkpoint has unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Parameters registered on one tape.
#[derive(Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| config_err(format!("missing parameter {name}")))
    }

    /// Gradient per parameter, zero where the loss did not depend on it.
    pub fn collect_grads(&self, grads: &Gradients, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads.wrt(v).cloned().unwrap_or_else(|| {
                    Tensor::zeros(store.get(name).map(|t| t.shape()).unwrap_or(&[]))
                });
                (name.clone(), g)
            })
            .collect()
    }
}

/// Parameter initialisation helpers.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// `prefix.w: [fan_in, fan_out]` Glorot-normal, `prefix.b` zeros.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.store
            .insert(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], std, self.rng));
        self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) {
        self.store.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]));
        self.store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
    }

    /// `prefix.w: [c_out, c_in, k, k]` He-normal, `prefix.b` zeros.
    pub fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        self.store
            .insert(format!("{prefix}.w"), Tensor::randn(&[c_out, c_in, k, k], std, self.rng));
        self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[c_out]));
    }

    pub fn embedding(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::randn(shape, 0.02, self.rng));
    }
}
