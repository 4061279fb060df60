//! Named parameter registry shared by the segmentation models, the text
//! fusion module and the augmenter. Parameters live outside any graph;
//! each forward pass binds them as leaves (trainable) or constants
//! (frozen), which is what routes gradients to the right groups.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Graph-bound views of every parameter in a set, in declaration order.
pub struct Binding {
    pub tensors: Vec<Tensor>,
    pub trainable: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param data does not match its shape"
        );
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Binding {
        Binding {
            tensors: self
                .params
                .iter()
                .map(|p| g.leaf(p.data.clone(), &p.shape, trainable))
                .collect(),
            trainable,
        }
    }

    /// Flat little-endian f64 bytes in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_values() * 8);
        for p in &self.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Overwrite values from flat little-endian f64 bytes.
    pub fn from_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        if bytes.len() != self.total_values() * 8 {
            return Err(Error::BadWeights(format!(
                "expected {} bytes of weights, got {}",
                self.total_values() * 8,
                bytes.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            for v in &mut p.data {
                *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len()
            || self
                .params
                .iter()
                .zip(&other.params)
                .any(|(a, b)| a.shape != b.shape || a.name != b.name)
        {
            return Err(Error::Shape("parameter sets have different architectures".into()));
        }
        Ok(())
    }

    /// `self = m*self + (1-m)*other`, elementwise over all weights.
    pub fn ema_from(&mut self, other: &ParamSet, m: f64) -> Result<()> {
        self.check_compatible(other)?;
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            for (a, b) in p.data.iter_mut().zip(&q.data) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
        Ok(())
    }

    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_compatible(other)?;
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.data.copy_from_slice(&q.data);
        }
        Ok(())
    }
}

impl Binding {
    /// Gradients per parameter after a backward pass; zeros when the
    /// parameter was unreachable from the loss.
    pub fn gradients(&self) -> Option<Vec<Vec<f64>>> {
        self.tensors.iter().map(|t| t.grad()).collect()
    }
}
