use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{DenseTensor, Element};
use crate::error::{PitError, Result};

/// A bijection on `[0, extent)` attached to an axis symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    axis: String,
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(axis: impl Into<String>, mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(PitError::InvalidArgument(format!(
                    "mapping is not a bijection on [0, {})",
                    mapping.len()
                )));
            }
        }
        Ok(Permutation {
            axis: axis.into(),
            mapping,
        })
    }

    pub fn identity(axis: impl Into<String>, extent: usize) -> Self {
        Permutation {
            axis: axis.into(),
            mapping: (0..extent).collect(),
        }
    }

    pub fn reverse(axis: impl Into<String>, extent: usize) -> Self {
        Permutation {
            axis: axis.into(),
            mapping: (0..extent).rev().collect(),
        }
    }

    pub fn random(axis: impl Into<String>, extent: usize, seed: u64) -> Self {
        let mut mapping: Vec<usize> = (0..extent).collect();
        mapping.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Permutation {
            axis: axis.into(),
            mapping,
        }
    }

    pub fn axis(&self) -> &str {
        &self.axis
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn extent(&self) -> usize {
        self.mapping.len()
    }

    pub fn invert(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation {
            axis: self.axis.clone(),
            mapping: inv,
        }
    }

    /// `self` after `first`: `i -> self(first(i))`.
    pub fn compose(&self, first: &Permutation) -> Result<Self> {
        if self.extent() != first.extent() {
            return Err(PitError::Shape(
                "composing permutations of different extents".into(),
            ));
        }
        Ok(Permutation {
            axis: self.axis.clone(),
            mapping: first.mapping.iter().map(|&i| self.mapping[i]).collect(),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }
}

/// Moves slice `i` along `dim` to position `p.mapping()[i]`.
pub fn apply_permutation<T: Element>(
    t: &DenseTensor<T>,
    p: &Permutation,
    dim: usize,
) -> Result<DenseTensor<T>> {
    let shape = t.shape();
    if dim >= shape.len() {
        return Err(PitError::Shape(format!(
            "dimension {dim} on a rank-{} tensor",
            shape.len()
        )));
    }
    if shape[dim] != p.extent() {
        return Err(PitError::Shape(format!(
            "permutation of extent {} on axis of extent {}",
            p.extent(),
            shape[dim]
        )));
    }
    let strides = t.strides();
    let stride = strides[dim];
    let mut out = DenseTensor::zeros(shape, t.layout());
    let src = t.data();
    let dst = out.data_mut();
    for (off, &v) in src.iter().enumerate() {
        let i = off / stride % shape[dim];
        let new_off = off - i * stride + p.mapping()[i] * stride;
        dst[new_off] = v;
    }
    Ok(out)
}
