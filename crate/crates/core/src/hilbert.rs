//! Truncated bosonic mode spaces, finite spin spaces, and their tensor
//! products with a deterministic basis indexing.
//!
//! The composite index map is row-major with the first factor slowest, so
//! embedding an operator on factor `k` is the Kronecker product
//! `I ⊗ … ⊗ O ⊗ … ⊗ I` and flat indices are reproducible across builds.

use std::sync::Arc;

use crate::error::{Error, Result};

/// A single tensor factor: a Fock-truncated bosonic mode or a collective
/// spin of `atoms` two-level atoms (dimension `atoms + 1`, `j = atoms/2`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Factor {
    Mode { cutoff: usize },
    Spin { atoms: usize },
}

impl Factor {
    pub fn dim(&self) -> usize {
        match self {
            Factor::Mode { cutoff } => *cutoff,
            Factor::Spin { atoms } => atoms + 1,
        }
    }

    pub fn is_mode(&self) -> bool {
        matches!(self, Factor::Mode { .. })
    }

    /// Total spin `j = atoms/2` for spin factors.
    pub fn spin_j(&self) -> Option<f64> {
        match self {
            Factor::Spin { atoms } => Some(*atoms as f64 / 2.0),
            Factor::Mode { .. } => None,
        }
    }
}

/// Bosonic mode truncated to Fock states `|0⟩..|cutoff-1⟩`.
pub fn mode_space(cutoff: usize) -> Result<Factor> {
    if cutoff < 2 {
        return Err(Error::InvalidDimension {
            what: "mode cutoff",
            got: cutoff,
            min: 2,
        });
    }
    Ok(Factor::Mode { cutoff })
}

/// Collective spin of `atoms` identical two-level atoms; basis labels are
/// the eigenvalues of S3, ordered ascending from m = -j to +j.
pub fn spin_space(atoms: usize) -> Result<Factor> {
    if atoms < 1 {
        return Err(Error::InvalidDimension {
            what: "atom count",
            got: atoms,
            min: 1,
        });
    }
    Ok(Factor::Spin { atoms })
}

/// Ordered tensor product of factors with a bijective flat index map.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSpace {
    factors: Vec<Factor>,
    labels: Vec<String>,
    total_dim: usize,
}

/// Tensor product with default factor labels `f0, f1, …`.
pub fn tensor(factors: Vec<Factor>) -> Result<Arc<CompositeSpace>> {
    let labels = (0..factors.len()).map(|k| format!("f{k}")).collect();
    tensor_labelled(factors, labels)
}

/// Tensor product with explicit factor labels (used by the model presets).
pub fn tensor_labelled(factors: Vec<Factor>, labels: Vec<String>) -> Result<Arc<CompositeSpace>> {
    if factors.is_empty() {
        return Err(Error::EmptyFactors);
    }
    assert_eq!(factors.len(), labels.len(), "one label per factor");
    let total_dim = factors.iter().map(Factor::dim).product();
    Ok(Arc::new(CompositeSpace {
        factors,
        labels,
        total_dim,
    }))
}

impl CompositeSpace {
    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, k: usize) -> &Factor {
        &self.factors[k]
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn factor_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownFactor(label.to_string()))
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Flat index of a multi-index, row-major with the first factor slowest.
    pub fn flat_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.factors.len());
        let mut flat = 0;
        for (k, &i) in multi.iter().enumerate() {
            debug_assert!(i < self.factors[k].dim());
            flat = flat * self.factors[k].dim() + i;
        }
        flat
    }

    /// Multi-index of a flat index; inverse of [`flat_index`](Self::flat_index).
    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        debug_assert!(flat < self.total_dim);
        let mut rest = flat;
        let mut multi = vec![0; self.factors.len()];
        for k in (0..self.factors.len()).rev() {
            let d = self.factors[k].dim();
            multi[k] = rest % d;
            rest /= d;
        }
        multi
    }

    /// The space with factor `k` removed (used by partial trace and
    /// vacuum-mode reduction). Removing the last factor is an error.
    pub fn without_factor(&self, k: usize) -> Result<Arc<CompositeSpace>> {
        if k >= self.factors.len() {
            return Err(Error::UnknownFactor(format!("index {k}")));
        }
        if self.factors.len() == 1 {
            return Err(Error::EmptyFactors);
        }
        let mut factors = self.factors.clone();
        let mut labels = self.labels.clone();
        factors.remove(k);
        labels.remove(k);
        tensor_labelled(factors, labels)
    }

    /// Occupation label of factor `k` at basis index `i` of that factor:
    /// photon number for modes, S3 eigenvalue for spins.
    pub fn level_value(&self, k: usize, i: usize) -> f64 {
        match &self.factors[k] {
            Factor::Mode { .. } => i as f64,
            Factor::Spin { atoms } => i as f64 - *atoms as f64 / 2.0,
        }
    }
}
