//! Product-space vectors split into named blocks.
//!
//! All solvers in this crate operate on a product space `R^{n_1} x ... x R^{n_p}`.
//! A [`BlockVector`] keeps the blocks separate so per-block updates and
//! per-block metrics stay cheap, while norms and distances are taken over the
//! whole product.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A point in a product space, stored block by block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    blocks: Vec<DVector<f64>>,
}

impl BlockVector {
    pub fn new(blocks: Vec<DVector<f64>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Shape("a block vector needs at least one block".into()));
        }
        if blocks.iter().any(|b| b.is_empty()) {
            return Err(Error::Shape("empty block".into()));
        }
        Ok(Self { blocks })
    }

    /// Single-block convenience constructor.
    pub fn single(v: DVector<f64>) -> Result<Self> {
        Self::new(vec![v])
    }

    /// One scalar block; handy for one-dimensional test problems.
    pub fn scalar(x: f64) -> Self {
        Self { blocks: vec![DVector::from_element(1, x)] }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Shape("block dims must be nonempty and positive".into()));
        }
        Ok(Self { blocks: dims.iter().map(|&n| DVector::zeros(n)).collect() })
    }

    pub fn from_flat(dims: &[usize], flat: &[f64]) -> Result<Self> {
        let total: usize = dims.iter().sum();
        if flat.len() != total {
            return Err(Error::Shape(format!(
                "flat length {} does not match block dims totalling {}",
                flat.len(),
                total
            )));
        }
        let mut blocks = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &n in dims {
            blocks.push(DVector::from_column_slice(&flat[off..off + n]));
            off += n;
        }
        Self::new(blocks)
    }

    pub fn p(&self) -> usize {
        self.blocks.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn block(&self, i: usize) -> &DVector<f64> {
        &self.blocks[i]
    }

    pub fn set_block(&mut self, i: usize, v: DVector<f64>) {
        assert_eq!(v.len(), self.blocks[i].len(), "block dimension changed");
        self.blocks[i] = v;
    }

    pub fn blocks(&self) -> &[DVector<f64>] {
        &self.blocks
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for b in &self.blocks {
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    /// Product-space Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn norm_squared(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_squared()).sum()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.sub(other).norm()
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.dims(), other.dims(), "block dims differ");
        Self {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dims(), other.dims(), "block dims differ");
        Self {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, t: f64) -> Self {
        Self { blocks: self.blocks.iter().map(|b| b * t).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let v = BlockVector::from_flat(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(v.p(), 2);
        assert_eq!(v.block(1)[2], 5.0);
        assert_eq!(v.flat(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn norm_is_product_space_norm() {
        let v = BlockVector::from_flat(&[1, 1], &[3.0, 4.0]).unwrap();
        assert_eq!(v.norm(), 5.0);
    }

    #[test]
    fn mismatched_flat_length_rejected() {
        assert!(BlockVector::from_flat(&[2, 2], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn empty_blocks_rejected() {
        assert!(BlockVector::new(vec![]).is_err());
        assert!(BlockVector::zeros(&[2, 0]).is_err());
    }
}
