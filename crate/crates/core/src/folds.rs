//! Seeded K-fold partitions, optionally stratified by treatment arm.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Arm;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    /// Fold id in `0..k` for every row.
    pub assignment: Vec<usize>,
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
}

impl FoldPlan {
    /// Uniform random partition of `n` rows into `k` folds of near-equal size.
    pub fn random(n: usize, k: usize, seed: u64) -> Result<Self> {
        Self::build(&vec![0u8; n], k, seed, false)
    }

    /// Partition in which each arm is spread evenly over the folds.
    pub fn stratified(arms: &[Arm], k: usize, seed: u64) -> Result<Self> {
        let strata: Vec<u8> = arms.iter().map(|a| a.is_treated() as u8).collect();
        Self::build(&strata, k, seed, true)
    }

    fn build(strata: &[u8], k: usize, seed: u64, stratified: bool) -> Result<Self> {
        let n = strata.len();
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
        }
        if n < k {
            return Err(Error::DegenerateFold(format!("{n} rows cannot fill {k} folds")));
        }
        let mut rng = rng::stream(seed, 0xf01d);
        let mut assignment = vec![0; n];
        // continue the round-robin across strata so fold sizes stay balanced
        let mut offset = 0;
        for s in [0u8, 1u8] {
            let mut rows: Vec<usize> = (0..n).filter(|&i| strata[i] == s).collect();
            rows.shuffle(&mut rng);
            for (pos, &i) in rows.iter().enumerate() {
                assignment[i] = (offset + pos) % k;
            }
            offset += rows.len();
        }
        Ok(Self { assignment, k, seed, stratified })
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Rows in fold `fold`, ascending.
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    /// Rows outside fold `fold`, ascending.
    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}
