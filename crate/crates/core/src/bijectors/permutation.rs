use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_width, BijectorError, LayerOutput};
use crate::diffcore::{Backend, Tensor};

/// Column permutation: `y[:, j] = x[:, perm[j]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self, BijectorError> {
        let n = perm.len();
        let mut inverse = vec![usize::MAX; n];
        for (j, &p) in perm.iter().enumerate() {
            if p >= n || inverse[p] != usize::MAX {
                return Err(BijectorError::Dim(format!("{perm:?} is not a permutation")));
            }
            inverse[p] = j;
        }
        Ok(Self { perm, inverse })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new((0..dim).collect()).expect("identity")
    }

    pub fn reversal(dim: usize) -> Self {
        Self::new((0..dim).rev().collect()).expect("reversal")
    }

    /// Moves the last `D - floor(D/2)` columns in front of the first
    /// `floor(D/2)`.
    pub fn swap_halves(dim: usize) -> Self {
        let d = dim / 2;
        Self::new((d..dim).chain(0..d).collect()).expect("swap")
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        Self::new(perm).expect("shuffle")
    }

    /// Uniform over the permutations that move column 0 away from the
    /// front. An autoregressive layer leaves its first column unchanged, so
    /// this guarantees the next layer transforms it.
    pub fn random_moving_first<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        loop {
            let p = Self::random(dim, rng);
            if dim < 2 || p.perm[0] != 0 {
                return p;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_indices(&self) -> &[usize] {
        &self.inverse
    }

    fn zero_logdet<B: Backend>(b: &mut B, v: &B::V) -> B::V {
        let n = b.value(v).rows();
        b.constant(Tensor::zeros(&[n]))
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::V) -> LayerOutput<B> {
        check_width(b, x, self.dim())?;
        let y = b.select_cols(x, &self.perm);
        let ld = Self::zero_logdet(b, x);
        Ok((y, ld))
    }

    pub fn inverse<B: Backend>(&self, b: &mut B, y: &B::V) -> LayerOutput<B> {
        check_width(b, y, self.dim())?;
        let x = b.select_cols(y, &self.inverse);
        let ld = Self::zero_logdet(b, y);
        Ok((x, ld))
    }
}
