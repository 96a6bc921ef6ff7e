//! Kalman rank condition and the orthogonal block decomposition it induces.

use nalgebra::{DMatrix, DVector};

use super::spec::OperatorSpec;
use crate::error::{Error, Result};
use crate::linalg::numerical_rank;

/// Default relative singular-value threshold for rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// One summand `W_m = E_m(ℝⁿ)` of the decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Zero-based positions of this block's vectors in the reference basis.
    pub indices: Vec<usize>,
    pub vectors: Vec<DVector<f64>>,
    pub projection: DMatrix<f64>,
}

impl Block {
    pub fn dim(&self) -> usize {
        self.indices.len()
    }
}

/// `ℝⁿ = ⊕ E_m(ℝⁿ)` together with the reference orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanDecomposition {
    k: usize,
    blocks: Vec<Block>,
    basis: DMatrix<f64>,
    block_of: Vec<usize>,
    rank_tol: f64,
}

/// Columns `[Q^{1/2}, AQ^{1/2}, …, A^m Q^{1/2}]`.
fn controllability_matrix(spec: &OperatorSpec, m: usize) -> DMatrix<f64> {
    let n = spec.n();
    let mut power = spec.q_sqrt();
    let mut out = DMatrix::zeros(n, n * (m + 1));
    for j in 0..=m {
        out.view_mut((0, j * n), (n, n)).copy_from(&power);
        power = spec.a() * power;
    }
    out
}

fn controllability_ranks(spec: &OperatorSpec, tol: f64) -> Result<Vec<usize>> {
    let n = spec.n();
    let mut ranks = Vec::new();
    for m in 0..n {
        let r = numerical_rank(&controllability_matrix(spec, m), tol);
        if r == n {
            ranks.push(r);
            return Ok(ranks);
        }
        if let Some(&prev) = ranks.last() {
            if r <= prev {
                return Err(Error::NotHypoelliptic { rank: r, n });
            }
        }
        ranks.push(r);
    }
    Err(Error::NotHypoelliptic {
        rank: *ranks.last().unwrap_or(&0),
        n,
    })
}

/// Minimal `k` with `rank[Q^{1/2}, …, A^k Q^{1/2}] = n`.
pub fn kalman_index(spec: &OperatorSpec, tol: f64) -> Result<usize> {
    Ok(controllability_ranks(spec, tol)?.len() - 1)
}

fn orthogonalize(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    // two passes of modified Gram–Schmidt
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(v);
            v.axpy(-c, b, 1.0);
        }
    }
}

/// Builds the blocks `W_m = V_m ⊖ V_{m-1}` with `V_m = span{A^j e_l : j ≤ m, l < p̃}`.
///
/// Block dimensions come from the controllability ranks; within a block the
/// candidates `A^m e_l` are orthogonalized greedily, largest residual first,
/// ties going to the lower source index.
pub fn decompose(spec: &OperatorSpec, tol: f64) -> Result<KalmanDecomposition> {
    let n = spec.n();
    let p = spec.p_tilde();
    let ranks = controllability_ranks(spec, tol)?;
    let k = ranks.len() - 1;

    let mut accepted: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut blocks = Vec::with_capacity(k + 1);
    let mut block_of = Vec::with_capacity(n);
    let mut candidates: Vec<DVector<f64>> = (0..p)
        .map(|l| {
            let mut e = DVector::zeros(n);
            e[l] = 1.0;
            e
        })
        .collect();

    for (m, &rank) in ranks.iter().enumerate() {
        let prev = if m == 0 { 0 } else { ranks[m - 1] };
        let need = rank - prev;
        let start = accepted.len();
        let mut residuals: Vec<DVector<f64>> = candidates
            .iter()
            .map(|c| {
                let mut r = c.clone();
                orthogonalize(&mut r, &accepted);
                r
            })
            .collect();
        let mut used = vec![false; residuals.len()];
        for _ in 0..need {
            let mut best: Option<(usize, f64)> = None;
            for (idx, r) in residuals.iter().enumerate() {
                if used[idx] {
                    continue;
                }
                let norm = r.norm();
                match best {
                    Some((_, b)) if norm <= b * (1.0 + 1e-12) => {}
                    _ => best = Some((idx, norm)),
                }
            }
            let (idx, norm) = best.ok_or(Error::NotHypoelliptic {
                rank: accepted.len(),
                n,
            })?;
            if norm == 0.0 {
                return Err(Error::NotHypoelliptic {
                    rank: accepted.len(),
                    n,
                });
            }
            used[idx] = true;
            let v = &residuals[idx] / norm;
            for (j, r) in residuals.iter_mut().enumerate() {
                if !used[j] {
                    let c = v.dot(r);
                    r.axpy(-c, &v, 1.0);
                }
            }
            accepted.push(v);
            block_of.push(m);
        }
        let vectors: Vec<DVector<f64>> = accepted[start..].to_vec();
        let mut projection = DMatrix::zeros(n, n);
        for v in &vectors {
            projection += v * v.transpose();
        }
        blocks.push(Block {
            indices: (start..accepted.len()).collect(),
            vectors,
            projection,
        });
        candidates = candidates.iter().map(|c| spec.a() * c).collect();
    }

    let basis = DMatrix::from_columns(&accepted);
    Ok(KalmanDecomposition {
        k,
        blocks,
        basis,
        block_of,
        rank_tol: tol,
    })
}

impl KalmanDecomposition {
    /// Kalman index.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.basis.nrows()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, h: usize) -> &Block {
        &self.blocks[h]
    }

    /// Orthogonal reference basis, one vector per column.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn basis_vector(&self, i: usize) -> DVector<f64> {
        self.basis.column(i).into_owned()
    }

    /// Block `h` such that basis vector `i` spans part of `E_h(ℝⁿ)`.
    pub fn block_of(&self, i: usize) -> usize {
        self.block_of[i]
    }

    pub fn block_indices(&self) -> &[usize] {
        &self.block_of
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::dim).collect()
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    /// Coordinates of `x` in the reference basis.
    pub fn coordinates(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|i| (0..n).map(|r| self.basis[(r, i)] * x[r]).sum())
            .collect()
    }

    /// `|E_h x|` for every block.
    pub fn block_norms(&self, x: &[f64]) -> Vec<f64> {
        let c = self.coordinates(x);
        let mut sq = vec![0.0; self.k + 1];
        for (i, ci) in c.iter().enumerate() {
            sq[self.block_of[i]] += ci * ci;
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// `|||x||| = Σ_h |E_h x|^{1/(2h+1)}`.
    pub fn quasi_norm(&self, x: &[f64]) -> f64 {
        self.block_norms(x)
            .iter()
            .enumerate()
            .map(|(h, &r)| r.powf(1.0 / (2 * h + 1) as f64))
            .sum()
    }

    /// `d(x, y) = |||x − y|||`.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        self.quasi_norm(&diff)
    }

    /// Anisotropic dilation: scales `E_h x` by `λ^{2h+1}`, so `|||δ_λ x||| = λ|||x|||`.
    pub fn dilate(&self, x: &[f64], lambda: f64) -> Vec<f64> {
        let c = self.coordinates(x);
        let n = self.n();
        let mut out = vec![0.0; n];
        for (i, ci) in c.iter().enumerate() {
            let s = lambda.powi(2 * self.block_of[i] as i32 + 1) * ci;
            for r in 0..n {
                out[r] += self.basis[(r, i)] * s;
            }
        }
        out
    }

    /// Human-readable metric, e.g. `d = |E0·|^1 + |E1·|^(1/3)`.
    pub fn metric_description(&self) -> String {
        let parts: Vec<String> = (0..=self.k)
            .map(|h| {
                if h == 0 {
                    "|E0·|^1".to_string()
                } else {
                    format!("|E{h}·|^(1/{})", 2 * h + 1)
                }
            })
            .collect();
        format!("d = {}", parts.join(" + "))
    }

    /// Exponents `1/(2h+1)` of the metric, one per block.
    pub fn metric_exponents(&self) -> Vec<f64> {
        (0..=self.k).map(|h| 1.0 / (2 * h + 1) as f64).collect()
    }
}
