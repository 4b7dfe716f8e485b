//! Brute-force least squares over explicit basis vectors.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView3;

use crate::error::{Error, Result};

/// `target ≈ Σ_j c_j · basis_j`, with some coefficients optionally pinned.
#[derive(Clone, Debug)]
pub struct LsProblem {
    pub basis: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    /// `Some(c)` pins coefficient `j` to `c`; the rest are solved for.
    pub fixed: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct LsSolution {
    pub coeffs: Vec<f64>,
    /// The normal matrix of the free coefficients was singular; `coeffs` is
    /// the minimum-norm pseudo-solution.
    pub degenerate: bool,
    pub residual: f64,
}

impl LsProblem {
    pub fn free(basis: Vec<Vec<f64>>, target: Vec<f64>) -> Self {
        let fixed = vec![None; basis.len()];
        Self { basis, target, fixed }
    }

    /// Sum of squared errors of `coeffs`.
    pub fn residual(&self, coeffs: &[f64]) -> f64 {
        (0..self.target.len())
            .map(|e| {
                let fit: f64 = self.basis.iter().zip(coeffs).map(|(b, c)| b[e] * c).sum();
                (self.target[e] - fit).powi(2)
            })
            .sum()
    }
}

const RANK_TOL: f64 = 1e-12;

/// Solves the normal equations `GᵀG c = Gᵀ t` for the free coefficients.
pub fn brute_force_ls(p: &LsProblem) -> Result<LsSolution> {
    if p.basis.is_empty() || p.fixed.len() != p.basis.len() {
        return Err(Error::InvalidParam("least-squares problem needs a basis and one entry per coefficient".into()));
    }
    let len = p.target.len();
    if p.basis.iter().any(|b| b.len() != len) {
        return Err(Error::Shape("basis vector length differs from target".into()));
    }
    let free: Vec<usize> = (0..p.basis.len()).filter(|&j| p.fixed[j].is_none()).collect();
    let mut coeffs: Vec<f64> = p.fixed.iter().map(|f| f.unwrap_or(0.0)).collect();
    let mut degenerate = false;
    if !free.is_empty() {
        let rhs_target = DVector::from_fn(len, |e, _| {
            let pinned: f64 = (0..p.basis.len())
                .filter_map(|j| p.fixed[j].map(|c| c * p.basis[j][e]))
                .sum();
            p.target[e] - pinned
        });
        let g = DMatrix::from_fn(len, free.len(), |e, j| p.basis[free[j]][e]);
        let normal = g.transpose() * &g;
        let rhs = g.transpose() * rhs_target;
        let svd = normal.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        degenerate = smax == 0.0 || smin <= RANK_TOL * smax;
        let sol = if degenerate {
            svd.solve(&rhs, RANK_TOL * smax.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::Precondition(e.to_string()))?
        } else {
            normal
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Precondition("normal matrix is singular".into()))?
        };
        for (j, &idx) in free.iter().enumerate() {
            coeffs[idx] = sol[j];
        }
    }
    let residual = p.residual(&coeffs);
    Ok(LsSolution {
        coeffs,
        degenerate,
        residual,
    })
}

fn coeff(i: usize, k: usize) -> f64 {
    0.5 + 0.4 * i as f64 / k as f64
}

/// Basis `[A_bin, m_1, …, m_k]` for an attention tensor (already offset),
/// built from scratch: `A_bin = 1{a/α₀ > 0.5}` and `m_i = 1{a > c_i·rowmax}`.
pub fn attention_basis(a_ret: &ArrayView3<f64>, alpha0: f64, k: usize) -> Vec<Vec<f64>> {
    let (h, n, m) = a_ret.dim();
    let flat: Vec<f64> = a_ret.iter().copied().collect();
    let mut basis = vec![flat.iter().map(|&v| if v / alpha0 > 0.5 { 1.0 } else { 0.0 }).collect::<Vec<_>>()];
    for i in 1..=k {
        let c = coeff(i, k);
        let mut mask = vec![0.0; flat.len()];
        for r in 0..h * n {
            let row = &flat[r * m..(r + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (j, &v) in row.iter().enumerate() {
                if v > c * mx {
                    mask[r * m + j] = 1.0;
                }
            }
        }
        basis.push(mask);
    }
    basis
}

/// Attention problem with `α₀` pinned to `alpha0`.
pub fn attention_problem(a_ret: &ArrayView3<f64>, alpha0: f64, k: usize) -> LsProblem {
    let basis = attention_basis(a_ret, alpha0, k);
    let mut fixed = vec![None; k + 1];
    fixed[0] = Some(alpha0);
    LsProblem {
        basis,
        target: a_ret.iter().copied().collect(),
        fixed,
    }
}

/// Basis `[sign V⁰, sign V⁰·m_1, …]` with two-sided masks against the global
/// extrema of `V⁰`.
pub fn value_basis(v0: &ArrayView3<f64>, k: usize) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = v0.iter().copied().collect();
    let vmax = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vmin = flat.iter().copied().fold(f64::INFINITY, f64::min);
    let sgn: Vec<f64> = flat.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    let mut basis = vec![sgn.clone()];
    for i in 1..=k {
        let c = coeff(i, k);
        basis.push(
            flat.iter()
                .zip(&sgn)
                .map(|(&v, &s)| if v > c * vmax || v < c * vmin { s } else { 0.0 })
                .collect(),
        );
    }
    basis
}

pub fn value_problem(v0: &ArrayView3<f64>, k: usize) -> LsProblem {
    LsProblem::free(value_basis(v0, k), v0.iter().copied().collect())
}
