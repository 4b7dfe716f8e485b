//! Each gradient formula of the GSB attention and value binarizers written
//! out as an isolated expression over flat row-major buffers.
//!
//! Nothing here calls into the production forward or backward code.

use ndarray::{Array3, ArrayView3};

fn coeff(i: usize, k: usize) -> f64 {
    0.5 + 0.4 * i as f64 / k as f64
}

fn sgn(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Offset attention `A_re − Φ`, the per-row maxima, and the masks.
struct AttnParts {
    dims: (usize, usize, usize),
    ret: Vec<f64>,
    /// Row maximum for every element (repeated along the row).
    rowmax: Vec<f64>,
}

impl AttnParts {
    fn new(a_re: &ArrayView3<f64>, phi: &ArrayView3<f64>) -> Self {
        let dims = a_re.dim();
        let ret: Vec<f64> = a_re.iter().zip(phi.iter()).map(|(a, p)| a - p).collect();
        let m = dims.2;
        let mut rowmax = vec![0.0; ret.len()];
        for (row, out) in ret.chunks(m).zip(rowmax.chunks_mut(m)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.fill(mx);
        }
        Self { dims, ret, rowmax }
    }

    fn theta(&self, e: usize, i: usize, k: usize) -> f64 {
        coeff(i, k) * self.rowmax[e]
    }
}

/// `∂L/∂α₀ = mean(g · (A_bin − A_ret/α₀))` inside `0 < A_ret/α₀ < 1`,
/// `mean(g · A_bin)` outside.
pub fn attn_base_scale_grad(upstream: &ArrayView3<f64>, a_re: &ArrayView3<f64>, phi: &ArrayView3<f64>, alpha0: f64) -> f64 {
    let p = AttnParts::new(a_re, phi);
    let g: Vec<f64> = upstream.iter().copied().collect();
    let mut total = 0.0;
    for e in 0..g.len() {
        let s = p.ret[e] / alpha0;
        let bin = if s > 0.5 { 1.0 } else { 0.0 };
        total += g[e] * if 0.0 < s && s < 1.0 { bin - s } else { bin };
    }
    total / g.len() as f64
}

/// `∂L/∂α_i = mean(g · M_i)`.
pub fn attn_mask_scale_grad(upstream: &ArrayView3<f64>, a_re: &ArrayView3<f64>, phi: &ArrayView3<f64>, i: usize, k: usize) -> f64 {
    let p = AttnParts::new(a_re, phi);
    let g: Vec<f64> = upstream.iter().copied().collect();
    let mut total = 0.0;
    for e in 0..g.len() {
        if p.ret[e] > p.theta(e, i, k) {
            total += g[e];
        }
    }
    total / g.len() as f64
}

/// `∂L/∂A_ret = g · (1{0 < A_ret/α₀ < 1} + Σ_i α_i · 1{0 < A_ret − Θ_i < 1})`.
pub fn attn_input_grad(
    upstream: &ArrayView3<f64>,
    a_re: &ArrayView3<f64>,
    phi: &ArrayView3<f64>,
    alphas: &[f64],
) -> Array3<f64> {
    let p = AttnParts::new(a_re, phi);
    let k = alphas.len() - 1;
    let g: Vec<f64> = upstream.iter().copied().collect();
    let mut out = vec![0.0; g.len()];
    for e in 0..g.len() {
        let s = p.ret[e] / alphas[0];
        let mut w = if 0.0 < s && s < 1.0 { 1.0 } else { 0.0 };
        for (i, &a) in alphas.iter().enumerate().skip(1) {
            let diff = p.ret[e] - p.theta(e, i, k);
            if 0.0 < diff && diff < 1.0 {
                w += a;
            }
        }
        out[e] = g[e] * w;
    }
    Array3::from_shape_vec(p.dims, out).expect("dims")
}

/// `∂L/∂Φ = −∂L/∂A_ret`.
pub fn attn_offset_grad(
    upstream: &ArrayView3<f64>,
    a_re: &ArrayView3<f64>,
    phi: &ArrayView3<f64>,
    alphas: &[f64],
) -> Array3<f64> {
    -attn_input_grad(upstream, a_re, phi, alphas)
}

/// `V⁰ = V − Ω` (Ω broadcast over tokens) and its global extrema.
struct ValueParts {
    dims: (usize, usize, usize),
    v0: Vec<f64>,
    vmax: f64,
    vmin: f64,
}

impl ValueParts {
    fn new(v: &ArrayView3<f64>, omega: &ArrayView3<f64>) -> Self {
        let dims = v.dim();
        let (_, n, c) = dims;
        let om: Vec<f64> = omega.iter().copied().collect();
        let v0: Vec<f64> = v
            .iter()
            .enumerate()
            .map(|(e, &x)| {
                let h = e / (n * c);
                x - om[h * c + e % c]
            })
            .collect();
        let vmax = v0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let vmin = v0.iter().copied().fold(f64::INFINITY, f64::min);
        Self { dims, v0, vmax, vmin }
    }

    fn in_mask(&self, e: usize, i: usize, k: usize) -> bool {
        let c = coeff(i, k);
        self.v0[e] > c * self.vmax || self.v0[e] < c * self.vmin
    }
}

fn beta_term(x: f64, beta: f64) -> f64 {
    let s = x / beta;
    if -1.0 < s && s < 1.0 {
        sgn(x) - s
    } else {
        sgn(x)
    }
}

/// `∂L/∂β₀ = mean(g · (sign V⁰ − V⁰/β₀))` inside `|V⁰/β₀| < 1`,
/// `mean(g · sign V⁰)` outside.
pub fn value_base_scale_grad(upstream: &ArrayView3<f64>, v: &ArrayView3<f64>, omega: &ArrayView3<f64>, beta0: f64) -> f64 {
    let p = ValueParts::new(v, omega);
    let g: Vec<f64> = upstream.iter().copied().collect();
    let total: f64 = (0..g.len()).map(|e| g[e] * beta_term(p.v0[e], beta0)).sum();
    total / g.len() as f64
}

/// `∂L/∂β_i`: the base-scale expression with `β_i`, restricted to `M_i`.
pub fn value_mask_scale_grad(
    upstream: &ArrayView3<f64>,
    v: &ArrayView3<f64>,
    omega: &ArrayView3<f64>,
    betas: &[f64],
    i: usize,
) -> f64 {
    let p = ValueParts::new(v, omega);
    let k = betas.len() - 1;
    let g: Vec<f64> = upstream.iter().copied().collect();
    let total: f64 = (0..g.len())
        .filter(|&e| p.in_mask(e, i, k))
        .map(|e| g[e] * beta_term(p.v0[e], betas[i]))
        .sum();
    total / g.len() as f64
}

/// `∂L/∂V⁰ = g · (1{|V⁰/β₀| < 1} + Σ_i M_i · 1{|V⁰/β_i| ≤ 1})`.
pub fn value_input_grad(upstream: &ArrayView3<f64>, v: &ArrayView3<f64>, omega: &ArrayView3<f64>, betas: &[f64]) -> Array3<f64> {
    let p = ValueParts::new(v, omega);
    let k = betas.len() - 1;
    let g: Vec<f64> = upstream.iter().copied().collect();
    let mut out = vec![0.0; g.len()];
    for e in 0..g.len() {
        let s0 = p.v0[e] / betas[0];
        let mut w = if -1.0 < s0 && s0 < 1.0 { 1.0 } else { 0.0 };
        for (i, &b) in betas.iter().enumerate().skip(1) {
            let s = p.v0[e] / b;
            if p.in_mask(e, i, k) && (-1.0..=1.0).contains(&s) {
                w += 1.0;
            }
        }
        out[e] = g[e] * w;
    }
    Array3::from_shape_vec(p.dims, out).expect("dims")
}

/// `∂L/∂Ω = −Σ_tokens ∂L/∂V⁰`, shape `H × 1 × C`.
pub fn value_offset_grad(upstream: &ArrayView3<f64>, v: &ArrayView3<f64>, omega: &ArrayView3<f64>, betas: &[f64]) -> Array3<f64> {
    let dv = value_input_grad(upstream, v, omega, betas);
    let (h, n, c) = dv.dim();
    Array3::from_shape_fn((h, 1, c), |(hh, _, cc)| -(0..n).map(|r| dv[[hh, r, cc]]).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn mask_scale_on_full_mask_is_upstream_mean() {
        // constant rows: every entry equals the row max, so every mask is full
        let a = Array3::from_elem((1, 2, 3), 1.0 / 3.0);
        let phi = Array3::zeros((1, 2, 3));
        let g = Array3::from_shape_fn((1, 2, 3), |(_, r, c)| (r * 3 + c) as f64);
        let d = attn_mask_scale_grad(&g.view(), &a.view(), &phi.view(), 1, 2);
        assert!((d - 2.5).abs() < 1e-15);
    }

    #[test]
    fn value_input_is_zero_with_all_windows_closed() {
        let v = Array3::from_shape_fn((1, 2, 2), |(_, r, c)| if (r + c) % 2 == 0 { 5.0 } else { -5.0 });
        let om = Array3::zeros((1, 1, 2));
        let g = Array3::from_elem((1, 2, 2), 1.0);
        // |v/β| = 5 everywhere, outside every window
        let d = value_input_grad(&g.view(), &v.view(), &om.view(), &[1.0, 1.0, 1.0]);
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn base_scale_inside_window() {
        let a = ndarray::array![[[0.2, 0.3], [0.1, 0.4]]];
        let phi = Array3::zeros((1, 2, 2));
        let g = ndarray::array![[[1.0, 2.0], [3.0, 4.0]]];
        let alpha0 = 0.5;
        // s = [0.4, 0.6, 0.2, 0.8], bin = [0, 1, 0, 1]
        let want = (1.0 * -0.4 + 2.0 * 0.4 + 3.0 * -0.2 + 4.0 * 0.2) / 4.0;
        let d = attn_base_scale_grad(&g.view(), &a.view(), &phi.view(), alpha0);
        assert!((d - want).abs() < 1e-15);
    }
}
