//! Production-versus-oracle comparisons shared by the `grad-check` and
//! `init-check` commands and the test suite.

use ndarray::{Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::gsb_attention::{gsb_attn_backward, gsb_attn_forward, init_attn_scales, GsbAttnState, InitMethod};
use crate::gsb_value::{gsb_value_backward, gsb_value_forward, init_value_scales, GsbValueState};
use crate::oracle::grads;
use crate::oracle::{attention_problem, brute_force_ls, value_problem};
use crate::tensor::Tensor3;

/// Tolerance of the gradient-formula comparison (double precision).
pub const GRAD_TOL: f64 = 1e-10;
/// Tolerance of the closed-form init against the least-squares solve.
pub const INIT_TOL: f64 = 1e-8;

/// Softmax rows of exponential logits: a few large entries, a long tail.
pub fn long_tailed_attention(rng: &mut impl Rng, h: usize, n: usize, temp: f64) -> Tensor3 {
    let mut t = Array3::from_shape_fn((h, n, n), |_| -rng.random::<f64>().max(1e-300).ln() * temp);
    for mut row in t.lanes_mut(Axis(2)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    t
}

fn normal3(rng: &mut impl Rng, dims: (usize, usize, usize), std: f64) -> Tensor3 {
    let d = Normal::new(0.0, std).expect("normal");
    Array3::from_shape_fn(dims, |_| d.sample(rng))
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation of each production gradient from its formula oracle.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub cases: usize,
    pub items: Vec<(String, f64)>,
}

impl GradCheck {
    fn record(&mut self, name: &str, err: f64) {
        match self.items.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = e.max(err),
            None => self.items.push((name.to_string(), err)),
        }
    }

    pub fn max_err(&self) -> f64 {
        self.items.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.cases > 0 && self.max_err() <= tol
    }

    pub fn lines(&self, tol: f64) -> Vec<String> {
        self.items
            .iter()
            .map(|(n, e)| format!("{} {n} max_abs_err={e:.3e} tol={tol:.0e}", if *e <= tol { "ok  " } else { "FAIL" }))
            .collect()
    }
}

/// One random GSB attention and value instance, production backward versus
/// the formula evaluators.
pub fn grad_check_case(rng: &mut impl Rng, h: usize, n: usize, c: usize, k: usize, out: &mut GradCheck) -> Result<()> {
    let temp = rng.random_range(0.5..3.0);
    let a_re = long_tailed_attention(rng, h, n, temp);
    let phi = normal3(rng, (h, n, n), 0.02);
    let mut attn = GsbAttnState::new(k, h, n);
    attn.phi.value = phi.clone().into_dyn();
    let base = a_re.mean().unwrap_or(0.1);
    let mut alphas = vec![base * rng.random_range(0.5..1.5)];
    alphas.extend((0..k).map(|_| rng.random_range(0.01..0.3)));
    attn.set_alphas(&alphas);
    let fwd = gsb_attn_forward(&a_re.view(), &attn)?;
    let g = normal3(rng, (h, n, n), 1.0);
    let got = gsb_attn_backward(&g.view(), &fwd.cache, &attn)?;
    let (gv, av, pv) = (g.view(), a_re.view(), phi.view());
    out.record("attn.d_alpha0", (got.d_alphas[0] - grads::attn_base_scale_grad(&gv, &av, &pv, alphas[0])).abs());
    for i in 1..=k {
        let want = grads::attn_mask_scale_grad(&gv, &av, &pv, i, k);
        out.record("attn.d_alpha_i", (got.d_alphas[i] - want).abs());
    }
    let want = grads::attn_input_grad(&gv, &av, &pv, &alphas);
    out.record("attn.d_a_ret", max_abs_diff(&got.d_a_ret, &want));
    let want = grads::attn_offset_grad(&gv, &av, &pv, &alphas);
    out.record("attn.d_phi", max_abs_diff(&got.d_phi, &want));

    let v = normal3(rng, (h, n, c), 1.0);
    let omega = normal3(rng, (h, 1, c), 0.1);
    let mut value = GsbValueState::new(k, h, c);
    value.omega.value = omega.clone().into_dyn();
    let mut betas = vec![rng.random_range(0.3..1.5)];
    betas.extend((0..k).map(|_| rng.random_range(0.05..1.0)));
    value.set_betas(&betas);
    let fwd = gsb_value_forward(&v.view(), &value)?;
    let g = normal3(rng, (h, n, c), 1.0);
    let got = gsb_value_backward(&g.view(), &fwd.cache, &value)?;
    let (gv, vv, ov) = (g.view(), v.view(), omega.view());
    out.record("value.d_beta0", (got.d_betas[0] - grads::value_base_scale_grad(&gv, &vv, &ov, betas[0])).abs());
    for i in 1..=k {
        let want = grads::value_mask_scale_grad(&gv, &vv, &ov, &betas, i);
        out.record("value.d_beta_i", (got.d_betas[i] - want).abs());
    }
    let want = grads::value_input_grad(&gv, &vv, &ov, &betas);
    out.record("value.d_v0", max_abs_diff(&got.d_v0, &want));
    let want = grads::value_offset_grad(&gv, &vv, &ov, &betas);
    out.record("value.d_omega", max_abs_diff(&got.d_omega, &want));
    out.cases += 1;
    Ok(())
}

/// `cases` random instances with `H = 2, N = 5, C = 4, k = 2`.
pub fn grad_check(seed: u64, cases: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::default();
    for _ in 0..cases {
        grad_check_case(&mut rng, 2, 5, 4, 2, &mut out)?;
    }
    Ok(out)
}

/// Closed-form init versus the dense least-squares solve on one tensor.
#[derive(Clone, Debug)]
pub struct InitComparison {
    pub closed_form: Vec<f64>,
    pub least_squares: Vec<f64>,
    /// The oracle's normal matrix was singular.
    pub degenerate: bool,
    /// The production init reported a degenerate stratum.
    pub reported_degenerate: bool,
    /// Residual of the closed form minus the least-squares residual.
    pub residual_gap: f64,
}

impl InitComparison {
    pub fn max_err(&self) -> f64 {
        max_abs_diff(&self.closed_form, &self.least_squares)
    }

    /// Non-degenerate: coefficients agree. Degenerate: both sides agree on
    /// the degeneracy, and `fallback_ok` holds for the documented fallback.
    pub fn passed(&self, tol: f64, fallback_ok: bool) -> bool {
        if self.degenerate != self.reported_degenerate {
            return false;
        }
        if self.degenerate {
            fallback_ok
        } else {
            self.max_err() <= tol
        }
    }
}

pub fn compare_attn_init(a_ret: &ArrayView3<f64>, k: usize) -> Result<InitComparison> {
    let init = init_attn_scales(a_ret, k);
    let problem = attention_problem(a_ret, init.alphas[0], k);
    let sol = brute_force_ls(&problem)?;
    Ok(InitComparison {
        residual_gap: problem.residual(&init.alphas) - sol.residual,
        closed_form: init.alphas,
        least_squares: sol.coeffs,
        degenerate: sol.degenerate,
        reported_degenerate: init.method == InitMethod::Degenerate,
    })
}

pub fn compare_value_init(v0: &ArrayView3<f64>, k: usize) -> Result<InitComparison> {
    let init = init_value_scales(v0, k);
    let problem = value_problem(v0, k);
    let sol = brute_force_ls(&problem)?;
    Ok(InitComparison {
        residual_gap: problem.residual(&init.betas) - sol.residual,
        closed_form: init.betas,
        least_squares: sol.coeffs,
        degenerate: sol.degenerate,
        reported_degenerate: init.degenerate,
    })
}

/// The documented attention fallback: zero superposition scales.
pub fn attn_fallback_ok(c: &InitComparison) -> bool {
    c.closed_form[1..].iter().all(|&a| a == 0.0)
}

/// The documented value fallback keeps the fit optimal.
pub fn value_fallback_ok(c: &InitComparison, tol: f64) -> bool {
    c.residual_gap.abs() <= tol * (1.0 + c.least_squares.len() as f64)
}
