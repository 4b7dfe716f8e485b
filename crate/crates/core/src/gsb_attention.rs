//! Group superposition binarization of the attention matrix.
//!
//! The softmax output `A_re` is shifted by a learnable offset `Φ` and
//! represented as `α₀·A_bin + Σ α_i·M_i`, where `A_bin` is the round/clip
//! binarization and each `M_i` marks the entries above `c_i` times their row
//! maximum.

use log::warn;
use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};

use crate::bitops::TriStateMatrix;
use crate::error::{Error, Result};
use crate::param::{join, Param, Parameters};
use crate::tensor::Tensor3;

pub const MIN_SCALE: f64 = 1e-8;

/// Threshold coefficients `c_1..c_k`, evenly spaced in `(0.5, 0.9]`.
pub fn threshold_coeffs(k: usize) -> Vec<f64> {
    (1..=k).map(|i| 0.5 + 0.4 * i as f64 / k as f64).collect()
}

/// Per-row thresholds `Θ_i = c_i · max_m A_ret[h, n, m]`, returned as one
/// `H × N` matrix per coefficient (constant along the last axis).
pub fn compute_thresholds(a_ret: &ArrayView3<f64>, c: &[f64]) -> Vec<Array2<f64>> {
    let row_max = row_max(a_ret);
    c.iter().map(|&ci| row_max.mapv(|m| ci * m)).collect()
}

fn row_max(a: &ArrayView3<f64>) -> Array2<f64> {
    a.map_axis(Axis(2), |row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Order-sensitive hash of a parameter set, used to detect caches that
/// outlived a parameter update.
pub(crate) fn fingerprint<'a>(params: impl IntoIterator<Item = &'a Param>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in params {
        for v in p.value.iter() {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug)]
pub struct GsbAttnState {
    k: usize,
    c: Vec<f64>,
    /// `α₀..α_k`.
    pub alphas: Param,
    /// Offset `Φ`, shape `H × N × N`.
    pub phi: Param,
}

impl GsbAttnState {
    pub fn new(k: usize, heads: usize, tokens: usize) -> Self {
        let mut alphas = vec![0.0; k + 1];
        alphas[0] = 1.0 / tokens.max(1) as f64;
        Self {
            k,
            c: threshold_coeffs(k),
            alphas: Param::from_vec(&[k + 1], alphas),
            phi: Param::zeros(&[heads, tokens, tokens]),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alphas.value[i]
    }

    pub fn set_alphas(&mut self, alphas: &[f64]) {
        for (i, &a) in alphas.iter().enumerate() {
            self.alphas.value[i] = a;
        }
    }

    /// Clamps every `α_i` to at least [`MIN_SCALE`].
    pub fn clamp_scales(&mut self) {
        self.alphas.clamp_min(MIN_SCALE);
    }

    fn version(&self) -> u64 {
        fingerprint([&self.alphas, &self.phi])
    }

    fn phi_view(&self) -> ArrayView3<'_, f64> {
        self.phi.value.view().into_dimensionality().expect("3-d offset")
    }

    pub fn accumulate_grads(&mut self, g: &GsbAttnGrads) {
        for (i, d) in g.d_alphas.iter().enumerate() {
            self.alphas.grad[i] += d;
        }
        self.phi.grad.scaled_add(1.0, &g.d_phi.view().into_dyn());
    }
}

impl Parameters for GsbAttnState {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "alphas"), &self.alphas);
        f(join(prefix, "phi"), &self.phi);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "alphas"), &mut self.alphas);
        f(join(prefix, "phi"), &mut self.phi);
    }
}

/// The binary pieces of a GSB attention tensor: `scales[0]` pairs with
/// `A_bin`, `scales[i]` with `M_i`. `parts[i][h]` is the `N × N` indicator
/// for head `h`.
#[derive(Clone, Debug)]
pub struct AttnComponents {
    pub scales: Vec<f64>,
    pub parts: Vec<Vec<TriStateMatrix>>,
}

impl AttnComponents {
    pub fn heads(&self) -> usize {
        self.parts.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug)]
pub struct GsbAttnCache {
    version: u64,
    pub a_ret: Tensor3,
    pub a_bin: Tensor3,
    pub masks: Vec<Tensor3>,
    pub thresholds: Vec<Array2<f64>>,
    /// Rows whose maximum after the offset is `≤ 0`; their masks are empty.
    pub nonpositive_rows: usize,
}

#[derive(Clone, Debug)]
pub struct GsbAttnOutput {
    pub dense: Tensor3,
    pub components: AttnComponents,
    pub cache: GsbAttnCache,
}

fn indicator_parts(t: &Tensor3) -> Vec<TriStateMatrix> {
    t.outer_iter()
        .map(|m| TriStateMatrix::from_indicator(m.nrows(), m.ncols(), |r, c| m[[r, c]] != 0.0))
        .collect()
}

pub fn gsb_attn_forward(a_re: &ArrayView3<f64>, state: &GsbAttnState) -> Result<GsbAttnOutput> {
    let phi = state.phi_view();
    if a_re.dim() != phi.dim() {
        return Err(Error::Shape(format!(
            "attention {:?} vs offset {:?}",
            a_re.dim(),
            phi.dim()
        )));
    }
    let alpha0 = state.alpha(0);
    if !(alpha0 > 0.0) {
        return Err(Error::InvalidParam(format!("alpha0 must be positive, got {alpha0}")));
    }
    let a_ret = a_re - &phi;
    let a_bin = a_ret.mapv(|x| if x / alpha0 > 0.5 { 1.0 } else { 0.0 });
    let thresholds = compute_thresholds(&a_ret.view(), &state.c);
    let (h, n, m) = a_ret.dim();
    let masks: Vec<Tensor3> = thresholds
        .iter()
        .map(|th| Array3::from_shape_fn((h, n, m), |(a, b, c)| {
            if a_ret[[a, b, c]] > th[[a, b]] { 1.0 } else { 0.0 }
        }))
        .collect();
    let nonpositive_rows = row_max(&a_ret.view()).iter().filter(|&&v| v <= 0.0).count();

    let mut dense = &a_bin * alpha0;
    for (i, mask) in masks.iter().enumerate() {
        dense.scaled_add(state.alpha(i + 1), mask);
    }
    let mut parts = vec![indicator_parts(&a_bin)];
    parts.extend(masks.iter().map(indicator_parts));
    let components = AttnComponents {
        scales: (0..=state.k).map(|i| state.alpha(i)).collect(),
        parts,
    };
    Ok(GsbAttnOutput {
        dense,
        components,
        cache: GsbAttnCache {
            version: state.version(),
            a_ret,
            a_bin,
            masks,
            thresholds,
            nonpositive_rows,
        },
    })
}

#[derive(Clone, Debug)]
pub struct GsbAttnGrads {
    pub d_alphas: Vec<f64>,
    pub d_a_ret: Tensor3,
    pub d_phi: Tensor3,
}

/// Backward of [`gsb_attn_forward`]. Scale gradients are averaged over the
/// `H·N·N` entries; the thresholds are treated as constants.
pub fn gsb_attn_backward(
    upstream: &ArrayView3<f64>,
    cache: &GsbAttnCache,
    state: &GsbAttnState,
) -> Result<GsbAttnGrads> {
    let current = state.version();
    if cache.version != current {
        return Err(Error::StaleCache {
            cached: cache.version,
            current,
        });
    }
    if upstream.dim() != cache.a_ret.dim() {
        return Err(Error::Shape(format!(
            "upstream {:?} vs cached {:?}",
            upstream.dim(),
            cache.a_ret.dim()
        )));
    }
    let count = upstream.len() as f64;
    let alpha0 = state.alpha(0);

    let mut d_alpha0 = 0.0;
    let mut d_a_ret = Array3::<f64>::zeros(upstream.raw_dim());
    Zip::from(&mut d_a_ret)
        .and(upstream)
        .and(&cache.a_ret)
        .and(&cache.a_bin)
        .for_each(|d, &g, &x, &b| {
            let s = x / alpha0;
            if s > 0.0 && s < 1.0 {
                d_alpha0 += g * (b - s);
                *d = g;
            } else {
                d_alpha0 += g * b;
            }
        });

    let mut d_alphas = vec![d_alpha0 / count];
    for (i, (mask, th)) in cache.masks.iter().zip(&cache.thresholds).enumerate() {
        let ai = state.alpha(i + 1);
        let mut acc = 0.0;
        for ((idx, &mv), &g) in mask.indexed_iter().zip(upstream.iter()) {
            acc += g * mv;
            let diff = cache.a_ret[idx] - th[[idx.0, idx.1]];
            if diff > 0.0 && diff < 1.0 {
                d_a_ret[idx] += g * ai;
            }
        }
        d_alphas.push(acc / count);
    }
    let d_phi = d_a_ret.mapv(|v| -v);
    Ok(GsbAttnGrads {
        d_alphas,
        d_a_ret,
        d_phi,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMethod {
    /// Masks lie inside the `A_bin` support, so the closed form applies.
    ClosedForm,
    /// Some mask entries fall outside `A_bin`; per-stratum means of the
    /// residual `a − α₀·a_bin` are used instead.
    ResidualStrata,
    /// A mask stratum is empty; superposition scales fall back to zero.
    Degenerate,
}

#[derive(Clone, Debug)]
pub struct AttnInit {
    pub alphas: Vec<f64>,
    pub method: InitMethod,
}

/// Least-squares initial scales for a (possibly batch-stacked) attention
/// tensor `a_ret` of shape `(B·H) × N × N`.
///
/// `α₀` is the mean absolute value. With nested masks the remaining
/// problem separates over the strata `m_i \ m_{i+1}`: the cumulative scale
/// `α₀ + … + α_j` is the mean of `a_ret` over stratum `j`.
pub fn init_attn_scales(a_ret: &ArrayView3<f64>, k: usize) -> AttnInit {
    let n = a_ret.len().max(1) as f64;
    let alpha0 = a_ret.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mut alphas = vec![alpha0];
    if k == 0 {
        return AttnInit {
            alphas,
            method: InitMethod::ClosedForm,
        };
    }
    let thresholds = compute_thresholds(a_ret, &threshold_coeffs(k));
    // masked L1 sums and counts per mask, and the residual sums
    let mut s = vec![0.0; k + 2];
    let mut r = vec![0.0; k + 2];
    let mut cnt = vec![0usize; k + 2];
    let mut inside_bin = true;
    for ((h, row, _), &v) in a_ret.indexed_iter() {
        let binned = alpha0 > 0.0 && v / alpha0 > 0.5;
        for (i, th) in thresholds.iter().enumerate() {
            if v > th[[h, row]] {
                s[i + 1] += v.abs();
                r[i + 1] += if binned { v - alpha0 } else { v };
                cnt[i + 1] += 1;
                inside_bin &= binned;
            }
        }
    }
    if (1..=k).any(|i| cnt[i] == cnt[i + 1]) {
        warn!("attention init: empty mask stratum (counts {:?}), superposition scales set to 0", &cnt[1..=k]);
        alphas.extend(std::iter::repeat_n(0.0, k));
        return AttnInit {
            alphas,
            method: InitMethod::Degenerate,
        };
    }
    let mut prev = 0.0;
    for i in 1..=k {
        let stratum = (cnt[i] - cnt[i + 1]) as f64;
        let cum = if inside_bin {
            (s[i] - s[i + 1]) / stratum - alpha0
        } else {
            (r[i] - r[i + 1]) / stratum
        };
        alphas.push(cum - prev);
        prev = cum;
    }
    AttnInit {
        alphas,
        method: if inside_bin {
            InitMethod::ClosedForm
        } else {
            InitMethod::ResidualStrata
        },
    }
}
