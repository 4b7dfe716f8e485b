//! Group superposition binarization of the value matrix and the
//! component-wise attention output product.
//!
//! `V⁰ = V − Ω` is represented as `Σ β_i · sign(V⁰)·M_i` with `M_0` all ones
//! and `M_i` selecting entries beyond `c_i` times the global maximum or
//! minimum of `V⁰`.

use log::warn;
use ndarray::{Array3, ArrayView3, Axis, Zip};

use crate::binarize::sign;
use crate::bitops::{masked_gemm_nt, TriStateMatrix};
use crate::error::{Error, Result};
use crate::gsb_attention::{fingerprint, threshold_coeffs, AttnComponents, MIN_SCALE};
use crate::param::{join, Param, Parameters};
use crate::tensor::Tensor3;

#[derive(Clone, Debug)]
pub struct GsbValueState {
    k: usize,
    c: Vec<f64>,
    /// `β₀..β_k`.
    pub betas: Param,
    /// Channel bias `Ω`, shape `H × 1 × C`.
    pub omega: Param,
}

impl GsbValueState {
    pub fn new(k: usize, heads: usize, channels: usize) -> Self {
        let mut betas = vec![0.0; k + 1];
        betas[0] = 1.0;
        Self {
            k,
            c: threshold_coeffs(k),
            betas: Param::from_vec(&[k + 1], betas),
            omega: Param::zeros(&[heads, 1, channels]),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.betas.value[i]
    }

    pub fn set_betas(&mut self, betas: &[f64]) {
        for (i, &b) in betas.iter().enumerate() {
            self.betas.value[i] = b;
        }
    }

    pub fn clamp_scales(&mut self) {
        self.betas.clamp_min(MIN_SCALE);
    }

    fn version(&self) -> u64 {
        fingerprint([&self.betas, &self.omega])
    }

    fn omega_view(&self) -> ArrayView3<'_, f64> {
        self.omega.value.view().into_dimensionality().expect("3-d bias")
    }

    pub fn accumulate_grads(&mut self, g: &GsbValueGrads) {
        for (i, d) in g.d_betas.iter().enumerate() {
            self.betas.grad[i] += d;
        }
        self.omega.grad.scaled_add(1.0, &g.d_omega.view().into_dyn());
    }
}

impl Parameters for GsbValueState {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "betas"), &self.betas);
        f(join(prefix, "omega"), &self.omega);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "betas"), &mut self.betas);
        f(join(prefix, "omega"), &mut self.omega);
    }
}

/// `scales[i]` pairs with `parts[i][h]`, the `N × C` tri-state matrix
/// `sign(V⁰)·M_i` of head `h`.
#[derive(Clone, Debug)]
pub struct ValueComponents {
    pub scales: Vec<f64>,
    pub parts: Vec<Vec<TriStateMatrix>>,
}

#[derive(Clone, Debug)]
pub struct GsbValueCache {
    version: u64,
    pub v0: Tensor3,
    pub v_bin0: Tensor3,
    pub masks: Vec<Tensor3>,
    pub v_max: f64,
    pub v_min: f64,
}

#[derive(Clone, Debug)]
pub struct GsbValueOutput {
    pub dense: Tensor3,
    pub components: ValueComponents,
    pub cache: GsbValueCache,
}

/// Two-sided masks `1{V⁰ > c_i·v_max or V⁰ < c_i·v_min}`.
pub fn value_masks(v0: &ArrayView3<f64>, c: &[f64]) -> (Vec<Tensor3>, f64, f64) {
    let v_max = v0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let v_min = v0.iter().copied().fold(f64::INFINITY, f64::min);
    let masks = c
        .iter()
        .map(|&ci| {
            let (hi, lo) = (ci * v_max, ci * v_min);
            v0.mapv(|x| if x > hi || x < lo { 1.0 } else { 0.0 })
        })
        .collect();
    (masks, v_max, v_min)
}

fn tristate_parts(v_bin0: &Tensor3, mask: Option<&Tensor3>) -> Vec<TriStateMatrix> {
    (0..v_bin0.len_of(Axis(0)))
        .map(|h| {
            let s = v_bin0.index_axis(Axis(0), h);
            let m = mask.map(|m| m.index_axis(Axis(0), h));
            TriStateMatrix::from_fn(s.nrows(), s.ncols(), |r, c| {
                if m.as_ref().is_some_and(|m| m[[r, c]] == 0.0) {
                    0
                } else {
                    s[[r, c]] as i8
                }
            })
        })
        .collect()
}

pub fn gsb_value_forward(v_re: &ArrayView3<f64>, state: &GsbValueState) -> Result<GsbValueOutput> {
    let omega = state.omega_view();
    let (h, _, c) = v_re.dim();
    if omega.dim() != (h, 1, c) {
        return Err(Error::Shape(format!(
            "value {:?} vs channel bias {:?}",
            v_re.dim(),
            omega.dim()
        )));
    }
    let v0 = v_re - &omega;
    let v_bin0 = v0.mapv(sign);
    let (masks, v_max, v_min) = value_masks(&v0.view(), &state.c);
    let mut dense = &v_bin0 * state.beta(0);
    for (i, m) in masks.iter().enumerate() {
        Zip::from(&mut dense).and(&v_bin0).and(m).for_each(|d, &s, &m| {
            *d += state.beta(i + 1) * s * m;
        });
    }
    let mut parts = vec![tristate_parts(&v_bin0, None)];
    parts.extend(masks.iter().map(|m| tristate_parts(&v_bin0, Some(m))));
    Ok(GsbValueOutput {
        dense,
        components: ValueComponents {
            scales: (0..=state.k).map(|i| state.beta(i)).collect(),
            parts,
        },
        cache: GsbValueCache {
            version: state.version(),
            v0,
            v_bin0,
            masks,
            v_max,
            v_min,
        },
    })
}

#[derive(Clone, Debug)]
pub struct GsbValueGrads {
    pub d_betas: Vec<f64>,
    pub d_v0: Tensor3,
    pub d_omega: Tensor3,
}

pub fn gsb_value_backward(
    upstream: &ArrayView3<f64>,
    cache: &GsbValueCache,
    state: &GsbValueState,
) -> Result<GsbValueGrads> {
    let current = state.version();
    if cache.version != current {
        return Err(Error::StaleCache {
            cached: cache.version,
            current,
        });
    }
    if upstream.dim() != cache.v0.dim() {
        return Err(Error::Shape(format!(
            "upstream {:?} vs cached {:?}",
            upstream.dim(),
            cache.v0.dim()
        )));
    }
    let count = upstream.len() as f64;
    let beta0 = state.beta(0);
    let mut d_beta0 = 0.0;
    let mut d_v0 = Array3::<f64>::zeros(upstream.raw_dim());
    Zip::from(&mut d_v0)
        .and(upstream)
        .and(&cache.v0)
        .for_each(|d, &g, &x| {
            let s = x / beta0;
            if s > -1.0 && s < 1.0 {
                d_beta0 += g * (sign(x) - s);
                *d = g;
            } else {
                d_beta0 += g * sign(x);
            }
        });
    let mut d_betas = vec![d_beta0 / count];
    for (i, mask) in cache.masks.iter().enumerate() {
        let bi = state.beta(i + 1);
        let mut acc = 0.0;
        Zip::from(&mut d_v0)
            .and(upstream)
            .and(&cache.v0)
            .and(mask)
            .for_each(|d, &g, &x, &m| {
                if m == 0.0 {
                    return;
                }
                let s = x / bi;
                acc += g * if s > -1.0 && s < 1.0 { sign(x) - s } else { sign(x) };
                if (-1.0..=1.0).contains(&s) {
                    *d += g;
                }
            });
        d_betas.push(acc / count);
    }
    let d_omega = -d_v0.sum_axis(Axis(1)).insert_axis(Axis(1));
    Ok(GsbValueGrads {
        d_betas,
        d_v0,
        d_omega,
    })
}

#[derive(Clone, Debug)]
pub struct ValueInit {
    pub betas: Vec<f64>,
    pub degenerate: bool,
}

/// Least-squares initial scales for `V⁰` (possibly batch-stacked along the
/// first axis). Masks are nested, so the cumulative scale `β₀ + … + β_j` is
/// the mean of `|V⁰|` over the stratum `M_j \ M_{j+1}`.
///
/// An empty stratum leaves its cumulative scale undetermined; it takes the
/// value of the nearest inner non-empty stratum (or the nearest outer one),
/// which keeps the solution optimal and sets the redundant `β` to zero.
pub fn init_value_scales(v0: &ArrayView3<f64>, k: usize) -> ValueInit {
    let (masks, _, _) = value_masks(v0, &threshold_coeffs(k));
    let mut s = vec![v0.iter().map(|v| v.abs()).sum::<f64>()];
    let mut n = vec![v0.len()];
    for m in &masks {
        let mut si = 0.0;
        let mut ni = 0usize;
        for (&v, &mv) in v0.iter().zip(m.iter()) {
            if mv != 0.0 {
                si += v.abs();
                ni += 1;
            }
        }
        s.push(si);
        n.push(ni);
    }
    s.push(0.0);
    n.push(0);
    let means: Vec<Option<f64>> = (0..=k)
        .map(|i| (n[i] > n[i + 1]).then(|| (s[i] - s[i + 1]) / (n[i] - n[i + 1]) as f64))
        .collect();
    let degenerate = means.iter().any(Option::is_none);
    if degenerate && k > 0 {
        warn!("value init: empty mask stratum (counts {:?})", &n[..=k]);
    }
    let mut betas = Vec::with_capacity(k + 1);
    let mut prev = 0.0;
    for i in 0..=k {
        let cum = means[i]
            .or_else(|| means[i..].iter().flatten().next().copied())
            .or_else(|| means[..i].iter().rev().flatten().next().copied())
            .unwrap_or(0.0);
        betas.push(cum - prev);
        prev = cum;
    }
    ValueInit { betas, degenerate }
}

/// `Y_h = Σ_i Σ_j α_i β_j · (A_i[h] · V_j[h])`, one skip-zero kernel call per
/// component pair and head.
pub fn gsb_attention_output(attn: &AttnComponents, value: &ValueComponents) -> Result<Tensor3> {
    let heads = attn.heads();
    let v_heads = value.parts.first().map_or(0, Vec::len);
    if heads != v_heads || heads == 0 {
        return Err(Error::Shape(format!("{heads} attention heads vs {v_heads} value heads")));
    }
    let n = attn.parts[0][0].rows();
    let c = value.parts[0][0].cols();
    if attn.parts[0][0].cols() != value.parts[0][0].rows() {
        return Err(Error::Shape(format!(
            "attention is {}x{}, value is {}x{}",
            n,
            attn.parts[0][0].cols(),
            value.parts[0][0].rows(),
            c
        )));
    }
    let vt: Vec<Vec<TriStateMatrix>> = value
        .parts
        .iter()
        .map(|ps| ps.iter().map(TriStateMatrix::transpose).collect())
        .collect();
    let mut out = Array3::<f64>::zeros((heads, n, c));
    for (alpha, a_parts) in attn.scales.iter().zip(&attn.parts) {
        for (beta, v_parts) in value.scales.iter().zip(&vt) {
            for h in 0..heads {
                let ints = masked_gemm_nt(&a_parts[h], &v_parts[h])?;
                let scale = alpha * beta;
                let mut slab = out.index_axis_mut(Axis(0), h);
                Zip::from(&mut slab).and(&ints).for_each(|o, &v| *o += scale * f64::from(v));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsb_attention::{gsb_attn_forward, GsbAttnState};
    use ndarray::{array, s};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(k: usize, h: usize, c: usize, betas: &[f64]) -> GsbValueState {
        let mut s = GsbValueState::new(k, h, c);
        s.set_betas(betas);
        s
    }

    #[test]
    fn forward_example() {
        let v = array![[[-1.0, -0.2, 0.3, 0.9]]];
        let st = state(2, 1, 4, &[0.1, 0.2, 0.4]);
        let out = gsb_value_forward(&v.view(), &st).unwrap();
        assert_eq!(out.cache.masks[0], array![[[1.0, 0.0, 0.0, 1.0]]]);
        assert_eq!(out.cache.masks[1], array![[[1.0, 0.0, 0.0, 1.0]]]);
        let want = [-0.7, -0.1, 0.1, 0.7];
        for (g, w) in out.dense.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn k_zero_and_antisymmetry() {
        let v = array![[[-0.4, 0.4], [0.7, -0.7]]];
        let out = gsb_value_forward(&v.view(), &state(0, 1, 2, &[0.3])).unwrap();
        assert_eq!(out.dense, v.mapv(|x| 0.3 * sign(x)));
        let out = gsb_value_forward(&v.view(), &state(2, 1, 2, &[0.3, 0.2, 0.1])).unwrap();
        assert_eq!(out.dense[[0, 0, 0]], -out.dense[[0, 0, 1]]);
        assert_eq!(out.dense[[0, 1, 0]], -out.dense[[0, 1, 1]]);
    }

    #[test]
    fn backward_examples() {
        // k = 0 so only the base window matters
        let st = state(0, 1, 2, &[1.0]);
        let v = array![[[0.5, 3.0]]];
        let out = gsb_value_forward(&v.view(), &st).unwrap();
        let g = array![[[2.0, 2.0]]];
        let gr = gsb_value_backward(&g.view(), &out.cache, &st).unwrap();
        assert_eq!(gr.d_v0, array![[[2.0, 0.0]]]);
        // β₀ gradient: mean(g·(sign − x/β)) in window, g·sign outside
        assert!((gr.d_betas[0] - (2.0 * 0.5 + 2.0) / 2.0).abs() < 1e-15);
        assert_eq!(gr.d_omega, array![[[-2.0, 0.0]]]);

        let st = state(2, 1, 2, &[0.1, 0.1, 0.1]);
        let v = array![[[5.0, -5.0]]];
        let out = gsb_value_forward(&v.view(), &st).unwrap();
        let gr = gsb_value_backward(&g.view(), &out.cache, &st).unwrap();
        assert!(gr.d_v0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn beta_grads_vanish_outside_masks() {
        let st = state(2, 1, 4, &[0.5, 0.5, 0.5]);
        let v = array![[[-1.0, -0.2, 0.3, 0.9]]];
        let out = gsb_value_forward(&v.view(), &st).unwrap();
        let g = array![[[0.0, 7.0, -3.0, 0.0]]];
        let gr = gsb_value_backward(&g.view(), &out.cache, &st).unwrap();
        assert_eq!(gr.d_betas[1], 0.0);
        assert_eq!(gr.d_betas[2], 0.0);
        assert!(gr.d_betas[0] != 0.0);
    }

    #[test]
    fn init_example() {
        let v = array![[[-1.0, -0.2, 0.3, 0.9]]];
        let r = init_value_scales(&v.view(), 2);
        assert!(r.degenerate);
        assert!((r.betas[0] - 0.25).abs() < 1e-12);
        assert!((r.betas[1] - 0.70).abs() < 1e-12);
        assert!(r.betas[2].abs() < 1e-12);
    }

    #[test]
    fn init_degenerate_all_selected() {
        let v = array![[[-1.0, 1.0, -1.0, 1.0]]];
        let r = init_value_scales(&v.view(), 2);
        assert!(r.degenerate);
        assert_eq!(r.betas, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn omega_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, n, c) = (2, 5, 4);
        let mut st = state(2, h, c, &[0.6, 0.3, 0.2]);
        st.omega.value.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        let v = Array3::from_shape_fn((h, n, c), |_| rng.random_range(-1.0..1.0));
        let g = Array3::from_shape_fn((h, n, c), |_| rng.random_range(-1.0..1.0));
        let out = gsb_value_forward(&v.view(), &st).unwrap();
        let grads = gsb_value_backward(&g.view(), &out.cache, &st).unwrap();
        // surrogate with frozen masks and windows: each active window is linear in V⁰
        let surrogate = |omega: &Array3<f64>| -> f64 {
            let v0 = &v - omega;
            let mut total = 0.0;
            for ((idx, &x), &gv) in v0.indexed_iter().zip(g.iter()) {
                let mut w = 0.0;
                let x0 = out.cache.v0[idx];
                if (x0 / st.beta(0)).abs() < 1.0 {
                    w += 1.0;
                }
                for (i, m) in out.cache.masks.iter().enumerate() {
                    if m[idx] != 0.0 && (x0 / st.beta(i + 1)).abs() <= 1.0 {
                        w += 1.0;
                    }
                }
                total += gv * w * x;
            }
            total
        };
        let base: Array3<f64> = st.omega.value.clone().into_dimensionality().unwrap();
        let eps = 1e-6;
        for hh in 0..h {
            for cc in 0..c {
                let mut up = base.clone();
                up[[hh, 0, cc]] += eps;
                let mut dn = base.clone();
                dn[[hh, 0, cc]] -= eps;
                let fd = (surrogate(&up) - surrogate(&dn)) / (2.0 * eps);
                let an = grads.d_omega[[hh, 0, cc]];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_attention_row_gives_zero_output() {
        let mut ast = GsbAttnState::new(2, 1, 3);
        ast.set_alphas(&[0.5, 0.1, 0.1]);
        let a = array![[[0.2, 0.3, 0.9], [-0.1, -0.2, -0.05], [0.0, 0.4, 0.6]]];
        let ao = gsb_attn_forward(&a.view(), &ast).unwrap();
        let vo = gsb_value_forward(&array![[[0.3, -0.4], [0.8, 0.1], [-0.9, 0.2]]].view(), &state(2, 1, 2, &[0.4, 0.2, 0.1])).unwrap();
        let y = gsb_attention_output(&ao.components, &vo.components).unwrap();
        assert!(y.slice(s![0, 1, ..]).iter().all(|&x| x == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn output_equals_dense_product(seed in any::<u64>(), ka in 0usize..3, kv in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, n, c) = (rng.random_range(1..4), rng.random_range(1..12), rng.random_range(1..9));
            let mut ast = GsbAttnState::new(ka, h, n);
            let alphas: Vec<f64> = (0..=ka).map(|_| rng.random_range(0.01..0.5)).collect();
            ast.set_alphas(&alphas);
            let a = Array3::from_shape_fn((h, n, n), |_| rng.random_range(0.0..1.0));
            let mut vst = GsbValueState::new(kv, h, c);
            let betas: Vec<f64> = (0..=kv).map(|_| rng.random_range(0.01..1.0)).collect();
            vst.set_betas(&betas);
            let v = Array3::from_shape_fn((h, n, c), |_| rng.random_range(-1.0..1.0));
            let ao = gsb_attn_forward(&a.view(), &ast).unwrap();
            let vo = gsb_value_forward(&v.view(), &vst).unwrap();
            let y = gsb_attention_output(&ao.components, &vo.components).unwrap();
            for hh in 0..h {
                let want = ao.dense.index_axis(Axis(0), hh).dot(&vo.dense.index_axis(Axis(0), hh));
                for (x, w) in y.index_axis(Axis(0), hh).iter().zip(want.iter()) {
                    prop_assert!((x - w).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn masks_are_two_sided_and_nested(seed in any::<u64>(), k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Array3::from_shape_fn((2, 5, 4), |_| rng.random_range(-2.0..1.5));
            let (masks, v_max, v_min) = value_masks(&v.view(), &threshold_coeffs(k));
            let c = threshold_coeffs(k);
            for (i, m) in masks.iter().enumerate() {
                for (&x, &mv) in v.iter().zip(m.iter()) {
                    if mv == 1.0 {
                        prop_assert!((x > 0.0 && x > c[i] * v_max) || (x < 0.0 && x < c[i] * v_min));
                    }
                }
                if i + 1 < masks.len() {
                    prop_assert!(Zip::from(m).and(&masks[i + 1]).all(|&lo, &hi| hi <= lo));
                }
            }
            let out = gsb_value_forward(&v.view(), &GsbValueState::new(k, 2, 4)).unwrap();
            for p in &out.components.parts {
                for t in p {
                    prop_assert!(t.signs_are_normalized());
                }
            }
            prop_assert!(out.components.parts[0].iter().all(TriStateMatrix::mask_is_full));
        }
    }
}
