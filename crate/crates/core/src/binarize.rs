//! Weight and activation binarizers, their straight-through gradients, and
//! the binarized linear layer.
//!
//! Weights use `sign(W − w_μ)` scaled by `α = mean|W|`. Activations come in
//! two flavours: signed (type-B) activations use `sign`, non-negative (type-A)
//! activations such as ReLU outputs use `clip(round(x), 0, 1)`. Both carry a
//! learnable scale and translation.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bitops::{masked_gemm_nt, xnor_popcount_gemm_nt, BitMatrix, TriStateMatrix};
use crate::error::{shape_err, Error, Result};
use crate::param::{join, Param, Parameters};

/// `sign` with `sign(0) = +1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `clip(round(x), 0, 1)`: `0` for `x ≤ 0.5`, `1` above.
#[inline]
pub fn round_clip(x: f64) -> f64 {
    if x > 0.5 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
pub struct WeightBinResult {
    pub bits: BitMatrix,
    pub alpha: f64,
    pub w_mu: f64,
}

impl WeightBinResult {
    /// `α · B(W)` as a dense matrix.
    pub fn scaled_dense(&self) -> Array2<f64> {
        self.bits.unpack() * self.alpha
    }
}

/// Binarizes a weight matrix. An all-zero matrix gives `α = 0` and all `+1` bits.
pub fn weight_binarize(w: &Array2<f64>) -> Result<WeightBinResult> {
    if w.is_empty() {
        return Err(shape_err("cannot binarize an empty weight matrix"));
    }
    let n = w.len() as f64;
    let w_mu = w.sum() / n;
    let alpha = w.iter().map(|v| v.abs()).sum::<f64>() / n;
    let bits = if alpha == 0.0 {
        BitMatrix::from_fn(w.nrows(), w.ncols(), |_, _| true)
    } else {
        BitMatrix::from_fn(w.nrows(), w.ncols(), |r, c| (w[[r, c]] - w_mu) / alpha >= 0.0)
    };
    Ok(WeightBinResult { bits, alpha, w_mu })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    /// Non-negative activations, binarized to `{0, 1}`.
    TypeA,
    /// Signed activations, binarized to `{-1, +1}`.
    TypeB,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActBinParams {
    pub scale: f64,
    pub bias: f64,
    pub kind: ActKind,
}

impl ActBinParams {
    pub fn new(kind: ActKind, scale: f64, bias: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidParam(format!(
                "activation scale must be positive, got {scale}"
            )));
        }
        Ok(Self { scale, bias, kind })
    }
}

/// Forward state kept for the straight-through backward: the translated and
/// scaled input `(a − bias) / scale`.
#[derive(Clone, Debug)]
pub struct ActCache {
    pub kind: ActKind,
    pub scaled: Array2<f64>,
}

fn scaled_input(a: &Array2<f64>, p: &ActBinParams) -> Array2<f64> {
    a.mapv(|v| (v - p.bias) / p.scale)
}

/// `sign(a − bias)`; the scale does not change the sign, it only sets the
/// backward window.
pub fn act_binarize_sign(a: &Array2<f64>, p: &ActBinParams) -> Result<(Array2<f64>, ActCache)> {
    if p.kind != ActKind::TypeB {
        return Err(Error::InvalidParam("sign binarizer needs type-B params".into()));
    }
    let scaled = scaled_input(a, p);
    let out = scaled.mapv(sign);
    Ok((out, ActCache { kind: ActKind::TypeB, scaled }))
}

/// `clip(round((a − bias)/scale), 0, 1)`.
pub fn act_binarize_round(a: &Array2<f64>, p: &ActBinParams) -> Result<(Array2<f64>, ActCache)> {
    if p.kind != ActKind::TypeA {
        return Err(Error::InvalidParam("round binarizer needs type-A params".into()));
    }
    let scaled = scaled_input(a, p);
    let out = scaled.mapv(round_clip);
    Ok((out, ActCache { kind: ActKind::TypeA, scaled }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SteKind {
    /// Pass where `|x| ≤ 1`.
    SignAct,
    /// Pass where `0 ≤ x ≤ 1`.
    RoundClip,
    /// Pass everywhere.
    SignWeight,
}

/// Straight-through gradient of a binarizer with respect to its scaled input.
pub fn ste_backward(
    kind: SteKind,
    scaled: Option<&Array2<f64>>,
    upstream: &Array2<f64>,
) -> Result<Array2<f64>> {
    if kind == SteKind::SignWeight {
        return Ok(upstream.clone());
    }
    let x = scaled.ok_or_else(|| Error::Precondition("missing cached forward state".into()))?;
    if x.dim() != upstream.dim() {
        return Err(shape_err(format!(
            "ste upstream {:?} vs cache {:?}",
            upstream.dim(),
            x.dim()
        )));
    }
    let mut g = upstream.clone();
    ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
        let pass = match kind {
            SteKind::SignAct => x.abs() <= 1.0,
            _ => (0.0..=1.0).contains(&x),
        };
        if !pass {
            *g = 0.0;
        }
    });
    Ok(g)
}

/// Gradients of the learnable scale and bias of an activation binarizer whose
/// output is `scale · B(x)`, `x = (a − bias)/scale`. Both are averaged over
/// the elements. The scale derivative is `B(x) − x` inside the open window and
/// `B(x)` outside it.
pub fn act_param_grads(cache: &ActCache, upstream: &Array2<f64>) -> (f64, f64) {
    let n = upstream.len().max(1) as f64;
    let mut d_scale = 0.0;
    let mut d_bias = 0.0;
    for (&g, &x) in upstream.iter().zip(cache.scaled.iter()) {
        let (bin, open, closed) = match cache.kind {
            ActKind::TypeB => (sign(x), x > -1.0 && x < 1.0, x.abs() <= 1.0),
            ActKind::TypeA => (round_clip(x), x > 0.0 && x < 1.0, (0.0..=1.0).contains(&x)),
        };
        d_scale += g * if open { bin - x } else { bin };
        if closed {
            d_bias -= g;
        }
    }
    (d_scale / n, d_bias / n)
}

/// Which parts of the network are binarized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    /// Nothing binarized (teacher / reference model).
    Full,
    /// Weights binarized, activations full precision (first training stage).
    WeightsOnly,
    /// Weights and activations binarized (second training stage).
    Binary,
}

/// Learnable activation binarizer.
#[derive(Clone, Debug)]
pub struct ActBinarizer {
    pub kind: ActKind,
    pub scale: Param,
    pub bias: Param,
}

impl ActBinarizer {
    pub fn new(kind: ActKind) -> Self {
        Self {
            kind,
            scale: Param::scalar(1.0),
            bias: Param::scalar(0.0),
        }
    }

    pub fn params(&self) -> ActBinParams {
        ActBinParams {
            scale: self.scale.get(),
            bias: self.bias.get(),
            kind: self.kind,
        }
    }

    /// Sets the scale to the mean absolute value of `x`.
    pub fn calibrate(&mut self, x: &Array2<f64>) {
        let m = x.iter().map(|v| v.abs()).sum::<f64>() / x.len().max(1) as f64;
        self.scale.set(if m > 0.0 { m } else { 1.0 });
    }

    /// Returns `(scale · B(x), B(x), cache)`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>, ActCache)> {
        let p = ActBinParams::new(self.kind, self.scale.get(), self.bias.get())?;
        let (bin, cache) = match self.kind {
            ActKind::TypeA => act_binarize_round(x, &p)?,
            ActKind::TypeB => act_binarize_sign(x, &p)?,
        };
        Ok((&bin * p.scale, bin, cache))
    }

    /// Accumulates scale/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ActCache, upstream: &Array2<f64>) -> Result<Array2<f64>> {
        let (ds, db) = act_param_grads(cache, upstream);
        self.scale.add_grad(ds);
        self.bias.add_grad(db);
        let kind = match cache.kind {
            ActKind::TypeA => SteKind::RoundClip,
            ActKind::TypeB => SteKind::SignAct,
        };
        ste_backward(kind, Some(&cache.scaled), upstream)
    }
}

impl Parameters for ActBinarizer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "scale"), &self.scale);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "scale"), &mut self.scale);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Linear layer `y = x·Wᵀ + b` whose weights (and, in [`Precision::Binary`],
/// inputs) are binarized. The binary product runs on the bit kernels.
#[derive(Clone, Debug)]
pub struct BinaryLinear {
    pub weight: Param,
    pub bias: Param,
    pub act: ActBinarizer,
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    /// Operand multiplied with the weights: `x`, or `scale·B(x)` when binary.
    input: Array2<f64>,
    /// `W`, or `α·B(W)` when weights are binarized.
    weight: Array2<f64>,
    act: Option<ActCache>,
}

impl BinaryLinear {
    pub fn new(in_dim: usize, out_dim: usize, input_kind: ActKind, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).expect("normal");
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Param::from_vec(&[out_dim, in_dim], w),
            bias: Param::zeros(&[out_dim]),
            act: ActBinarizer::new(input_kind),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Array2<f64>, precision: Precision) -> Result<(Array2<f64>, LinearCache)> {
        if x.ncols() != self.in_dim() {
            return Err(shape_err(format!(
                "linear input has {} columns, layer expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        let w = self.weight.mat().to_owned();
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d");
        let (y, cache) = match precision {
            Precision::Full => {
                let y = x.dot(&w.t());
                (y, LinearCache { input: x.clone(), weight: w, act: None })
            }
            Precision::WeightsOnly => {
                let wb = weight_binarize(&w)?;
                let w_hat = wb.scaled_dense();
                let y = x.dot(&w_hat.t());
                (y, LinearCache { input: x.clone(), weight: w_hat, act: None })
            }
            Precision::Binary => {
                let wb = weight_binarize(&w)?;
                let (x_hat, bin, act_cache) = self.act.forward(x)?;
                let beta = self.act.scale.get();
                let ints = match self.kind() {
                    ActKind::TypeB => {
                        let xa = BitMatrix::from_fn(bin.nrows(), bin.ncols(), |r, c| bin[[r, c]] > 0.0);
                        xnor_popcount_gemm_nt(&xa, &wb.bits)?
                    }
                    ActKind::TypeA => {
                        let xa = TriStateMatrix::from_indicator(bin.nrows(), bin.ncols(), |r, c| {
                            bin[[r, c]] > 0.0
                        });
                        masked_gemm_nt(&xa, &TriStateMatrix::from_bits(&wb.bits))?
                    }
                };
                let scale = wb.alpha * beta;
                let y = ints.mapv(|v| f64::from(v) * scale);
                let w_hat = wb.scaled_dense();
                (
                    y,
                    LinearCache {
                        input: x_hat,
                        weight: w_hat,
                        act: Some(act_cache),
                    },
                )
            }
        };
        Ok((y + &bias, cache))
    }

    fn kind(&self) -> ActKind {
        self.act.kind
    }

    /// Accumulates parameter gradients and returns the input gradient.
    ///
    /// The weight gradient passes straight through `sign` (`∂B(W)/∂W ≡ 1`)
    /// with `α` and `w_μ` treated as constants, so `∂L/∂W = ∂L/∂(α·B(W))`.
    pub fn backward(&mut self, cache: &LinearCache, dy: &Array2<f64>) -> Result<Array2<f64>> {
        let d_w = dy.t().dot(&cache.input);
        self.weight.grad_mat_mut().scaled_add(1.0, &d_w);
        let d_b = dy.sum_axis(Axis(0));
        self.bias.grad.scaled_add(1.0, &d_b.into_dyn());
        let d_in = dy.dot(&cache.weight);
        match &cache.act {
            None => Ok(d_in),
            Some(act) => self.act.backward(act, &d_in),
        }
    }
}

impl Parameters for BinaryLinear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
        self.act.visit_params(&join(prefix, "act"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
        self.act.visit_params_mut(&join(prefix, "act"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_binarize_symmetric() {
        let r = weight_binarize(&array![[1.0, -1.0], [2.0, -2.0]]).unwrap();
        assert_eq!(r.w_mu, 0.0);
        assert_eq!(r.alpha, 1.5);
        assert_eq!(r.bits.unpack(), array![[1.0, -1.0], [1.0, -1.0]]);
    }

    #[test]
    fn weight_binarize_zero_is_plus_one() {
        let r = weight_binarize(&array![[0.0]]).unwrap();
        assert_eq!(r.alpha, 0.0);
        assert_eq!(r.bits.unpack(), array![[1.0]]);
        assert!(weight_binarize(&Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn weight_stats_match_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Array2::from_shape_fn((8, 8), |_| rng.random_range(-3.0..3.0));
        let r = weight_binarize(&w).unwrap();
        let mut s = 0.0;
        let mut a = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                s += w[[i, j]];
                a += w[[i, j]].abs();
            }
        }
        assert!((r.w_mu - s / 64.0).abs() < 1e-12);
        assert!((r.alpha - a / 64.0).abs() < 1e-12);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(r.bits.get(i, j), w[[i, j]] >= s / 64.0);
            }
        }
    }

    #[test]
    fn sign_examples() {
        let p = ActBinParams::new(ActKind::TypeB, 1.0, 0.0).unwrap();
        let (o, _) = act_binarize_sign(&array![[0.3, -0.3]], &p).unwrap();
        assert_eq!(o, array![[1.0, -1.0]]);
        let p = ActBinParams::new(ActKind::TypeB, 1.0, 0.5).unwrap();
        let (o, _) = act_binarize_sign(&array![[0.3]], &p).unwrap();
        assert_eq!(o, array![[-1.0]]);
        assert!(act_binarize_round(&array![[0.3]], &p).is_err());
    }

    #[test]
    fn round_examples() {
        let p = ActBinParams::new(ActKind::TypeA, 1.0, 0.0).unwrap();
        let (o, _) = act_binarize_round(&array![[0.5, 0.51, -0.3]], &p).unwrap();
        assert_eq!(o, array![[0.0, 1.0, 0.0]]);
        assert!(ActBinParams::new(ActKind::TypeA, 0.0, 0.0).is_err());
    }

    #[test]
    fn ste_examples() {
        let g = array![[2.5, 2.5]];
        let x = array![[0.4, 1.7]];
        let out = ste_backward(SteKind::SignAct, Some(&x), &g).unwrap();
        assert_eq!(out, array![[2.5, 0.0]]);
        let out = ste_backward(SteKind::SignWeight, None, &g).unwrap();
        assert_eq!(out, g);
        assert!(ste_backward(SteKind::RoundClip, None, &g).is_err());
        let out = ste_backward(SteKind::RoundClip, Some(&array![[-0.1, 0.0, 1.0, 1.2]]), &array![[1.0, 1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(out, array![[0.0, 1.0, 1.0, 0.0]]);
    }

    #[test]
    fn binary_linear_with_binary_operands_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = BinaryLinear::new(3, 3, ActKind::TypeB, &mut rng);
        let w = array![[1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        layer.weight.value = w.clone().into_dyn();
        let x = array![[1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]];
        let (y, _) = layer.forward(&x, Precision::Binary).unwrap();
        // w_mu = -1/3 keeps the signs, alpha = beta = 1
        assert_eq!(y, x.dot(&w.t()));
    }

    #[test]
    fn forward_does_not_touch_master_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = BinaryLinear::new(5, 4, ActKind::TypeB, &mut rng);
        let before = layer.weight.clone();
        let x = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        for p in [Precision::Full, Precision::WeightsOnly, Precision::Binary] {
            layer.forward(&x, p).unwrap();
        }
        assert_eq!(layer.weight, before);
    }

    fn dense_reference(layer: &BinaryLinear, x: &Array2<f64>) -> Array2<f64> {
        let w = layer.weight.mat();
        let n = w.len() as f64;
        let mu = w.sum() / n;
        let alpha = w.iter().map(|v| v.abs()).sum::<f64>() / n;
        let wb = w.mapv(|v| if v - mu >= 0.0 { alpha } else { -alpha });
        let (beta, b) = (layer.act.scale.get(), layer.act.bias.get());
        let xb = x.mapv(|v| match layer.act.kind {
            ActKind::TypeB => beta * if v - b >= 0.0 { 1.0 } else { -1.0 },
            ActKind::TypeA => beta * if (v - b) / beta > 0.5 { 1.0 } else { 0.0 },
        });
        xb.dot(&wb.t())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn binary_forward_matches_dense_float(seed in any::<u64>(), type_a in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (i, o, r) = (rng.random_range(1..80), rng.random_range(1..12), rng.random_range(1..6));
            let kind = if type_a { ActKind::TypeA } else { ActKind::TypeB };
            let mut layer = BinaryLinear::new(i, o, kind, &mut rng);
            layer.act.scale.set(rng.random_range(0.2..2.0));
            layer.act.bias.set(rng.random_range(-0.3..0.3));
            let x = Array2::from_shape_fn((r, i), |_| rng.random_range(-1.5..1.5));
            let (y, _) = layer.forward(&x, Precision::Binary).unwrap();
            let y_ref = dense_reference(&layer, &x);
            for (a, b) in y.iter().zip(y_ref.iter()) {
                prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }

        #[test]
        fn binarizer_outputs_stay_in_their_sets(vals in proptest::collection::vec(-5.0f64..5.0, 1..40),
                                                 scale in 0.01f64..3.0, bias in -1.0f64..1.0) {
            let a = Array2::from_shape_vec((1, vals.len()), vals).unwrap();
            let (o, _) = act_binarize_round(&a, &ActBinParams::new(ActKind::TypeA, scale, bias).unwrap()).unwrap();
            prop_assert!(o.iter().all(|&v| v == 0.0 || v == 1.0));
            let (o, c) = act_binarize_sign(&a, &ActBinParams::new(ActKind::TypeB, scale, bias).unwrap()).unwrap();
            prop_assert!(o.iter().all(|&v| v == 1.0 || v == -1.0));
            let g = a.mapv(|v| v * 3.0 + 0.25);
            let d = ste_backward(SteKind::SignAct, Some(&c.scaled), &g).unwrap();
            for ((dv, gv), x) in d.iter().zip(g.iter()).zip(c.scaled.iter()) {
                if x.abs() <= 1.0 { prop_assert_eq!(dv, gv); } else { prop_assert_eq!(*dv, 0.0); }
            }
        }
    }

    #[test]
    fn weight_gradient_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layer = BinaryLinear::new(6, 4, ActKind::TypeB, &mut rng);
        layer.act.scale.set(0.7);
        let x = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
        let dy = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = layer.forward(&x, Precision::Binary).unwrap();
        layer.backward(&cache, &dy).unwrap();
        // dL/dW[o][i] = Σ_r dy[r][o] · 0.7·sign(x[r][i])
        for o in 0..4 {
            for i in 0..6 {
                let mut want = 0.0;
                for r in 0..5 {
                    want += dy[[r, o]] * 0.7 * sign(x[[r, i]]);
                }
                assert!((layer.weight.grad[[o, i]] - want).abs() < 1e-12);
            }
        }
    }
}
