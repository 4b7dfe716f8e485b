//! Float-only model forward. Every binarized tensor is materialized as
//! floats and every product is a dense matmul, reading parameters by name.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3};

use crate::binarize::Precision;
use crate::error::{Error, Result};
use crate::model::{AttnMode, ModelConfig, Vit};
use crate::param::Parameters;

struct Params(HashMap<String, ArrayD<f64>>);

impl Params {
    fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.0
            .get(name)
            .ok_or_else(|| Error::InvalidParam(format!("reference forward: missing `{name}`")))
    }

    fn mat(&self, name: &str) -> Result<Array2<f64>> {
        Ok(self.get(name)?.clone().into_dimensionality::<Ix2>().expect("2-d"))
    }

    fn vec(&self, name: &str) -> Result<Array1<f64>> {
        Ok(self.get(name)?.clone().into_dimensionality::<Ix1>().expect("1-d"))
    }

    fn t3(&self, name: &str) -> Result<Array3<f64>> {
        Ok(self.get(name)?.clone().into_dimensionality::<Ix3>().expect("3-d"))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get(name)?.iter().next().copied().unwrap_or(0.0))
    }
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let d = row.len() as f64;
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[j] + b[j];
        }
    }
    y
}

fn softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row /= s;
    }
    y
}

fn sgn(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// `sign(W − mean W)` and `mean|W|`; all zero when `W` is zero.
fn binarized_weight(w: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = w.len() as f64;
    let mu = w.sum() / n;
    let alpha = w.mapv(f64::abs).sum() / n;
    if alpha == 0.0 {
        return (Array2::zeros(w.raw_dim()), 0.0);
    }
    (w.mapv(|v| sgn(v - mu)), alpha)
}

/// Sign (type-B) or 0/1 round-clip (type-A) code of `(x − bias)/scale`.
/// Products are taken between codes and scaled afterwards, so they are
/// exact integers and ties at zero fall the same way as in the bit kernels.
fn act_code(x: &Array2<f64>, scale: f64, bias: f64, type_a: bool) -> Array2<f64> {
    x.mapv(|v| {
        let t = (v - bias) / scale;
        if type_a {
            if t > 0.5 {
                1.0
            } else {
                0.0
            }
        } else {
            sgn(t)
        }
    })
}

fn act_scale_bias(p: &Params, name: &str) -> Result<(f64, f64)> {
    Ok((p.scalar(&format!("{name}.scale"))?, p.scalar(&format!("{name}.bias"))?))
}

fn linear(p: &Params, name: &str, x: &Array2<f64>, precision: Precision, type_a: bool) -> Result<Array2<f64>> {
    let w = p.mat(&format!("{name}.weight"))?;
    let b = p.vec(&format!("{name}.bias"))?;
    let y = match precision {
        Precision::Full => x.dot(&w.t()),
        Precision::WeightsOnly => {
            let (code, alpha) = binarized_weight(&w);
            x.dot(&(code * alpha).t())
        }
        Precision::Binary => {
            let (scale, bias) = act_scale_bias(p, &format!("{name}.act"))?;
            let (code, alpha) = binarized_weight(&w);
            act_code(x, scale, bias, type_a).dot(&code.t()) * (alpha * scale)
        }
    };
    Ok(y + &b)
}

fn coeff(i: usize, k: usize) -> f64 {
    0.5 + 0.4 * i as f64 / k as f64
}

/// The 0/1 layers `A_bin, M_1, …, M_k` of one head, given the offset
/// attention; the binarized attention is `Σ α_i · layer_i`.
fn gsb_attention_layers(a_ret: &ArrayView2<f64>, alpha0: f64, k: usize) -> Vec<Array2<f64>> {
    let mut layers = vec![a_ret.mapv(|v| if v / alpha0 > 0.5 { 1.0 } else { 0.0 })];
    for i in 1..=k {
        let mut m = Array2::zeros(a_ret.raw_dim());
        for (r, mut row) in m.rows_mut().into_iter().enumerate() {
            let src = a_ret.row(r);
            let mx = src.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            for (j, o) in row.iter_mut().enumerate() {
                if src[j] > coeff(i, k) * mx {
                    *o = 1.0;
                }
            }
        }
        layers.push(m);
    }
    layers
}

/// The `{-1, 0, +1}` layers `sign(V⁰), sign(V⁰)·M_1, …` over all heads of
/// one sample (the masks use the extrema of the whole `H × N × C` tensor);
/// the binarized value is `Σ β_i · layer_i`.
fn gsb_value_layers(v0: &Array3<f64>, k: usize) -> Vec<Array3<f64>> {
    let vmax = v0.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let vmin = v0.fold(f64::INFINITY, |a, &b| a.min(b));
    let mut layers = vec![v0.mapv(sgn)];
    for i in 1..=k {
        let c = coeff(i, k);
        layers.push(v0.mapv(|v| if v > c * vmax || v < c * vmin { sgn(v) } else { 0.0 }));
    }
    layers
}

/// Binarized attention of the baseline: per-sample scale with the stage-2
/// rule and the switch back to `mean |A|`. Returns the 0/1 code and `γ`.
fn baseline_attention_dense(a: &Array3<f64>, n_tokens: usize) -> (Array3<f64>, f64) {
    let above: Vec<f64> = a.iter().copied().filter(|&v| v > 0.5).collect();
    let mean_abs = a.mapv(f64::abs).mean().unwrap_or(0.0);
    let stage1 = if mean_abs > 0.0 { mean_abs } else { 1.0 };
    let gamma = if above.is_empty() {
        stage1
    } else {
        let g = above.iter().sum::<f64>() / above.len() as f64;
        if a.iter().filter(|&&v| v / g > 0.5).count() < n_tokens {
            stage1
        } else {
            g
        }
    };
    (a.mapv(|v| if v / gamma > 0.5 { 1.0 } else { 0.0 }), gamma)
}

fn attention(p: &Params, pre: &str, cfg: &ModelConfig, x: &Array2<f64>, batch: usize, precision: Precision) -> Result<Array2<f64>> {
    let binary = precision == Precision::Binary;
    let n = cfg.tokens();
    let (h, d) = (cfg.heads, cfg.dim);
    let dh = d / h;
    let q = linear(p, &format!("{pre}.q"), x, precision, false)?;
    let k = linear(p, &format!("{pre}.k"), x, precision, false)?;
    let v = linear(p, &format!("{pre}.v"), x, precision, false)?;
    let mut qk_scale = 1.0 / (dh as f64).sqrt();
    let (q, k) = if binary {
        let (sq, bq) = act_scale_bias(p, &format!("{pre}.q_act"))?;
        let (sk, bk) = act_scale_bias(p, &format!("{pre}.k_act"))?;
        qk_scale *= sq * sk;
        (act_code(&q, sq, bq, false), act_code(&k, sk, bk, false))
    } else {
        (q, k)
    };
    let (v_base, v_scale) = if binary && cfg.attn_mode == AttnMode::Baseline {
        let (sv, bv) = act_scale_bias(p, &format!("{pre}.v_act"))?;
        (act_code(&v, sv, bv, false), sv)
    } else {
        (v.clone(), 1.0)
    };
    let mut z = Array2::zeros((x.nrows(), d));
    for b in 0..batch {
        let rows = b * n..(b + 1) * n;
        let mut a = Array3::zeros((h, n, n));
        for hd in 0..h {
            let cols = hd * dh..(hd + 1) * dh;
            let qs = q.slice(s![rows.clone(), cols.clone()]);
            let ks = k.slice(s![rows.clone(), cols]);
            let scores = qs.dot(&ks.t()) * qk_scale;
            a.index_axis_mut(Axis(0), hd).assign(&softmax(&scores));
        }
        let v_heads = Array3::from_shape_fn((h, n, dh), |(hd, r, c)| v_base[[b * n + r, hd * dh + c]]);
        let mut out_scale = 1.0;
        let (a_used, v_used) = match (binary, cfg.attn_mode) {
            (false, _) => (a, v_heads),
            (true, AttnMode::Baseline) => {
                let (code, gamma) = baseline_attention_dense(&a, n);
                out_scale = gamma * v_scale;
                (code, v_heads)
            }
            (true, AttnMode::Gsb) => {
                let phi = p.t3(&format!("{pre}.gsb_attn.phi"))?;
                let alphas: Vec<f64> = p.get(&format!("{pre}.gsb_attn.alphas"))?.iter().copied().collect();
                let omega = p.t3(&format!("{pre}.gsb_value.omega"))?;
                let betas: Vec<f64> = p.get(&format!("{pre}.gsb_value.betas"))?.iter().copied().collect();
                let ret = &a - &phi;
                let v_layers = gsb_value_layers(&(&v_heads - &omega), betas.len() - 1);
                // products of 0/±1 layers are exact, so a mathematically
                // zero output stays exactly zero before the next sign
                for hd in 0..h {
                    let a_layers = gsb_attention_layers(&ret.index_axis(Axis(0), hd), alphas[0], alphas.len() - 1);
                    let mut y = Array2::<f64>::zeros((n, dh));
                    for (al, am) in alphas.iter().zip(&a_layers) {
                        for (be, vl) in betas.iter().zip(&v_layers) {
                            y.scaled_add(al * be, &am.dot(&vl.index_axis(Axis(0), hd)));
                        }
                    }
                    z.slice_mut(s![rows.clone(), hd * dh..(hd + 1) * dh]).assign(&y);
                }
                continue;
            }
        };
        for hd in 0..h {
            let y = a_used.index_axis(Axis(0), hd).dot(&v_used.index_axis(Axis(0), hd)) * out_scale;
            z.slice_mut(s![rows.clone(), hd * dh..(hd + 1) * dh]).assign(&y);
        }
    }
    linear(p, &format!("{pre}.o"), &z, precision, false)
}

/// Logits of `model` on `images` computed without bit packing; the class and
/// distillation heads are averaged as in the model's prediction.
pub fn dense_reference_forward(model: &Vit, images: &ArrayView2<f64>, precision: Precision) -> Result<Array2<f64>> {
    let mut map = HashMap::new();
    model.visit_params("", &mut |name, p| {
        map.insert(name, p.value.clone());
    });
    let p = Params(map);
    let cfg = model.config();
    let (side, ps, ch) = (cfg.image_size, cfg.patch_size, cfg.in_channels);
    let grid = side / ps;
    let batch = images.nrows();
    let t = cfg.class_tokens();
    let n = cfg.tokens();
    let (pw, pb) = (p.mat("patch.weight")?, p.vec("patch.bias")?);
    let tokens = p.mat("tokens")?;
    let pos = p.mat("pos")?;
    let mut x = Array2::zeros((batch * n, cfg.dim));
    for b in 0..batch {
        for py in 0..grid {
            for px in 0..grid {
                let mut patch = Vec::with_capacity(ch * ps * ps);
                for c in 0..ch {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            patch.push(images[[b, c * side * side + (py * ps + dy) * side + px * ps + dx]]);
                        }
                    }
                }
                let e = pw.dot(&Array1::from(patch)) + &pb;
                x.row_mut(b * n + t + py * grid + px).assign(&e);
            }
        }
        for j in 0..t {
            x.row_mut(b * n + j).assign(&tokens.row(j));
        }
        let mut xs = x.slice_mut(s![b * n..(b + 1) * n, ..]);
        xs += &pos;
    }
    for l in 0..cfg.blocks {
        let pre = format!("blocks.{l}");
        let h1 = layer_norm(&x, &p.vec(&format!("{pre}.ln1.gain"))?, &p.vec(&format!("{pre}.ln1.shift"))?);
        x = &x + &attention(&p, &format!("{pre}.attn"), cfg, &h1, batch, precision)?;
        let h2 = layer_norm(&x, &p.vec(&format!("{pre}.ln2.gain"))?, &p.vec(&format!("{pre}.ln2.shift"))?);
        let hid = linear(&p, &format!("{pre}.mlp.fc1"), &h2, precision, false)?.mapv(|v| v.max(0.0));
        x = &x + &linear(&p, &format!("{pre}.mlp.fc2"), &hid, precision, true)?;
    }
    let xn = layer_norm(&x, &p.vec("norm.gain")?, &p.vec("norm.shift")?);
    let head = |name: &str, tok: usize| -> Result<Array2<f64>> {
        let feat = Array2::from_shape_fn((batch, cfg.dim), |(b, j)| xn[[b * n + tok, j]]);
        Ok(feat.dot(&p.mat(&format!("{name}.weight"))?.t()) + &p.vec(&format!("{name}.bias"))?)
    };
    let cls = head("head", 0)?;
    if cfg.distill_token {
        Ok((cls + head("head_dist", 1)?) * 0.5)
    } else {
        Ok(cls)
    }
}
