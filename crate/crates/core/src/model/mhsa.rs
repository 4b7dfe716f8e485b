//! Multi-head self-attention with binarized projections and either the GSB or
//! the baseline attention path.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::baseline_attn::{baseline_attn_backward, BaselineAttnOutput, BaselineAttnState, GammaMode};
use crate::binarize::{ActBinarizer, ActCache, ActKind, BinaryLinear, LinearCache, Precision};
use crate::bitops::{masked_gemm_nt, xnor_popcount_gemm_nt, BitMatrix, OpTally, TriStateMatrix};
use crate::error::Result;
use crate::gsb_attention::{gsb_attn_backward, gsb_attn_forward, init_attn_scales, GsbAttnCache, GsbAttnState};
use crate::gsb_value::{
    gsb_attention_output, gsb_value_backward, gsb_value_forward, init_value_scales, GsbValueCache,
    GsbValueState,
};
use crate::model::config::{AttnMode, ModelConfig};
use crate::model::layers::{softmax_rows, softmax_rows_backward};
use crate::param::{join, Param, Parameters};
use crate::tensor::Tensor3;

/// Per-call options shared by all layers of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Ctx {
    pub precision: Precision,
    /// Samples stacked in the row dimension.
    pub batch: usize,
    /// Set activation scales and GSB scales from this batch before using them.
    pub calibrate: bool,
}

#[derive(Clone, Debug)]
pub enum AttnPath {
    Gsb {
        attn: GsbAttnState,
        value: GsbValueState,
    },
    Baseline {
        state: BaselineAttnState,
        v_act: ActBinarizer,
    },
}

#[derive(Clone, Debug)]
pub struct Mhsa {
    heads: usize,
    pub q: BinaryLinear,
    pub k: BinaryLinear,
    pub v: BinaryLinear,
    pub o: BinaryLinear,
    pub q_act: ActBinarizer,
    pub k_act: ActBinarizer,
    pub path: AttnPath,
}

#[derive(Clone, Debug)]
enum SampleCache {
    Dense,
    Gsb {
        attn: GsbAttnCache,
        value: GsbValueCache,
        a_gsb: Tensor3,
        v_gsb: Tensor3,
    },
    Baseline(BaselineAttnOutput),
}

#[derive(Clone, Debug)]
pub struct MhsaCache {
    ctx: Ctx,
    q: LinearCache,
    k: LinearCache,
    v: LinearCache,
    o: LinearCache,
    /// Q and K as multiplied in the scores (binarized and scaled when binary).
    q_used: Array2<f64>,
    k_used: Array2<f64>,
    q_act: Option<ActCache>,
    k_act: Option<ActCache>,
    /// V as multiplied by dense attention (full precision paths, baseline).
    v_used: Array2<f64>,
    v_act: Option<ActCache>,
    /// Softmax output per sample, `H × N × N`.
    a_re: Vec<Tensor3>,
    samples: Vec<SampleCache>,
}

impl MhsaCache {
    /// Softmax attention `A_re` per sample, `H × N × N`.
    pub fn attention(&self) -> &[Tensor3] {
        &self.a_re
    }

    /// Value projection of one sample split into heads, `H × N × C`.
    pub fn value(&self, sample: usize, heads: usize) -> Tensor3 {
        let (rows, d) = self.v_used.dim();
        let n = rows / self.ctx.batch;
        let dh = d / heads;
        Array3::from_shape_fn((heads, n, dh), |(hd, r, c)| self.v_used[[sample * n + r, hd * dh + c]])
    }
}

fn head_bits(x: &ArrayView2<f64>) -> BitMatrix {
    BitMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[[r, c]] >= 0.0)
}

impl Mhsa {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let n = cfg.tokens();
        let path = match cfg.attn_mode {
            AttnMode::Gsb => AttnPath::Gsb {
                attn: GsbAttnState::new(cfg.k_a, cfg.heads, n),
                value: GsbValueState::new(cfg.k_v, cfg.heads, cfg.head_dim()),
            },
            AttnMode::Baseline => AttnPath::Baseline {
                state: BaselineAttnState::new(GammaMode::Stage2, n),
                v_act: ActBinarizer::new(ActKind::TypeB),
            },
        };
        Self {
            heads: cfg.heads,
            q: BinaryLinear::new(d, d, ActKind::TypeB, rng),
            k: BinaryLinear::new(d, d, ActKind::TypeB, rng),
            v: BinaryLinear::new(d, d, ActKind::TypeB, rng),
            o: BinaryLinear::new(d, d, ActKind::TypeB, rng),
            q_act: ActBinarizer::new(ActKind::TypeB),
            k_act: ActBinarizer::new(ActKind::TypeB),
            path,
        }
    }

    pub fn forward(
        &mut self,
        x: &Array2<f64>,
        ctx: Ctx,
        mut tally: Option<&mut OpTally>,
    ) -> Result<(Array2<f64>, MhsaCache)> {
        let binary = ctx.precision == Precision::Binary;
        let (rows, d) = x.dim();
        let n = rows / ctx.batch;
        let h = self.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        if binary && ctx.calibrate {
            for lin in [&mut self.q, &mut self.k, &mut self.v] {
                lin.act.calibrate(x);
            }
        }
        let (q_out, q_c) = self.q.forward(x, ctx.precision)?;
        let (k_out, k_c) = self.k.forward(x, ctx.precision)?;
        let (v_out, v_c) = self.v.forward(x, ctx.precision)?;

        let (q_used, k_used, q_act, k_act) = if binary {
            if ctx.calibrate {
                self.q_act.calibrate(&q_out);
                self.k_act.calibrate(&k_out);
            }
            let (qh, _, qa) = self.q_act.forward(&q_out)?;
            let (kh, _, ka) = self.k_act.forward(&k_out)?;
            (qh, kh, Some(qa), Some(ka))
        } else {
            (q_out, k_out, None, None)
        };

        // scores and softmax, per sample
        let qk_scale = scale * self.q_act.scale.get() * self.k_act.scale.get();
        let mut a_re = Vec::with_capacity(ctx.batch);
        for b in 0..ctx.batch {
            let mut t = Array3::<f64>::zeros((h, n, n));
            for hd in 0..h {
                let qs = q_used.slice(s![b * n..(b + 1) * n, hd * dh..(hd + 1) * dh]);
                let ks = k_used.slice(s![b * n..(b + 1) * n, hd * dh..(hd + 1) * dh]);
                let scores = if binary {
                    xnor_popcount_gemm_nt(&head_bits(&qs), &head_bits(&ks))?
                        .mapv(|v| f64::from(v) * qk_scale)
                } else {
                    qs.dot(&ks.t()) * scale
                };
                t.index_axis_mut(Axis(0), hd).assign(&softmax_rows(&scores.view()));
            }
            a_re.push(t);
        }

        let mut z = Array2::<f64>::zeros((rows, d));
        let mut samples = Vec::with_capacity(ctx.batch);
        let mut v_used = v_out.clone();
        let mut v_act = None;
        match (&mut self.path, binary) {
            (_, false) => {
                for (b, a) in a_re.iter().enumerate() {
                    for hd in 0..h {
                        let vs = v_out.slice(s![b * n..(b + 1) * n, hd * dh..(hd + 1) * dh]);
                        let y = a.index_axis(Axis(0), hd).dot(&vs);
                        z.slice_mut(s![b * n..(b + 1) * n, hd * dh..(hd + 1) * dh]).assign(&y);
                    }
                    samples.push(SampleCache::Dense);
                }
            }
            (AttnPath::Gsb { attn, value }, true) => {
                let split = |b: usize| -> Tensor3 {
                    Array3::from_shape_fn((h, n, dh), |(hd, r, c)| v_out[[b * n + r, hd * dh + c]])
                };
                if ctx.calibrate {
                    let phi: Tensor3 = attn.phi.value.clone().into_dimensionality().expect("3-d");
                    let rets: Vec<Tensor3> = a_re.iter().map(|t| t - &phi).collect();
                    let views: Vec<_> = rets.iter().map(|t| t.view()).collect();
                    let stacked = ndarray::concatenate(Axis(0), &views).expect("same shapes");
                    let init = init_attn_scales(&stacked.view(), attn.k());
                    attn.set_alphas(&init.alphas);
                    attn.clamp_scales();
                    let omega: Tensor3 = value.omega.value.clone().into_dimensionality().expect("3-d");
                    let v0s: Vec<Tensor3> = (0..ctx.batch).map(|b| split(b) - &omega).collect();
                    let views: Vec<_> = v0s.iter().map(|t| t.view()).collect();
                    let stacked = ndarray::concatenate(Axis(0), &views).expect("same shapes");
                    let init = init_value_scales(&stacked.view(), value.k());
                    value.set_betas(&init.betas);
                    value.clamp_scales();
                }
                for (b, a) in a_re.iter().enumerate() {
                    let ao = gsb_attn_forward(&a.view(), attn)?;
                    let vo = gsb_value_forward(&split(b).view(), value)?;
                    let y = gsb_attention_output(&ao.components, &vo.components)?;
                    for hd in 0..h {
                        z.slice_mut(s![b * n..(b + 1) * n, hd * dh..(hd + 1) * dh])
                            .assign(&y.index_axis(Axis(0), hd));
                    }
                    samples.push(SampleCache::Gsb {
                        attn: ao.cache,
                        value: vo.cache,
                        a_gsb: ao.dense,
                        v_gsb: vo.dense,
                    });
                }
            }
            (AttnPath::Baseline { state, v_act: act }, true) => {
                if ctx.calibrate {
                    act.calibrate(&v_out);
                }
                let (vh, vbin, vc) = act.forward(&v_out)?;
                let beta = act.scale.get();
                for (b, a) in a_re.iter().enumerate() {
                    let out = state.binarize(&a.view())?;
                    for hd in 0..h {
                        let ab = out.a_bin.index_axis(Axis(0), hd);
                        let am = TriStateMatrix::from_indicator(n, n, |r, c| ab[[r, c]] != 0.0);
                        let vt = TriStateMatrix::from_fn(dh, n, |c, r| {
                            vbin[[b * n + r, hd * dh + c]] as i8
                        });
                        let ints = masked_gemm_nt(&am, &vt)?;
                        let gb = out.gamma * beta;
                        z.slice_mut(s![b * n..(b + 1) * n, hd * dh..(hd + 1) * dh])
                            .assign(&ints.mapv(|v| f64::from(v) * gb));
                    }
                    samples.push(SampleCache::Baseline(out));
                }
                v_used = vh;
                v_act = Some(vc);
            }
        }

        if binary && ctx.calibrate {
            self.o.act.calibrate(&z);
        }
        let (y, o_c) = self.o.forward(&z, ctx.precision)?;
        if let Some(t) = tally.as_deref_mut() {
            self.count(t, ctx.precision, n, d);
        }
        Ok((
            y,
            MhsaCache {
                ctx,
                q: q_c,
                k: k_c,
                v: v_c,
                o: o_c,
                q_used,
                k_used,
                q_act,
                k_act,
                v_used,
                v_act,
                a_re,
                samples,
            },
        ))
    }

    fn count(&self, t: &mut OpTally, precision: Precision, n: usize, d: usize) {
        let (n, d, h) = (n as u64, d as u64, self.heads as u64);
        let (nd, hn2) = (n * d, h * n * n);
        let att = &mut t.attention;
        match precision {
            Precision::Full => {
                att.add_flops("projection_macs", 4 * nd * d);
                att.add_flops("attention_macs", 2 * n * n * d);
            }
            Precision::WeightsOnly => {}
            Precision::Binary => {
                att.add_flops("act_binarize_qkv_input", 3 * nd);
                att.add_bops("projection_macs", 4 * nd * d);
                att.add_flops("linear_rescale_bias", 4 * nd);
                att.add_flops("act_binarize_qk", 2 * nd);
                att.add_bops("score_macs", n * n * d);
                att.add_flops("score_scale", hn2);
                att.add_flops("softmax", 3 * hn2);
                match &self.path {
                    AttnPath::Gsb { attn, value } => {
                        let (ka, kv) = (attn.k() as u64, value.k() as u64);
                        let products = (ka + 1) * (kv + 1);
                        att.add_flops("attn_offset", hn2);
                        att.add_flops("attn_row_max", hn2);
                        att.add_flops("attn_binarize", hn2);
                        att.add_flops("attn_masks", ka * hn2);
                        att.add_flops("value_offset_binarize", nd);
                        att.add_flops("value_extrema", 2 * nd);
                        att.add_flops("value_masks", 2 * kv * nd);
                        att.add_bops("attention_value_macs", products * n * n * d);
                        att.add_flops("component_accumulate", products * nd);
                    }
                    AttnPath::Baseline { .. } => {
                        att.add_flops("attn_scale_stat", hn2);
                        att.add_flops("attn_binarize", hn2);
                        att.add_flops("act_binarize_v", nd);
                        att.add_bops("attention_value_macs", n * n * d);
                        att.add_flops("attention_value_rescale", nd);
                    }
                }
                att.add_flops("act_binarize_proj_input", nd);
            }
        }
    }

    pub fn backward(&mut self, cache: &MhsaCache, dy: &Array2<f64>) -> Result<Array2<f64>> {
        let ctx = cache.ctx;
        let binary = ctx.precision == Precision::Binary;
        let (rows, d) = dy.dim();
        let n = rows / ctx.batch;
        let h = self.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let dz = self.o.backward(&cache.o, dy)?;

        let mut d_v = Array2::<f64>::zeros((rows, d));
        let mut d_q = Array2::<f64>::zeros((rows, d));
        let mut d_k = Array2::<f64>::zeros((rows, d));
        for (b, (a, sc)) in cache.a_re.iter().zip(&cache.samples).enumerate() {
            let rs = b * n..(b + 1) * n;
            // gradient w.r.t. the softmax output of each head
            let mut d_a = Array3::<f64>::zeros((h, n, n));
            match sc {
                SampleCache::Dense | SampleCache::Baseline(_) => {
                    for hd in 0..h {
                        let cs = hd * dh..(hd + 1) * dh;
                        let dzh = dz.slice(s![rs.clone(), cs.clone()]);
                        let vh = cache.v_used.slice(s![rs.clone(), cs.clone()]);
                        let a_eff = match sc {
                            SampleCache::Baseline(o) => o.a_bin.index_axis(Axis(0), hd).mapv(|v| v * o.gamma),
                            _ => a.index_axis(Axis(0), hd).to_owned(),
                        };
                        d_a.index_axis_mut(Axis(0), hd).assign(&dzh.dot(&vh.t()));
                        d_v.slice_mut(s![rs.clone(), cs]).assign(&a_eff.t().dot(&dzh));
                    }
                    if let SampleCache::Baseline(o) = sc {
                        d_a = baseline_attn_backward(o, &d_a.view())?;
                    }
                }
                SampleCache::Gsb { attn: ac, value: vc, a_gsb, v_gsb } => {
                    let AttnPath::Gsb { attn, value } = &mut self.path else {
                        unreachable!("gsb cache on a baseline layer")
                    };
                    let mut d_vg = Array3::<f64>::zeros((h, n, dh));
                    for hd in 0..h {
                        let dzh = dz.slice(s![rs.clone(), hd * dh..(hd + 1) * dh]);
                        let vg = v_gsb.index_axis(Axis(0), hd);
                        let ag = a_gsb.index_axis(Axis(0), hd);
                        d_a.index_axis_mut(Axis(0), hd).assign(&dzh.dot(&vg.t()));
                        d_vg.index_axis_mut(Axis(0), hd).assign(&ag.t().dot(&dzh));
                    }
                    let ga = gsb_attn_backward(&d_a.view(), ac, attn)?;
                    let gv = gsb_value_backward(&d_vg.view(), vc, value)?;
                    d_a = ga.d_a_ret.clone();
                    for hd in 0..h {
                        d_v.slice_mut(s![rs.clone(), hd * dh..(hd + 1) * dh])
                            .assign(&gv.d_v0.index_axis(Axis(0), hd));
                    }
                    attn.accumulate_grads(&ga);
                    value.accumulate_grads(&gv);
                }
            }
            for hd in 0..h {
                let cs = hd * dh..(hd + 1) * dh;
                let ds = softmax_rows_backward(&a.index_axis(Axis(0), hd), &d_a.index_axis(Axis(0), hd));
                let qh = cache.q_used.slice(s![rs.clone(), cs.clone()]);
                let kh = cache.k_used.slice(s![rs.clone(), cs.clone()]);
                d_q.slice_mut(s![rs.clone(), cs.clone()]).assign(&(ds.dot(&kh) * scale));
                d_k.slice_mut(s![rs.clone(), cs]).assign(&(ds.t().dot(&qh) * scale));
            }
        }
        if binary {
            d_q = self.q_act.backward(cache.q_act.as_ref().expect("binary cache"), &d_q)?;
            d_k = self.k_act.backward(cache.k_act.as_ref().expect("binary cache"), &d_k)?;
            if let (AttnPath::Baseline { v_act, .. }, Some(vc)) = (&mut self.path, &cache.v_act) {
                d_v = v_act.backward(vc, &d_v)?;
            }
        }
        let mut dx = self.q.backward(&cache.q, &d_q)?;
        dx += &self.k.backward(&cache.k, &d_k)?;
        dx += &self.v.backward(&cache.v, &d_v)?;
        Ok(dx)
    }

    /// Clamps the attention and value scales after an update.
    pub fn clamp_scales(&mut self) {
        for act in [&mut self.q_act, &mut self.k_act] {
            act.scale.clamp_min(crate::gsb_attention::MIN_SCALE);
        }
        for lin in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            lin.act.scale.clamp_min(crate::gsb_attention::MIN_SCALE);
        }
        match &mut self.path {
            AttnPath::Gsb { attn, value } => {
                attn.clamp_scales();
                value.clamp_scales();
            }
            AttnPath::Baseline { v_act, .. } => v_act.scale.clamp_min(crate::gsb_attention::MIN_SCALE),
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

impl Parameters for Mhsa {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.q.visit_params(&join(prefix, "q"), f);
        self.k.visit_params(&join(prefix, "k"), f);
        self.v.visit_params(&join(prefix, "v"), f);
        self.o.visit_params(&join(prefix, "o"), f);
        self.q_act.visit_params(&join(prefix, "q_act"), f);
        self.k_act.visit_params(&join(prefix, "k_act"), f);
        match &self.path {
            AttnPath::Gsb { attn, value } => {
                attn.visit_params(&join(prefix, "gsb_attn"), f);
                value.visit_params(&join(prefix, "gsb_value"), f);
            }
            AttnPath::Baseline { v_act, .. } => v_act.visit_params(&join(prefix, "v_act"), f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.q.visit_params_mut(&join(prefix, "q"), f);
        self.k.visit_params_mut(&join(prefix, "k"), f);
        self.v.visit_params_mut(&join(prefix, "v"), f);
        self.o.visit_params_mut(&join(prefix, "o"), f);
        self.q_act.visit_params_mut(&join(prefix, "q_act"), f);
        self.k_act.visit_params_mut(&join(prefix, "k_act"), f);
        match &mut self.path {
            AttnPath::Gsb { attn, value } => {
                attn.visit_params_mut(&join(prefix, "gsb_attn"), f);
                value.visit_params_mut(&join(prefix, "gsb_value"), f);
            }
            AttnPath::Baseline { v_act, .. } => v_act.visit_params_mut(&join(prefix, "v_act"), f),
        }
    }
}
