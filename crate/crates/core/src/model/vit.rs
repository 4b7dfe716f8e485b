use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::binarize::Precision;
use crate::bitops::OpTally;
use crate::error::{shape_err, Result};
use crate::model::block::{Block, BlockCache};
use crate::model::config::ModelConfig;
use crate::model::layers::{normal_vec, FpLinear, LayerNorm, LayerNormCache};
use crate::model::mhsa::Ctx;
use crate::param::{join, Param, Parameters};

/// Vision transformer with full-precision patch embedding and classifier and
/// binarizable transformer blocks.
///
/// Images are rows of a matrix in channel-major `C × S × S` layout.
#[derive(Clone, Debug)]
pub struct Vit {
    cfg: ModelConfig,
    pub patch: FpLinear,
    /// Class token (and distillation token), `T × d`.
    pub tokens: Param,
    /// Position embedding, `N × d`.
    pub pos: Param,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: FpLinear,
    pub head_dist: Option<FpLinear>,
}

#[derive(Clone, Debug)]
pub struct VitOutput {
    pub cls: Array2<f64>,
    pub dist: Option<Array2<f64>>,
}

impl VitOutput {
    /// Logits used for prediction: the class head, averaged with the
    /// distillation head when present.
    pub fn logits(&self) -> Array2<f64> {
        match &self.dist {
            Some(d) => (&self.cls + d) * 0.5,
            None => self.cls.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VitCache {
    ctx: Ctx,
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    /// Normalized class-token rows (and distillation-token rows).
    cls_feat: Array2<f64>,
    dist_feat: Option<Array2<f64>>,
}

impl VitCache {
    pub fn blocks(&self) -> &[BlockCache] {
        &self.blocks
    }
}

/// Splits images into flattened patches, one row per patch, ordered
/// row-major over the patch grid. Each row lists `c, dy, dx` channel-major.
pub fn extract_patches(images: &ArrayView2<f64>, cfg: &ModelConfig) -> Array2<f64> {
    let (p, side, c) = (cfg.patch_size, cfg.image_size, cfg.in_channels);
    let grid = side / p;
    let np = grid * grid;
    Array2::from_shape_fn((images.nrows() * np, cfg.patch_dim()), |(row, col)| {
        let (b, patch) = (row / np, row % np);
        let (py, px) = (patch / grid, patch % grid);
        let (ch, rem) = (col / (p * p), col % (p * p));
        let (dy, dx) = (rem / p, rem % p);
        debug_assert!(ch < c);
        images[[b, ch * side * side + (py * p + dy) * side + px * p + dx]]
    })
}

impl Vit {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let t = cfg.class_tokens();
        Ok(Self {
            cfg: cfg.clone(),
            patch: FpLinear::new(cfg.patch_dim(), d, rng),
            tokens: Param::from_vec(&[t, d], normal_vec(rng, t * d, 0.02)),
            pos: Param::from_vec(&[cfg.tokens(), d], normal_vec(rng, cfg.tokens() * d, 0.02)),
            blocks: (0..cfg.blocks).map(|_| Block::new(cfg, rng)).collect(),
            norm: LayerNorm::new(d),
            head: FpLinear::new(d, cfg.num_classes, rng),
            head_dist: cfg.distill_token.then(|| FpLinear::new(d, cfg.num_classes, rng)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn embed(&self, images: &ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let cfg = &self.cfg;
        let want = cfg.in_channels * cfg.image_size * cfg.image_size;
        if images.ncols() != want {
            return Err(shape_err(format!("image rows have {} values, expected {want}", images.ncols())));
        }
        let patches = extract_patches(images, cfg);
        let emb = self.patch.forward(&patches.view());
        let (b, n, t, np) = (images.nrows(), cfg.tokens(), cfg.class_tokens(), cfg.patches());
        let tok = self.tokens.mat();
        let pos = self.pos.mat();
        let mut x = Array2::<f64>::zeros((b * n, cfg.dim));
        for i in 0..b {
            let mut xs = x.slice_mut(s![i * n..(i + 1) * n, ..]);
            xs.slice_mut(s![..t, ..]).assign(&tok);
            xs.slice_mut(s![t.., ..]).assign(&emb.slice(s![i * np..(i + 1) * np, ..]));
            xs += &pos;
        }
        Ok((x, patches))
    }

    fn run(
        &mut self,
        images: &ArrayView2<f64>,
        ctx: Ctx,
        mut tallies: Option<&mut Vec<OpTally>>,
    ) -> Result<(VitOutput, VitCache)> {
        let (mut x, patches) = self.embed(images)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let tally = tallies.as_deref_mut().map(|t| &mut t[i]);
            let (y, c) = block.forward(&x, ctx, tally)?;
            x = y;
            caches.push(c);
        }
        let n = self.cfg.tokens();
        let b = ctx.batch;
        let (xn, norm) = self.norm.forward(&x);
        let cls_feat = Array2::from_shape_fn((b, self.cfg.dim), |(i, j)| xn[[i * n, j]]);
        let dist_feat = self
            .head_dist
            .as_ref()
            .map(|_| Array2::from_shape_fn((b, self.cfg.dim), |(i, j)| xn[[i * n + 1, j]]));
        let cls = self.head.forward(&cls_feat.view());
        let dist = match (&self.head_dist, &dist_feat) {
            (Some(h), Some(f)) => Some(h.forward(&f.view())),
            _ => None,
        };
        Ok((
            VitOutput { cls, dist },
            VitCache {
                ctx,
                patches,
                blocks: caches,
                norm,
                cls_feat,
                dist_feat,
            },
        ))
    }

    pub fn forward(&mut self, images: &ArrayView2<f64>, precision: Precision) -> Result<(VitOutput, VitCache)> {
        let ctx = Ctx {
            precision,
            batch: images.nrows(),
            calibrate: false,
        };
        self.run(images, ctx, None)
    }

    /// Sets every activation scale and the GSB scales of each block from
    /// `images`, layer by layer in forward order.
    pub fn calibrate(&mut self, images: &ArrayView2<f64>) -> Result<()> {
        let ctx = Ctx {
            precision: Precision::Binary,
            batch: images.nrows(),
            calibrate: true,
        };
        self.run(images, ctx, None)?;
        Ok(())
    }

    /// Per-block operation tally of a single-image forward pass.
    pub fn count_forward_ops(&mut self, image: &ArrayView2<f64>, precision: Precision) -> Result<Vec<OpTally>> {
        if image.nrows() != 1 {
            return Err(shape_err("operation tally expects one image"));
        }
        let mut tallies = vec![OpTally::default(); self.blocks.len()];
        let ctx = Ctx {
            precision,
            batch: 1,
            calibrate: false,
        };
        self.run(image, ctx, Some(&mut tallies))?;
        Ok(tallies)
    }

    /// Accumulates gradients of every parameter given the logit gradients.
    pub fn backward(&mut self, cache: &VitCache, d_cls: &Array2<f64>, d_dist: Option<&Array2<f64>>) -> Result<()> {
        let n = self.cfg.tokens();
        let b = cache.ctx.batch;
        let mut dxn = Array2::<f64>::zeros((b * n, self.cfg.dim));
        let dc = self.head.backward(&cache.cls_feat.view(), d_cls);
        for i in 0..b {
            dxn.row_mut(i * n).assign(&dc.row(i));
        }
        if let (Some(h), Some(f), Some(dd)) = (&mut self.head_dist, &cache.dist_feat, d_dist) {
            let dd = h.backward(&f.view(), dd);
            for i in 0..b {
                dxn.row_mut(i * n + 1).assign(&dd.row(i));
            }
        }
        let mut dx = self.norm.backward(&cache.norm, &dxn);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(c, &dx)?;
        }
        // embedding
        let t = self.cfg.class_tokens();
        let np = self.cfg.patches();
        let mut d_emb = Array2::<f64>::zeros((b * np, self.cfg.dim));
        for i in 0..b {
            let dxs = dx.slice(s![i * n..(i + 1) * n, ..]);
            self.pos.grad_mat_mut().scaled_add(1.0, &dxs);
            self.tokens.grad_mat_mut().scaled_add(1.0, &dxs.slice(s![..t, ..]));
            d_emb.slice_mut(s![i * np..(i + 1) * np, ..]).assign(&dxs.slice(s![t.., ..]));
        }
        self.patch.backward(&cache.patches.view(), &d_emb);
        Ok(())
    }

    pub fn clamp_scales(&mut self) {
        for b in &mut self.blocks {
            b.clamp_scales();
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.value.mapv_inplace(|v| v as f32 as f64));
    }

    /// Predicted class per image.
    pub fn predict(&mut self, images: &ArrayView2<f64>, precision: Precision) -> Result<Vec<usize>> {
        let (out, _) = self.forward(images, precision)?;
        Ok(argmax_rows(&out.logits()))
    }
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

impl Parameters for Vit {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.patch.visit_params(&join(prefix, "patch"), f);
        f(join(prefix, "tokens"), &self.tokens);
        f(join(prefix, "pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.head.visit_params(&join(prefix, "head"), f);
        if let Some(h) = &self.head_dist {
            h.visit_params(&join(prefix, "head_dist"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.patch.visit_params_mut(&join(prefix, "patch"), f);
        f(join(prefix, "tokens"), &mut self.tokens);
        f(join(prefix, "pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
        if let Some(h) = &mut self.head_dist {
            h.visit_params_mut(&join(prefix, "head_dist"), f);
        }
    }
}
