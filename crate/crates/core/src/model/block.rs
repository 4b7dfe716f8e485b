use ndarray::Array2;
use rand::Rng;

use crate::binarize::Precision;
use crate::bitops::OpTally;
use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::model::layers::{LayerNorm, LayerNormCache};
use crate::model::mhsa::{Ctx, Mhsa, MhsaCache};
use crate::model::mlp::{Mlp, MlpCache};
use crate::param::{join, Param, Parameters};

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: MhsaCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl BlockCache {
    pub fn attn(&self) -> &MhsaCache {
        &self.attn
    }
}

impl Block {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(cfg.dim),
            attn: Mhsa::new(cfg, rng),
            ln2: LayerNorm::new(cfg.dim),
            mlp: Mlp::new(cfg.dim, cfg.mlp_ratio, rng),
        }
    }

    pub fn forward(
        &mut self,
        x: &Array2<f64>,
        ctx: Ctx,
        mut tally: Option<&mut OpTally>,
    ) -> Result<(Array2<f64>, BlockCache)> {
        let (xn, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&xn, ctx, tally.as_deref_mut())?;
        let x1 = x + &a;
        let (xn2, ln2) = self.ln2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&xn2, ctx, tally.as_deref_mut())?;
        if let Some(t) = tally {
            if ctx.precision == Precision::Binary {
                let nd = (x.len() / ctx.batch) as u64;
                t.attention.add_flops("layer_norm", 4 * nd);
                t.attention.add_flops("residual_add", nd);
                t.mlp.add_flops("layer_norm", 4 * nd);
                t.mlp.add_flops("residual_add", nd);
            }
        }
        Ok((x1 + &m, BlockCache { ln1, attn, ln2, mlp }))
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Array2<f64>) -> Result<Array2<f64>> {
        let dm = self.mlp.backward(&cache.mlp, dy)?;
        let dx1 = dy + &self.ln2.backward(&cache.ln2, &dm);
        let da = self.attn.backward(&cache.attn, &dx1)?;
        Ok(&dx1 + &self.ln1.backward(&cache.ln1, &da))
    }

    pub fn clamp_scales(&mut self) {
        self.attn.clamp_scales();
        self.mlp.clamp_scales();
    }
}

impl Parameters for Block {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.ln1.visit_params(&join(prefix, "ln1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.ln2.visit_params(&join(prefix, "ln2"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.ln1.visit_params_mut(&join(prefix, "ln1"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.ln2.visit_params_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_params_mut(&join(prefix, "mlp"), f);
    }
}
