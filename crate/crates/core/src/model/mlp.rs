use ndarray::Array2;
use rand::Rng;

use crate::binarize::{ActKind, BinaryLinear, LinearCache, Precision};
use crate::bitops::OpTally;
use crate::error::Result;
use crate::gsb_attention::MIN_SCALE;
use crate::model::mhsa::Ctx;
use crate::param::{join, Param, Parameters};

/// `fc2(ReLU(fc1(x)))`. The hidden activation is non-negative, so its
/// binarizer is the `{0, 1}` kind.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: BinaryLinear,
    pub fc2: BinaryLinear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    fc1: LinearCache,
    fc2: LinearCache,
    hidden: Array2<f64>,
}

impl Mlp {
    pub fn new(dim: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: BinaryLinear::new(dim, dim * ratio, ActKind::TypeB, rng),
            fc2: BinaryLinear::new(dim * ratio, dim, ActKind::TypeA, rng),
        }
    }

    pub fn forward(
        &mut self,
        x: &Array2<f64>,
        ctx: Ctx,
        tally: Option<&mut OpTally>,
    ) -> Result<(Array2<f64>, MlpCache)> {
        let binary = ctx.precision == Precision::Binary;
        if binary && ctx.calibrate {
            self.fc1.act.calibrate(x);
        }
        let (h, fc1) = self.fc1.forward(x, ctx.precision)?;
        let hidden = h.mapv(|v| v.max(0.0));
        if binary && ctx.calibrate {
            self.fc2.act.calibrate(&hidden);
        }
        let (y, fc2) = self.fc2.forward(&hidden, ctx.precision)?;
        if let Some(t) = tally {
            let n = (x.nrows() / ctx.batch) as u64;
            let d = x.ncols() as u64;
            let rd = self.fc1.out_dim() as u64;
            let mlp = &mut t.mlp;
            match ctx.precision {
                Precision::Full => mlp.add_flops("mlp_macs", 2 * n * rd * d),
                Precision::WeightsOnly => {}
                Precision::Binary => {
                    mlp.add_flops("act_binarize_fc1_input", n * d);
                    mlp.add_bops("fc1_macs", n * d * rd);
                    mlp.add_flops("linear_rescale_bias", n * rd);
                    mlp.add_flops("relu", n * rd);
                    mlp.add_flops("act_binarize_fc2_input", n * rd);
                    mlp.add_bops("fc2_macs", n * rd * d);
                    mlp.add_flops("linear_rescale_bias", n * d);
                }
            }
        }
        Ok((y, MlpCache { fc1, fc2, hidden }))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Array2<f64>) -> Result<Array2<f64>> {
        let mut dh = self.fc2.backward(&cache.fc2, dy)?;
        ndarray::Zip::from(&mut dh)
            .and(&cache.hidden)
            .for_each(|g, &h| {
                if h <= 0.0 {
                    *g = 0.0;
                }
            });
        self.fc1.backward(&cache.fc1, &dh)
    }

    pub fn clamp_scales(&mut self) {
        self.fc1.act.scale.clamp_min(MIN_SCALE);
        self.fc2.act.scale.clamp_min(MIN_SCALE);
    }
}

impl Parameters for Mlp {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}
