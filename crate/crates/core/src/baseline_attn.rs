//! Baseline attention binarization: `clip(round(A_re/γ), 0, 1)` with a
//! two-stage scale and a switch back to the mean-absolute scale when too
//! few entries survive.

use ndarray::{ArrayView3, Axis, Zip};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Threshold used by both the round/clip binarizer and the stage-2 scale.
pub const BIN_THRESHOLD: f64 = 0.5;

const SOFTMAX_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaMode {
    /// `γ = mean |A_re|`.
    Stage1,
    /// `γ = mean of the entries above 0.5`, with the switch rule.
    Stage2,
}

#[derive(Clone, Debug)]
pub struct BaselineAttnState {
    pub mode: GammaMode,
    /// Token count `N` used by the switch rule.
    pub n_tokens: usize,
    /// Scale used by the most recent call.
    pub gamma: f64,
}

impl BaselineAttnState {
    pub fn new(mode: GammaMode, n_tokens: usize) -> Self {
        Self {
            mode,
            n_tokens,
            gamma: 1.0,
        }
    }

    pub fn binarize(&mut self, a_re: &ArrayView3<f64>) -> Result<BaselineAttnOutput> {
        let out = baseline_attn_binarize(a_re, self.mode, self.n_tokens)?;
        self.gamma = out.gamma;
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct BaselineAttnOutput {
    pub a_bin: Tensor3,
    pub gamma: f64,
    /// True when stage 2 fell back to the mean-absolute scale.
    pub switched: bool,
    /// `A_re / γ`, kept for the backward window.
    pub scaled: Tensor3,
}

fn check_softmax(a: &ArrayView3<f64>) -> Result<()> {
    if let Some(v) = a.iter().find(|&&v| !(-SOFTMAX_TOL..=1.0 + SOFTMAX_TOL).contains(&v)) {
        return Err(Error::Precondition(format!("attention entry {v} outside [0, 1]")));
    }
    for row in a.lanes(Axis(2)) {
        let s = row.sum();
        if (s - 1.0).abs() > SOFTMAX_TOL {
            return Err(Error::Precondition(format!("attention row sums to {s}")));
        }
    }
    Ok(())
}

fn mean_abs(a: &ArrayView3<f64>) -> f64 {
    a.iter().map(|v| v.abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Stage-2 scale: mean of the entries above the threshold, if any.
pub fn stage2_gamma(a: &ArrayView3<f64>) -> Option<f64> {
    let (sum, count) = a
        .iter()
        .filter(|&&v| v > BIN_THRESHOLD)
        .fold((0.0, 0usize), |(s, c), &v| (s + v.abs(), c + 1));
    (count > 0).then(|| sum / count as f64)
}

pub fn baseline_attn_binarize(
    a_re: &ArrayView3<f64>,
    mode: GammaMode,
    n_tokens: usize,
) -> Result<BaselineAttnOutput> {
    check_softmax(a_re)?;
    let stage1 = || {
        let g = mean_abs(a_re);
        if g > 0.0 {
            g
        } else {
            1.0
        }
    };
    let (gamma, switched) = match mode {
        GammaMode::Stage1 => (stage1(), false),
        GammaMode::Stage2 => match stage2_gamma(a_re) {
            Some(g) => {
                let above = a_re.iter().filter(|&&v| v / g > BIN_THRESHOLD).count();
                if above < n_tokens {
                    (stage1(), true)
                } else {
                    (g, false)
                }
            }
            None => (stage1(), true),
        },
    };
    let scaled = a_re.mapv(|v| v / gamma);
    let a_bin = scaled.mapv(|x| if x > BIN_THRESHOLD { 1.0 } else { 0.0 });
    Ok(BaselineAttnOutput {
        a_bin,
        gamma,
        switched,
        scaled,
    })
}

/// Gradient with respect to `A_re` of `γ·A_bin`, with `γ` held constant:
/// upstream passes where `0 ≤ A_re/γ ≤ 1`.
pub fn baseline_attn_backward(out: &BaselineAttnOutput, upstream: &ArrayView3<f64>) -> Result<Tensor3> {
    if upstream.dim() != out.scaled.dim() {
        return Err(Error::Shape(format!(
            "upstream {:?} vs cached {:?}",
            upstream.dim(),
            out.scaled.dim()
        )));
    }
    let mut g = upstream.to_owned();
    Zip::from(&mut g).and(&out.scaled).for_each(|g, &x| {
        if !(0.0..=1.0).contains(&x) {
            *g = 0.0;
        }
    });
    Ok(g)
}
