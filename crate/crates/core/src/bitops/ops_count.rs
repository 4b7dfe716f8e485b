//! Operation accountant for one transformer block and for a stack of blocks.
//!
//! Full precision cost follows the standard block model
//! `F_MHA = 2nd(2d+n)`, `F_MLP = 2nrd²` (multiply-accumulates counted as one
//! FLOP each). The binary modes move every multiply-accumulate of the
//! projections and of the two attention products to BOPs and keep an itemized
//! list of the floating point work that remains. A fused multiply-add counts
//! as one FLOP, and a binarizer compares against its learned threshold in one
//! FLOP. Combined cost is `OPs = BOPs/64 + FLOPs`.

use std::fmt::Write as _;

/// Shape of a ViT as seen by the accountant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    /// Token count `n`.
    pub tokens: usize,
    /// Embedding dimension `d`.
    pub dim: usize,
    /// MLP expansion ratio `r`.
    pub mlp_ratio: usize,
    /// Number of transformer blocks `L`.
    pub blocks: usize,
    pub heads: usize,
    pub k_a: usize,
    pub k_v: usize,
}

impl ModelShape {
    /// DeiT-Small block: `n = 198`, `d = 384`, `r = 4`, 6 heads, `k_a = k_v = 2`.
    pub fn deit_small() -> Self {
        Self {
            tokens: 198,
            dim: 384,
            mlp_ratio: 4,
            blocks: 1,
            heads: 6,
            k_a: 2,
            k_v: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpsMode {
    FullPrecision,
    BaselineBinary,
    GsbBinary,
}

impl OpsMode {
    pub const ALL: [OpsMode; 3] = [
        OpsMode::FullPrecision,
        OpsMode::BaselineBinary,
        OpsMode::GsbBinary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpsMode::FullPrecision => "full_precision",
            OpsMode::BaselineBinary => "baseline_binary",
            OpsMode::GsbBinary => "gsb_binary",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockPart {
    Attention,
    Mlp,
}

/// Itemized BOPs and FLOPs for one part of a block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartOps {
    pub bops: u64,
    pub flops: u64,
    pub bop_items: Vec<(String, u64)>,
    pub flop_items: Vec<(String, u64)>,
}

fn bump(items: &mut Vec<(String, u64)>, name: &str, n: u64) {
    match items.iter_mut().find(|(k, _)| k == name) {
        Some((_, v)) => *v += n,
        None => items.push((name.to_string(), n)),
    }
}

impl PartOps {
    pub fn add_bops(&mut self, name: &str, n: u64) {
        self.bops += n;
        bump(&mut self.bop_items, name, n);
    }

    pub fn add_flops(&mut self, name: &str, n: u64) {
        self.flops += n;
        bump(&mut self.flop_items, name, n);
    }

    pub fn ops(&self) -> f64 {
        self.bops as f64 / 64.0 + self.flops as f64
    }

    pub fn flop_item(&self, name: &str) -> u64 {
        self.flop_items
            .iter()
            .find(|(k, _)| k == name)
            .map_or(0, |(_, v)| *v)
    }

    /// Same totals and items, ignoring insertion order.
    pub fn same_counts(&self, other: &PartOps) -> bool {
        let sorted = |v: &[(String, u64)]| {
            let mut v = v.to_vec();
            v.sort();
            v
        };
        self.bops == other.bops
            && self.flops == other.flops
            && sorted(&self.bop_items) == sorted(&other.bop_items)
            && sorted(&self.flop_items) == sorted(&other.flop_items)
    }
}

/// Operation tally of one transformer block, split into attention and MLP.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpTally {
    pub attention: PartOps,
    pub mlp: PartOps,
}

impl OpTally {
    pub fn part_mut(&mut self, part: BlockPart) -> &mut PartOps {
        match part {
            BlockPart::Attention => &mut self.attention,
            BlockPart::Mlp => &mut self.mlp,
        }
    }

    pub fn bops(&self) -> u64 {
        self.attention.bops + self.mlp.bops
    }

    pub fn flops(&self) -> u64 {
        self.attention.flops + self.mlp.flops
    }

    pub fn ops(&self) -> f64 {
        self.bops() as f64 / 64.0 + self.flops() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpsReport {
    pub mode: OpsMode,
    pub shape: ModelShape,
    /// Cost of one block (all blocks have the same shape).
    pub per_block: OpTally,
    /// Totals over `shape.blocks` blocks.
    pub bops: u64,
    pub flops: u64,
    pub ops: f64,
}

impl OpsReport {
    /// One record per block plus the model total, in units of 10⁶,
    /// laid out as attention BOPs/FLOPs, MLP BOPs/FLOPs, all OPs.
    pub fn to_text(&self) -> String {
        let m = |x: u64| x as f64 / 1e6;
        let s = &self.shape;
        let b = &self.per_block;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# mode={} n={} d={} r={} heads={} blocks={} k_a={} k_v={}",
            self.mode.name(),
            s.tokens,
            s.dim,
            s.mlp_ratio,
            s.heads,
            s.blocks,
            s.k_a,
            s.k_v
        );
        let _ = writeln!(
            out,
            "{:<7} {:>14} {:>14} {:>14} {:>14} {:>14}",
            "block", "attn_bops_1e6", "attn_flops_1e6", "mlp_bops_1e6", "mlp_flops_1e6", "ops_1e6"
        );
        for i in 0..s.blocks {
            let _ = writeln!(
                out,
                "{:<7} {:>14.3} {:>14.3} {:>14.3} {:>14.3} {:>14.3}",
                i,
                m(b.attention.bops),
                m(b.attention.flops),
                m(b.mlp.bops),
                m(b.mlp.flops),
                b.ops() / 1e6
            );
        }
        let _ = writeln!(
            out,
            "{:<7} {:>14.3} {:>14.3} {:>14.3} {:>14.3} {:>14.3}",
            "total",
            m(b.attention.bops * s.blocks as u64),
            m(b.attention.flops * s.blocks as u64),
            m(b.mlp.bops * s.blocks as u64),
            m(b.mlp.flops * s.blocks as u64),
            self.ops / 1e6
        );
        for (label, part) in [("attention", &b.attention), ("mlp", &b.mlp)] {
            for (name, v) in &part.bop_items {
                let _ = writeln!(out, "#   {label} bops {name} {v}");
            }
            for (name, v) in &part.flop_items {
                let _ = writeln!(out, "#   {label} flops {name} {v}");
            }
        }
        out
    }
}

/// Counts BOPs, FLOPs and OPs for `shape` under `mode`.
pub fn count_ops(shape: ModelShape, mode: OpsMode) -> OpsReport {
    let n = shape.tokens as u64;
    let d = shape.dim as u64;
    let r = shape.mlp_ratio as u64;
    let h = shape.heads as u64;
    let nd = n * d;
    let hn2 = h * n * n;
    let (k_a, k_v) = (shape.k_a as u64, shape.k_v as u64);

    let mut block = OpTally::default();
    let att = &mut block.attention;
    match mode {
        OpsMode::FullPrecision => {
            att.add_flops("projection_macs", 4 * nd * d);
            att.add_flops("attention_macs", 2 * n * n * d);
            block.mlp.add_flops("mlp_macs", 2 * n * r * d * d);
        }
        OpsMode::BaselineBinary | OpsMode::GsbBinary => {
            att.add_bops("projection_macs", 4 * nd * d);
            att.add_bops("score_macs", n * n * d);
            let products = match mode {
                OpsMode::GsbBinary => (k_a + 1) * (k_v + 1),
                _ => 1,
            };
            att.add_bops("attention_value_macs", products * n * n * d);

            att.add_flops("layer_norm", 4 * nd);
            att.add_flops("act_binarize_qkv_input", 3 * nd);
            att.add_flops("act_binarize_proj_input", nd);
            att.add_flops("linear_rescale_bias", 4 * nd);
            att.add_flops("act_binarize_qk", 2 * nd);
            att.add_flops("score_scale", hn2);
            att.add_flops("softmax", 3 * hn2);
            if mode == OpsMode::GsbBinary {
                att.add_flops("attn_offset", hn2);
                att.add_flops("attn_row_max", hn2);
                att.add_flops("attn_binarize", hn2);
                att.add_flops("attn_masks", k_a * hn2);
                att.add_flops("value_offset_binarize", nd);
                att.add_flops("value_extrema", 2 * nd);
                att.add_flops("value_masks", 2 * k_v * nd);
                att.add_flops("component_accumulate", products * nd);
            } else {
                att.add_flops("attn_scale_stat", hn2);
                att.add_flops("attn_binarize", hn2);
                att.add_flops("act_binarize_v", nd);
                att.add_flops("attention_value_rescale", nd);
            }
            att.add_flops("residual_add", nd);

            let mlp = &mut block.mlp;
            mlp.add_bops("fc1_macs", n * d * r * d);
            mlp.add_bops("fc2_macs", n * r * d * d);
            mlp.add_flops("layer_norm", 4 * nd);
            mlp.add_flops("act_binarize_fc1_input", nd);
            mlp.add_flops("linear_rescale_bias", r * nd + nd);
            mlp.add_flops("relu", r * nd);
            mlp.add_flops("act_binarize_fc2_input", r * nd);
            mlp.add_flops("residual_add", nd);
        }
    }
    let blocks = shape.blocks as u64;
    let bops = block.bops() * blocks;
    let flops = block.flops() * blocks;
    OpsReport {
        mode,
        shape,
        per_block: block,
        bops,
        flops,
        ops: bops as f64 / 64.0 + flops as f64,
    }
}
