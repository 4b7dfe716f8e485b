use crate::binarize::Precision;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    Baseline,
    Gsb,
}

impl AttnMode {
    pub fn name(self) -> &'static str {
        match self {
            AttnMode::Baseline => "baseline",
            AttnMode::Gsb => "gsb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AttnMode::Baseline),
            "gsb" => Ok(AttnMode::Gsb),
            _ => Err(Error::InvalidParam(format!("unknown attention mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Weights binarized, activations full precision.
    Stage1,
    /// Weights and activations binarized.
    Stage2,
}

impl Stage {
    pub fn precision(self) -> Precision {
        match self {
            Stage::Stage1 => Precision::WeightsOnly,
            Stage::Stage2 => Precision::Binary,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub k_a: usize,
    pub k_v: usize,
    pub attn_mode: AttnMode,
    /// Adds a distillation token and a second head.
    pub distill_token: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            in_channels: 3,
            num_classes: 2,
            dim: 32,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2,
            k_a: 2,
            k_v: 2,
            attn_mode: AttnMode::Gsb,
            distill_token: false,
        }
    }
}

impl ModelConfig {
    /// The CIFAR mini-ViT: 4 blocks, 4 heads, `d = 96`, 4×4 patches.
    pub fn cifar_mini() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            num_classes: 10,
            dim: 96,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            ..Self::default()
        }
    }

    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn class_tokens(&self) -> usize {
        1 + usize::from(self.distill_token)
    }

    pub fn tokens(&self) -> usize {
        self.patches() + self.class_tokens()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Key/value pairs understood by [`ModelConfig::set_key`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("blocks", self.blocks.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("k_a", self.k_a.to_string()),
            ("k_v", self.k_v.to_string()),
            ("attn_mode", self.attn_mode.name().to_string()),
            ("distill_token", self.distill_token.to_string()),
        ]
    }

    /// Sets one field by name. Returns `Ok(false)` for keys that are not
    /// model fields.
    pub fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let num = |v: &str| v.parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        match key {
            "image_size" => self.image_size = num(value)?,
            "patch_size" => self.patch_size = num(value)?,
            "in_channels" => self.in_channels = num(value)?,
            "num_classes" => self.num_classes = num(value)?,
            "dim" => self.dim = num(value)?,
            "heads" => self.heads = num(value)?,
            "blocks" => self.blocks = num(value)?,
            "mlp_ratio" => self.mlp_ratio = num(value)?,
            "k_a" => self.k_a = num(value)?,
            "k_v" => self.k_v = num(value)?,
            "attn_mode" => self.attn_mode = AttnMode::parse(value).map_err(|e| e.to_string())?,
            "distill_token" => self.distill_token = value.parse().map_err(|e| format!("`{value}`: {e}"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.dim == 0 || self.heads == 0 || self.blocks == 0 || self.mlp_ratio == 0 {
            return bad("dim, heads, blocks and mlp_ratio must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return bad("need at least two classes and one channel".into());
        }
        Ok(())
    }
}

/// Hard-label distillation weights: `(1 − λ)·CE(labels) + λ·CE(teacher argmax)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub lambda: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

impl DistillConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidParam(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self { lambda })
    }
}
