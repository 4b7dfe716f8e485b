//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Model keys are those of
//! [`ModelConfig::set_key`]; the rest are listed in [`RunConfig::set`].

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::train::Schedule;
use crate::model::{DistillConfig, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            _ => Err(format!("unknown dataset `{s}` (synthetic, cifar10, cifar100)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub seed: u64,
    /// Synthetic images per class in the training and test splits.
    pub per_class: usize,
    pub test_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            train_subset: None,
            test_subset: None,
            seed: 0,
            per_class: 256,
            test_per_class: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub dataset: DatasetConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            dataset: DatasetConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("`{v}`: {e}"))
}

fn opt_subset(v: &str) -> std::result::Result<Option<usize>, String> {
    if v == "all" {
        Ok(None)
    } else {
        parse_num(v).map(Some)
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if self.model.set_key(key, value)? {
            return Ok(());
        }
        let s = &mut self.schedule;
        let d = &mut self.dataset;
        match key {
            "stage1_epochs" => s.stage1_epochs = parse_num(value)?,
            "stage2_epochs" => s.stage2_epochs = parse_num(value)?,
            "teacher_epochs" => s.teacher_epochs = parse_num(value)?,
            "batch_size" => s.batch_size = parse_num(value)?,
            "lr0" => s.lr0 = parse_num(value)?,
            "seed" => s.seed = parse_num(value)?,
            "crop_pad" => {
                let p: usize = parse_num(value)?;
                s.crop_pad = (p > 0).then_some(p);
            }
            "distill" => {
                let on: bool = parse_num(value)?;
                s.distill = match (on, s.distill) {
                    (true, None) => Some(DistillConfig::default()),
                    (true, keep) => keep,
                    (false, _) => None,
                };
            }
            "lambda" => {
                let l = DistillConfig::new(parse_num(value)?).map_err(|e| e.to_string())?;
                s.distill = Some(l);
            }
            "dataset" => d.kind = DatasetKind::parse(value)?,
            "data_path" => d.path = Some(PathBuf::from(value)),
            "train_subset" => d.train_subset = opt_subset(value)?,
            "test_subset" => d.test_subset = opt_subset(value)?,
            "data_seed" => d.seed = parse_num(value)?,
            "per_class" => d.per_class = parse_num(value)?,
            "test_per_class" => d.test_per_class = parse_num(value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        // relative data paths are taken from the config file's directory
        if let (Some(p), Some(dir)) = (&cfg.dataset.path, path.parent()) {
            if p.is_relative() && !p.exists() {
                cfg.dataset.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidParam(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim()).map_err(Error::InvalidParam)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.schedule.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be positive".into()));
        }
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                if self.dataset.per_class == 0 || self.dataset.test_per_class == 0 {
                    return Err(Error::Dataset("synthetic dataset is empty (per_class = 0)".into()));
                }
            }
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                let p = self
                    .dataset
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Dataset("data_path is required for CIFAR".into()))?;
                if !p.exists() {
                    return Err(Error::Dataset(format!("data path {} does not exist", p.display())));
                }
                let classes = if self.dataset.kind == DatasetKind::Cifar10 { 10 } else { 100 };
                let m = &self.model;
                if m.image_size != 32 || m.in_channels != 3 || m.num_classes != classes {
                    return Err(Error::InvalidParam(format!(
                        "CIFAR needs image_size = 32, in_channels = 3, num_classes = {classes}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        let s = &self.schedule;
        let d = &self.dataset;
        let opt = |v: Option<usize>| v.map_or("all".to_string(), |n| n.to_string());
        let mut kv = vec![
            ("stage1_epochs", s.stage1_epochs.to_string()),
            ("stage2_epochs", s.stage2_epochs.to_string()),
            ("teacher_epochs", s.teacher_epochs.to_string()),
            ("batch_size", s.batch_size.to_string()),
            ("lr0", s.lr0.to_string()),
            ("seed", s.seed.to_string()),
            ("crop_pad", s.crop_pad.unwrap_or(0).to_string()),
            ("distill", s.distill.is_some().to_string()),
        ];
        if let Some(dc) = s.distill {
            kv.push(("lambda", dc.lambda.to_string()));
        }
        kv.extend([
            ("dataset", d.kind.name().to_string()),
            ("train_subset", opt(d.train_subset)),
            ("test_subset", opt(d.test_subset)),
            ("data_seed", d.seed.to_string()),
            ("per_class", d.per_class.to_string()),
            ("test_per_class", d.test_per_class.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ]);
        if let Some(p) = &d.path {
            kv.push(("data_path", p.display().to_string()));
        }
        for (k, v) in kv {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "# mini run\ndim = 48\nheads=4\nattn_mode = baseline\nstage1_epochs = 3 # short\nlambda = 0.25\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.dim, 48);
        assert_eq!(cfg.model.attn_mode, crate::model::AttnMode::Baseline);
        assert_eq!(cfg.schedule.stage1_epochs, 3);
        assert_eq!(cfg.schedule.distill, Some(DistillConfig { lambda: 0.25 }));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("dim = 8\n\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 3, .. }), "{e}");
        let e = RunConfig::parse("dim = eight\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        let e = RunConfig::parse("just words\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
    }

    #[test]
    fn empty_synthetic_set_is_rejected() {
        let cfg = RunConfig::parse("per_class = 0\n").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Dataset(_))));
    }
}
