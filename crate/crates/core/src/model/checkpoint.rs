//! Binary checkpoint container.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic   b"GSBVIT\0\0"
//! u32     format version
//! u32     config length, then that many bytes of `key=value` lines
//! u32     tensor count
//! per tensor:
//!   u32 name length, name bytes (utf-8)
//!   u32 rank, rank × u64 dims
//!   row-major f32 values
//! ```
//!
//! Only master (latent) parameters are stored. Binarized views are always
//! recomputed from them.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Stage};
use crate::model::vit::Vit;
use crate::param::Parameters;

const MAGIC: &[u8; 8] = b"GSBVIT\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: Stage,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Vit, stage: Stage) -> Self {
        let mut tensors = Vec::new();
        model.visit_params("", &mut |name, p| tensors.push((name, p.value.mapv(|v| v as f32))));
        Self {
            config: model.config().clone(),
            stage,
            tensors,
        }
    }

    /// Rebuilds a model with these parameter values. Every parameter of the
    /// configured model must be present with a matching shape.
    pub fn to_model(&self) -> Result<Vit> {
        let mut model = Vit::new(&self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &mut Vit) -> Result<()> {
        if model.config() != &self.config {
            return Err(Error::Checkpoint("model configuration differs from checkpoint".into()));
        }
        let mut missing = None;
        let mut idx = 0;
        let tensors = &self.tensors;
        model.visit_params_mut("", &mut |name, p| {
            if missing.is_some() {
                return;
            }
            match tensors.get(idx) {
                Some((n, t)) if *n == name && t.shape() == p.value.shape() => {
                    p.value = t.mapv(f64::from);
                    p.zero_grad();
                }
                _ => missing = Some(name),
            }
            idx += 1;
        });
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!("parameter `{name}` missing or mis-shaped")));
        }
        if idx != tensors.len() {
            return Err(Error::Checkpoint(format!("{} tensors in file, model has {idx}", tensors.len())));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let mut cfg = String::new();
        for (k, v) in self.config.to_pairs() {
            cfg.push_str(&format!("{k}={v}\n"));
        }
        cfg.push_str(&format!("stage={}\n", self.stage.number()));
        write_bytes(w, cfg.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_named_tensor(w, name, t)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_text = String::from_utf8(read_bytes(r)?).map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
        let mut config = ModelConfig::default();
        let mut stage = Stage::Stage1;
        for line in cfg_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
            if k == "stage" {
                stage = match v {
                    "1" => Stage::Stage1,
                    "2" => Stage::Stage2,
                    _ => return Err(Error::Checkpoint(format!("bad stage `{v}`"))),
                };
            } else if !config.set_key(k, v).map_err(Error::Checkpoint)? {
                return Err(Error::Checkpoint(format!("unknown config key `{k}`")));
            }
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(read_named_tensor(r)?);
        }
        Ok(Self { config, stage, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

/// Writes one `name, rank, dims, f32 payload` record.
pub(crate) fn write_named_tensor(w: &mut impl Write, name: &str, t: &ArrayD<f32>) -> Result<()> {
    write_bytes(w, name.as_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_named_tensor(r: &mut impl Read) -> Result<(String, ArrayD<f32>)> {
    let name = String::from_utf8(read_bytes(r)?).map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
    let rank = read_u32(r)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(truncated)?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let len: usize = dims.iter().product();
    let mut raw = vec![0u8; len * 4];
    r.read_exact(&mut raw).map_err(truncated)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((name, t))
}

pub(crate) fn read_u32_le(r: &mut impl Read) -> Result<u32> {
    read_u32(r)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Checkpoint(format!("field length {n} too large")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let cfg = ModelConfig::default();
        let mut model = Vit::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        model.round_to_f32();
        let ck = Checkpoint::from_model(&model, Stage::Stage2);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.stage, Stage::Stage2);
        let restored = back.to_model().unwrap();
        let mut a = Vec::new();
        model.visit_params("", &mut |n, p| a.push((n, p.value.clone())));
        let mut b = Vec::new();
        restored.visit_params("", &mut |n, p| b.push((n, p.value.clone())));
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = Vit::new(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_model(&model, Stage::Stage1).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let model = Vit::new(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ck = Checkpoint::from_model(&model, Stage::Stage1);
        let other = ModelConfig {
            dim: 16,
            ..ModelConfig::default()
        };
        let mut m2 = Vit::new(&other, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(ck.load_into(&mut m2).is_err());
    }
}
