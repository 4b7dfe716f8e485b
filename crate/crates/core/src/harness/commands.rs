//! Implementations behind the command-line subcommands.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};

use crate::binarize::Precision;
use crate::bitops::{count_ops, ModelShape, OpsMode};
use crate::error::{Error, Result};
use crate::gsb_attention::gsb_attn_forward;
use crate::harness::checks::{
    attn_fallback_ok, compare_attn_init, compare_value_init, grad_check, value_fallback_ok, INIT_TOL,
};
use crate::harness::config::RunConfig;
use crate::harness::data::load_splits;
use crate::model::checkpoint::{read_named_tensor, read_u32_le, write_named_tensor};
use crate::model::mhsa::AttnPath;
use crate::model::train::{evaluate, train_teacher, two_stage_train, EpochMetrics, Evaluation};
use crate::model::{Checkpoint, Stage, Vit};
use crate::tensor::Tensor3;

pub use crate::harness::checks::GRAD_TOL;

/// Text and pass/fail outcome of a check command.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub lines: Vec<String>,
    pub passed: bool,
}

/// The accountant for `shape` in all three modes.
pub fn ops_report(shape: ModelShape) -> String {
    OpsMode::ALL
        .iter()
        .map(|&m| count_ops(shape, m).to_text())
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn grad_check_report(seed: u64, cases: usize) -> Result<CheckReport> {
    let r = grad_check(seed, cases)?;
    let mut lines = vec![format!("grad-check seed={seed} cases={}", r.cases)];
    lines.extend(r.lines(GRAD_TOL));
    Ok(CheckReport {
        passed: r.passed(GRAD_TOL),
        lines,
    })
}

/// Offset attention `A_re − Φ` and `V − Ω` of every GSB block, stacked over
/// the samples of `images`, after calibrating the model on them.
fn live_gsb_tensors(model: &mut Vit, images: &Array2<f64>) -> Result<Vec<(Tensor3, Tensor3)>> {
    model.calibrate(&images.view())?;
    let (_, cache) = model.forward(&images.view(), Precision::Binary)?;
    let mut out = Vec::new();
    for (block, bc) in model.blocks.iter().zip(cache.blocks()) {
        let AttnPath::Gsb { attn, value } = &block.attn.path else {
            continue;
        };
        let phi: Tensor3 = attn.phi.value.clone().into_dimensionality().expect("3-d");
        let omega: Tensor3 = value.omega.value.clone().into_dimensionality().expect("3-d");
        let mc = bc.attn();
        let rets: Vec<Tensor3> = mc.attention().iter().map(|a| a - &phi).collect();
        let v0s: Vec<Tensor3> = (0..images.nrows()).map(|b| mc.value(b, block.attn.heads()) - &omega).collect();
        let cat = |ts: &[Tensor3]| {
            let views: Vec<_> = ts.iter().map(|t| t.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("same shapes")
        };
        out.push((cat(&rets), cat(&v0s)));
    }
    Ok(out)
}

/// Closed-form inits against the least-squares oracle on the attention and
/// value tensors the model produces for `images`.
pub fn init_check_report(model: &mut Vit, images: &Array2<f64>) -> Result<CheckReport> {
    let (k_a, k_v) = (model.config().k_a, model.config().k_v);
    let tensors = live_gsb_tensors(model, images)?;
    if tensors.is_empty() {
        return Err(Error::InvalidParam("init-check needs attn_mode = gsb".into()));
    }
    let mut lines = vec![format!("init-check images={} k_a={k_a} k_v={k_v}", images.nrows())];
    let mut passed = true;
    for (l, (a_ret, v0)) in tensors.iter().enumerate() {
        let a = compare_attn_init(&a_ret.view(), k_a)?;
        let ok = a.passed(INIT_TOL, attn_fallback_ok(&a));
        passed &= ok;
        lines.push(format!(
            "{} block {l} attention closed={:?} lsq={:?} max_abs_err={:.3e} degenerate={}",
            if ok { "ok  " } else { "FAIL" },
            a.closed_form,
            a.least_squares,
            a.max_err(),
            a.degenerate
        ));
        let v = compare_value_init(&v0.view(), k_v)?;
        let ok = v.passed(INIT_TOL, value_fallback_ok(&v, INIT_TOL));
        passed &= ok;
        lines.push(format!(
            "{} block {l} value closed={:?} lsq={:?} max_abs_err={:.3e} degenerate={}",
            if ok { "ok  " } else { "FAIL" },
            v.closed_form,
            v.least_squares,
            v.max_err(),
            v.degenerate
        ));
    }
    Ok(CheckReport { lines, passed })
}

const DUMP_MAGIC: &[u8; 8] = b"GSBDUMP\0";
const DUMP_VERSION: u32 = 1;

/// Writes `blocks.{l}.a_re`, `.a_bin_gsb`, `.a_bin` and `.mask{i}` (all
/// `H × N × N`) for the first image to a tensor container: magic,
/// `u32` version, `u32` count, then named f32 tensors in the checkpoint
/// record layout. Baseline blocks get `.a_bin_baseline` instead.
pub fn attn_dump(model: &mut Vit, image: &Array2<f64>, path: &Path) -> Result<Vec<String>> {
    let image = image.slice(s![0..1, ..]).to_owned();
    let (_, cache) = model.forward(&image.view(), Precision::Binary)?;
    let mut tensors: Vec<(String, Tensor3)> = Vec::new();
    for (l, (block, bc)) in model.blocks.iter_mut().zip(cache.blocks()).enumerate() {
        let a_re = bc.attn().attention()[0].clone();
        match &mut block.attn.path {
            AttnPath::Gsb { attn, .. } => {
                let out = gsb_attn_forward(&a_re.view(), attn)?;
                tensors.push((format!("blocks.{l}.a_bin_gsb"), out.dense));
                tensors.push((format!("blocks.{l}.a_bin"), out.cache.a_bin));
                for (i, m) in out.cache.masks.into_iter().enumerate() {
                    tensors.push((format!("blocks.{l}.mask{}", i + 1), m));
                }
            }
            AttnPath::Baseline { state, .. } => {
                let out = state.binarize(&a_re.view())?;
                tensors.push((format!("blocks.{l}.a_bin_baseline"), out.a_bin * out.gamma));
            }
        }
        tensors.push((format!("blocks.{l}.a_re"), a_re));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let mut names = Vec::new();
    for (name, t) in &tensors {
        write_named_tensor(&mut w, name, &t.mapv(|v| v as f32).into_dyn())?;
        names.push(format!("{name} {:?}", t.shape()));
    }
    w.flush()?;
    Ok(names)
}

pub fn read_attn_dump(path: &Path) -> Result<Vec<(String, ndarray::ArrayD<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Checkpoint("not a tensor dump".into()));
    }
    let version = read_u32_le(&mut r)?;
    if version != DUMP_VERSION {
        return Err(Error::Checkpoint(format!("unsupported dump version {version}")));
    }
    let n = read_u32_le(&mut r)?;
    (0..n).map(|_| read_named_tensor(&mut r)).collect()
}

/// Writes every line to two sinks.
struct Tee<'a> {
    file: &'a mut dyn Write,
    echo: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        self.echo.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()?;
        self.echo.flush()
    }
}

pub struct TrainSummary {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

/// Runs the two-stage schedule of `cfg` and writes `metrics.log`,
/// `stage1.ckpt`, `model.ckpt` and `run.cfg` to the output directory.
/// Metrics lines are also echoed to `echo`.
pub fn run_train(cfg: &RunConfig, echo: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train, test) = load_splits(&cfg.dataset, &cfg.model)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset("refusing to train on an empty dataset".into()));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("run.cfg"), cfg.to_text())?;
    let metrics_log = cfg.output_dir.join("metrics.log");
    let mut file = BufWriter::new(File::create(&metrics_log)?);
    let mut tee = Tee { file: &mut file, echo };
    let mut teacher = match cfg.schedule.distill {
        Some(_) => Some(train_teacher(&cfg.model, &train, &test, &cfg.schedule, &mut tee)?),
        None => None,
    };
    let out = two_stage_train(&cfg.model, &train, &test, &cfg.schedule, teacher.as_mut(), &mut tee)?;
    tee.flush()?;
    drop(tee);
    file.flush()?;
    out.stage1.save(&cfg.output_dir.join("stage1.ckpt"))?;
    let checkpoint = cfg.output_dir.join("model.ckpt");
    Checkpoint::from_model(&out.model, Stage::Stage2).save(&checkpoint)?;
    Ok(TrainSummary {
        metrics: out.metrics,
        checkpoint,
        metrics_log,
    })
}

/// Evaluates a checkpoint on the test split described by `cfg`, at the
/// precision of the checkpoint's stage.
pub fn run_eval(checkpoint: &Path, cfg: &RunConfig) -> Result<Evaluation> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = ck.to_model()?;
    let (_, test) = load_splits(&cfg.dataset, &ck.config)?;
    evaluate(&mut model, &test, ck.stage.precision())
}

/// Model from a checkpoint, or freshly initialized from `cfg` with its seed.
pub fn model_for(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vit> {
    use rand::SeedableRng;
    match checkpoint {
        Some(p) => Checkpoint::load(p)?.to_model(),
        None => Vit::new(&cfg.model, &mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.schedule.seed)),
    }
}

/// The first `count` training images of `cfg`'s dataset.
pub fn sample_images(cfg: &RunConfig, count: usize) -> Result<Array2<f64>> {
    let (train, _) = load_splits(&cfg.dataset, &cfg.model)?;
    let take = count.min(train.len()).max(1);
    if train.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    Ok(train.images.slice(s![0..take, ..]).to_owned())
}
