//! Two-stage training: weights-only binarization first, then the fully
//! binarized model starting from the stage-1 weights.

use std::fmt;
use std::io::Write;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binarize::Precision;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::config::{DistillConfig, ModelConfig, Stage};
use crate::model::data::{augment, Dataset};
use crate::model::loss::{cross_entropy, distill_loss, topk_accuracy};
use crate::model::optim::{cosine_lr, Adam};
use crate::model::vit::Vit;

/// Batch size used for every evaluation pass, so that `eval` on a saved
/// checkpoint replays the exact arithmetic of the logged evaluation.
pub const EVAL_BATCH: usize = 250;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    /// Random crop padding in pixels; `None` disables augmentation.
    pub crop_pad: Option<usize>,
    pub distill: Option<DistillConfig>,
    /// Epochs for the full-precision teacher when distilling.
    pub teacher_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 20,
            batch_size: 32,
            lr0: 5e-4,
            seed: 0,
            crop_pad: None,
            distill: None,
            teacher_epochs: 30,
        }
    }
}

impl Schedule {
    /// Full-scale ImageNet-style schedule: 600 + 300 epochs, batch 128, distilled.
    pub fn full_scale() -> Self {
        Self {
            stage1_epochs: 600,
            stage2_epochs: 300,
            batch_size: 128,
            distill: Some(DistillConfig::default()),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// 0 for the teacher, else the stage number.
    pub stage: u8,
    pub train_loss: f64,
    pub test_loss: f64,
    pub top1: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} stage={} train_loss={:.6} test_loss={:.6} top1={:.4}",
            self.epoch, self.stage, self.train_loss, self.test_loss, self.top1
        )
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

pub fn evaluate(model: &mut Vit, data: &Dataset, precision: Precision) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let mut logits = Array2::zeros((data.len(), model.config().num_classes));
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let (out, _) = model.forward(&data.images.slice(s![start..end, ..]), precision)?;
        logits.slice_mut(s![start..end, ..]).assign(&out.logits());
    }
    let (loss, _) = cross_entropy(&logits.view(), &data.labels)?;
    let (top1, top5) = topk_accuracy(&logits, &data.labels);
    Ok(Evaluation { loss, top1, top5 })
}

pub struct TrainOutcome {
    pub model: Vit,
    pub metrics: Vec<EpochMetrics>,
    /// The model at the end of stage 1.
    pub stage1: Checkpoint,
}

struct Trainer<'a> {
    train: &'a Dataset,
    test: &'a Dataset,
    sched: &'a Schedule,
    rng: ChaCha8Rng,
    teacher: Option<&'a mut Vit>,
    log: &'a mut dyn Write,
    metrics: Vec<EpochMetrics>,
}

impl Trainer<'_> {
    fn batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.sched.batch_size).map(|c| c.to_vec()).collect()
    }

    fn run_stage(&mut self, model: &mut Vit, epochs: usize, precision: Precision, stage: u8) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let steps_per_epoch = self.train.len().div_ceil(self.sched.batch_size);
        let total = epochs * steps_per_epoch;
        let mut opt = Adam::new(self.sched.lr0);
        let mut step = 0;
        for epoch in 1..=epochs {
            let mut loss_sum = 0.0;
            for idx in self.batches() {
                let batch = self.train.select(&idx);
                let mut x = batch.images;
                if let Some(pad) = self.sched.crop_pad {
                    augment(&mut x, batch.channels, batch.side, pad, &mut self.rng);
                }
                model.zero_grad();
                let (out, cache) = model.forward(&x.view(), precision)?;
                let (loss, d_cls, d_dist) = match (&mut self.teacher, self.sched.distill) {
                    (Some(t), Some(cfg)) => {
                        let (tout, _) = t.forward(&x.view(), Precision::Full)?;
                        let side = out.dist.as_ref().unwrap_or(&out.cls);
                        let d = distill_loss(&out.cls.view(), &side.view(), &tout.cls.view(), &batch.labels, cfg)?;
                        if out.dist.is_some() {
                            (d.loss, d.d_label, Some(d.d_teacher))
                        } else {
                            (d.loss, d.d_label + d.d_teacher, None)
                        }
                    }
                    _ => {
                        let (l, g) = cross_entropy(&out.cls.view(), &batch.labels)?;
                        // an untrained distillation head follows the labels
                        let dd = out.dist.as_ref().map(|d| cross_entropy(&d.view(), &batch.labels)).transpose()?;
                        match dd {
                            Some((l2, g2)) => (0.5 * (l + l2), g * 0.5, Some(g2 * 0.5)),
                            None => (l, g, None),
                        }
                    }
                };
                if !loss.is_finite() {
                    return Err(Error::Precondition(format!("non-finite loss at stage {stage} epoch {epoch}")));
                }
                loss_sum += loss * idx.len() as f64;
                model.backward(&cache, &d_cls, d_dist.as_ref())?;
                opt.lr = cosine_lr(self.sched.lr0, step, total);
                opt.step(model);
                model.clamp_scales();
                model.round_to_f32();
                step += 1;
            }
            let ev = evaluate(model, self.test, precision)?;
            let m = EpochMetrics {
                epoch,
                stage,
                train_loss: loss_sum / self.train.len() as f64,
                test_loss: ev.loss,
                top1: ev.top1,
            };
            writeln!(self.log, "{m}")?;
            log::info!("{m}");
            self.metrics.push(m);
        }
        Ok(())
    }
}

fn check_data(cfg: &ModelConfig, train: &Dataset, test: &Dataset, sched: &Schedule) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset("training and test sets must be non-empty".into()));
    }
    if sched.batch_size == 0 {
        return Err(Error::InvalidParam("batch size must be positive".into()));
    }
    for d in [train, test] {
        if d.channels != cfg.in_channels || d.side != cfg.image_size || d.num_classes != cfg.num_classes {
            return Err(Error::Dataset(format!(
                "dataset {}×{}×{} with {} classes does not fit the model",
                d.channels, d.side, d.side, d.num_classes
            )));
        }
    }
    Ok(())
}

/// Trains a full-precision model to serve as the distillation teacher.
pub fn train_teacher(cfg: &ModelConfig, train: &Dataset, test: &Dataset, sched: &Schedule, log: &mut dyn Write) -> Result<Vit> {
    let tcfg = ModelConfig {
        distill_token: false,
        ..cfg.clone()
    };
    check_data(&tcfg, train, test, sched)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed ^ 0x7eac_4e12);
    let mut model = Vit::new(&tcfg, &mut rng)?;
    model.round_to_f32();
    let sched = Schedule {
        distill: None,
        ..sched.clone()
    };
    let mut tr = Trainer {
        train,
        test,
        sched: &sched,
        rng,
        teacher: None,
        log,
        metrics: Vec::new(),
    };
    tr.run_stage(&mut model, sched.teacher_epochs, Precision::Full, 0)?;
    Ok(model)
}

/// Stage 1 trains with binary weights and full-precision activations. Stage 2
/// reloads the stage-1 weights, calibrates every activation scale and the GSB
/// scales on the first training batch, then trains the fully binarized model.
/// One metrics line per epoch goes to `log`.
pub fn two_stage_train(
    cfg: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    sched: &Schedule,
    teacher: Option<&mut Vit>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    check_data(cfg, train, test, sched)?;
    if sched.distill.is_some() && teacher.is_none() {
        return Err(Error::InvalidParam("distillation configured without a teacher".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut model = Vit::new(cfg, &mut rng)?;
    model.round_to_f32();
    let mut tr = Trainer {
        train,
        test,
        sched,
        rng,
        teacher,
        log,
        metrics: Vec::new(),
    };
    tr.run_stage(&mut model, sched.stage1_epochs, Stage::Stage1.precision(), 1)?;

    let stage1 = Checkpoint::from_model(&model, Stage::Stage1);
    let mut model = stage1.to_model()?;
    let first = tr.batches().swap_remove(0);
    model.calibrate(&train.images.select(Axis(0), &first).view())?;
    model.round_to_f32();
    tr.run_stage(&mut model, sched.stage2_epochs, Stage::Stage2.precision(), 2)?;
    Ok(TrainOutcome {
        model,
        metrics: tr.metrics,
        stage1,
    })
}
