//! The training loop: a supervised pretraining phase, then a four-step
//! adversarial alternation per batch.
//!
//! Pretraining (epochs 1..=iter_pre): each iteration takes one Adam step
//! on the content pair (e1, w1) against the identity loss, then one on the
//! style pair (e2, w2) against the camera loss.
//!
//! Adversarial phase (epochs iter_pre+1..=total_epochs): each iteration
//! runs exactly four sub-steps in a fixed order; each recomputes its
//! forward passes with the current parameters, backpropagates its loss
//! scaled by the configured weight, and updates only its own group:
//!
//! 1. w2 against the camera-recovery loss (weight beta),
//! 2. e1 against the camera-confusion + identity loss (weight alpha),
//! 3. w1 against the identity-recovery loss (weight tau),
//! 4. e2 against the camera-keeping + uniform-identity loss (weight lambda).
//!
//! A sub-step whose weight is zero is skipped outright: its loss would
//! contribute nothing, and even a zero-scaled Adam step would move moment
//! state and batch-norm statistics. Skipping keeps "all weights zero"
//! bit-identical to not running the adversarial phase at all.
//!
//! Everything random flows from the config seed through derived streams,
//! so two runs with one config are byte-identical, and a resumed run
//! continues exactly where the checkpoint left off.

use crate::checkpoint::{self, TrainState};
use crate::data::{make_batches, materialize_batch, AugmentConfig, Dataset, Domain, LabelSpaces, MiniBatch};
use crate::eval::{evaluate, split_query_gallery, subset, EvalOptions, EvalReport};
use crate::losses::{loss_id, loss_un_id, run_loss, LossKind, LossPhases, LossWeights};
use crate::model::{DrdlModel, Group, ModelConfig};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::Phase;
use crate::tensor::Scalar;
use crate::util::{atomic_write, derive_seed};
use crate::{Error, Result};
use std::path::{Path, PathBuf};

/// Seed-derivation tags; never reuse these values for other streams.
const TAG_MODEL_INIT: u64 = 0x7A11;
const TAG_BATCHES: u64 = 0xBA7C;
const TAG_AUGMENT: u64 = 0xA060;

/// Header of the per-epoch metrics CSV. Loss cells are epoch means; a cell
/// is empty when its loss is not part of the epoch's phase (or its
/// sub-step is disabled by a zero weight).
pub const METRICS_HEADER: &str =
    "epoch,phase,L_id,L_un_id,L_e1,L_e2,L_adv1,L_adv2,rank1,rank5,rank10,mAP";

/// The adversarial sub-steps, in execution order.
pub const ADVERSARIAL_SEQUENCE: [LossKind; 4] =
    [LossKind::Adv1, LossKind::E1, LossKind::Adv2, LossKind::E2];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_epochs: usize,
    /// Number of leading pretraining epochs; may equal total_epochs for a
    /// pure pretraining run.
    pub iter_pre: usize,
    pub batch_size: usize,
    pub lr_e1: f64,
    /// L2 weight decay, applied to the content encoder only.
    pub weight_decay_e1: f64,
    pub lr_e2: f64,
    pub lr_w1: f64,
    pub lr_w2: f64,
    pub betas: (f64, f64),
    /// The content encoder's learning rate ramps linearly from lr_e1/100
    /// at epoch 1 to lr_e1 at this epoch; the other rates stay constant.
    pub warmup_epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    /// Optional train-time augmentation; evaluation always sees the raw
    /// images.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 160,
            iter_pre: 70,
            batch_size: 16,
            lr_e1: 3e-4,
            weight_decay_e1: 5e-4,
            lr_e2: 3.5e-4,
            lr_w1: 3e-4,
            lr_w2: 3e-5,
            betas: (0.9, 0.999),
            warmup_epochs: 10,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 10,
            model: ModelConfig::default(),
            augment: None,
        }
    }
}

impl TrainConfig {
    /// Shorter run sized for the synthetic benchmark on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            total_epochs: 60,
            iter_pre: 25,
            warmup_epochs: 5,
            augment: Some(AugmentConfig::default()),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be at least 1".into()));
        }
        if self.iter_pre == 0 {
            return Err(Error::Config(
                "iter_pre must be at least 1; the run starts with pretraining".into(),
            ));
        }
        if self.iter_pre > self.total_epochs {
            return Err(Error::Config(format!(
                "iter_pre ({}) cannot exceed total_epochs ({})",
                self.iter_pre, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_e1", self.lr_e1),
            ("lr_e2", self.lr_e2),
            ("lr_w1", self.lr_w1),
            ("lr_w2", self.lr_w2),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {lr}"
                )));
            }
        }
        if !(self.weight_decay_e1 >= 0.0) || !self.weight_decay_e1.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay_e1 must be non-negative and finite, got {}",
                self.weight_decay_e1
            )));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::Config(format!(
                "adam betas must lie in [0, 1), got ({}, {})",
                self.betas.0, self.betas.1
            )));
        }
        if self.warmup_epochs == 0 {
            return Err(Error::Config("warmup_epochs must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        self.weights.validate()?;
        self.model.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Learning rate at a 1-based epoch: linear ramp from base/100 at epoch 1
/// to base at `warmup_epochs`, constant afterwards.
pub fn lr_schedule(epoch: usize, base_lr: f64, warmup_epochs: usize) -> f64 {
    if epoch >= warmup_epochs {
        return base_lr;
    }
    let start = base_lr / 100.0;
    start + (base_lr - start) * ((epoch - 1) as f64 / (warmup_epochs - 1) as f64)
}

/// One Adam per parameter group.
pub struct Optimizers {
    pub e1: Adam<f32>,
    pub e2: Adam<f32>,
    pub w1: Adam<f32>,
    pub w2: Adam<f32>,
}

impl Optimizers {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mk = |lr: f64, wd: f64| {
            Adam::new(AdamConfig {
                lr,
                beta1: cfg.betas.0,
                beta2: cfg.betas.1,
                eps: 1e-8,
                weight_decay: wd,
            })
        };
        Ok(Optimizers {
            e1: mk(cfg.lr_e1, cfg.weight_decay_e1)?,
            e2: mk(cfg.lr_e2, 0.0)?,
            w1: mk(cfg.lr_w1, 0.0)?,
            w2: mk(cfg.lr_w2, 0.0)?,
        })
    }

    pub fn of(&mut self, group: Group) -> &mut Adam<f32> {
        match group {
            Group::E1 => &mut self.e1,
            Group::E2 => &mut self.e2,
            Group::W1 => &mut self.w1,
            Group::W2 => &mut self.w2,
        }
    }

    /// Borrows the optimizers in [`Group::ALL`] order, for checkpointing.
    pub fn in_group_order(&self) -> Vec<&Adam<f32>> {
        vec![&self.e1, &self.e2, &self.w1, &self.w2]
    }

    /// Rebuilds the bundle from a checkpoint's [`Group::ALL`]-ordered list.
    pub fn from_group_order(mut v: Vec<Adam<f32>>) -> Result<Self> {
        if v.len() != Group::ALL.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} optimizers, got {}",
                Group::ALL.len(),
                v.len()
            )));
        }
        let w2 = v.pop().expect("length checked");
        let w1 = v.pop().expect("length checked");
        let e2 = v.pop().expect("length checked");
        let e1 = v.pop().expect("length checked");
        Ok(Optimizers { e1, e2, w1, w2 })
    }
}

fn ensure_finite(value: f32, quantity: &str, epoch: usize, iteration: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite {
            quantity: quantity.into(),
            epoch,
            iteration,
        });
    }
    Ok(())
}

/// The two augmented views of one mini-batch. Losses reading content
/// features (identity loss, content-encoder loss, camera critic on
/// content) see the fully augmented view; losses reading style features
/// see the same batch without color jitter, because the color stages span
/// the very family of per-channel casts the style branch must learn to
/// detect. With the same seed the geometry draws coincide, so the views
/// differ only in color. Without augmentation the views are identical.
pub struct BatchViews<T> {
    pub content: MiniBatch<T>,
    pub style: MiniBatch<T>,
}

impl<T: Scalar> BatchViews<T> {
    pub fn materialize(
        source: &Dataset,
        target: &Dataset,
        batch: &crate::data::Batch,
        augment: Option<(&AugmentConfig, u64)>,
    ) -> Result<Self> {
        match augment {
            Some((cfg, seed)) if cfg.has_color() => Ok(BatchViews {
                content: materialize_batch(source, target, batch, Some((cfg, seed)))?,
                style: materialize_batch(source, target, batch, Some((&cfg.without_color(), seed)))?,
            }),
            other => {
                let content: MiniBatch<T> = materialize_batch(source, target, batch, other)?;
                let style = content.clone();
                Ok(BatchViews { content, style })
            }
        }
    }

    pub fn for_kind(&self, kind: LossKind) -> &MiniBatch<T> {
        match kind {
            LossKind::Id | LossKind::E1 | LossKind::Adv1 => &self.content,
            LossKind::UnId | LossKind::E2 | LossKind::Adv2 => &self.style,
        }
    }
}

/// One pretraining iteration: a joint step of (e1, w1) on the identity
/// loss, then a joint step of (e2, w2) on the camera loss. Returns the two
/// loss values.
pub fn pretrain_step(
    model: &mut DrdlModel<f32>,
    opts: &mut Optimizers,
    views: &BatchViews<f32>,
    epoch: usize,
    iteration: usize,
) -> Result<(f64, f64)> {
    let batch = views.for_kind(LossKind::Id);
    model.zero_all_grads();
    model.set_trainable_groups(&[Group::E1, Group::W1]);
    let phases = LossPhases::with(&[Group::E1, Group::W1], Phase::Train);
    let l_id = loss_id(model, &batch.src_images, &batch.src_classes, phases, Some(1.0))?;
    ensure_finite(l_id, "loss_id", epoch, iteration)?;
    opts.e1.step(&mut model.group_params_mut(Group::E1))?;
    opts.w1.step(&mut model.group_params_mut(Group::W1))?;

    let batch = views.for_kind(LossKind::UnId);
    model.zero_all_grads();
    model.set_trainable_groups(&[Group::E2, Group::W2]);
    let phases = LossPhases::with(&[Group::E2, Group::W2], Phase::Train);
    let l_un = loss_un_id(
        model,
        &batch.src_images,
        &batch.src_cams,
        &batch.tgt_images,
        &batch.tgt_cams,
        phases,
        Some(1.0),
    )?;
    ensure_finite(l_un, "loss_un_id", epoch, iteration)?;
    opts.e2.step(&mut model.group_params_mut(Group::E2))?;
    opts.w2.step(&mut model.group_params_mut(Group::W2))?;

    Ok((l_id.to_f64(), l_un.to_f64()))
}

/// Runs one adversarial sub-step: backpropagates `weight * loss` and
/// updates only the loss's own parameter group. Returns the raw
/// (unweighted) loss, or None if the weight is zero and the sub-step was
/// skipped entirely.
pub fn adversarial_sub_step(
    model: &mut DrdlModel<f32>,
    opts: &mut Optimizers,
    kind: LossKind,
    weight: f64,
    views: &BatchViews<f32>,
    epoch: usize,
    iteration: usize,
) -> Result<Option<f64>> {
    let group = match kind {
        LossKind::Adv1 => Group::W2,
        LossKind::E1 => Group::E1,
        LossKind::Adv2 => Group::W1,
        LossKind::E2 => Group::E2,
        LossKind::Id | LossKind::UnId => {
            return Err(Error::Config(format!(
                "loss {} is a pretraining objective, not an adversarial sub-step",
                kind.label()
            )))
        }
    };
    if weight == 0.0 {
        return Ok(None);
    }
    let batch = views.for_kind(kind);
    model.zero_all_grads();
    model.set_trainable_groups(&[group]);
    let phases = LossPhases::with(&[group], Phase::Train);
    let value = run_loss(
        model,
        kind,
        &batch.src_images,
        &batch.src_classes,
        &batch.src_cams,
        &batch.tgt_images,
        &batch.tgt_cams,
        phases,
        Some(weight as f32),
    )?;
    ensure_finite(value, &format!("loss_{}", kind.label()), epoch, iteration)?;
    opts.of(group).step(&mut model.group_params_mut(group))?;
    Ok(Some(value.to_f64()))
}

/// Raw loss values of one adversarial iteration, in sub-step order; None
/// marks a sub-step disabled by a zero weight.
#[derive(Clone, Copy, Debug, Default)]
pub struct AdvStepLosses {
    pub adv1: Option<f64>,
    pub e1: Option<f64>,
    pub adv2: Option<f64>,
    pub e2: Option<f64>,
}

/// One adversarial iteration: the four sub-steps of
/// [`ADVERSARIAL_SEQUENCE`], each recomputing its forwards with the
/// parameters the previous sub-steps left behind.
pub fn adversarial_step(
    model: &mut DrdlModel<f32>,
    opts: &mut Optimizers,
    weights: &LossWeights,
    views: &BatchViews<f32>,
    epoch: usize,
    iteration: usize,
) -> Result<AdvStepLosses> {
    let mut out = AdvStepLosses::default();
    for kind in ADVERSARIAL_SEQUENCE {
        let weight = match kind {
            LossKind::Adv1 => weights.beta,
            LossKind::E1 => weights.alpha,
            LossKind::Adv2 => weights.tau,
            LossKind::E2 => weights.lambda,
            _ => unreachable!("sequence holds adversarial kinds only"),
        };
        let value = adversarial_sub_step(model, opts, kind, weight, views, epoch, iteration)?;
        match kind {
            LossKind::Adv1 => out.adv1 = value,
            LossKind::E1 => out.e1 = value,
            LossKind::Adv2 => out.adv2 = value,
            LossKind::E2 => out.e2 = value,
            _ => unreachable!(),
        }
    }
    Ok(out)
}

/// Datasets and artifact locations for one run.
pub struct TrainSession<'a> {
    pub source: &'a Dataset,
    pub target: &'a Dataset,
    /// Held-out labeled target split, scored after every epoch. Its labels
    /// feed evaluation only, never a gradient.
    pub eval: Option<&'a Dataset>,
    pub out_dir: &'a Path,
    /// Checkpoint to continue from; the run must use the seed and model
    /// shape the checkpoint was written.
    pub resume: Option<&'a Path>,
}

pub struct TrainOutcome {
    pub model: DrdlModel<f32>,
    pub metrics_csv: Vec<u8>,
    pub final_eval: Option<EvalReport>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

struct EpochAccumulator {
    id: MeanCell,
    un_id: MeanCell,
    e1: MeanCell,
    e2: MeanCell,
    adv1: MeanCell,
    adv2: MeanCell,
}

#[derive(Default)]
struct MeanCell {
    sum: f64,
    n: usize,
}

impl MeanCell {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn add_opt(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.add(v);
        }
    }

    fn cell(&self) -> String {
        if self.n == 0 {
            String::new()
        } else {
            format!("{:.6}", self.sum / self.n as f64)
        }
    }
}

impl EpochAccumulator {
    fn new() -> Self {
        EpochAccumulator {
            id: MeanCell::default(),
            un_id: MeanCell::default(),
            e1: MeanCell::default(),
            e2: MeanCell::default(),
            adv1: MeanCell::default(),
            adv2: MeanCell::default(),
        }
    }

    fn loss_cells(&self) -> String {
        [&self.id, &self.un_id, &self.e1, &self.e2, &self.adv1, &self.adv2]
            .iter()
            .map(|c| c.cell())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn validate_datasets(sess: &TrainSession) -> Result<LabelSpaces> {
    let src = sess.source;
    let tgt = sess.target;
    if src.domain != Domain::Source || tgt.domain != Domain::Target {
        return Err(Error::Config(
            "training needs a source-domain and a target-domain dataset, in that order".into(),
        ));
    }
    if src.id_classes.is_empty() {
        return Err(Error::InvalidInput(
            "source dataset carries no labeled identities".into(),
        ));
    }
    let same_shape = |m: &crate::data::DatasetMeta| {
        m.channels == src.meta.channels && m.height == src.meta.height && m.width == src.meta.width
    };
    if !same_shape(&tgt.meta) {
        return Err(Error::Config(format!(
            "source images are {}x{}x{} but target images are {}x{}x{}",
            src.meta.channels,
            src.meta.height,
            src.meta.width,
            tgt.meta.channels,
            tgt.meta.height,
            tgt.meta.width
        )));
    }
    if let Some(e) = sess.eval {
        if !same_shape(&e.meta) {
            return Err(Error::Config("eval images differ in shape from training images".into()));
        }
    }
    let labels = LabelSpaces {
        num_source_ids: src.id_classes.len(),
        num_source_cams: src.meta.num_cams,
        num_target_cams: tgt.meta.num_cams,
    };
    labels.validate()?;
    for s in &src.samples {
        if s.camera_id >= labels.num_source_cams {
            return Err(Error::InvalidInput(format!(
                "source sample {} has camera class {} outside 0..{}",
                s.filename, s.camera_id, labels.num_source_cams
            )));
        }
    }
    for s in &tgt.samples {
        let lo = labels.num_source_cams;
        let hi = labels.total_cameras();
        if s.camera_id < lo || s.camera_id >= hi {
            return Err(Error::InvalidInput(format!(
                "target sample {} has camera class {} outside {lo}..{hi}; was the dataset loaded with the camera offset?",
                s.filename, s.camera_id
            )));
        }
    }
    Ok(labels)
}

/// Runs a full training session and leaves `metrics.csv` plus
/// `checkpoint.bin` in the output directory. Single-threaded and
/// deterministic: one (config, data) pair gives byte-identical artifacts
/// on every run.
pub fn train(cfg: &TrainConfig, sess: &TrainSession) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = validate_datasets(sess)?;
    std::fs::create_dir_all(sess.out_dir).map_err(|e| Error::io(sess.out_dir, e))?;
    let metrics_path = sess.out_dir.join("metrics.csv");
    let checkpoint_path = sess.out_dir.join("checkpoint.bin");

    let (mut model, mut opts, start_epoch, mut csv) = match sess.resume {
        Some(path) => {
            let (model, opt_vec, state) = checkpoint::load::<f32>(path)?;
            if state.master_seed != cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint was written with seed {}, config says {}",
                    state.master_seed, cfg.seed
                )));
            }
            if model.labels != labels {
                return Err(Error::Config(
                    "checkpoint label spaces do not match the given datasets".into(),
                ));
            }
            if model.cfg != cfg.model {
                return Err(Error::Config(
                    "checkpoint model shape does not match the configured one".into(),
                ));
            }
            if state.epochs_done >= cfg.total_epochs {
                return Err(Error::Config(format!(
                    "checkpoint already holds {} epochs; total_epochs is {}",
                    state.epochs_done, cfg.total_epochs
                )));
            }
            (
                model,
                Optimizers::from_group_order(opt_vec)?,
                state.epochs_done + 1,
                state.metrics_csv,
            )
        }
        None => {
            let model = DrdlModel::<f32>::new(
                cfg.model.clone(),
                labels,
                derive_seed(cfg.seed, &[TAG_MODEL_INIT]),
            )?;
            let opts = Optimizers::new(cfg)?;
            (model, opts, 1, format!("{METRICS_HEADER}\n").into_bytes())
        }
    };

    let eval_split = match sess.eval {
        Some(ds) => {
            let (q, g) = split_query_gallery(ds);
            Some((subset(ds, &q), subset(ds, &g)))
        }
        None => None,
    };

    let mut final_eval = None;
    for epoch in start_epoch..=cfg.total_epochs {
        opts.e1.set_lr(lr_schedule(epoch, cfg.lr_e1, cfg.warmup_epochs));
        let batches = make_batches(
            sess.source,
            sess.target,
            cfg.batch_size,
            derive_seed(cfg.seed, &[TAG_BATCHES, epoch as u64]),
        )?;
        let pretraining = epoch <= cfg.iter_pre;
        let mut acc = EpochAccumulator::new();
        for (it, b) in batches.iter().enumerate() {
            let aug = cfg.augment.as_ref().map(|a| {
                (a, derive_seed(cfg.seed, &[TAG_AUGMENT, epoch as u64, it as u64]))
            });
            let mb: BatchViews<f32> = BatchViews::materialize(sess.source, sess.target, b, aug)?;
            if pretraining {
                let (l_id, l_un) = pretrain_step(&mut model, &mut opts, &mb, epoch, it)?;
                acc.id.add(l_id);
                acc.un_id.add(l_un);
            } else {
                let r = adversarial_step(&mut model, &mut opts, &cfg.weights, &mb, epoch, it)?;
                acc.adv1.add_opt(r.adv1);
                acc.e1.add_opt(r.e1);
                acc.adv2.add_opt(r.adv2);
                acc.e2.add_opt(r.e2);
            }
        }

        let eval_cells = match &eval_split {
            Some((query, gallery)) => {
                let report = evaluate(&mut model, query, gallery, &EvalOptions::default())?;
                let cells = format!(
                    "{:.6},{:.6},{:.6},{:.6}",
                    report.rank(1),
                    report.rank(5),
                    report.rank(10),
                    report.map
                );
                final_eval = Some(report);
                cells
            }
            None => ",,,".into(),
        };

        let phase_label = if pretraining { "pretrain" } else { "adversarial" };
        let row = format!("{epoch},{phase_label},{},{eval_cells}\n", acc.loss_cells());
        csv.extend_from_slice(row.as_bytes());
        atomic_write(&metrics_path, &csv)?;

        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.total_epochs {
            checkpoint::save(
                &checkpoint_path,
                &model,
                &opts.in_group_order(),
                &TrainState {
                    epochs_done: epoch,
                    master_seed: cfg.seed,
                    metrics_csv: csv.clone(),
                },
            )?;
        }
    }

    Ok(TrainOutcome {
        model,
        metrics_csv: csv,
        final_eval,
        metrics_path,
        checkpoint_path,
    })
}
