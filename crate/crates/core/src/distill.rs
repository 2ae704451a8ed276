//! Lattice-level knowledge distillation.
//!
//! Step 1 trains a single-talker transducer (the teacher) on target speech
//! plus noise. Step 2 freezes it and trains the target-speaker student on
//! mixtures with `L_rnnt + lambda * L_kd`, where `L_kd` is the cross-entropy
//! between the teacher's and the student's full posterior lattices. The
//! teacher sees the noisy single-talker signal of the same record, so both
//! lattices have the same shape.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{stream_seed, MixtureRecord, Tokens};
use crate::decode::recognize;
use crate::diffcore::{Grads, ParamStore, Sgd};
use crate::error::{invalid, shape, Error, Result};
use crate::eval::{edit_distance, ter};
use crate::par::Exec;
use crate::speaker::TargetSpeakerModel;
use crate::transducer::{
    extract_features, rnnt_loss, FeatureConfig, FeatureSequence, PosteriorLattice, TransducerModel,
};

/// `-sum teacher * ln(student)` over every lattice entry, with its gradient
/// with respect to the student probabilities.
pub fn kd_loss(teacher: &PosteriorLattice, student: &PosteriorLattice) -> Result<(f64, Vec<f64>)> {
    if teacher.shape() != student.shape() {
        return Err(shape(
            "kd_loss",
            format!("teacher {:?} vs student {:?}", teacher.shape(), student.shape()),
        ));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; student.probs().len()];
    for ((q, p), g) in teacher.probs().iter().zip(student.probs()).zip(&mut grad) {
        if *q == 0.0 {
            continue;
        }
        loss -= q * p.ln();
        *g = -q / p;
    }
    Ok((loss, grad))
}

/// Features of one record, extracted once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: u32,
    pub snr_db: f64,
    pub mixture: FeatureSequence,
    /// Target plus noise: the teacher's input.
    pub single: FeatureSequence,
    pub enrollment: FeatureSequence,
    pub transcript: Tokens,
}

pub fn prepare(records: &[MixtureRecord], fc: &FeatureConfig, exec: Exec) -> Result<Vec<Prepared>> {
    exec.map(records, |r| {
        Ok(Prepared {
            id: r.id,
            snr_db: r.snr_db,
            mixture: extract_features(&r.mixture, fc)?,
            single: extract_features(&r.target_plus_noise, fc)?,
            enrollment: extract_features(&r.enrollment, fc)?,
            transcript: r.transcript.clone(),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip: f64,
    pub batch_size: usize,
    /// Scale the learning rate of epoch `e` by `(epochs - e + 1) / epochs`.
    pub decay: bool,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            clip: 5.0,
            batch_size: 16,
            decay: false,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdConfig {
    pub lambda: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLoss {
    pub rnnt: f64,
    pub kd: f64,
    pub total: f64,
}

impl StepLoss {
    fn add(&mut self, o: &StepLoss) {
        self.rnnt += o.rnnt;
        self.kd += o.kd;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.rnnt *= s;
        self.kd *= s;
        self.total *= s;
        self
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: StepLoss,
    pub ter: Option<f64>,
}

impl fmt::Display for EpochLog {
    /// `epoch, split, rnnt_loss, kd_loss, total, ter`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}, {}, {:.6}, {:.6}, {:.6}, ",
            self.epoch, self.split, self.loss.rnnt, self.loss.kd, self.loss.total
        )?;
        match self.ter {
            Some(t) => write!(f, "{t:.3}"),
            None => write!(f, "na"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Batch-mean total loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    pub fn dev_ter(&self) -> Option<f64> {
        self.log.iter().rev().find(|l| l.split == "dev").and_then(|l| l.ter)
    }
}

/// Models the shared loop can update.
pub trait Trainable: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Trainable for TransducerModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Trainable for TargetSpeakerModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

fn check_finite(loss: &StepLoss, what: &'static str) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Mini-batch SGD with a per-epoch deterministic shuffle. Per-utterance
/// gradients may be computed in parallel; they are summed in batch order
/// and scaled by `1/B`, so results do not depend on the execution mode.
pub fn train_loop<M, D, S, E>(
    model: &mut M,
    data: &[D],
    cfg: &TrainConfig,
    step: S,
    mut evaluate: E,
) -> Result<TrainReport>
where
    M: Trainable,
    D: Sync,
    S: Fn(&M, &D) -> Result<(StepLoss, Grads)> + Sync + Send,
    E: FnMut(&M, usize) -> Result<Option<EpochLog>>,
{
    if data.is_empty() {
        return Err(invalid("train", "empty training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("train.batch_size must be positive".into()));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.clip);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        if cfg.decay {
            opt.lr = cfg.lr * (cfg.epochs - epoch + 1) as f64 / cfg.epochs as f64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0x5AF_F1E, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = StepLoss::default();
        for batch in order.chunks(cfg.batch_size) {
            let results = cfg.exec.map(batch, |&i| step(model, &data[i]));
            let mut grads = model.store().zero_grads();
            let mut batch_loss = StepLoss::default();
            for r in results {
                let (l, g) = r?;
                check_finite(&l, "training loss")?;
                batch_loss.add(&l);
                grads.add_assign(&g);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv);
            epoch_loss.add(&batch_loss);
            report.step_losses.push(batch_loss.total * inv);
            let store = model.store_mut();
            store.accumulate(&grads);
            opt.step(store);
        }
        let train_line = EpochLog {
            epoch,
            split: "train",
            loss: epoch_loss.scaled(1.0 / data.len() as f64),
            ter: None,
        };
        log::info!("{train_line}");
        report.log.push(train_line);
        if let Some(dev) = evaluate(model, epoch)? {
            log::info!("{dev}");
            report.log.push(dev);
        }
    }
    Ok(report)
}

/// Transducer loss and parameter gradients of the single-talker model on
/// `(features, transcript)`.
pub fn teacher_step(model: &TransducerModel, features: &FeatureSequence, transcript: &[usize]) -> Result<(StepLoss, Grads)> {
    let (lattice, cache) = model.net.forward(&model.params, features, None, transcript)?;
    let (loss, g) = rnnt_loss(&lattice, transcript)?;
    let mut grads = model.params.zero_grads();
    model.net.backward(&model.params, &cache, &lattice.grad_to_logits(&g), &mut grads);
    Ok((
        StepLoss {
            rnnt: loss,
            kd: 0.0,
            total: loss,
        },
        grads,
    ))
}

fn pooled_ter(pairs: impl Iterator<Item = (Tokens, Tokens)>) -> f64 {
    let (mut edits, mut refs) = (0, 0);
    for (h, r) in pairs {
        edits += edit_distance(&h, &r).distance;
        refs += r.len();
    }
    ter(edits, refs)
}

/// Dev loss and greedy TER of a single-talker model on the noisy
/// single-talker inputs (or on the mixtures when `on_mixture`).
pub fn evaluate_teacher(model: &TransducerModel, dev: &[Prepared], on_mixture: bool, exec: Exec) -> Result<(StepLoss, f64)> {
    let rows = exec.map(dev, |p| -> Result<(StepLoss, Tokens)> {
        let f = if on_mixture { &p.mixture } else { &p.single };
        let (lattice, _) = model.net.forward(&model.params, f, None, &p.transcript)?;
        let (loss, _) = rnnt_loss(&lattice, &p.transcript)?;
        let hyp = recognize(model, f, None, 1)?;
        Ok((
            StepLoss {
                rnnt: loss,
                kd: 0.0,
                total: loss,
            },
            hyp,
        ))
    });
    let mut total = StepLoss::default();
    let mut hyps = Vec::with_capacity(dev.len());
    for r in rows {
        let (l, h) = r?;
        total.add(&l);
        hyps.push(h);
    }
    let t = pooled_ter(hyps.into_iter().zip(dev.iter().map(|p| p.transcript.clone())));
    Ok((total.scaled(1.0 / dev.len().max(1) as f64), t))
}

/// Trains `model` in place on target-plus-noise inputs; mixtures are never
/// used.
pub fn train_teacher_from(
    model: &mut TransducerModel,
    train: &[Prepared],
    dev: &[Prepared],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let exec = cfg.exec;
    train_loop(
        model,
        train,
        cfg,
        |m, p| teacher_step(m, &p.single, &p.transcript),
        |m, epoch| {
            if dev.is_empty() {
                return Ok(None);
            }
            let (loss, t) = evaluate_teacher(m, dev, false, exec)?;
            Ok(Some(EpochLog {
                epoch,
                split: "dev",
                loss,
                ter: Some(t),
            }))
        },
    )
}

pub fn train_teacher(
    train: &[Prepared],
    dev: &[Prepared],
    config: &crate::transducer::TransducerConfig,
    cfg: &TrainConfig,
) -> Result<(TransducerModel, TrainReport)> {
    let mut model = TransducerModel::new(config, stream_seed(cfg.seed, 0x7EAC, 0))?;
    let report = train_teacher_from(&mut model, train, dev, cfg)?;
    Ok((model, report))
}

/// Per-record multi-task step: student lattice on the mixture, frozen
/// teacher lattice on target plus noise.
pub fn multitask_step(
    student: &TargetSpeakerModel,
    teacher: &TransducerModel,
    p: &Prepared,
    lambda: f64,
) -> Result<(StepLoss, Grads)> {
    if !teacher.params.all_frozen() {
        return Err(invalid("multitask_loss", "teacher parameters must be frozen"));
    }
    if !(lambda >= 0.0) {
        return Err(invalid("multitask_loss", format!("lambda {lambda} must be >= 0")));
    }
    let (t_lattice, _) = teacher.net.forward(&teacher.params, &p.single, None, &p.transcript)?;
    let (s_lattice, cache) = student.forward(&p.mixture, &p.enrollment, &p.transcript)?;
    if t_lattice.shape() != s_lattice.shape() {
        return Err(shape(
            "multitask_loss",
            format!("teacher lattice {:?} vs student {:?}", t_lattice.shape(), s_lattice.shape()),
        ));
    }
    let (rnnt, mut g) = rnnt_loss(&s_lattice, &p.transcript)?;
    let (kd, g_kd) = kd_loss(&t_lattice, &s_lattice)?;
    for (a, b) in g.iter_mut().zip(&g_kd) {
        *a += lambda * b;
    }
    let mut grads = student.params.zero_grads();
    student.backward(&cache, &s_lattice.grad_to_logits(&g), &mut grads);
    Ok((
        StepLoss {
            rnnt,
            kd,
            total: rnnt + lambda * kd,
        },
        grads,
    ))
}

/// `L_rnnt + lambda * L_kd` for one record.
pub fn multitask_loss(
    record: &MixtureRecord,
    student: &TargetSpeakerModel,
    teacher: &TransducerModel,
    lambda: f64,
) -> Result<f64> {
    let fc = &student.config().features;
    let p = prepare(std::slice::from_ref(record), fc, Exec::Sequential)?.remove(0);
    Ok(multitask_step(student, teacher, &p, lambda)?.0.total)
}

/// Transducer loss of the student alone, without any teacher.
pub fn ts_step(student: &TargetSpeakerModel, p: &Prepared) -> Result<(StepLoss, Grads)> {
    let (lattice, cache) = student.forward(&p.mixture, &p.enrollment, &p.transcript)?;
    let (rnnt, g) = rnnt_loss(&lattice, &p.transcript)?;
    let mut grads = student.params.zero_grads();
    student.backward(&cache, &lattice.grad_to_logits(&g), &mut grads);
    Ok((
        StepLoss {
            rnnt,
            kd: 0.0,
            total: rnnt,
        },
        grads,
    ))
}

/// Greedy dev TER of a target-speaker model on mixtures.
pub fn evaluate_student(student: &TargetSpeakerModel, dev: &[Prepared], exec: Exec) -> Result<f64> {
    let hyps = exec.map(dev, |p| -> Result<Tokens> {
        let emb = student.embed(&p.enrollment)?;
        recognize(student, &p.mixture, Some(&emb.values), 1)
    });
    let hyps: Vec<Tokens> = hyps.into_iter().collect::<Result<_>>()?;
    Ok(pooled_ter(hyps.into_iter().zip(dev.iter().map(|p| p.transcript.clone()))))
}

fn dev_line(student: &TargetSpeakerModel, dev: &[Prepared], exec: Exec, epoch: usize) -> Result<Option<EpochLog>> {
    if dev.is_empty() {
        return Ok(None);
    }
    let t = evaluate_student(student, dev, exec)?;
    Ok(Some(EpochLog {
        epoch,
        split: "dev",
        loss: StepLoss::default(),
        ter: Some(t),
    }))
}

/// Trains `student` in place with the multi-task objective.
pub fn train_student_from(
    student: &mut TargetSpeakerModel,
    train: &[Prepared],
    dev: &[Prepared],
    teacher: &TransducerModel,
    cfg: &KdConfig,
) -> Result<TrainReport> {
    if !teacher.params.all_frozen() {
        return Err(invalid("train_student", "teacher parameters must be frozen"));
    }
    let exec = cfg.train.exec;
    let lambda = cfg.lambda;
    train_loop(
        student,
        train,
        &cfg.train,
        |m, p| multitask_step(m, teacher, p, lambda),
        |m, epoch| dev_line(m, dev, exec, epoch),
    )
}

/// KD-free target-speaker training with the same loop and shuffling.
pub fn train_ts_baseline(
    student: &mut TargetSpeakerModel,
    train: &[Prepared],
    dev: &[Prepared],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let exec = cfg.exec;
    train_loop(student, train, cfg, ts_step, |m, epoch| dev_line(m, dev, exec, epoch))
}
