//! SGD with a poly schedule, the teacher training loop and the distillation
//! loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{batches, load_split, read_manifest, SegBatch, SegSet, Split, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::losses::{
    baseline_attention, baseline_hint, baseline_post_softmax, hard_ce, kd_pixel_loss, total_loss, LossBreakdown,
    LossConfig,
};
use crate::metrics::{ConfusionMatrix, SegMetrics};
use crate::models::{load_checkpoint_expecting, save_checkpoint, Network, ParamKind, Prediction, SegNetSpec};
use crate::nn::Conv2dLayer;
use crate::pfs::pfs_loss_var;
use crate::tensor::{FromAny, Real, Tensor};

pub const POLY_POWER: f64 = 0.9;

/// `base_lr * (1 - iter/total_iter)^0.9`.
pub fn poly_lr(base_lr: f64, iter: usize, total_iter: usize) -> Result<f64> {
    if total_iter == 0 || iter > total_iter {
        return Err(Error::InvalidArgument(format!(
            "poly_lr needs 0 <= iter <= total_iter and total_iter > 0, got {iter}/{total_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iter as f64).powf(POLY_POWER))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    pub iter: usize,
}

impl<T: Real> OptimState<T> {
    pub fn new(shapes: &[&[usize]], base_lr: f64, momentum: f64, weight_decay: f64, total_iters: usize) -> Self {
        Self {
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            base_lr,
            momentum,
            weight_decay,
            total_iters,
            iter: 0,
        }
    }

    pub fn lr(&self) -> Result<f64> {
        poly_lr(self.base_lr, self.iter, self.total_iters)
    }
}

/// One momentum SGD update: `v = m*v + g + wd*p` (decay only on weights),
/// `p -= lr * v`.
pub fn sgd_step<T: Real>(
    params: Vec<&mut Tensor<T>>,
    grads: &[Tensor<T>],
    kinds: &[ParamKind],
    opt: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.velocity.len() || params.len() != kinds.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} params, {} grads, {} buffers, {} kinds",
                params.len(),
                grads.len(),
                opt.velocity.len(),
                kinds.len()
            ),
        ));
    }
    let m = T::from_f64(opt.momentum);
    let lr = T::from_f64(lr);
    for (((p, g), v), kind) in params.into_iter().zip(grads).zip(opt.velocity.iter_mut()).zip(kinds) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("param {:?}, grad {:?}, buffer {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
        let wd = T::from_f64(if kind.decays() { opt.weight_decay } else { 0.0 });
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    opt.iter = (opt.iter + 1).min(opt.total_iters);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistillMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "pfs")]
    Pfs,
    #[serde(rename = "gap")]
    Gap,
    #[serde(rename = "pfs+gap")]
    PfsGap,
    #[serde(rename = "post_softmax")]
    PostSoftmax,
    #[serde(rename = "hint")]
    Hint,
    #[serde(rename = "attention")]
    Attention,
}

impl DistillMode {
    pub const ALL: [DistillMode; 7] = [
        DistillMode::None,
        DistillMode::Pfs,
        DistillMode::Gap,
        DistillMode::PfsGap,
        DistillMode::PostSoftmax,
        DistillMode::Hint,
        DistillMode::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillMode::None => "none",
            DistillMode::Pfs => "pfs",
            DistillMode::Gap => "gap",
            DistillMode::PfsGap => "pfs+gap",
            DistillMode::PostSoftmax => "post_softmax",
            DistillMode::Hint => "hint",
            DistillMode::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config {
                key: "mode".into(),
                detail: format!(
                    "unknown mode {s:?}; expected one of {}",
                    Self::ALL.map(Self::name).join(", ")
                ),
            })
    }

    pub fn needs_teacher(self) -> bool {
        self != DistillMode::None
    }

    fn uses_pfs(self) -> bool {
        matches!(self, DistillMode::Pfs | DistillMode::PfsGap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub mode: DistillMode,
    pub seed: u64,
    pub dtype: Precision,
    /// Random flip and scale of training samples.
    pub augment: bool,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub teacher_checkpoint: Option<PathBuf>,
    /// Initial student weights instead of a seeded initialization.
    pub init_from: Option<PathBuf>,
    pub teacher: SegNetSpec,
    pub student: SegNetSpec,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss: LossConfig::default(),
            mode: DistillMode::PfsGap,
            seed: 0,
            dtype: Precision::F32,
            augment: true,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            teacher_checkpoint: None,
            init_from: None,
            teacher: SegNetSpec::default_teacher(4),
            student: SegNetSpec::default_student(4),
            eval_batch_size: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: key.into(),
                detail: detail.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size", "must be >= 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "must be finite and > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be finite and >= 0");
        }
        self.loss.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        Ok(())
    }

    /// Coefficients of `(soft, pfs)` in the logged total for this mode.
    pub fn term_weights(&self) -> (f64, f64) {
        match self.mode {
            DistillMode::None => (0.0, 0.0),
            DistillMode::Pfs => (0.0, self.loss.lambda),
            DistillMode::PfsGap => (self.loss.mu, self.loss.lambda),
            _ => (self.loss.mu, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub hard: f64,
    pub soft_weighted: f64,
    pub pfs: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_miou: f64,
    pub val_pixel_acc: f64,
}

pub const STEP_CSV_HEADER: &str = "step,lr,L_hard,L_soft_weighted,L_pfs,L_total";
pub const EPOCH_CSV_HEADER: &str = "epoch,mean_loss,val_miou,val_pixel_acc";

pub fn step_csv(records: &[StepRecord]) -> String {
    let mut out = format!("{STEP_CSV_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.lr, r.hard, r.soft_weighted, r.pfs, r.total
        )
        .unwrap();
    }
    out
}

pub fn epoch_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{EPOCH_CSV_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{:e},{:.6},{:.6}",
            r.epoch, r.mean_loss, r.val_miou, r.val_pixel_acc
        )
        .unwrap();
    }
    out
}

/// Parses a step log written by [`step_csv`].
pub fn parse_step_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(STEP_CSV_HEADER) {
        return Err(Error::Format("step log header mismatch".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad step log line {line:?}")))
            };
            Ok(StepRecord {
                step: num(0)? as usize,
                lr: num(1)?,
                hard: num(2)?,
                soft_weighted: num(3)?,
                pfs: num(4)?,
                total: num(5)?,
            })
        })
        .collect()
}

/// Frozen-teacher outputs for one sample.
#[derive(Debug, Clone)]
pub struct TeacherTarget<T> {
    /// `[c,H,W]`
    pub logits: Tensor<T>,
    /// `[C,h,w]`
    pub feat: Tensor<T>,
    /// `[hw,hw]`
    pub pfs: Option<Tensor<T>>,
}

fn split_batch<T: Real>(t: &Tensor<T>) -> Vec<Tensor<T>> {
    let b = t.shape()[0];
    let inner = &t.shape()[1..];
    let per = t.numel() / b.max(1);
    (0..b)
        .map(|i| Tensor::new(inner.to_vec(), t.data()[i * per..(i + 1) * per].to_vec()).expect("slice"))
        .collect()
}

fn stack<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("stack")
}

impl<T: Real> TeacherTarget<T> {
    pub fn from_prediction(pred: Prediction<T>) -> Vec<Self> {
        let logits = split_batch(&pred.logits);
        let feat = split_batch(&pred.feat);
        let pfs: Vec<Option<Tensor<T>>> = match pred.pfs {
            Some(m) => split_batch(m.matrix()).into_iter().map(Some).collect(),
            None => vec![None; logits.len()],
        };
        logits
            .into_iter()
            .zip(feat)
            .zip(pfs)
            .map(|((logits, feat), pfs)| Self { logits, feat, pfs })
            .collect()
    }
}

/// Teacher outputs on un-augmented training samples, indexed by sample.
#[derive(Debug, Clone)]
pub struct TeacherCache<T> {
    pub targets: Vec<TeacherTarget<T>>,
    pub teacher_hash: String,
}

impl<T: Real> TeacherCache<T> {
    pub fn build(teacher: &Network<T>, set: &SegSet, batch_size: usize) -> Result<Self> {
        let mut targets = Vec::with_capacity(set.len());
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let batch = set.batch(chunk)?;
            targets.extend(TeacherTarget::from_prediction(teacher.infer(&batch.images.cast())?));
        }
        Ok(Self {
            targets,
            teacher_hash: teacher.param_hash(),
        })
    }
}

struct BatchTargets<T> {
    logits: Tensor<T>,
    feat: Tensor<T>,
    pfs: Option<Tensor<T>>,
}

fn batch_targets<T: Real>(
    teacher: &Network<T>,
    cache: Option<&TeacherCache<T>>,
    batch: &SegBatch,
    images: &Tensor<T>,
    augmented: bool,
) -> Result<BatchTargets<T>> {
    if let (Some(cache), false) = (cache, augmented) {
        let picked: Vec<&TeacherTarget<T>> = batch.indices.iter().map(|&i| &cache.targets[i]).collect();
        let pfs = picked
            .iter()
            .map(|t| t.pfs.as_ref())
            .collect::<Option<Vec<_>>>()
            .map(|p| stack(&p));
        return Ok(BatchTargets {
            logits: stack(&picked.iter().map(|t| &t.logits).collect::<Vec<_>>()),
            feat: stack(&picked.iter().map(|t| &t.feat).collect::<Vec<_>>()),
            pfs,
        });
    }
    let pred = teacher.infer(images)?;
    Ok(BatchTargets {
        logits: pred.logits,
        feat: pred.feat,
        pfs: pred.pfs.map(|m| m.into_matrix()),
    })
}

/// Mean IoU and pixel accuracy of `net` on `set`.
pub fn evaluate<T: Real>(net: &Network<T>, set: &SegSet, batch_size: usize, ignore: u8) -> Result<SegMetrics> {
    let mut cm = ConfusionMatrix::new(net.spec().num_classes, ignore);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk)?;
        let pred = net.infer(&batch.images.cast())?;
        cm.accumulate(&pred.logits.argmax_axis_u8(1)?, &batch.labels)?;
    }
    cm.metrics()
}

/// In-memory training inputs.
pub struct FitInputs<'a, T> {
    pub train: &'a SegSet,
    pub val: &'a SegSet,
    pub teacher: Option<&'a Network<T>>,
    /// Used for un-augmented batches; must hold outputs of `teacher`.
    pub cache: Option<&'a TeacherCache<T>>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub best: Network<T>,
    pub best_miou: f64,
    pub best_epoch: usize,
    pub last: Network<T>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub teacher_hash_before: Option<String>,
    pub teacher_hash_after: Option<String>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64 + 1)
}

/// Trains `student` for `cfg.epochs` epochs with the loss selected by
/// `cfg.mode`, keeping the weights with the best validation mIoU.
pub fn fit<T: Real>(cfg: &TrainConfig, mut student: Network<T>, inputs: FitInputs<'_, T>) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    let teacher = match (cfg.mode.needs_teacher(), inputs.teacher) {
        (true, Some(t)) => Some(t),
        (true, None) => {
            return Err(Error::Config {
                key: "teacher_checkpoint".into(),
                detail: format!("mode {} needs a teacher", cfg.mode.name()),
            })
        }
        (false, _) => None,
    };
    let teacher_hash_before = teacher.map(Network::param_hash);
    if let (Some(cache), Some(hash)) = (inputs.cache, &teacher_hash_before) {
        if &cache.teacher_hash != hash || cache.targets.len() != inputs.train.len() {
            return Err(Error::InvalidArgument("teacher cache does not match teacher or data".into()));
        }
    }
    if let Some(t) = teacher {
        if t.spec().output_stride() != student.spec().output_stride() {
            return Err(Error::shape(
                "distill",
                format!(
                    "teacher output stride {} vs student {}",
                    t.spec().output_stride(),
                    student.spec().output_stride()
                ),
            ));
        }
        if t.spec().num_classes != student.spec().num_classes {
            return Err(Error::shape("distill", "teacher and student class counts differ"));
        }
        if cfg.mode.uses_pfs()
            && (t.spec().pfs_variant == crate::pfs::PfsVariant::None
                || student.spec().pfs_variant == crate::pfs::PfsVariant::None)
        {
            return Err(Error::Config {
                key: "mode".into(),
                detail: "pfs modes need a PFS layer in both networks".into(),
            });
        }
    }

    let mut adapter = match (cfg.mode, teacher) {
        (DistillMode::Hint, Some(t)) => {
            let mut layer = Conv2dLayer::new(student.spec().feature_channels(), t.spec().feature_channels(), 1, 1, 1)?;
            layer.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xADA9_7E45));
            Some(layer)
        }
        _ => None,
    };

    let per_epoch = inputs.train.len().div_ceil(cfg.batch_size);
    let total_iters = cfg.epochs * per_epoch;
    let mut kinds = student.param_kinds();
    let mut shapes: Vec<Vec<usize>> = student.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    if let Some(a) = &adapter {
        kinds.extend([ParamKind::Weight, ParamKind::Bias]);
        shapes.extend([a.weight.shape().to_vec(), a.bias.shape().to_vec()]);
    }
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = OptimState::<T>::new(&shape_refs, cfg.base_lr, cfg.momentum, cfg.weight_decay, total_iters);

    let mut steps = Vec::with_capacity(total_iters);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::NEG_INFINITY, 0usize, student.clone());

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in batches(inputs.train, cfg.batch_size, epoch_seed(cfg.seed, epoch), cfg.augment)? {
            let batch = batch?;
            let images: Tensor<T> = batch.images.cast();
            let lr = opt.lr()?;

            let mut tape = Tape::new();
            let x = tape.constant(images.clone());
            let out = student.forward(&mut tape, x, true)?;
            let targets = match teacher {
                Some(t) => Some(batch_targets(t, inputs.cache, &batch, &images, cfg.augment)?),
                None => None,
            };
            let mut param_vars = out.params.clone();
            let breakdown = build_loss(
                cfg,
                &mut tape,
                &out,
                targets.as_ref(),
                &batch.labels,
                adapter.as_ref(),
                &mut param_vars,
            )?;
            let grads = tape.backward(breakdown.total)?;
            let grad_list: Vec<Tensor<T>> = param_vars.iter().map(|&v| grads.wrt(v)).collect();
            let mut params = student.params_mut();
            if let Some(a) = adapter.as_mut() {
                params.push(&mut a.weight);
                params.push(&mut a.bias);
            }
            sgd_step(params, &grad_list, &kinds, &mut opt, lr)?;

            steps.push(StepRecord {
                step: steps.len(),
                lr,
                hard: breakdown.hard,
                soft_weighted: breakdown.soft_weighted,
                pfs: breakdown.pfs,
                total: breakdown.total_value,
            });
            loss_sum += breakdown.total_value;
            n_batches += 1;
        }
        let metrics = evaluate(&student, inputs.val, cfg.eval_batch_size, cfg.loss.ignore_index)?;
        log::info!(
            "epoch {epoch}: loss {:.4} val mIoU {:.4}",
            loss_sum / n_batches as f64,
            metrics.mean_iou
        );
        epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n_batches as f64,
            val_miou: metrics.mean_iou,
            val_pixel_acc: metrics.pixel_acc,
        });
        if metrics.mean_iou > best.0 {
            best = (metrics.mean_iou, epoch, student.clone());
        }
    }

    let teacher_hash_after = teacher.map(Network::param_hash);
    Ok(FitOutcome {
        best: best.2,
        best_miou: best.0,
        best_epoch: best.1,
        last: student,
        steps,
        epochs,
        teacher_hash_before,
        teacher_hash_after,
    })
}

fn build_loss<T: Real>(
    cfg: &TrainConfig,
    tape: &mut Tape<T>,
    out: &crate::models::ForwardOutput,
    targets: Option<&BatchTargets<T>>,
    labels: &Tensor<u8>,
    adapter: Option<&Conv2dLayer<T>>,
    param_vars: &mut Vec<Var>,
) -> Result<LossBreakdown> {
    let lc = &cfg.loss;
    let mu = T::from_f64(lc.mu);
    let need = || Error::InvalidArgument(format!("mode {} needs teacher outputs", cfg.mode.name()));
    let with_aux = |tape: &mut Tape<T>, hard: Var, aux: Var| -> Result<Var> {
        let scaled = tape.scale(aux, mu);
        tape.add(hard, scaled)
    };
    let pfs_term = |tape: &mut Tape<T>, t: &BatchTargets<T>| -> Result<Var> {
        let tm = t.pfs.clone().ok_or_else(need)?;
        let sm = out.pfs.as_ref().ok_or_else(need)?.m;
        let tv = tape.constant(tm);
        pfs_loss_var(tape, tv, sm)
    };
    match cfg.mode {
        DistillMode::None => {
            let hard = hard_ce(tape, out.logits, labels, lc)?;
            LossBreakdown::read(tape, hard, hard, None, None)
        }
        DistillMode::Pfs => {
            let t = targets.ok_or_else(need)?;
            let hard = hard_ce(tape, out.logits, labels, lc)?;
            let pfs = pfs_term(tape, t)?;
            let scaled = tape.scale(pfs, T::from_f64(lc.lambda));
            let total = tape.add(hard, scaled)?;
            LossBreakdown::read(tape, total, hard, None, Some(pfs))
        }
        DistillMode::Gap => {
            let t = targets.ok_or_else(need)?;
            let cls = kd_pixel_loss(tape, out.logits, &t.logits, labels, lc)?;
            LossBreakdown::read(tape, cls.total, cls.hard, Some(cls.soft), None)
        }
        DistillMode::PfsGap => {
            let t = targets.ok_or_else(need)?;
            let tm = t.pfs.as_ref().ok_or_else(need)?;
            let sm = out.pfs.as_ref().ok_or_else(need)?.m;
            total_loss(tape, out.logits, sm, &t.logits, tm, labels, lc)
        }
        DistillMode::PostSoftmax => {
            let t = targets.ok_or_else(need)?;
            let cls = baseline_post_softmax(tape, out.logits, &t.logits, labels, lc)?;
            LossBreakdown::read(tape, cls.total, cls.hard, Some(cls.soft), None)
        }
        DistillMode::Hint => {
            let t = targets.ok_or_else(need)?;
            let adapter = adapter.ok_or_else(need)?;
            let vars = adapter.attach(tape, true);
            param_vars.extend([vars.weight, vars.bias]);
            let hard = hard_ce(tape, out.logits, labels, lc)?;
            let hint = baseline_hint(tape, out.feat, &t.feat, &vars)?;
            let total = with_aux(tape, hard, hint)?;
            LossBreakdown::read(tape, total, hard, Some(hint), None)
        }
        DistillMode::Attention => {
            let t = targets.ok_or_else(need)?;
            let hard = hard_ce(tape, out.logits, labels, lc)?;
            let att = baseline_attention(tape, out.feat, &t.feat, lc)?;
            let total = with_aux(tape, hard, att)?;
            LossBreakdown::read(tape, total, hard, Some(att), None)
        }
    }
}

/// Summary written next to the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub role: String,
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub best_val_miou: f64,
    pub best_epoch: usize,
    pub final_val_miou: f64,
    pub student_hash: String,
    pub teacher_hash_before: Option<String>,
    pub teacher_hash_after: Option<String>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STEP_LOG_FILE: &str = "steps.csv";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "eval.csv";

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn write_outputs<T: Real>(cfg: &TrainConfig, role: &str, outcome: &FitOutcome<T>) -> Result<RunSummary> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_checkpoint(&outcome.best, out.join(CHECKPOINT_FILE))?;
    write(out.join(STEP_LOG_FILE), step_csv(&outcome.steps))?;
    write(out.join(EPOCH_LOG_FILE), epoch_csv(&outcome.epochs))?;
    let summary = RunSummary {
        role: role.into(),
        mode: cfg.mode.name().into(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        steps: outcome.steps.len(),
        best_val_miou: outcome.best_miou,
        best_epoch: outcome.best_epoch,
        final_val_miou: outcome.epochs.last().map(|e| e.val_miou).unwrap_or(f64::NAN),
        student_hash: outcome.best.param_hash(),
        teacher_hash_before: outcome.teacher_hash_before.clone(),
        teacher_hash_after: outcome.teacher_hash_after.clone(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    write(out.join(SUMMARY_FILE), json)?;
    Ok(summary)
}

fn load_data(cfg: &TrainConfig, output_stride: usize) -> Result<(SegSet, SegSet)> {
    let manifest = read_manifest(&cfg.data_dir)?;
    manifest.spec.validate(output_stride)?;
    Ok((load_split(&cfg.data_dir, Split::Train)?, load_split(&cfg.data_dir, Split::Val)?))
}

/// Loads a checkpoint of the requested precision, converting if it was
/// saved in the other one.
pub fn load_network<T: Real + FromAny>(path: &Path, spec: &SegNetSpec) -> Result<Network<T>> {
    match load_checkpoint_expecting::<T>(path, spec) {
        Err(Error::DTypeMismatch { .. }) => match load_checkpoint_expecting::<f32>(path, spec) {
            Ok(n) => Ok(n.cast()),
            Err(Error::DTypeMismatch { .. }) => Ok(load_checkpoint_expecting::<f64>(path, spec)?.cast()),
            Err(e) => Err(e),
        },
        other => other,
    }
}

/// Trains `cfg.teacher` with hard cross-entropy only.
pub fn train_teacher<T: Real + FromAny>(cfg: &TrainConfig) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.mode = DistillMode::None;
    cfg.validate()?;
    let (train, val) = load_data(&cfg, cfg.teacher.output_stride())?;
    let net = Network::<T>::build(cfg.teacher.clone(), cfg.seed)?;
    let outcome = fit(
        &cfg,
        net,
        FitInputs {
            train: &train,
            val: &val,
            teacher: None,
            cache: None,
        },
    )?;
    write_outputs(&cfg, "teacher", &outcome)
}

/// Trains `cfg.student` against the frozen teacher checkpoint.
pub fn distill<T: Real + FromAny>(cfg: &TrainConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let (train, val) = load_data(cfg, cfg.student.output_stride())?;
    let teacher = match (&cfg.teacher_checkpoint, cfg.mode.needs_teacher()) {
        (Some(p), _) => Some(load_network::<T>(p, &cfg.teacher)?),
        (None, true) => {
            return Err(Error::Config {
                key: "teacher_checkpoint".into(),
                detail: format!("mode {} needs a teacher checkpoint", cfg.mode.name()),
            })
        }
        (None, false) => None,
    };
    let student = match &cfg.init_from {
        Some(p) => load_network::<T>(p, &cfg.student)?,
        None => Network::build(cfg.student.clone(), cfg.seed)?,
    };
    let cache = match (&teacher, cfg.augment) {
        (Some(t), false) => Some(TeacherCache::build(t, &train, cfg.eval_batch_size)?),
        _ => None,
    };
    let outcome = fit(
        cfg,
        student,
        FitInputs {
            train: &train,
            val: &val,
            teacher: teacher.as_ref(),
            cache: cache.as_ref(),
        },
    )?;
    if outcome.teacher_hash_before != outcome.teacher_hash_after {
        return Err(Error::InvalidArgument("teacher parameters changed during distillation".into()));
    }
    write_outputs(cfg, "student", &outcome)
}

/// Loads a checkpoint with whatever spec it carries, converting precision if needed.
pub fn load_checkpoint_any<T: Real + FromAny>(path: &Path) -> Result<Network<T>> {
    match crate::models::load_checkpoint::<T>(path) {
        Err(Error::DTypeMismatch { .. }) => match crate::models::load_checkpoint::<f32>(path) {
            Ok(n) => Ok(n.cast()),
            Err(Error::DTypeMismatch { .. }) => Ok(crate::models::load_checkpoint::<f64>(path)?.cast()),
            Err(e) => Err(e),
        },
        other => other,
    }
}

/// Evaluates a checkpoint on a split and returns the metrics.
pub fn evaluate_checkpoint<T: Real + FromAny>(
    checkpoint: &Path,
    data_dir: &Path,
    split: Split,
    batch_size: usize,
    ignore: u8,
) -> Result<SegMetrics> {
    let net = load_checkpoint_any::<T>(checkpoint)?;
    let set = load_split(data_dir, split)?;
    evaluate(&net, &set, batch_size, ignore)
}

pub fn class_names(classes: usize) -> Vec<&'static str> {
    (0..classes).map(|k| CLASS_NAMES.get(k).copied().unwrap_or("class")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, DatasetSpec};

    #[test]
    fn poly_schedule_points() {
        assert_eq!(poly_lr(0.01, 0, 100).unwrap(), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100).unwrap(), 0.0);
        assert!((poly_lr(0.01, 50, 100).unwrap() - 0.005_358_867_312_681_466).abs() < 1e-15);
        assert!(poly_lr(0.01, 101, 100).is_err());
        assert!(poly_lr(0.01, 0, 0).is_err());
    }

    #[test]
    fn sgd_plain_and_unrolled() {
        let mut p = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let g = [Tensor::new(vec![1], vec![0.5]).unwrap()];
        let mut opt = OptimState::new(&[&[1]], 0.1, 0.0, 0.0, 10);
        sgd_step(vec![&mut p], &g, &[ParamKind::Weight], &mut opt, 0.1).unwrap();
        assert_eq!(p.data()[0], 1.0 - 0.05);

        let (m, wd, lr) = (0.9, 0.01, 0.1);
        let mut p = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let mut opt = OptimState::new(&[&[1]], lr, m, wd, 10);
        let (g1, g2) = (0.3, -0.2);
        sgd_step(vec![&mut p], &[Tensor::new(vec![1], vec![g1]).unwrap()], &[ParamKind::Weight], &mut opt, lr).unwrap();
        sgd_step(vec![&mut p], &[Tensor::new(vec![1], vec![g2]).unwrap()], &[ParamKind::Weight], &mut opt, lr).unwrap();
        let v1 = g1 + wd * 2.0;
        let p1 = 2.0 - lr * v1;
        let v2 = m * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        assert_eq!(p.data()[0], p2);

        let mut b = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let mut opt = OptimState::new(&[&[1]], lr, 0.0, 0.5, 10);
        sgd_step(vec![&mut b], &[Tensor::zeros(&[1])], &[ParamKind::Bias], &mut opt, lr).unwrap();
        assert_eq!(b.data()[0], 2.0);
    }

    #[test]
    fn modes_parse() {
        for m in DistillMode::ALL {
            assert_eq!(DistillMode::parse(m.name()).unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!(DistillMode::parse("bogus").is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 2, "loss": {"lambda": 5.0}}"#).unwrap();
        assert_eq!((cfg.epochs, cfg.loss.lambda, cfg.loss.mu), (2, 5.0, 1.0));
    }

    fn tiny() -> (SegSet, SegSet) {
        let spec = DatasetSpec {
            size: 16,
            train_count: 6,
            val_count: 3,
            ..DatasetSpec::default()
        };
        (generate_split(&spec, Split::Train), generate_split(&spec, Split::Val))
    }

    #[test]
    fn self_distillation_has_zero_pfs_loss_at_start() {
        let (train, val) = tiny();
        let teacher = Network::<f64>::build(SegNetSpec::default_student(4), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            mode: DistillMode::Pfs,
            augment: false,
            ..TrainConfig::default()
        };
        let out = fit(
            &cfg,
            teacher.clone(),
            FitInputs {
                train: &train,
                val: &val,
                teacher: Some(&teacher),
                cache: None,
            },
        )
        .unwrap();
        assert_eq!(out.steps[0].pfs, 0.0);
        assert_eq!(out.teacher_hash_before, out.teacher_hash_after);
    }

    #[test]
    fn every_mode_runs_and_reconciles() {
        let (train, val) = tiny();
        let teacher = Network::<f64>::build(SegNetSpec::default_teacher(4), 1).unwrap();
        let cache = TeacherCache::build(&teacher, &train, 4).unwrap();
        for mode in DistillMode::ALL {
            let cfg = TrainConfig {
                epochs: 1,
                batch_size: 4,
                mode,
                augment: false,
                ..TrainConfig::default()
            };
            let student = Network::<f64>::build(cfg.student.clone(), 3).unwrap();
            let out = fit(
                &cfg,
                student,
                FitInputs {
                    train: &train,
                    val: &val,
                    teacher: Some(&teacher),
                    cache: Some(&cache),
                },
            )
            .unwrap();
            assert_eq!(out.steps.len(), 2);
            let (ws, wp) = cfg.term_weights();
            for s in &out.steps {
                let recon = s.hard + ws * s.soft_weighted + wp * s.pfs;
                assert!((recon - s.total).abs() <= 1e-9, "{mode:?}: {recon} vs {}", s.total);
            }
            let parsed = parse_step_csv(&step_csv(&out.steps)).unwrap();
            assert_eq!(parsed, out.steps);
        }
    }

    #[test]
    fn cached_and_live_teacher_targets_agree() {
        let (train, val) = tiny();
        let teacher = Network::<f64>::build(SegNetSpec::default_teacher(4), 1).unwrap();
        let cache = TeacherCache::build(&teacher, &train, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            mode: DistillMode::PfsGap,
            augment: false,
            ..TrainConfig::default()
        };
        let run = |cache| {
            fit(
                &cfg,
                Network::<f64>::build(cfg.student.clone(), 5).unwrap(),
                FitInputs {
                    train: &train,
                    val: &val,
                    teacher: Some(&teacher),
                    cache,
                },
            )
            .unwrap()
            .steps
        };
        assert_eq!(run(Some(&cache)), run(None));
    }
}
