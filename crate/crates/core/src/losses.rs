//! Training objectives: pixel cross-entropy, the knowledge-gap weighted
//! soft-prediction mimic, the PFS term, and the three baseline
//! distillation losses (unweighted post-softmax mimic, hint, attention).
//!
//! Per pixel `n` with ground truth `y`:
//!
//! ```text
//! H_hard = -log P_s[y]
//! H_soft = -sum_i P_t[i] log P_s[i]       P_t = softmax(Z_t / T), P_s = softmax(Z_s)
//! w_n    = max(0, P_t[y] - P_s[y])        (constant during backward)
//! L_cls  = reduce_n(H_hard + mu * w_n * H_soft)
//! L      = L_cls + lambda * L_pfs
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ConvVars;
use crate::pfs::pfs_loss_var;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelReduction {
    /// Average over non-ignored pixels.
    Mean,
    /// Plain sum over non-ignored pixels.
    Sum,
}

/// Normalization applied to attention maps before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    L2,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mu: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub ignore_index: u8,
    pub pixel_reduction: PixelReduction,
    pub attention_norm: AttentionNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            lambda: 1e3,
            temperature: 1.0,
            ignore_index: 255,
            pixel_reduction: PixelReduction::Mean,
            attention_norm: AttentionNorm::L2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: key.into(),
                detail: detail.into(),
            })
        };
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("loss.mu", "must be finite and >= 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("loss.lambda", "must be finite and >= 0");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("loss.temperature", "must be finite and > 0");
        }
        Ok(())
    }
}

/// Per-pixel knowledge-gap weights, `[B,H,W]`, each in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GapWeights<T> {
    pub w: Tensor<T>,
}

/// Valid-pixel mask of `labels` (`[B,H,W]`) for `classes` classes.
fn valid_pixels(labels: &Tensor<u8>, classes: usize, ignore: u8) -> Result<Vec<bool>> {
    labels
        .data()
        .iter()
        .map(|&l| {
            if l == ignore {
                Ok(false)
            } else if (l as usize) < classes {
                Ok(true)
            } else {
                Err(Error::LabelOutOfRange { label: l, classes })
            }
        })
        .collect()
}

fn check_logits_labels(logits: &[usize], labels: &Tensor<u8>) -> Result<(usize, usize, usize)> {
    match *logits {
        [b, c, h, w] if labels.shape() == [b, h, w] => Ok((c, h * w, b)),
        _ => Err(Error::shape(
            "loss",
            format!("logits {logits:?} vs labels {:?}", labels.shape()),
        )),
    }
}

fn reduction_scale(cfg: &LossConfig, valid: usize) -> f64 {
    match cfg.pixel_reduction {
        PixelReduction::Sum => 1.0,
        PixelReduction::Mean if valid == 0 => {
            log::warn!("no valid pixels in batch; cross-entropy term is 0");
            0.0
        }
        PixelReduction::Mean => 1.0 / valid as f64,
    }
}

/// `-sum(logp * coef)` with `coef` a constant of the same shape.
fn weighted_nll<T: Real>(tape: &mut Tape<T>, logp: Var, coef: Tensor<T>) -> Result<Var> {
    let c = tape.constant(coef);
    let prod = tape.mul(logp, c)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -T::one()))
}

fn one_hot_coef<T: Real>(
    labels: &Tensor<u8>,
    valid: &[bool],
    classes: usize,
    plane: usize,
    scale: T,
) -> Tensor<T> {
    let mut coef = Tensor::zeros(&[labels.numel() / plane, classes, plane]);
    for (pix, (&l, &ok)) in labels.data().iter().zip(valid).enumerate() {
        if ok {
            let (b, p) = (pix / plane, pix % plane);
            coef.data_mut()[(b * classes + l as usize) * plane + p] = scale;
        }
    }
    coef
}

/// Pixel-wise cross-entropy against hard labels.
pub fn hard_ce<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &Tensor<u8>,
    cfg: &LossConfig,
) -> Result<Var> {
    let (classes, plane, _) = check_logits_labels(tape.shape(logits), labels)?;
    let valid = valid_pixels(labels, classes, cfg.ignore_index)?;
    let count = valid.iter().filter(|&&v| v).count();
    let scale = T::from_f64(reduction_scale(cfg, count));
    let logp = tape.log_softmax(logits, 1)?;
    let shape = tape.shape(logits).to_vec();
    let coef = one_hot_coef(labels, &valid, classes, plane, scale).reshape(&shape)?;
    weighted_nll(tape, logp, coef)
}

/// Temperature-softened class distribution of constant teacher logits.
pub fn soft_targets<T: Real>(teacher_logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if teacher_logits.rank() != 4 {
        return Err(Error::shape("soft_targets", "expected [B,c,H,W] logits"));
    }
    let z = if temperature == 1.0 {
        teacher_logits.clone()
    } else {
        teacher_logits.scale(T::from_f64(1.0 / temperature))
    };
    z.softmax_axis(1)
}

/// `w_n = max(0, p_t[y] - p_s[y])` on labeled pixels, 0 on ignored ones.
pub fn gap_weights<T: Real>(
    p_t: &Tensor<T>,
    p_s: &Tensor<T>,
    labels: &Tensor<u8>,
    cfg: &LossConfig,
) -> Result<GapWeights<T>> {
    p_t.expect_same_shape(p_s, "gap_weights")?;
    let (classes, plane, batch) = check_logits_labels(p_t.shape(), labels)?;
    let valid = valid_pixels(labels, classes, cfg.ignore_index)?;
    let mut w = Tensor::zeros(labels.shape());
    for (pix, (&l, &ok)) in labels.data().iter().zip(&valid).enumerate() {
        if !ok {
            continue;
        }
        let (b, p) = (pix / plane, pix % plane);
        let at = (b * classes + l as usize) * plane + p;
        let gap = p_t.data()[at] - p_s.data()[at];
        w.data_mut()[pix] = if gap > T::zero() { gap } else { T::zero() };
    }
    debug_assert_eq!(w.numel(), batch * plane);
    Ok(GapWeights { w })
}

/// Recorded pieces of a pixel-level classification loss.
#[derive(Debug, Clone, Copy)]
pub struct PixelLoss {
    /// `hard + mu * soft`.
    pub total: Var,
    pub hard: Var,
    /// Weighted soft term before multiplication by `mu`.
    pub soft: Var,
}

/// Classification loss with explicit (frozen) per-pixel soft weights.
pub fn kd_pixel_loss_weighted<T: Real>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_probs: &Tensor<T>,
    labels: &Tensor<u8>,
    weights: &GapWeights<T>,
    cfg: &LossConfig,
) -> Result<PixelLoss> {
    let shape = tape.shape(student_logits).to_vec();
    if teacher_probs.shape() != shape.as_slice() {
        return Err(Error::shape(
            "kd_pixel_loss",
            format!("student {shape:?} vs teacher {:?}", teacher_probs.shape()),
        ));
    }
    let (classes, plane, _) = check_logits_labels(&shape, labels)?;
    if weights.w.shape() != labels.shape() {
        return Err(Error::shape("kd_pixel_loss", "weights must match labels"));
    }
    let valid = valid_pixels(labels, classes, cfg.ignore_index)?;
    let count = valid.iter().filter(|&&v| v).count();
    let scale = T::from_f64(reduction_scale(cfg, count));
    let logp = tape.log_softmax(student_logits, 1)?;

    let hard_coef = one_hot_coef(labels, &valid, classes, plane, scale).reshape(&shape)?;
    let hard = weighted_nll(tape, logp, hard_coef)?;

    let mut soft_coef = Tensor::zeros(&shape);
    for (pix, &ok) in valid.iter().enumerate() {
        let wn = weights.w.data()[pix];
        if !ok || wn == T::zero() {
            continue;
        }
        let (b, p) = (pix / plane, pix % plane);
        for i in 0..classes {
            let at = (b * classes + i) * plane + p;
            soft_coef.data_mut()[at] = wn * teacher_probs.data()[at] * scale;
        }
    }
    let soft = weighted_nll(tape, logp, soft_coef)?;
    let mu_soft = tape.scale(soft, T::from_f64(cfg.mu));
    let total = tape.add(hard, mu_soft)?;
    Ok(PixelLoss { total, hard, soft })
}

/// Hard cross-entropy plus the knowledge-gap weighted soft mimic.
pub fn kd_pixel_loss<T: Real>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    labels: &Tensor<u8>,
    cfg: &LossConfig,
) -> Result<PixelLoss> {
    let p_t = soft_targets(teacher_logits, cfg.temperature)?;
    let p_s = tape.value(student_logits).softmax_axis(1)?;
    let weights = gap_weights(&p_t, &p_s, labels, cfg)?;
    kd_pixel_loss_weighted(tape, student_logits, &p_t, labels, &weights, cfg)
}

/// Unweighted soft mimic (every labeled pixel gets `w_n = 1`).
pub fn baseline_post_softmax<T: Real>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    labels: &Tensor<u8>,
    cfg: &LossConfig,
) -> Result<PixelLoss> {
    let p_t = soft_targets(teacher_logits, cfg.temperature)?;
    let weights = GapWeights {
        w: labels.map(|l| if l == cfg.ignore_index { T::zero() } else { T::one() }),
    };
    kd_pixel_loss_weighted(tape, student_logits, &p_t, labels, &weights, cfg)
}

fn check_spatial(a: &[usize], b: &[usize], op: &'static str) -> Result<()> {
    if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::shape(op, format!("student {a:?} vs teacher {b:?}")));
    }
    Ok(())
}

/// Mean squared difference between `adapter(student_feat)` and the teacher
/// features.
pub fn baseline_hint<T: Real>(
    tape: &mut Tape<T>,
    student_feat: Var,
    teacher_feat: &Tensor<T>,
    adapter: &ConvVars,
) -> Result<Var> {
    check_spatial(tape.shape(student_feat), teacher_feat.shape(), "baseline_hint")?;
    let mapped = adapter.apply(tape, student_feat)?;
    if tape.shape(mapped) != teacher_feat.shape() {
        return Err(Error::shape(
            "baseline_hint",
            format!(
                "adapter output {:?} vs teacher {:?}",
                tape.shape(mapped),
                teacher_feat.shape()
            ),
        ));
    }
    let t = tape.constant(teacher_feat.clone());
    let diff = tape.sub(mapped, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Channel-mean attention map `[B, HW]`, optionally L2-normalized per image.
pub fn attention_map_var<T: Real>(tape: &mut Tape<T>, feat: Var, norm: AttentionNorm) -> Result<Var> {
    let shape = tape.shape(feat).to_vec();
    let [b, _, h, w] = shape[..] else {
        return Err(Error::shape("attention_map", "expected [B,C,H,W]"));
    };
    let avg = tape.mean_axis(feat, 1)?;
    let flat = tape.reshape(avg, &[b, h * w])?;
    match norm {
        AttentionNorm::L2 => tape.normalize_rows(flat),
        AttentionNorm::None => Ok(flat),
    }
}

/// Mean squared difference between normalized channel-mean attention maps.
pub fn baseline_attention<T: Real>(
    tape: &mut Tape<T>,
    student_feat: Var,
    teacher_feat: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    check_spatial(tape.shape(student_feat), teacher_feat.shape(), "baseline_attention")?;
    let teacher_map = {
        let mut scratch = Tape::new();
        let t = scratch.constant(teacher_feat.clone());
        let m = attention_map_var(&mut scratch, t, cfg.attention_norm)?;
        scratch.value(m).clone()
    };
    let s = attention_map_var(tape, student_feat, cfg.attention_norm)?;
    let t = tape.constant(teacher_map);
    let diff = tape.sub(s, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Total objective with its logged components.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub hard: f64,
    /// Soft (or baseline) term before weighting by `mu`.
    pub soft_weighted: f64,
    pub pfs: f64,
    pub total_value: f64,
}

impl LossBreakdown {
    /// Reads the components off the tape. `aux` is the term weighted by
    /// `mu`, `pfs` the term weighted by `lambda`.
    pub fn read<T: Real>(
        tape: &Tape<T>,
        total: Var,
        hard: Var,
        aux: Option<Var>,
        pfs: Option<Var>,
    ) -> Result<Self> {
        let get = |v: Option<Var>| -> Result<f64> {
            v.map(|v| tape.value(v).item().map(Real::into_f64))
                .unwrap_or(Ok(0.0))
        };
        let total_value = tape.value(total).item()?.into_f64();
        if !total_value.is_finite() {
            return Err(Error::NonFinite("total loss"));
        }
        Ok(Self {
            total,
            hard: get(Some(hard))?,
            soft_weighted: get(aux)?,
            pfs: get(pfs)?,
            total_value,
        })
    }
}

/// `L_cls + lambda * L_pfs` with the knowledge-gap weighted `L_cls`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    student_logits: Var,
    student_pfs: Var,
    teacher_logits: &Tensor<T>,
    teacher_pfs: &Tensor<T>,
    labels: &Tensor<u8>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let p_t = soft_targets(teacher_logits, cfg.temperature)?;
    let p_s = tape.value(student_logits).softmax_axis(1)?;
    let weights = gap_weights(&p_t, &p_s, labels, cfg)?;
    total_loss_weighted(tape, student_logits, student_pfs, &p_t, teacher_pfs, labels, &weights, cfg)
}

/// [`total_loss`] with explicit soft targets and frozen per-pixel weights.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_weighted<T: Real>(
    tape: &mut Tape<T>,
    student_logits: Var,
    student_pfs: Var,
    teacher_probs: &Tensor<T>,
    teacher_pfs: &Tensor<T>,
    labels: &Tensor<u8>,
    weights: &GapWeights<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let cls = kd_pixel_loss_weighted(tape, student_logits, teacher_probs, labels, weights, cfg)?;
    let t = tape.constant(teacher_pfs.clone());
    let pfs = pfs_loss_var(tape, t, student_pfs)?;
    let weighted = tape.scale(pfs, T::from_f64(cfg.lambda));
    let total = tape.add(cls.total, weighted)?;
    LossBreakdown::read(tape, total, cls.hard, Some(cls.soft), Some(pfs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape, f)
    }

    fn eval_hard(l: &Tensor<f64>, labels: &Tensor<u8>, cfg: &LossConfig) -> f64 {
        let mut tape = Tape::new();
        let v = tape.param(l.clone());
        let loss = hard_ce(&mut tape, v, labels, cfg).unwrap();
        tape.value(loss).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let l = Tensor::zeros(&[2, 4, 3, 3]);
        let labels = Tensor::from_fn(&[2, 3, 3], |i| (i % 4) as u8);
        let v = eval_hard(&l, &labels, &LossConfig::default());
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let labels = Tensor::from_fn(&[1, 2, 2], |i| (i % 3) as u8);
        let l = logits(&[1, 3, 2, 2], |i| {
            let (c, p) = (i / 4, i % 4);
            if c == p % 3 {
                50.0
            } else {
                -50.0
            }
        });
        assert!(eval_hard(&l, &labels, &LossConfig::default()) < 1e-30);
    }

    #[test]
    fn all_ignored_is_zero() {
        let labels = Tensor::full(&[1, 2, 2], 255u8);
        let l = logits(&[1, 3, 2, 2], |i| i as f64);
        assert_eq!(eval_hard(&l, &labels, &LossConfig::default()), 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let labels = Tensor::full(&[1, 1, 1], 7u8);
        let mut tape = Tape::new();
        let v = tape.param(Tensor::<f64>::zeros(&[1, 3, 1, 1]));
        let err = hard_ce(&mut tape, v, &labels, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 7, classes: 3 }));
    }

    #[test]
    fn soft_target_examples() {
        let z = Tensor::new(vec![1, 2, 1, 1], vec![0.0f64, 2.0]).unwrap();
        let p = soft_targets(&z, 2.0).unwrap();
        let e = 1f64.exp();
        assert!((p.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.data()[0] - 0.2689).abs() < 1e-4 && (p.data()[1] - 0.7311).abs() < 1e-4);
        let plain = soft_targets(&z, 1.0).unwrap();
        assert_eq!(plain, z.softmax_axis(1).unwrap());
        let hot = soft_targets(&z, 1e6).unwrap();
        assert!((hot.data()[0] - 0.5).abs() < 1e-5);
        assert!(soft_targets(&z, 0.0).is_err());
    }

    fn probs(p: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, p.len(), 1, 1], p.to_vec()).unwrap()
    }

    #[test]
    fn gap_weight_cases() {
        let labels = Tensor::full(&[1, 1, 1], 0u8);
        let cfg = LossConfig::default();
        let w = gap_weights(&probs(&[0.9, 0.1]), &probs(&[0.6, 0.4]), &labels, &cfg).unwrap();
        assert!((w.w.data()[0] - 0.3).abs() < 1e-15);
        let w = gap_weights(&probs(&[0.4, 0.6]), &probs(&[0.7, 0.3]), &labels, &cfg).unwrap();
        assert_eq!(w.w.data()[0], 0.0);
        let w = gap_weights(&probs(&[0.5, 0.5]), &probs(&[0.5, 0.5]), &labels, &cfg).unwrap();
        assert_eq!(w.w.data()[0], 0.0);
        let ignored = Tensor::full(&[1, 1, 1], 255u8);
        let w = gap_weights(&probs(&[0.9, 0.1]), &probs(&[0.1, 0.9]), &ignored, &cfg).unwrap();
        assert_eq!(w.w.data()[0], 0.0);
    }

    fn logits_for(p: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, p.len(), 1, 1], p.iter().map(|v| v.ln()).collect()).unwrap()
    }

    #[test]
    fn single_pixel_kd_value() {
        let labels = Tensor::full(&[1, 1, 1], 0u8);
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let s = tape.param(logits_for(&[0.6, 0.4]));
        let l = kd_pixel_loss(&mut tape, s, &logits_for(&[0.9, 0.1]), &labels, &cfg).unwrap();
        let hard = -(0.6f64.ln());
        let soft = -0.9 * 0.6f64.ln() - 0.1 * 0.4f64.ln();
        let expected = hard + 0.3 * soft;
        assert!((tape.value(l.hard).item().unwrap() - hard).abs() < 1e-12);
        assert!((tape.value(l.total).item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.6762).abs() < 1e-4);

        let post = baseline_post_softmax(&mut tape, s, &logits_for(&[0.9, 0.1]), &labels, &cfg)
            .unwrap();
        let v = tape.value(post.total).item().unwrap();
        assert!((v - (hard + soft)).abs() < 1e-12);
        assert!((v - 1.0622).abs() < 1e-4);
    }

    #[test]
    fn kd_reduces_to_hard_ce() {
        let labels = Tensor::from_fn(&[2, 2, 3], |i| (i % 3) as u8);
        let s = logits(&[2, 3, 2, 3], |i| (i as f64 * 0.31).sin());
        let t = logits(&[2, 3, 2, 3], |i| (i as f64 * 0.17).cos() * 2.0);
        let hard = eval_hard(&s, &labels, &LossConfig::default());

        let cfg = LossConfig {
            mu: 0.0,
            ..LossConfig::default()
        };
        let mut tape = Tape::new();
        let v = tape.param(s.clone());
        let l = kd_pixel_loss(&mut tape, v, &t, &labels, &cfg).unwrap();
        assert_eq!(tape.value(l.total).item().unwrap(), hard);

        let l = kd_pixel_loss(&mut tape, v, &s, &labels, &LossConfig::default()).unwrap();
        assert_eq!(tape.value(l.total).item().unwrap(), hard);
    }

    #[test]
    fn sum_reduction_scales_by_pixels() {
        let labels = Tensor::from_fn(&[1, 2, 2], |i| (i % 2) as u8);
        let l = Tensor::zeros(&[1, 2, 2, 2]);
        let cfg = LossConfig {
            pixel_reduction: PixelReduction::Sum,
            ..LossConfig::default()
        };
        assert!((eval_hard(&l, &labels, &cfg) - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hint_examples() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::<f64>::from_fn(&[1, 3, 2, 5], |i| i as f64));
        let zero = crate::nn::Conv2dLayer::<f64>::new(3, 1, 1, 1, 1).unwrap();
        let adapter = zero.attach(&mut tape, true);
        let v = baseline_hint(&mut tape, s, &Tensor::ones(&[1, 1, 2, 5]), &adapter).unwrap();
        assert_eq!(tape.value(v).item().unwrap(), 1.0);
        let wrong = baseline_hint(&mut tape, s, &Tensor::ones(&[1, 1, 3, 5]), &adapter);
        assert!(wrong.is_err());
    }

    #[test]
    fn attention_scale_invariance() {
        let f = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.4).sin().abs());
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let s = tape.param(f.clone());
        let same = baseline_attention(&mut tape, s, &f, &cfg).unwrap();
        assert_eq!(tape.value(same).item().unwrap(), 0.0);
        let doubled = baseline_attention(&mut tape, s, &f.scale(2.0), &cfg).unwrap();
        assert!(tape.value(doubled).item().unwrap() < 1e-30);
        let zero = baseline_attention(&mut tape, s, &Tensor::zeros(&[2, 5, 2, 2]), &cfg).unwrap();
        assert!(tape.value(zero).item().unwrap() > 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let labels = Tensor::full(&[1, 1, 2], 0u8);
        let s = logits(&[1, 2, 1, 2], |i| i as f64 * 0.3);
        let pfs_t = Tensor::full(&[1, 2, 2], 0.5);
        let pfs_s = Tensor::new(vec![1, 2, 2], vec![0.5005, 0.4995, 0.4995, 0.5005]).unwrap();
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let sv = tape.param(s.clone());
        let pv = tape.param(pfs_s);
        let br = total_loss(&mut tape, sv, pv, &s, &pfs_t, &labels, &cfg).unwrap();
        // teacher == student logits: w = 0, so L = hard + 1e3 * 0.001
        assert!((br.pfs - 0.001).abs() < 1e-12);
        assert!((br.total_value - (br.hard + 1.0)).abs() < 1e-9);
        assert_eq!(br.soft_weighted, 0.0);
    }
}
