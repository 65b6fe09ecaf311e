//! Independent loop-based reference implementations and the randomized
//! suites that compare the library against them: value oracles and
//! finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    baseline_attention, baseline_hint, baseline_post_softmax, gap_weights, hard_ce, kd_pixel_loss,
    kd_pixel_loss_weighted, soft_targets, total_loss_weighted, AttentionNorm, LossConfig,
};
use crate::models::{Network, SegNetSpec};
use crate::nn::{ConvGeometry, ConvVars};
use crate::pfs::{augment, augment_var, c_pfs, c_pfs_var, pfs_loss, pfs_loss_var, s_pfs, s_pfs_var, CPfsTransforms, PfsMap};
use crate::tensor::Tensor;

pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Straightforward loop implementations over flat row-major buffers.
pub mod oracle {
    /// `[m,k] x [k,n]`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    /// Direct cross-correlation of `x [b,c,h,w]` with `w [o,c,k,k]`,
    /// zero padding. Returns the output and its `(ho, wo)`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        x: &[f64],
        dims: [usize; 4],
        w: &[f64],
        out_ch: usize,
        k: usize,
        bias: Option<&[f64]>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> (Vec<f64>, usize, usize) {
        let [b, c, h, wd] = dims;
        let ext = dilation * (k - 1) + 1;
        let ho = (h + 2 * padding - ext) / stride + 1;
        let wo = (wd + 2 * padding - ext) / stride + 1;
        let mut out = vec![0.0; b * out_ch * ho * wo];
        for bi in 0..b {
            for o in 0..out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |bb| bb[o]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                    let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                    acc += xv * w[((o * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * out_ch + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        (out, ho, wo)
    }

    /// Row softmax of `S[i][j] = sum_c f1[c,i] f2[c,j]` per image.
    pub fn similarity(f1: &[f64], f2: &[f64], b: usize, c: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; b * n * n];
        for bi in 0..b {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    for ci in 0..c {
                        *l += f1[(bi * c + ci) * n + i] * f2[(bi * c + ci) * n + j];
                    }
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for j in 0..n {
                    out[(bi * n + i) * n + j] = (logits[j] - mx).exp() / z;
                }
            }
        }
        out
    }

    pub fn s_pfs(f: &[f64], b: usize, c: usize, n: usize) -> Vec<f64> {
        similarity(f, f, b, c, n)
    }

    /// 1x1 convolution: `w [o,c]`, `bias [o]`.
    pub fn pointwise(f: &[f64], b: usize, c: usize, n: usize, w: &[f64], bias: &[f64], o: usize) -> Vec<f64> {
        let mut out = vec![0.0; b * o * n];
        for bi in 0..b {
            for oc in 0..o {
                for p in 0..n {
                    let mut acc = bias[oc];
                    for ci in 0..c {
                        acc += w[oc * c + ci] * f[(bi * c + ci) * n + p];
                    }
                    out[(bi * o + oc) * n + p] = acc;
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn c_pfs(
        f: &[f64],
        b: usize,
        c: usize,
        n: usize,
        w1: &[f64],
        b1: &[f64],
        w2: &[f64],
        b2: &[f64],
        reduced: usize,
    ) -> Vec<f64> {
        let f1 = pointwise(f, b, c, n, w1, b1, reduced);
        let f2 = pointwise(f, b, c, n, w2, b2, reduced);
        similarity(&f1, &f2, b, reduced, n)
    }

    /// `(1/(B*N)) * sum_{b,i} ||t_bi - s_bi||_1`.
    pub fn pfs_loss(t: &[f64], s: &[f64], b: usize, n: usize) -> f64 {
        let mut total = 0.0;
        for bi in 0..b {
            for i in 0..n {
                for j in 0..n {
                    let at = (bi * n + i) * n + j;
                    total += (t[at] - s[at]).abs();
                }
            }
        }
        total / (b * n) as f64
    }

    /// `f_o[c,i] = f[c,i] + gamma * sum_j f[c,j] M[i,j]`.
    pub fn augment(f: &[f64], m: &[f64], gamma: f64, b: usize, c: usize, n: usize) -> Vec<f64> {
        let mut out = f.to_vec();
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += f[(bi * c + ci) * n + j] * m[(bi * n + i) * n + j];
                    }
                    out[(bi * c + ci) * n + i] += gamma * acc;
                }
            }
        }
        out
    }

    fn log_softmax_at(z: &[f64], b: usize, classes: usize, n: usize, p: usize) -> Vec<f64> {
        let col: Vec<f64> = (0..classes).map(|k| z[(b * classes + k) * n + p]).collect();
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + col.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        col.iter().map(|v| v - lse).collect()
    }

    fn softmax_at(z: &[f64], b: usize, classes: usize, n: usize, p: usize, t: f64) -> Vec<f64> {
        let col: Vec<f64> = (0..classes).map(|k| z[(b * classes + k) * n + p] / t).collect();
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = col.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    /// Per-pixel soft weighting used by the distillation losses.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum SoftWeight {
        /// Hard term only.
        None,
        /// Soft mimic on every labeled pixel.
        One,
        /// `max(0, p_t[y] - p_s[y])`.
        Gap,
    }

    /// Mean over labeled pixels of `H_hard + mu * w * H_soft`. Returns
    /// `(total, hard, soft)`.
    #[allow(clippy::too_many_arguments)]
    pub fn pixel_loss(
        zs: &[f64],
        zt: &[f64],
        labels: &[u8],
        b: usize,
        classes: usize,
        n: usize,
        mu: f64,
        temperature: f64,
        ignore: u8,
        weight: SoftWeight,
    ) -> (f64, f64, f64) {
        let (mut hard, mut soft, mut count) = (0.0, 0.0, 0usize);
        for bi in 0..b {
            for p in 0..n {
                let y = labels[bi * n + p];
                if y == ignore {
                    continue;
                }
                count += 1;
                let ls = log_softmax_at(zs, bi, classes, n, p);
                hard -= ls[y as usize];
                if weight == SoftWeight::None {
                    continue;
                }
                let pt = softmax_at(zt, bi, classes, n, p, temperature);
                let w = match weight {
                    SoftWeight::One => 1.0,
                    _ => {
                        let ps = softmax_at(zs, bi, classes, n, p, 1.0);
                        (pt[y as usize] - ps[y as usize]).max(0.0)
                    }
                };
                let h: f64 = (0..classes).map(|k| -pt[k] * ls[k]).sum();
                soft += w * h;
            }
        }
        if count == 0 {
            return (0.0, 0.0, 0.0);
        }
        let (hard, soft) = (hard / count as f64, soft / count as f64);
        (hard + mu * soft, hard, soft)
    }

    /// Mean squared error between `pointwise(s)` and `t`.
    #[allow(clippy::too_many_arguments)]
    pub fn hint(s: &[f64], t: &[f64], b: usize, cs: usize, ct: usize, n: usize, w: &[f64], bias: &[f64]) -> f64 {
        let mapped = pointwise(s, b, cs, n, w, bias, ct);
        mapped.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / mapped.len() as f64
    }

    /// Channel mean per location, L2-normalized per image (zero maps stay zero).
    pub fn attention_map(f: &[f64], b: usize, c: usize, n: usize, normalize: bool) -> Vec<f64> {
        let mut out = vec![0.0; b * n];
        for bi in 0..b {
            for p in 0..n {
                out[bi * n + p] = (0..c).map(|ci| f[(bi * c + ci) * n + p]).sum::<f64>() / c as f64;
            }
            if normalize {
                let norm = out[bi * n..(bi + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for v in &mut out[bi * n..(bi + 1) * n] {
                        *v /= norm;
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention(s: &[f64], t: &[f64], b: usize, cs: usize, ct: usize, n: usize, normalize: bool) -> f64 {
        let ms = attention_map(s, b, cs, n, normalize);
        let mt = attention_map(t, b, ct, n, normalize);
        ms.iter().zip(&mt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ms.len() as f64
    }

    /// `counts[gt * classes + pred]` over non-ignored pixels.
    pub fn confusion(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> Vec<u64> {
        let mut counts = vec![0u64; classes * classes];
        for (&p, &g) in pred.iter().zip(gt) {
            if g != ignore {
                counts[g as usize * classes + p as usize] += 1;
            }
        }
        counts
    }
}

/// Worst-case disagreement of one library routine with its oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_abs_err: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_abs_err <= self.tolerance
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn random_labels(rng: &mut impl Rng, shape: &[usize], classes: usize, ignore: u8) -> Tensor<u8> {
    Tensor::from_fn(shape, |_| {
        if rng.gen_bool(0.15) {
            ignore
        } else {
            rng.gen_range(0..classes as u8)
        }
    })
}

struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Dims {
    fn random(rng: &mut impl Rng) -> Self {
        Self {
            b: rng.gen_range(1..=2),
            c: rng.gen_range(1..=8),
            h: rng.gen_range(1..=6),
            w: rng.gen_range(1..=6),
        }
    }

    fn n(&self) -> usize {
        self.h * self.w
    }

    fn shape(&self) -> [usize; 4] {
        [self.b, self.c, self.h, self.w]
    }
}

fn conv_on_tape(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, geom: ConvGeometry) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, geom)?;
    Ok(tape.value(y).clone())
}

fn scalar_loss(build: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    tape.value(v).item()
}

fn run_case(
    name: &'static str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut case: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        worst = worst.max(case(rng)?);
    }
    Ok(OracleReport {
        name,
        instances,
        max_abs_err: worst,
        tolerance: ORACLE_TOLERANCE,
    })
}

/// Compares every PFS, convolution, matrix product and loss routine with
/// its loop oracle on `instances` random cases each (B <= 2, C <= 8,
/// H, W <= 6).
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    reports.push(run_case("matmul", instances, &mut rng, |rng| {
        let (m, k, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let a = random_tensor(rng, &[m, k], 1.0);
        let b = random_tensor(rng, &[k, n], 1.0);
        Ok(max_abs_diff(a.matmul(&b)?.data(), &oracle::matmul(a.data(), b.data(), m, k, n)))
    })?);

    reports.push(run_case("conv2d", instances, &mut rng, |rng| {
        let d = Dims::random(rng);
        let k: usize = [1, 2, 3][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let dilation = rng.gen_range(1..=2);
        let ext = dilation * (k - 1) + 1;
        let min_pad = ext.saturating_sub(d.h.min(d.w)).div_ceil(2);
        let padding = rng.gen_range(min_pad..=min_pad + 2);
        let out_ch = rng.gen_range(1..=8);
        let x = random_tensor(rng, &d.shape(), 1.0);
        let w = random_tensor(rng, &[out_ch, d.c, k, k], 1.0);
        let bias = rng.gen_bool(0.5).then(|| random_tensor(rng, &[out_ch], 1.0));
        let geom = ConvGeometry {
            stride,
            dilation,
            padding,
        };
        let got = conv_on_tape(&x, &w, bias.as_ref(), geom)?;
        let (want, ho, wo) = oracle::conv2d(
            x.data(),
            d.shape(),
            w.data(),
            out_ch,
            k,
            bias.as_ref().map(|b| b.data()),
            stride,
            dilation,
            padding,
        );
        if got.shape() != [d.b, out_ch, ho, wo] {
            return Ok(f64::INFINITY);
        }
        Ok(max_abs_diff(got.data(), &want))
    })?);

    reports.push(run_case("s_pfs", instances, &mut rng, |rng| {
        let d = Dims::random(rng);
        let f = random_tensor(rng, &d.shape(), 1.0);
        let got = s_pfs(&f)?;
        Ok(max_abs_diff(got.matrix().data(), &oracle::s_pfs(f.data(), d.b, d.c, d.n())))
    })?);

    reports.push(run_case("c_pfs", instances, &mut rng, |rng| {
        let d = Dims::random(rng);
        let f = random_tensor(rng, &d.shape(), 1.0);
        let mut t = CPfsTransforms::<f64>::new(d.c)?;
        let r = t.w1.c_out();
        for layer in [&mut t.w1, &mut t.w2] {
            layer.weight = random_tensor(rng, layer.weight.shape(), 1.0);
            layer.bias = random_tensor(rng, layer.bias.shape(), 1.0);
        }
        let got = c_pfs(&f, &t)?;
        let want = oracle::c_pfs(
            f.data(),
            d.b,
            d.c,
            d.n(),
            t.w1.weight.data(),
            t.w1.bias.data(),
            t.w2.weight.data(),
            t.w2.bias.data(),
            r,
        );
        Ok(max_abs_diff(got.matrix().data(), &want))
    })?);

    reports.push(run_case("pfs_loss", instances, &mut rng, |rng| {
        let d = Dims::random(rng);
        let ft = random_tensor(rng, &d.shape(), 1.0);
        let fs = random_tensor(rng, &d.shape(), 1.0);
        let (mt, ms) = (s_pfs(&ft)?, s_pfs(&fs)?);
        let got = pfs_loss(&mt, &ms)?;
        let want = oracle::pfs_loss(mt.matrix().data(), ms.matrix().data(), d.b, d.n());
        Ok((got - want).abs())
    })?);

    reports.push(run_case("augment", instances, &mut rng, |rng| {
        let d = Dims::random(rng);
        let f = random_tensor(rng, &d.shape(), 1.0);
        let g = random_tensor(rng, &d.shape(), 1.0);
        let map = s_pfs(&g)?;
        let gamma = rng.gen_range(-2.0..2.0);
        let got = augment(&f, &map, gamma)?;
        let want = oracle::augment(f.data(), map.matrix().data(), gamma, d.b, d.c, d.n());
        Ok(max_abs_diff(got.data(), &want))
    })?);

    let ignore = 255u8;
    let loss_case = |rng: &mut ChaCha8Rng| {
        let (b, c, h, w) = (
            rng.gen_range(1..=2),
            rng.gen_range(2..=5),
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
        );
        let zs = random_tensor(rng, &[b, c, h, w], 3.0);
        let zt = random_tensor(rng, &[b, c, h, w], 3.0);
        let labels = random_labels(rng, &[b, h, w], c, ignore);
        let cfg = LossConfig {
            mu: rng.gen_range(0.0..2.0),
            temperature: rng.gen_range(0.5..4.0),
            ..LossConfig::default()
        };
        (zs, zt, labels, cfg, [b, c, h * w])
    };

    reports.push(run_case("hard_ce", instances, &mut rng, |rng| {
        let (zs, zt, labels, cfg, [b, c, n]) = loss_case(rng);
        let got = scalar_loss(|tape| {
            let v = tape.constant(zs.clone());
            hard_ce(tape, v, &labels, &cfg)
        })?;
        let want = oracle::pixel_loss(zs.data(), zt.data(), labels.data(), b, c, n, 0.0, 1.0, ignore, oracle::SoftWeight::None).0;
        Ok((got - want).abs())
    })?);

    reports.push(run_case("post_softmax_mimic", instances, &mut rng, |rng| {
        let (zs, zt, labels, cfg, [b, c, n]) = loss_case(rng);
        let got = scalar_loss(|tape| {
            let v = tape.constant(zs.clone());
            Ok(baseline_post_softmax(tape, v, &zt, &labels, &cfg)?.total)
        })?;
        let want = oracle::pixel_loss(
            zs.data(),
            zt.data(),
            labels.data(),
            b,
            c,
            n,
            cfg.mu,
            cfg.temperature,
            ignore,
            oracle::SoftWeight::One,
        )
        .0;
        Ok((got - want).abs())
    })?);

    reports.push(run_case("gap_weighted_mimic", instances, &mut rng, |rng| {
        let (zs, zt, labels, cfg, [b, c, n]) = loss_case(rng);
        let got = scalar_loss(|tape| {
            let v = tape.constant(zs.clone());
            Ok(kd_pixel_loss(tape, v, &zt, &labels, &cfg)?.total)
        })?;
        let want = oracle::pixel_loss(
            zs.data(),
            zt.data(),
            labels.data(),
            b,
            c,
            n,
            cfg.mu,
            cfg.temperature,
            ignore,
            oracle::SoftWeight::Gap,
        )
        .0;
        Ok((got - want).abs())
    })?);

    reports.push(run_case("hint", instances, &mut rng, |rng| {
        let d = Dims::random(rng);
        let ct = rng.gen_range(1..=8);
        let s = random_tensor(rng, &d.shape(), 1.0);
        let t = random_tensor(rng, &[d.b, ct, d.h, d.w], 1.0);
        let w = random_tensor(rng, &[ct, d.c, 1, 1], 1.0);
        let bias = random_tensor(rng, &[ct], 1.0);
        let got = scalar_loss(|tape| {
            let sv = tape.constant(s.clone());
            let adapter = ConvVars {
                weight: tape.constant(w.clone()),
                bias: tape.constant(bias.clone()),
                geom: ConvGeometry::same(1, 1, 1),
            };
            baseline_hint(tape, sv, &t, &adapter)
        })?;
        let want = oracle::hint(s.data(), t.data(), d.b, d.c, ct, d.n(), w.data(), bias.data());
        Ok((got - want).abs())
    })?);

    reports.push(run_case("attention", instances, &mut rng, |rng| {
        let d = Dims::random(rng);
        let ct = rng.gen_range(1..=8);
        let s = random_tensor(rng, &d.shape(), 1.0);
        let t = random_tensor(rng, &[d.b, ct, d.h, d.w], 1.0);
        let normalize = rng.gen_bool(0.5);
        let cfg = LossConfig {
            attention_norm: if normalize { AttentionNorm::L2 } else { AttentionNorm::None },
            ..LossConfig::default()
        };
        let got = scalar_loss(|tape| {
            let sv = tape.constant(s.clone());
            baseline_attention(tape, sv, &t, &cfg)
        })?;
        let want = oracle::attention(s.data(), t.data(), d.b, d.c, ct, d.n(), normalize);
        Ok((got - want).abs())
    })?);

    reports.push(run_case("confusion_matrix", instances, &mut rng, |rng| {
        let classes = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=72);
        let gt = random_labels(rng, &[n], classes, ignore);
        let pred = Tensor::from_fn(&[n], |_| rng.gen_range(0..classes as u8));
        let mut cm = crate::metrics::ConfusionMatrix::new(classes, ignore);
        cm.accumulate(&pred, &gt)?;
        let want = oracle::confusion(pred.data(), gt.data(), classes, ignore);
        let mut worst: f64 = 0.0;
        for g in 0..classes {
            for p in 0..classes {
                worst = worst.max((cm.get(g, p) as f64 - want[g * classes + p] as f64).abs());
            }
        }
        Ok(worst)
    })?);

    Ok(reports)
}

type Objective<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Every differentiable tape op, PFS routine, loss and a full student
/// network, each checked on several random configurations.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, tol) = (GRADCHECK_STEP, GRADCHECK_TOLERANCE);
    let mut out = Vec::new();
    let mut check = |name: &str, inputs: Vec<Tensor<f64>>, f: Objective| -> Result<()> {
        out.push(gradcheck(name, |t: &mut Tape<f64>, v: &[Var]| f(t, v), &inputs, h, tol)?);
        Ok(())
    };
    // Values bounded away from zero keep |x| and ReLU off their kinks.
    let away = |rng: &mut ChaCha8Rng, shape: &[usize]| -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    };
    let positive = |rng: &mut ChaCha8Rng, shape: &[usize]| -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(0.3..2.0))
    };
    let shapes: [&[usize]; 4] = [&[3], &[2, 3], &[2, 2, 3], &[1, 2, 3, 2]];
    let reduce = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
        // Weighted sum so every output coordinate gets a distinct cotangent.
        let n = t.value(x).numel();
        let w = Tensor::from_fn(t.shape(x), |i| 0.3 + 0.7 * ((i * 7919) % n.max(1)) as f64 / n.max(1) as f64);
        let wv = t.constant(w);
        let p = t.mul(x, wv)?;
        Ok(t.sum(p))
    };

    for (si, &shape) in shapes.iter().enumerate() {
        let a = random_tensor(&mut rng, shape, 1.0);
        let b = random_tensor(&mut rng, shape, 1.0);
        check(&format!("add#{si}"), vec![a.clone(), b.clone()], &|t, v| {
            let y = t.add(v[0], v[1])?;
            reduce(t, y)
        })?;
        check(&format!("sub#{si}"), vec![a.clone(), b.clone()], &|t, v| {
            let y = t.sub(v[0], v[1])?;
            reduce(t, y)
        })?;
        check(&format!("mul#{si}"), vec![a.clone(), b.clone()], &|t, v| {
            let y = t.mul(v[0], v[1])?;
            reduce(t, y)
        })?;
        check(&format!("scale#{si}"), vec![a.clone()], &|t, v| {
            let y = t.scale(v[0], -1.7);
            reduce(t, y)
        })?;
        check(&format!("abs#{si}"), vec![away(&mut rng, shape)], &|t, v| {
            let y = t.abs(v[0]);
            reduce(t, y)
        })?;
        check(&format!("exp#{si}"), vec![a.clone()], &|t, v| {
            let y = t.exp(v[0])?;
            reduce(t, y)
        })?;
        check(&format!("ln#{si}"), vec![positive(&mut rng, shape)], &|t, v| {
            let y = t.ln(v[0])?;
            reduce(t, y)
        })?;
        check(&format!("relu#{si}"), vec![away(&mut rng, shape)], &|t, v| {
            let y = t.relu(v[0]);
            reduce(t, y)
        })?;
        let s = random_tensor(&mut rng, &[], 1.0);
        check(&format!("scale_by_var#{si}"), vec![a.clone(), s], &|t, v| {
            let y = t.scale_by_var(v[0], v[1])?;
            reduce(t, y)
        })?;
        check(&format!("sum#{si}"), vec![a.clone()], &|t, v| {
            let y = t.sum(v[0]);
            let sq = t.mul(y, y)?;
            Ok(sq)
        })?;
        check(&format!("mean#{si}"), vec![a.clone()], &|t, v| {
            let y = t.mean(v[0])?;
            t.mul(y, y)
        })?;
        let rank = shape.len();
        for axis in 0..rank {
            check(&format!("sum_axis{axis}#{si}"), vec![a.clone()], &|t, v| {
                let y = t.sum_axis(v[0], axis)?;
                reduce(t, y)
            })?;
            check(&format!("mean_axis{axis}#{si}"), vec![a.clone()], &|t, v| {
                let y = t.mean_axis(v[0], axis)?;
                reduce(t, y)
            })?;
            check(&format!("max_axis{axis}#{si}"), vec![a.clone()], &|t, v| {
                let y = t.max_axis(v[0], axis)?;
                reduce(t, y)
            })?;
            check(&format!("softmax_axis{axis}#{si}"), vec![a.clone()], &|t, v| {
                let y = t.softmax(v[0], axis)?;
                reduce(t, y)
            })?;
            check(&format!("log_softmax_axis{axis}#{si}"), vec![a.clone()], &|t, v| {
                let y = t.log_softmax(v[0], axis)?;
                reduce(t, y)
            })?;
        }
        let total: usize = shape.iter().product();
        check(&format!("reshape#{si}"), vec![a.clone()], &|t, v| {
            let y = t.reshape(v[0], &[total])?;
            reduce(t, y)
        })?;
        if rank >= 2 {
            check(&format!("transpose_last2#{si}"), vec![a.clone()], &|t, v| {
                let y = t.transpose_last2(v[0])?;
                reduce(t, y)
            })?;
            check(&format!("normalize_rows#{si}"), vec![a.clone()], &|t, v| {
                let last = *t.shape(v[0]).last().expect("rank >= 2");
                let rows = t.value(v[0]).numel() / last;
                let flat = t.reshape(v[0], &[rows, last])?;
                let y = t.normalize_rows(flat)?;
                reduce(t, y)
            })?;
        }
    }

    for (i, (m, k, n)) in [(1, 1, 1), (2, 3, 4), (4, 2, 3), (3, 5, 2)].into_iter().enumerate() {
        let a = random_tensor(&mut rng, &[m, k], 1.0);
        let b = random_tensor(&mut rng, &[k, n], 1.0);
        check(&format!("matmul#{i}"), vec![a, b], &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            reduce(t, y)
        })?;
        let a = random_tensor(&mut rng, &[2, m, k], 1.0);
        let b = random_tensor(&mut rng, &[2, k, n], 1.0);
        check(&format!("bmm#{i}"), vec![a, b], &|t, v| {
            let y = t.bmm(v[0], v[1])?;
            reduce(t, y)
        })?;
    }

    let conv_cases = [
        (3, 1, 1, true),
        (3, 2, 1, true),
        (3, 1, 2, false),
        (1, 1, 1, true),
        (2, 2, 1, false),
        (3, 2, 2, true),
    ];
    for (i, (k, stride, dilation, same)) in conv_cases.into_iter().enumerate() {
        let (c, o, size) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(4..=6));
        let geom = if same {
            ConvGeometry::same(k, stride, dilation)
        } else {
            ConvGeometry {
                stride,
                dilation,
                padding: 1,
            }
        };
        let x = random_tensor(&mut rng, &[2, c, size, size], 1.0);
        let w = random_tensor(&mut rng, &[o, c, k, k], 1.0);
        let b = random_tensor(&mut rng, &[o], 1.0);
        check(&format!("conv2d_k{k}_s{stride}_d{dilation}#{i}"), vec![x, w, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), geom)?;
            reduce(t, y)
        })?;
    }

    for (i, (hs, ws, ho, wo)) in [(2, 2, 4, 4), (3, 2, 6, 5), (2, 3, 2, 7), (1, 1, 3, 3)].into_iter().enumerate() {
        let x = random_tensor(&mut rng, &[1, 2, hs, ws], 1.0);
        check(&format!("upsample_bilinear#{i}"), vec![x], &|t, v| {
            let y = t.upsample_bilinear(v[0], ho, wo)?;
            reduce(t, y)
        })?;
    }

    for i in 0..4 {
        let d = Dims::random(&mut rng);
        let f = random_tensor(&mut rng, &d.shape(), 1.0);
        check(&format!("s_pfs#{i}"), vec![f.clone()], &|t, v| {
            let m = s_pfs_var(t, v[0])?;
            reduce(t, m.m)
        })?;
        let r = crate::pfs::reduced_channels(d.c);
        let tensors = vec![
            f.clone(),
            random_tensor(&mut rng, &[r, d.c, 1, 1], 1.0),
            random_tensor(&mut rng, &[r], 1.0),
            random_tensor(&mut rng, &[r, d.c, 1, 1], 1.0),
            random_tensor(&mut rng, &[r], 1.0),
        ];
        check(&format!("c_pfs#{i}"), tensors, &|t, v| {
            let vars = crate::pfs::CPfsVars {
                w1: ConvVars {
                    weight: v[1],
                    bias: v[2],
                    geom: ConvGeometry::same(1, 1, 1),
                },
                w2: ConvVars {
                    weight: v[3],
                    bias: v[4],
                    geom: ConvGeometry::same(1, 1, 1),
                },
            };
            let m = c_pfs_var(t, v[0], &vars)?;
            reduce(t, m.m)
        })?;
        let teacher = s_pfs(&random_tensor(&mut rng, &d.shape(), 1.0))?.into_matrix();
        check(&format!("pfs_loss#{i}"), vec![f.clone()], &|t, v| {
            let tm = t.constant(teacher.clone());
            let sm = s_pfs_var(t, v[0])?;
            pfs_loss_var(t, tm, sm.m)
        })?;
        let gamma = random_tensor(&mut rng, &[], 1.0);
        let g = random_tensor(&mut rng, &d.shape(), 1.0);
        check(&format!("augment#{i}"), vec![f.clone(), g, gamma], &|t, v| {
            let m = s_pfs_var(t, v[1])?;
            let y = augment_var(t, v[0], m.m, v[2])?;
            reduce(t, y)
        })?;
    }

    let ignore = 255u8;
    for i in 0..4 {
        let (b, c, hh, ww) = (rng.gen_range(1..=2), rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(2..=4));
        let zs = random_tensor(&mut rng, &[b, c, hh, ww], 2.0);
        let zt = random_tensor(&mut rng, &[b, c, hh, ww], 2.0);
        let labels = random_labels(&mut rng, &[b, hh, ww], c, ignore);
        let cfg = LossConfig {
            temperature: [1.0, 2.0, 4.0, 1.0][i],
            ..LossConfig::default()
        };
        check(&format!("hard_ce#{i}"), vec![zs.clone()], &|t, v| hard_ce(t, v[0], &labels, &cfg))?;
        check(&format!("soft_mimic#{i}"), vec![zs.clone()], &|t, v| {
            Ok(baseline_post_softmax(t, v[0], &zt, &labels, &cfg)?.soft)
        })?;
        let p_t = soft_targets(&zt, cfg.temperature)?;
        let weights = gap_weights(&p_t, &zs.softmax_axis(1)?, &labels, &cfg)?;
        check(&format!("gap_weighted_cls#{i}"), vec![zs.clone()], &|t, v| {
            Ok(kd_pixel_loss_weighted(t, v[0], &p_t, &labels, &weights, &cfg)?.total)
        })?;

        let f = random_tensor(&mut rng, &[b, 3, hh, ww], 1.0);
        let teacher_pfs = s_pfs(&random_tensor(&mut rng, &[b, 3, hh, ww], 1.0))?.into_matrix();
        check(&format!("total_loss#{i}"), vec![zs.clone(), f.clone()], &|t, v| {
            let sm = s_pfs_var(t, v[1])?;
            Ok(total_loss_weighted(t, v[0], sm.m, &p_t, &teacher_pfs, &labels, &weights, &cfg)?.total)
        })?;

        let ct = rng.gen_range(1..=4);
        let tf = random_tensor(&mut rng, &[b, ct, hh, ww], 1.0);
        let aw = random_tensor(&mut rng, &[ct, 3, 1, 1], 1.0);
        let ab = random_tensor(&mut rng, &[ct], 1.0);
        check(&format!("hint#{i}"), vec![f.clone(), aw, ab], &|t, v| {
            let adapter = ConvVars {
                weight: v[1],
                bias: v[2],
                geom: ConvGeometry::same(1, 1, 1),
            };
            baseline_hint(t, v[0], &tf, &adapter)
        })?;
        check(&format!("attention#{i}"), vec![f.clone()], &|t, v| baseline_attention(t, v[0], &tf, &cfg))?;
    }

    out.push(network_gradcheck(seed)?);
    Ok(out)
}

/// Gradcheck of the full distillation objective with respect to every
/// student parameter on a 16x16 input.
pub fn network_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let student = Network::<f64>::build(SegNetSpec::default_student(4), seed)?;
    let teacher = Network::<f64>::build(SegNetSpec::default_teacher(4), seed + 1)?;
    let images = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
    let labels = random_labels(&mut rng, &[1, 16, 16], 4, 255);
    let mut student = student;
    student.set_gamma(0.3);
    let cfg = LossConfig::default();
    let tp = teacher.infer(&images)?;
    let teacher_pfs = tp.pfs.ok_or_else(|| Error::InvalidArgument("teacher has no PFS layer".into()))?;
    let p_t = soft_targets(&tp.logits, cfg.temperature)?;
    let p_s = student.infer(&images)?.logits.softmax_axis(1)?;
    let weights = gap_weights(&p_t, &p_s, &labels, &cfg)?;
    let params: Vec<Tensor<f64>> = student.params().into_iter().map(|(_, t)| t.clone()).collect();
    gradcheck(
        "student_network_total_loss",
        |t: &mut Tape<f64>, v: &[Var]| {
            let x = t.constant(images.clone());
            let out = student.forward_with(t, x, v.to_vec())?;
            let sm = out.pfs.ok_or_else(|| Error::InvalidArgument("student has no PFS layer".into()))?;
            Ok(total_loss_weighted(t, out.logits, sm.m, &p_t, teacher_pfs.matrix(), &labels, &weights, &cfg)?.total)
        },
        &params,
        GRADCHECK_STEP,
        GRADCHECK_TOLERANCE,
    )
}

/// Loop oracle check of a PFS map: every row sums to one.
pub fn max_row_sum_error(map: &PfsMap<f64>) -> f64 {
    let n = map.locations();
    let mut worst: f64 = 0.0;
    for b in 0..map.batch() {
        for i in 0..n {
            worst = worst.max((map.row(b, i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_agree_on_a_few_cases() {
        for r in oracle_suite(10, 3).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn oracle_conv_box_sum() {
        let x = vec![1.0; 9];
        let w = vec![1.0; 9];
        let (y, ho, wo) = oracle::conv2d(&x, [1, 1, 3, 3], &w, 1, 3, None, 1, 1, 1);
        assert_eq!((ho, wo), (3, 3));
        assert_eq!(y, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn oracle_confusion_counts() {
        let c = oracle::confusion(&[0, 1, 1, 0], &[0, 1, 0, 255], 2, 255);
        assert_eq!(c, vec![1, 1, 0, 1]);
    }
}
