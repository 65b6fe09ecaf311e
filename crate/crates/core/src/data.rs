//! Synthetic shape segmentation data: generation, storage, augmentation and
//! seeded batching.
//!
//! Class ids: 0 background, 1 circle, 2 rectangle, 3 triangle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::resize_bilinear;
use crate::tensor::{load_tensor, save_tensor, Tensor};

pub const IGNORE_LABEL: u8 = 255;
pub const CLASS_NAMES: [&str; 4] = ["background", "circle", "rectangle", "triangle"];
const BASE_COLORS: [[f64; 3]; 3] = [[0.85, 0.25, 0.2], [0.2, 0.8, 0.3], [0.25, 0.3, 0.85]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// 2..=4: background plus the first `num_classes - 1` shape kinds.
    pub num_classes: usize,
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    /// Half-width of the per-shape jitter around its class base color.
    pub color_jitter: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            size: 48,
            min_shapes: 1,
            max_shapes: 3,
            noise: 0.1,
            color_jitter: 0.3,
            train_count: 500,
            val_count: 100,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self, output_stride: usize) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(Error::Config {
                key: key.into(),
                detail,
            })
        };
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return bad("num_classes", format!("must be in 2..={}", CLASS_NAMES.len()));
        }
        if self.size < 16 || !self.size.is_multiple_of(output_stride.max(1)) {
            return bad(
                "size",
                format!("must be >= 16 and divisible by the output stride {output_stride}"),
            );
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > 3 {
            return bad("min_shapes", "need 1 <= min_shapes <= max_shapes <= 3".into());
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad("noise", "must be in [0, 0.5]".into());
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            return bad("color_jitter", "must be in [0, 1]".into());
        }
        if self.train_count == 0 || self.val_count == 0 {
            return bad("train_count", "train and val counts must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }
}

/// Samples of one split: images `[3,H,W]` in `[0,1]`, labels `[H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSet {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<Tensor<u8>>,
}

impl SegSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.labels.first().map(|l| l.shape().to_vec()).unwrap_or_default();
        (s.first().copied().unwrap_or(0), s.get(1).copied().unwrap_or(0))
    }

    /// Stacks the given samples without augmentation.
    pub fn batch(&self, indices: &[usize]) -> Result<SegBatch> {
        let samples = indices
            .iter()
            .map(|&i| {
                let img = self.images.get(i).ok_or_else(|| {
                    Error::InvalidArgument(format!("sample {i} out of range ({})", self.len()))
                })?;
                Ok((img.clone(), self.labels[i].clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        SegBatch::stack(&samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegBatch {
    /// `[B,3,H,W]`
    pub images: Tensor<f32>,
    /// `[B,H,W]`
    pub labels: Tensor<u8>,
    pub indices: Vec<usize>,
}

impl SegBatch {
    pub fn stack(samples: &[(Tensor<f32>, Tensor<u8>)]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Empty("batch has no samples".into()))?;
        let (ishape, lshape) = (first.0.shape().to_vec(), first.1.shape().to_vec());
        let mut images = Vec::with_capacity(samples.len() * first.0.numel());
        let mut labels = Vec::with_capacity(samples.len() * first.1.numel());
        for (img, lbl) in samples {
            if img.shape() != ishape.as_slice() || lbl.shape() != lshape.as_slice() {
                return Err(Error::shape("batch", "samples differ in shape"));
            }
            images.extend_from_slice(img.data());
            labels.extend_from_slice(lbl.data());
        }
        let b = samples.len();
        Ok(Self {
            images: Tensor::new([&[b][..], &ishape].concat(), images)?,
            labels: Tensor::new([&[b][..], &lshape].concat(), labels)?,
            indices: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sample_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | index);
    rng
}

enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { v: [(f64, f64); 3] },
}

impl Shape {
    fn random(kind: u8, size: f64, rng: &mut impl Rng) -> Self {
        let unit = size / 48.0;
        let r = rng.gen_range(5.0..11.0) * unit;
        let cx = rng.gen_range(r..size - r);
        let cy = rng.gen_range(r..size - r);
        match kind {
            1 => Shape::Circle { cx, cy, r },
            2 => {
                let hw = rng.gen_range(0.5..1.0) * r;
                let hh = rng.gen_range(0.5..1.0) * r;
                Shape::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                }
            }
            _ => {
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = [0.0, 1.0, 2.0].map(|k: f64| {
                    let a = phase + k * std::f64::consts::TAU / 3.0;
                    (cx + r * a.cos(), cy + r * a.sin())
                });
                Shape::Triangle { v }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { v } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                };
                let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                d.iter().all(|&e| e >= 0.0) || d.iter().all(|&e| e <= 0.0)
            }
        }
    }
}

/// Generates one sample, fully determined by `(spec.seed, split, index)`.
pub fn generate_sample(spec: &DatasetSpec, split: Split, index: usize) -> (Tensor<f32>, Tensor<u8>) {
    let mut rng = sample_rng(spec.seed, split.stream(), index as u64);
    let n = spec.size;
    let sz = n as f64;

    let c0: [f64; 3] = rng.gen();
    let c1: [f64; 3] = rng.gen();
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut rgb = vec![[0.0f64; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let t = (((x as f64 / sz - 0.5) * dx + (y as f64 / sz - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5)
                .clamp(0.0, 1.0);
            for ch in 0..3 {
                rgb[y * n + x][ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }

    let mut labels = vec![0u8; n * n];
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..count {
        let kind = rng.gen_range(1..spec.num_classes as u8);
        let shape = Shape::random(kind, sz, &mut rng);
        let base = BASE_COLORS[kind as usize - 1];
        let color = base.map(|c| {
            let j = if spec.color_jitter > 0.0 {
                rng.gen_range(-spec.color_jitter..=spec.color_jitter)
            } else {
                0.0
            };
            (c + j).clamp(0.0, 1.0)
        });
        for y in 0..n {
            for x in 0..n {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    labels[y * n + x] = kind;
                    rgb[y * n + x] = color;
                }
            }
        }
    }

    let mut image = vec![0f32; 3 * n * n];
    for (p, px) in rgb.iter().enumerate() {
        for ch in 0..3 {
            let noise = if spec.noise > 0.0 {
                rng.gen_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            image[ch * n * n + p] = (px[ch] + noise).clamp(0.0, 1.0) as f32;
        }
    }
    (
        Tensor::new(vec![3, n, n], image).expect("image shape"),
        Tensor::new(vec![n, n], labels).expect("label shape"),
    )
}

pub fn generate_split(spec: &DatasetSpec, split: Split) -> SegSet {
    let count = match split {
        Split::Train => spec.train_count,
        Split::Val => spec.val_count,
    };
    let (images, labels) = (0..count).map(|i| generate_sample(spec, split, i)).unzip();
    SegSet { images, labels }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub class_names: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sample_paths(dir: &Path, split: Split, index: usize) -> (PathBuf, PathBuf) {
    let base = dir.join(split.name());
    (
        base.join(format!("{index:05}.img.pfst")),
        base.join(format!("{index:05}.lbl.pfst")),
    )
}

/// Writes both splits and the manifest under `dir`.
pub fn generate(spec: &DatasetSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate(1)?;
    let dir = dir.as_ref();
    for split in [Split::Train, Split::Val] {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let set = generate_split(spec, split);
        for (i, (img, lbl)) in set.images.iter().zip(&set.labels).enumerate() {
            let (ip, lp) = sample_paths(dir, split, i);
            save_tensor(img, ip)?;
            save_tensor(lbl, lp)?;
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        seed: spec.seed,
        train_count: spec.train_count,
        val_count: spec.val_count,
        class_names: CLASS_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads one split, validating shapes and label values against the manifest.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<SegSet> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let count = match split {
        Split::Train => manifest.train_count,
        Split::Val => manifest.val_count,
    };
    let n = manifest.spec.size;
    let classes = manifest.spec.num_classes;
    let mut set = SegSet {
        images: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
    };
    for i in 0..count {
        let (ip, lp) = sample_paths(dir, split, i);
        let img: Tensor<f32> = load_tensor(&ip)?;
        let lbl: Tensor<u8> = load_tensor(&lp)?;
        if img.shape() != [3, n, n] || lbl.shape() != [n, n] {
            return Err(Error::Format(format!(
                "{}: unexpected sample shape {:?}/{:?}",
                ip.display(),
                img.shape(),
                lbl.shape()
            )));
        }
        if let Some(&bad) = lbl
            .data()
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v as usize >= classes)
        {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        set.images.push(img);
        set.labels.push(lbl);
    }
    Ok(set)
}

/// Flips and rescales one sample, then center-crops or pads back to the
/// original size (image pad 0, label pad [`IGNORE_LABEL`]).
pub fn augment_with(
    img: &Tensor<f32>,
    label: &Tensor<u8>,
    flip: bool,
    scale: f64,
) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let (h, w) = match *label.shape() {
        [h, w] if img.shape() == [3, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "augment",
                format!("image {:?} vs label {:?}", img.shape(), label.shape()),
            ))
        }
    };
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale {scale} must be positive")));
    }
    let (img, label) = if flip {
        (
            Tensor::from_fn(img.shape(), |i| {
                let x = i % w;
                img.data()[i - x + (w - 1 - x)]
            }),
            Tensor::from_fn(label.shape(), |i| {
                let x = i % w;
                label.data()[i - x + (w - 1 - x)]
            }),
        )
    } else {
        (img.clone(), label.clone())
    };
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    if sh == h && sw == w {
        return Ok((img, label));
    }
    let scaled_img = resize_bilinear(&img, sh, sw)?;
    let near = |o: usize, src: usize, dst: usize| (((o as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    let scaled_lbl = Tensor::from_fn(&[sh, sw], |i| {
        let (y, x) = (i / sw, i % sw);
        label.data()[near(y, h, sh) * w + near(x, w, sw)]
    });

    // Offsets of the output window inside the scaled frame (crop) or of
    // the scaled frame inside the output (pad).
    let place = |src: usize, dst: usize, o: usize| -> Option<usize> {
        if src >= dst {
            Some(o + (src - dst) / 2)
        } else {
            let off = (dst - src) / 2;
            (o >= off && o < off + src).then(|| o - off)
        }
    };
    let out_img = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        match (place(sh, h, y), place(sw, w, x)) {
            (Some(sy), Some(sx)) => scaled_img.data()[(c * sh + sy) * sw + sx],
            _ => 0.0,
        }
    });
    let out_lbl = Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        match (place(sh, h, y), place(sw, w, x)) {
            (Some(sy), Some(sx)) => scaled_lbl.data()[sy * sw + sx],
            _ => IGNORE_LABEL,
        }
    });
    Ok((out_img, out_lbl))
}

/// Random flip (p = 0.5) and uniform scale in `[0.5, 1.5]`.
pub fn augment_sample(
    img: &Tensor<f32>,
    label: &Tensor<u8>,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let flip = rng.gen_bool(0.5);
    let scale = rng.gen_range(0.5..=1.5);
    augment_with(img, label, flip, scale)
}

/// Seeded shuffle of `0..n` cut into batches; the last partial batch is kept.
pub fn batch_order(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} must be in 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterator over one epoch of batches. With `augment`, each sample is
/// transformed with an rng derived from `(epoch_seed, sample index)`.
pub fn batches<'a>(
    set: &'a SegSet,
    batch_size: usize,
    epoch_seed: u64,
    augment: bool,
) -> Result<impl Iterator<Item = Result<SegBatch>> + 'a> {
    let order = batch_order(set.len(), batch_size, epoch_seed)?;
    Ok(order.into_iter().map(move |indices| {
        let samples = indices
            .iter()
            .map(|&i| {
                if augment {
                    let mut rng = sample_rng(epoch_seed, 3, i as u64);
                    augment_sample(&set.images[i], &set.labels[i], &mut rng)
                } else {
                    Ok((set.images[i].clone(), set.labels[i].clone()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut batch = SegBatch::stack(&samples)?;
        batch.indices = indices;
        Ok(batch)
    }))
}
