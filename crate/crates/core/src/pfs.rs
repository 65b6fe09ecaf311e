//! Pixel-wise feature similarity (PFS) maps, their L1 distillation loss and
//! the residual feature augmentation that feeds them back into a network.
//!
//! For a feature map `f` of shape `[B,C,H,W]`, every location `i` gets a
//! distribution over all `H*W` locations:
//!
//! ```text
//! S = f1 f2            f1: [B, HW, C], f2: [B, C, HW]
//! M_ij = exp(S_ij) / sum_j exp(S_ij)
//! ```
//!
//! S-PFS uses `f` directly for both factors. C-PFS first projects `f` with
//! two learned 1x1 convolutions down to `max(1, C/8)` channels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, ConvVars};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfsVariant {
    None,
    SPfs,
    CPfs,
}

/// Channel count of the C-PFS projections.
pub fn reduced_channels(c: usize) -> usize {
    (c / 8).max(1)
}

/// Row-stochastic `[B, HW, HW]` similarity maps plus the spatial dims they
/// were computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct PfsMap<T> {
    m: Tensor<T>,
    height: usize,
    width: usize,
}

impl<T: Real> PfsMap<T> {
    pub fn new(m: Tensor<T>, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if m.rank() != 3 || m.shape()[1] != n || m.shape()[2] != n {
            return Err(Error::shape(
                "pfs map",
                format!("{:?} does not match {height}x{width} locations", m.shape()),
            ));
        }
        Ok(Self { m, height, width })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.m
    }

    pub fn into_matrix(self) -> Tensor<T> {
        self.m
    }

    pub fn batch(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// `PFS^i` of image `b`: similarities of location `i` to every location.
    pub fn row(&self, b: usize, i: usize) -> &[T] {
        let n = self.locations();
        let start = (b * n + i) * n;
        &self.m.data()[start..start + n]
    }

    /// `PFS^i` laid out as an `[H, W]` map.
    pub fn row_map(&self, b: usize, i: usize) -> Result<Tensor<T>> {
        if b >= self.batch() || i >= self.locations() {
            return Err(Error::InvalidArgument(format!(
                "pfs row ({b}, {i}) out of bounds for batch {} with {} locations",
                self.batch(),
                self.locations()
            )));
        }
        Tensor::new(vec![self.height, self.width], self.row(b, i).to_vec())
    }
}

/// A PFS map recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PfsVar {
    pub m: Var,
    pub height: usize,
    pub width: usize,
}

impl PfsVar {
    pub fn to_map<T: Real>(&self, tape: &Tape<T>) -> Result<PfsMap<T>> {
        PfsMap::new(tape.value(self.m).clone(), self.height, self.width)
    }
}

/// The two learned 1x1 projections of C-PFS.
#[derive(Debug, Clone, PartialEq)]
pub struct CPfsTransforms<T> {
    pub w1: Conv2dLayer<T>,
    pub w2: Conv2dLayer<T>,
}

impl<T: Real> CPfsTransforms<T> {
    pub fn new(channels: usize) -> Result<Self> {
        let reduced = reduced_channels(channels);
        Ok(Self {
            w1: Conv2dLayer::new(channels, reduced, 1, 1, 1)?,
            w2: Conv2dLayer::new(channels, reduced, 1, 1, 1)?,
        })
    }

    pub fn init_params(&mut self, rng: &mut impl Rng) {
        self.w1.init_params(rng);
        self.w2.init_params(rng);
    }

    pub fn attach(&self, tape: &mut Tape<T>, trainable: bool) -> CPfsVars {
        CPfsVars {
            w1: self.w1.attach(tape, trainable),
            w2: self.w2.attach(tape, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CPfsVars {
    pub w1: ConvVars,
    pub w2: ConvVars,
}

fn feature_dims<T: Real>(tape: &Tape<T>, f: Var) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(f) {
        [b, c, h, w] if h * w >= 1 => Ok((b, c, h, w)),
        _ => Err(Error::shape(
            "pfs",
            format!("expected [B,C,H,W] with H*W >= 1, got {:?}", tape.shape(f)),
        )),
    }
}

fn similarity<T: Real>(tape: &mut Tape<T>, f1: Var, f2: Var) -> Result<PfsVar> {
    let (b, c, h, w) = feature_dims(tape, f1)?;
    if tape.shape(f2) != [b, c, h, w] {
        return Err(Error::shape(
            "pfs",
            format!("{:?} vs {:?}", tape.shape(f1), tape.shape(f2)),
        ));
    }
    if !tape.value(f1).is_finite() || !tape.value(f2).is_finite() {
        return Err(Error::NonFinite("pfs input"));
    }
    let n = h * w;
    let left = tape.reshape(f1, &[b, c, n])?;
    let left = tape.transpose_last2(left)?;
    let right = tape.reshape(f2, &[b, c, n])?;
    let logits = tape.bmm(left, right)?;
    let m = tape.softmax(logits, 2)?;
    Ok(PfsVar {
        m,
        height: h,
        width: w,
    })
}

/// S-PFS of `f` (`[B,C,H,W]`) recorded on `tape`.
pub fn s_pfs_var<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<PfsVar> {
    similarity(tape, f, f)
}

/// C-PFS of `f` through the projections `t`.
pub fn c_pfs_var<T: Real>(tape: &mut Tape<T>, f: Var, t: &CPfsVars) -> Result<PfsVar> {
    let f1 = t.w1.apply(tape, f)?;
    let f2 = t.w2.apply(tape, f)?;
    similarity(tape, f1, f2)
}

/// L1 distance between corresponding rows, summed over rows, divided by the
/// number of locations and averaged over the batch.
pub fn pfs_loss_var<T: Real>(tape: &mut Tape<T>, teacher: Var, student: Var) -> Result<Var> {
    let (ts, ss) = (tape.shape(teacher).to_vec(), tape.shape(student).to_vec());
    if ts != ss || ts.len() != 3 || ts[1] != ts[2] {
        return Err(Error::shape(
            "pfs_loss",
            format!("teacher {ts:?} vs student {ss:?}; feature maps must share spatial size"),
        ));
    }
    let denom = (ts[0] * ts[1]) as f64;
    let diff = tape.sub(teacher, student)?;
    let abs = tape.abs(diff);
    let total = tape.sum(abs);
    Ok(tape.scale(total, T::from_f64(1.0 / denom)))
}

/// `f + gamma * (f M^T)` per image with `f` viewed as `[C, HW]`.
pub fn augment_var<T: Real>(tape: &mut Tape<T>, f: Var, m: Var, gamma: Var) -> Result<Var> {
    let (b, c, h, w) = feature_dims(tape, f)?;
    let n = h * w;
    if tape.shape(m) != [b, n, n] {
        return Err(Error::shape(
            "augment",
            format!("map {:?} for features {:?}", tape.shape(m), [b, c, h, w]),
        ));
    }
    let flat = tape.reshape(f, &[b, c, n])?;
    let mt = tape.transpose_last2(m)?;
    let mixed = tape.bmm(flat, mt)?;
    let scaled = tape.scale_by_var(mixed, gamma)?;
    let out = tape.add(flat, scaled)?;
    tape.reshape(out, &[b, c, h, w])
}

/// Tape-free S-PFS.
pub fn s_pfs<T: Real>(f: &Tensor<T>) -> Result<PfsMap<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(f.clone());
    s_pfs_var(&mut tape, v)?.to_map(&tape)
}

/// Tape-free C-PFS.
pub fn c_pfs<T: Real>(f: &Tensor<T>, t: &CPfsTransforms<T>) -> Result<PfsMap<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(f.clone());
    let vars = t.attach(&mut tape, false);
    c_pfs_var(&mut tape, v, &vars)?.to_map(&tape)
}

/// Tape-free PFS loss between two maps.
pub fn pfs_loss<T: Real>(teacher: &PfsMap<T>, student: &PfsMap<T>) -> Result<T> {
    let mut tape = Tape::new();
    let t = tape.constant(teacher.matrix().clone());
    let s = tape.constant(student.matrix().clone());
    let l = pfs_loss_var(&mut tape, t, s)?;
    tape.value(l).item()
}

/// Tape-free feature augmentation.
pub fn augment<T: Real>(f: &Tensor<T>, map: &PfsMap<T>, gamma: T) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let mv = tape.constant(map.matrix().clone());
    let g = tape.constant(Tensor::scalar(gamma));
    let out = augment_var(&mut tape, fv, mv, g)?;
    Ok(tape.value(out).clone())
}

/// Min-max scaling used for a heatmap, kept so raw values stay recoverable:
/// `raw = min + pixel / 255 * (max - min)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapScale {
    pub min: f64,
    pub max: f64,
}

impl HeatmapScale {
    pub fn of(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max }
    }

    pub fn quantize(&self, v: f64) -> u8 {
        let range = self.max - self.min;
        if range <= 0.0 {
            return 0;
        }
        ((v - self.min) / range * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Binary greyscale PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    write_file(path, &bytes)
}

/// Binary RGB PPM (P6); `rgb` is interleaved.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), 3 * width * height);
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    write_file(path, &bytes)
}

/// Files written for one exported PFS row.
#[derive(Debug, Clone)]
pub struct HeatmapFiles {
    pub pgm: PathBuf,
    pub csv: PathBuf,
    pub scale: PathBuf,
    pub range: HeatmapScale,
}

/// Writes an `[H,W]` PFS row as `<stem>.pgm`, `<stem>.csv` (raw values,
/// one map row per line) and `<stem>.scale.txt` (min/max used for scaling).
pub fn export_heatmap<T: Real>(row: &Tensor<T>, dir: &Path, stem: &str) -> Result<HeatmapFiles> {
    let [h, w] = *row.shape() else {
        return Err(Error::shape("export_heatmap", "expected an [H,W] map"));
    };
    let values: Vec<f64> = row.data().iter().map(|v| v.into_f64()).collect();
    let range = HeatmapScale::of(&values);
    let pixels: Vec<u8> = values.iter().map(|&v| range.quantize(v)).collect();

    let pgm = dir.join(format!("{stem}.pgm"));
    write_pgm(&pgm, w, h, &pixels)?;

    let mut csv = String::new();
    for line in values.chunks(w) {
        let cells: Vec<String> = line.iter().map(|v| format!("{v:.9e}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    write_file(&csv_path, csv.as_bytes())?;

    let scale = dir.join(format!("{stem}.scale.txt"));
    let text = format!(
        "min {:.9e}\nmax {:.9e}\nraw = min + pixel / 255 * (max - min)\n",
        range.min, range.max
    );
    write_file(&scale, text.as_bytes())?;
    Ok(HeatmapFiles {
        pgm,
        csv: csv_path,
        scale,
        range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_features_give_uniform_map() {
        let f = Tensor::full(&[1, 3, 2, 3], 0.4f64);
        let map = s_pfs(&f).unwrap();
        for &v in map.matrix().data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_location_example() {
        let f = Tensor::new(vec![1, 1, 1, 2], vec![1.0f64, 3.0]).unwrap();
        let map = s_pfs(&f).unwrap();
        // S = [[1,3],[3,9]]
        let row0 = map.row(0, 0);
        let row1 = map.row(0, 1);
        assert!((row0[0] - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-15);
        assert!((row0[0] - 0.1192).abs() < 1e-4 && (row0[1] - 0.8808).abs() < 1e-4);
        assert!((row1[0] - 1.0 / (1.0 + 6f64.exp())).abs() < 1e-15);
        assert!((row1[0] - 0.00247).abs() < 1e-5 && (row1[1] - 0.99753).abs() < 1e-5);
    }

    #[test]
    fn zero_projections_give_uniform_map() {
        let t = CPfsTransforms::<f64>::new(16).unwrap();
        assert_eq!(t.w1.c_out(), 2);
        let f = Tensor::from_fn(&[2, 16, 2, 2], |i| (i as f64 * 0.37).cos());
        let map = c_pfs(&f, &t).unwrap();
        assert!(map.matrix().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn identity_projections_reduce_to_s_pfs() {
        let c = 3;
        let mut t = CPfsTransforms::<f64> {
            w1: Conv2dLayer::new(c, c, 1, 1, 1).unwrap(),
            w2: Conv2dLayer::new(c, c, 1, 1, 1).unwrap(),
        };
        for i in 0..c {
            t.w1.weight.data_mut()[i * c + i] = 1.0;
            t.w2.weight.data_mut()[i * c + i] = 1.0;
        }
        let f = Tensor::from_fn(&[2, c, 3, 2], |i| (i as f64 * 0.7).sin());
        let a = c_pfs(&f, &t).unwrap();
        let b = s_pfs(&f).unwrap();
        for (x, y) in a.matrix().data().iter().zip(b.matrix().data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn reduced_channel_rule() {
        assert_eq!(reduced_channels(2048), 256);
        assert_eq!(reduced_channels(32), 4);
        assert_eq!(reduced_channels(12), 1);
        assert_eq!(reduced_channels(3), 1);
    }

    #[test]
    fn loss_hand_example() {
        let teacher = PfsMap::new(Tensor::full(&[1, 2, 2], 0.5f64), 1, 2).unwrap();
        let student =
            PfsMap::new(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(), 1, 2)
                .unwrap();
        assert_eq!(pfs_loss(&teacher, &student).unwrap(), 1.0);
        assert_eq!(pfs_loss(&teacher, &teacher).unwrap(), 0.0);
    }

    #[test]
    fn loss_rejects_mismatched_maps() {
        let a = PfsMap::new(Tensor::full(&[1, 4, 4], 0.25f64), 2, 2).unwrap();
        let b = PfsMap::new(Tensor::full(&[1, 9, 9], 1.0 / 9.0), 3, 3).unwrap();
        assert!(matches!(pfs_loss(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn augment_identities() {
        let f = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 - 5.0);
        let map = s_pfs(&f).unwrap();
        assert_eq!(augment(&f, &map, 0.0).unwrap(), f);

        let c = Tensor::full(&[1, 2, 2, 2], 1.5f64);
        let m = Tensor::from_fn(&[1, 4, 4], |i| [0.1, 0.2, 0.3, 0.4][i % 4]);
        let map = PfsMap::new(m, 2, 2).unwrap();
        let out = augment(&c, &map, 0.5).unwrap();
        assert!(out.data().iter().all(|&v| (v - 2.25).abs() < 1e-14));
    }

    #[test]
    fn heatmap_scale_roundtrip() {
        let s = HeatmapScale::of(&[0.2, 0.4, 0.6]);
        assert_eq!(s.quantize(0.2), 0);
        assert_eq!(s.quantize(0.6), 255);
        assert_eq!(HeatmapScale::of(&[0.3, 0.3]).quantize(0.3), 0);
    }

    #[test]
    fn heatmap_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let row = Tensor::from_fn(&[2, 3], |i| i as f64 / 15.0);
        let files = export_heatmap(&row, dir.path(), "px").unwrap();
        let pgm = fs::read(&files.pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 51, 102, 153, 204, 255]);
        let csv = fs::read_to_string(&files.csv).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }
}
