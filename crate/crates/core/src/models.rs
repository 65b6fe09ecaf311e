//! Dilated fully-convolutional segmentation networks with an embedded PFS
//! layer, and their checkpoint format.
//!
//! Layout of a network:
//!
//! ```text
//! image -> standardize -> stem (3x3, strided) -> body (3x3, dilated) -> f_in
//!       -> M = PFS(f_in) -> f_o = f_in + gamma * f_in M^T
//!       -> 1x1 classifier -> bilinear upsample to input size
//! ```
//!
//! Every conv except the classifier is followed by a ReLU.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "PFCK" | version u8 | count u32 | count x (name_len u16, name, PFST tensor)
//! | meta_len u32 | meta JSON {"dtype": .., "spec": SegNetSpec}
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, ConvVars};
use crate::pfs::{augment_var, c_pfs_var, s_pfs_var, CPfsTransforms, CPfsVars, PfsMap, PfsVar, PfsVariant};
use crate::tensor::{encode_tensor, read_tensor_any, AnyTensor, FromAny, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Inputs in `[0,1]` are standardized as `(x - INPUT_MEAN) / INPUT_STD`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemLayer {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyLayer {
    pub channels: usize,
    pub dilation: usize,
}

/// Architecture of a segmentation network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetSpec {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem: Vec<StemLayer>,
    pub body: Vec<BodyLayer>,
    pub pfs_variant: PfsVariant,
    pub num_classes: usize,
}

fn default_in_channels() -> usize {
    3
}

impl SegNetSpec {
    pub fn default_teacher(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            stem: vec![
                StemLayer {
                    channels: 16,
                    stride: 2,
                },
                StemLayer {
                    channels: 32,
                    stride: 2,
                },
            ],
            body: [2, 2, 4, 4]
                .into_iter()
                .map(|dilation| BodyLayer {
                    channels: 32,
                    dilation,
                })
                .collect(),
            pfs_variant: PfsVariant::CPfs,
            num_classes,
        }
    }

    pub fn default_student(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            stem: vec![
                StemLayer {
                    channels: 8,
                    stride: 2,
                },
                StemLayer {
                    channels: 16,
                    stride: 2,
                },
            ],
            body: [2, 4]
                .into_iter()
                .map(|dilation| BodyLayer {
                    channels: 16,
                    dilation,
                })
                .collect(),
            pfs_variant: PfsVariant::SPfs,
            num_classes,
        }
    }

    /// Product of the stem strides.
    pub fn output_stride(&self) -> usize {
        self.stem.iter().map(|s| s.stride).product()
    }

    /// Channels of the PFS input feature map.
    pub fn feature_channels(&self) -> usize {
        self.body
            .last()
            .map(|b| b.channels)
            .or_else(|| self.stem.last().map(|s| s.channels))
            .unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: String, detail: &str| {
            Err(Error::Config {
                key,
                detail: detail.into(),
            })
        };
        if self.in_channels == 0 {
            return bad("in_channels".into(), "must be positive");
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad("num_classes".into(), "must be in 2..=255");
        }
        for (i, s) in self.stem.iter().enumerate() {
            if s.channels == 0 || s.stride == 0 {
                return bad(format!("stem[{i}]"), "channels and stride must be positive");
            }
        }
        for (i, b) in self.body.iter().enumerate() {
            if b.channels == 0 || b.dilation == 0 {
                return bad(format!("body[{i}]"), "channels and dilation must be positive");
            }
        }
        Ok(())
    }
}

/// Whether a parameter receives weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: SegNetSpec,
    stem: Vec<Conv2dLayer<T>>,
    body: Vec<Conv2dLayer<T>>,
    cpfs: Option<CPfsTransforms<T>>,
    gamma: Option<Tensor<T>>,
    classifier: Conv2dLayer<T>,
}

/// Tape handles produced by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, classes, H, W]` at input resolution.
    pub logits: Var,
    /// Pre-PFS body output `[B, C, H/os, W/os]`.
    pub feat: Var,
    pub pfs: Option<PfsVar>,
    /// Parameter leaves in [`Network::params`] order.
    pub params: Vec<Var>,
}

/// Tape-free forward results.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    pub feat: Tensor<T>,
    pub pfs: Option<PfsMap<T>>,
}

impl<T: Real> Network<T> {
    /// Deterministically initialized network.
    pub fn build(spec: SegNetSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.stem.iter_mut().chain(net.body.iter_mut()) {
            layer.init_params(&mut rng);
        }
        if let Some(t) = net.cpfs.as_mut() {
            t.init_params(&mut rng);
        }
        net.classifier.init_params(&mut rng);
        Ok(net)
    }

    fn zeroed(spec: SegNetSpec) -> Result<Self> {
        spec.validate()?;
        let mut c = spec.in_channels;
        let mut stem = Vec::new();
        for s in &spec.stem {
            stem.push(Conv2dLayer::new(c, s.channels, 3, s.stride, 1)?);
            c = s.channels;
        }
        let mut body = Vec::new();
        for b in &spec.body {
            body.push(Conv2dLayer::new(c, b.channels, 3, 1, b.dilation)?);
            c = b.channels;
        }
        let cpfs = match spec.pfs_variant {
            PfsVariant::CPfs => Some(CPfsTransforms::new(c)?),
            _ => None,
        };
        let gamma = (spec.pfs_variant != PfsVariant::None).then(|| Tensor::scalar(T::zero()));
        let classifier = Conv2dLayer::new(c, spec.num_classes, 1, 1, 1)?;
        Ok(Self {
            spec,
            stem,
            body,
            cpfs,
            gamma,
            classifier,
        })
    }

    pub fn spec(&self) -> &SegNetSpec {
        &self.spec
    }

    pub fn gamma(&self) -> Option<T> {
        self.gamma.as_ref().map(|g| g.data()[0])
    }

    pub fn set_gamma(&mut self, value: T) {
        if let Some(g) = self.gamma.as_mut() {
            g.data_mut()[0] = value;
        }
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.stem.iter().enumerate() {
            out.push((format!("stem.{i}.weight"), &l.weight));
            out.push((format!("stem.{i}.bias"), &l.bias));
        }
        for (i, l) in self.body.iter().enumerate() {
            out.push((format!("body.{i}.weight"), &l.weight));
            out.push((format!("body.{i}.bias"), &l.bias));
        }
        if let Some(t) = &self.cpfs {
            out.push(("pfs.w1.weight".into(), &t.w1.weight));
            out.push(("pfs.w1.bias".into(), &t.w1.bias));
            out.push(("pfs.w2.weight".into(), &t.w2.weight));
            out.push(("pfs.w2.bias".into(), &t.w2.bias));
        }
        if let Some(g) = &self.gamma {
            out.push(("pfs.gamma".into(), g));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    /// Mutable parameters in [`Network::params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in self.stem.iter_mut().chain(self.body.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(t) = self.cpfs.as_mut() {
            out.push(&mut t.w1.weight);
            out.push(&mut t.w1.bias);
            out.push(&mut t.w2.weight);
            out.push(&mut t.w2.bias);
        }
        if let Some(g) = self.gamma.as_mut() {
            out.push(g);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        self.params()
            .iter()
            .map(|(name, _)| {
                if name.ends_with(".bias") {
                    ParamKind::Bias
                } else if name == "pfs.gamma" {
                    ParamKind::Gain
                } else {
                    ParamKind::Weight
                }
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.params() {
            hasher.update(name.as_bytes());
            hasher.update(encode_tensor(t).expect("parameter encodes"));
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |l: &Conv2dLayer<T>| Conv2dLayer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
            geom: l.geom,
        };
        Network {
            spec: self.spec.clone(),
            stem: self.stem.iter().map(conv).collect(),
            body: self.body.iter().map(conv).collect(),
            cpfs: self.cpfs.as_ref().map(|t| CPfsTransforms {
                w1: conv(&t.w1),
                w2: conv(&t.w2),
            }),
            gamma: self.gamma.as_ref().map(Tensor::cast),
            classifier: conv(&self.classifier),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let os = self.spec.output_stride();
        match *shape {
            [_, c, h, w] if c == self.spec.in_channels => {
                if h % os != 0 || w % os != 0 || h == 0 || w == 0 {
                    Err(Error::InvalidArgument(format!(
                        "input {h}x{w} not divisible by output stride {os}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::shape(
                "network input",
                format!(
                    "expected [B,{},H,W], got {shape:?}",
                    self.spec.in_channels
                ),
            )),
        }
    }

    /// Records the forward pass on `tape`. With `trainable` false the
    /// parameters are constants and nothing on this tape needs a gradient.
    pub fn forward(&self, tape: &mut Tape<T>, images: Var, trainable: bool) -> Result<ForwardOutput> {
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        self.forward_with(tape, images, params)
    }

    /// Forward pass using caller-supplied parameter vars, in
    /// [`Network::params`] order, in place of the stored tensors.
    pub fn forward_with(&self, tape: &mut Tape<T>, images: Var, params: Vec<Var>) -> Result<ForwardOutput> {
        let shape = tape.shape(images).to_vec();
        self.check_input(&shape)?;
        let expected = self.params();
        if params.len() != expected.len() {
            return Err(Error::shape(
                "network params",
                format!("expected {} vars, got {}", expected.len(), params.len()),
            ));
        }
        for ((name, t), &v) in expected.iter().zip(&params) {
            if tape.shape(v) != t.shape() {
                return Err(Error::shape(
                    "network params",
                    format!("{name}: expected {:?}, got {:?}", t.shape(), tape.shape(v)),
                ));
            }
        }
        let (h, w) = (shape[2], shape[3]);
        let mut next = params.iter().copied();
        let mut conv = |geom| ConvVars {
            weight: next.next().expect("checked count"),
            bias: next.next().expect("checked count"),
            geom,
        };
        let shift = tape.constant(Tensor::full(&shape, T::from_f64(-INPUT_MEAN)));
        let centered = tape.add(images, shift)?;
        let mut x = tape.scale(centered, T::from_f64(1.0 / INPUT_STD));
        for layer in self.stem.iter().chain(&self.body) {
            let y = conv(layer.geom).apply(tape, x)?;
            x = tape.relu(y);
        }
        let feat = x;
        let mut pfs = None;
        let mut head_in = feat;
        if self.spec.pfs_variant != PfsVariant::None {
            let map = match &self.cpfs {
                Some(t) => {
                    let vars = CPfsVars {
                        w1: conv(t.w1.geom),
                        w2: conv(t.w2.geom),
                    };
                    c_pfs_var(tape, feat, &vars)?
                }
                None => s_pfs_var(tape, feat)?,
            };
            let gamma = next.next().expect("checked count");
            head_in = augment_var(tape, feat, map.m, gamma)?;
            pfs = Some(map);
        }
        let cls = ConvVars {
            weight: next.next().expect("checked count"),
            bias: next.next().expect("checked count"),
            geom: self.classifier.geom,
        };
        let coarse = cls.apply(tape, head_in)?;
        let logits = tape.upsample_bilinear(coarse, h, w)?;
        Ok(ForwardOutput {
            logits,
            feat,
            pfs,
            params,
        })
    }

    /// Tape-free forward pass (teacher targets, evaluation).
    pub fn infer(&self, images: &Tensor<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, false)?;
        let pfs = out.pfs.map(|p| p.to_map(&tape)).transpose()?;
        Ok(Prediction {
            logits: tape.value(out.logits).clone(),
            feat: tape.value(out.feat).clone(),
            pfs,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    dtype: String,
    spec: SegNetSpec,
}

/// Serializes the network parameters and spec.
pub fn checkpoint_bytes<T: Real>(net: &Network<T>) -> Result<Vec<u8>> {
    let params = net.params();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(*t)?);
    }
    let meta = serde_json::to_vec(&CheckpointMeta {
        dtype: T::DTYPE.name().into(),
        spec: net.spec.clone(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(net)?).map_err(|e| Error::io(path, e))
}

fn take<'a>(r: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format(format!("truncated checkpoint at {what}")));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

/// Parses checkpoint bytes into a network.
pub fn checkpoint_from_bytes<T: Real + FromAny>(bytes: &[u8]) -> Result<Network<T>> {
    let mut r = bytes;
    if take(&mut r, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected \"PFCK\"".into()));
    }
    let version = take(&mut r, 1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r, 4, "count")?.try_into().expect("4 bytes"));
    let mut entries: Vec<(String, AnyTensor)> = Vec::with_capacity(count as usize);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut r, 2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(take(&mut r, len as usize, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate parameter name {name}")));
        }
        let tensor = read_tensor_any(&mut r)?;
        entries.push((name, tensor));
    }
    let meta_len = u32::from_le_bytes(take(&mut r, 4, "metadata length")?.try_into().expect("4 bytes"));
    let meta_bytes = take(&mut r, meta_len as usize, "metadata")?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).unwrap_or(0) != 0 {
        return Err(Error::Format("trailing bytes after checkpoint metadata".into()));
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    if meta.dtype != T::DTYPE.name() {
        return Err(Error::DTypeMismatch {
            expected: T::DTYPE.name(),
            found: if meta.dtype == "f64" { "f64" } else if meta.dtype == "f32" { "f32" } else { "unknown" },
        });
    }

    let mut net = Network::<T>::zeroed(meta.spec)?;
    let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    if names.len() != entries.len() {
        return Err(Error::SpecMismatch(format!(
            "spec expects {} parameters, file holds {}",
            names.len(),
            entries.len()
        )));
    }
    for ((expected, slot), (name, tensor)) in names.iter().zip(net.params_mut()).zip(entries) {
        if *expected != name {
            return Err(Error::SpecMismatch(format!(
                "expected parameter {expected}, found {name}"
            )));
        }
        let tensor = T::from_any(tensor)?;
        if tensor.shape() != slot.shape() {
            return Err(Error::SpecMismatch(format!(
                "{name}: file shape {:?}, spec shape {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    Ok(net)
}

pub fn load_checkpoint<T: Real + FromAny>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Loads a checkpoint and requires its architecture to equal `spec`.
pub fn load_checkpoint_expecting<T: Real + FromAny>(
    path: impl AsRef<Path>,
    spec: &SegNetSpec,
) -> Result<Network<T>> {
    let net = load_checkpoint(path)?;
    if net.spec() != spec {
        return Err(Error::SpecMismatch(format!(
            "checkpoint holds {:?}, expected {:?}",
            net.spec(),
            spec
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(b: usize, size: usize) -> Tensor<f64> {
        Tensor::from_fn(&[b, 3, size, size], |i| ((i * 7919) % 101) as f64 / 101.0)
    }

    #[test]
    fn default_shapes() {
        let net = Network::<f64>::build(SegNetSpec::default_teacher(4), 1).unwrap();
        let p = net.infer(&image(2, 48)).unwrap();
        assert_eq!(p.logits.shape(), &[2, 4, 48, 48]);
        assert_eq!(p.feat.shape(), &[2, 32, 12, 12]);
        assert_eq!(p.pfs.as_ref().unwrap().matrix().shape(), &[2, 144, 144]);

        let student = Network::<f64>::build(SegNetSpec::default_student(4), 1).unwrap();
        assert!(net.num_params() > student.num_params());
        assert_eq!(student.infer(&image(1, 48)).unwrap().feat.shape(), &[1, 16, 12, 12]);
    }

    #[test]
    fn build_is_seeded() {
        let a = Network::<f32>::build(SegNetSpec::default_student(4), 3).unwrap();
        let b = Network::<f32>::build(SegNetSpec::default_student(4), 3).unwrap();
        let c = Network::<f32>::build(SegNetSpec::default_student(4), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn zero_gain_matches_plain_network() {
        let net = Network::<f64>::build(SegNetSpec::default_student(4), 5).unwrap();
        assert_eq!(net.gamma(), Some(0.0));
        let mut plain_spec = net.spec().clone();
        plain_spec.pfs_variant = PfsVariant::None;
        let mut plain = Network::<f64>::zeroed(plain_spec).unwrap();
        let src: Vec<Tensor<f64>> = net
            .params()
            .into_iter()
            .filter(|(n, _)| n != "pfs.gamma")
            .map(|(_, t)| t.clone())
            .collect();
        for (dst, t) in plain.params_mut().into_iter().zip(src) {
            *dst = t;
        }
        let x = image(2, 16);
        assert_eq!(net.infer(&x).unwrap().logits, plain.infer(&x).unwrap().logits);
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = Network::<f64>::build(SegNetSpec::default_student(4), 0).unwrap();
        assert!(net.infer(&image(1, 18)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let mut net = Network::<f32>::build(SegNetSpec::default_student(4), 9).unwrap();
        net.set_gamma(0.25);
        save_checkpoint(&net, &path).unwrap();
        let back: Network<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        let x = image(1, 16).cast::<f32>();
        assert_eq!(back.infer(&x).unwrap().logits, net.infer(&x).unwrap().logits);

        let bytes = fs::read(&path).unwrap();
        assert!(matches!(
            checkpoint_from_bytes::<f32>(&bytes[..bytes.len() / 2]),
            Err(Error::Format(_))
        ));
        let teacher = SegNetSpec::default_teacher(4);
        assert!(matches!(
            load_checkpoint_expecting::<f32>(&path, &teacher),
            Err(Error::SpecMismatch(_))
        ));
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::DTypeMismatch { .. })
        ));
    }
}
