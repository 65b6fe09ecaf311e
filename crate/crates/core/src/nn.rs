//! Convolution, bilinear resizing and parameter initialization.
//!
//! Convolution is cross-correlation lowered to GEMM through an im2col
//! buffer per image; the buffer is kept for the backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Stride, dilation and zero padding of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Padding that preserves spatial size at stride 1 for an odd kernel.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn effective_kernel(&self, kernel: usize) -> usize {
        self.dilation * (kernel - 1) + 1
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 || kernel == 0 {
            return Err(Error::InvalidArgument(
                "stride, dilation and kernel must be positive".into(),
            ));
        }
        let span = input + 2 * self.padding;
        let extent = self.effective_kernel(kernel);
        if span < extent {
            return Err(Error::shape(
                "conv2d",
                format!("input extent {input} (+2x{} pad) below kernel extent {extent}", self.padding),
            ));
        }
        Ok((span - extent) / self.stride + 1)
    }

    fn is_pointwise(&self, kernel: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(x: &[usize], w: &[usize], geom: ConvGeometry) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || w[2] != w[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input {x:?} / weight {w:?} must be [B,C,H,W] / [Co,Ci,k,k]"),
            ));
        }
        if x[1] != w[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", x[1], w[1]),
            ));
        }
        let k = w[2];
        Ok(Self {
            batch: x[0],
            c_in: x[1],
            c_out: w[0],
            k,
            h: x[2],
            w: x[3],
            ho: geom.output_size(x[2], k)?,
            wo: geom.output_size(x[3], k)?,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(img: &[T], d: &ConvDims, geom: ConvGeometry, cols: &mut [T]) {
    let (s, dil, p) = (geom.stride as isize, geom.dilation as isize, geom.padding as isize);
    let plane = d.out_plane();
    for ci in 0..d.c_in {
        let src = &img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.ho {
                    let iy = oy as isize * s - p + ky as isize * dil;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize * dil;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims, geom: ConvGeometry, img: &mut [T]) {
    let (s, dil, p) = (geom.stride as isize, geom.dilation as isize, geom.padding as isize);
    let plane = d.out_plane();
    for ci in 0..d.c_in {
        let dst = &mut img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.ho {
                    let iy = oy as isize * s - p + ky as isize * dil;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = ox as isize * s - p + kx as isize * dil;
                        if ix >= 0 && ix < d.w as isize {
                            dst_row[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and, unless the kernel is a
/// plain 1x1, the im2col buffers of the whole batch.
pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let d = ConvDims::new(x.shape(), w.shape(), geom)?;
    if let Some(b) = b {
        if b.shape() != [d.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", b.shape(), d.c_out),
            ));
        }
    }
    let plane = d.out_plane();
    let patch = d.patch();
    let in_img = d.c_in * d.h * d.w;
    let out_img = d.c_out * plane;
    let mut out = vec![T::zero(); d.batch * out_img];
    let pointwise = geom.is_pointwise(d.k);
    let mut cols = if pointwise {
        None
    } else {
        Some(vec![T::zero(); d.batch * patch * plane])
    };
    for bi in 0..d.batch {
        let img = &x.data()[bi * in_img..(bi + 1) * in_img];
        let col: &[T] = match cols.as_mut() {
            Some(buf) => {
                let slot = &mut buf[bi * patch * plane..(bi + 1) * patch * plane];
                im2col(img, &d, geom, slot);
                slot
            }
            None => img,
        };
        let dst = &mut out[bi * out_img..(bi + 1) * out_img];
        gemm(d.c_out, patch, plane, w.data(), false, col, false, dst, false);
        if let Some(b) = b {
            for (co, row) in dst.chunks_mut(plane).enumerate() {
                let bias = b.data()[co];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    let out = Tensor::new(vec![d.batch, d.c_out, d.ho, d.wo], out)?;
    Ok((out, cols))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    cols: Option<&[T]>,
    geom: ConvGeometry,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> Result<ConvGrads<T>> {
    let d = ConvDims::new(x.shape(), w.shape(), geom)?;
    let plane = d.out_plane();
    let patch = d.patch();
    let in_img = d.c_in * d.h * d.w;
    let out_img = d.c_out * plane;

    let mut gw = want_weight.then(|| vec![T::zero(); d.c_out * patch]);
    let mut gx = want_input.then(|| vec![T::zero(); x.numel()]);
    let mut gcol = (want_input && cols.is_some()).then(|| vec![T::zero(); patch * plane]);

    for bi in 0..d.batch {
        let gy = &g.data()[bi * out_img..(bi + 1) * out_img];
        let col = match cols {
            Some(buf) => &buf[bi * patch * plane..(bi + 1) * patch * plane],
            None => &x.data()[bi * in_img..(bi + 1) * in_img],
        };
        if let Some(gw) = gw.as_mut() {
            gemm(d.c_out, plane, patch, gy, false, col, true, gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[bi * in_img..(bi + 1) * in_img];
            match gcol.as_mut() {
                Some(gc) => {
                    gemm(patch, d.c_out, plane, w.data(), true, gy, false, gc, false);
                    col2im(gc, &d, geom, dst);
                }
                None => gemm(patch, d.c_out, plane, w.data(), true, gy, false, dst, false),
            }
        }
    }
    let bias = want_bias.then(|| {
        let mut gb = vec![T::zero(); d.c_out];
        for bi in 0..d.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let start = bi * out_img + co * plane;
                *acc += g.data()[start..start + plane].iter().copied().sum::<T>();
            }
        }
        Tensor::new(vec![d.c_out], gb)
    });
    Ok(ConvGrads {
        input: gx.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
        weight: gw.map(|v| Tensor::new(w.shape().to_vec(), v)).transpose()?,
        bias: bias.transpose()?,
    })
}

/// Per-output-index interpolation taps along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizePlan {
    pub src: usize,
    pub dst: usize,
    taps: Vec<(usize, usize, f64, f64)>,
}

impl ResizePlan {
    /// Bilinear taps with half-pixel centers (`align_corners = false`);
    /// source coordinates below zero clamp to the first sample.
    pub fn bilinear(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let taps = (0..dst)
            .map(|o| {
                if src == dst {
                    return (o, o, 1.0, 0.0);
                }
                let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                let frac = pos - i0 as f64;
                (i0, i1, 1.0 - frac, frac)
            })
            .collect();
        Self { src, dst, taps }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn taps(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        self.taps.iter().copied()
    }
}

/// Applies separable bilinear taps to every `[h,w]` plane of `x`.
pub(crate) fn resize_forward<T: Real>(x: &Tensor<T>, rows: &ResizePlan, cols: &ResizePlan) -> Tensor<T> {
    let shape = x.shape();
    let lead = &shape[..shape.len() - 2];
    let planes: usize = lead.iter().product();
    if rows.is_identity() && cols.is_identity() {
        return x.clone();
    }
    let (h, w) = (rows.src, cols.src);
    let (ho, wo) = (rows.dst, cols.dst);
    let col_taps: Vec<(usize, usize, T, T)> = cols
        .taps()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64(wa), T::from_f64(wb)))
        .collect();
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, (r0, r1, wr0, wr1)) in rows.taps().enumerate() {
            let (wr0, wr1) = (T::from_f64(wr0), T::from_f64(wr1));
            let row0 = &src[r0 * w..(r0 + 1) * w];
            let row1 = &src[r1 * w..(r1 + 1) * w];
            for (ox, &(c0, c1, wc0, wc1)) in col_taps.iter().enumerate() {
                let top = wc0 * row0[c0] + wc1 * row0[c1];
                let bottom = wc0 * row1[c0] + wc1 * row1[c1];
                dst[oy * wo + ox] = wr0 * top + wr1 * bottom;
            }
        }
    }
    let mut out_shape = lead.to_vec();
    out_shape.extend([ho, wo]);
    Tensor::new(out_shape, out).expect("resize shape")
}

pub(crate) fn resize_backward<T: Real>(
    g: &Tensor<T>,
    input_shape: &[usize],
    rows: &ResizePlan,
    cols: &ResizePlan,
) -> Tensor<T> {
    if rows.is_identity() && cols.is_identity() {
        return g.clone();
    }
    let planes: usize = input_shape[..input_shape.len() - 2].iter().product();
    let (h, w) = (rows.src, cols.src);
    let (ho, wo) = (rows.dst, cols.dst);
    let col_taps: Vec<(usize, usize, T, T)> = cols
        .taps()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64(wa), T::from_f64(wb)))
        .collect();
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, (r0, r1, wr0, wr1)) in rows.taps().enumerate() {
            let (wr0, wr1) = (T::from_f64(wr0), T::from_f64(wr1));
            for (ox, &(c0, c1, wc0, wc1)) in col_taps.iter().enumerate() {
                let gv = src[oy * wo + ox];
                let top = wr0 * gv;
                let bottom = wr1 * gv;
                dst[r0 * w + c0] += wc0 * top;
                dst[r0 * w + c1] += wc1 * top;
                dst[r1 * w + c0] += wc0 * bottom;
                dst[r1 * w + c1] += wc1 * bottom;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out).expect("resize shape")
}

/// Bilinear resize of the last two axes to `[height, width]`, up or down.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 || height == 0 || width == 0 {
        return Err(Error::shape(
            "resize_bilinear",
            format!("cannot resize {shape:?} to {height}x{width}"),
        ));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Ok(resize_forward(
        x,
        &ResizePlan::bilinear(h, height),
        &ResizePlan::bilinear(w, width),
    ))
}

/// Tape-free bilinear upsampling of `[B,C,h,w]` to `[B,C,height,width]`.
pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.upsample_bilinear(v, height, width)?;
    Ok(tape.value(out).clone())
}

/// A square-kernel 2-D convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geom: ConvGeometry,
}

impl<T: Real> Conv2dLayer<T> {
    /// Zero-initialized layer with "same" padding.
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, dilation: usize) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kernel == 0 || stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv layer needs positive sizes (c_in {c_in}, c_out {c_out}, k {kernel}, stride {stride}, dilation {dilation})"
            )));
        }
        Ok(Self {
            weight: Tensor::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Tensor::zeros(&[c_out]),
            geom: ConvGeometry::same(kernel, stride, dilation),
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn fan_in(&self) -> usize {
        self.c_in() * self.kernel() * self.kernel()
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    /// Kaiming-style uniform weights in `±sqrt(6 / fan_in)`, zero bias.
    pub fn init_params(&mut self, rng: &mut impl Rng) {
        let bound = (6.0 / self.fan_in() as f64).sqrt();
        for v in self.weight.data_mut() {
            *v = T::from_f64(rng.gen_range(-bound..bound));
        }
        self.bias.data_mut().fill(T::zero());
    }

    /// Records the layer's parameters on `tape`.
    pub fn attach(&self, tape: &mut Tape<T>, trainable: bool) -> ConvVars {
        ConvVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
            geom: self.geom,
        }
    }

    /// Tape-free forward pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(conv2d_forward(x, &self.weight, Some(&self.bias), self.geom)?.0)
    }
}

/// Tape handles of a [`Conv2dLayer`]'s parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub geom: ConvGeometry,
}

impl ConvVars {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, Some(self.bias), self.geom)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn pointwise_identity() {
        let mut layer = Conv2dLayer::<f64>::new(1, 1, 1, 1, 1).unwrap();
        layer.weight.data_mut()[0] = 1.0;
        let x = Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn box_sum_interior_and_corner() {
        let mut layer = Conv2dLayer::<f64>::new(1, 1, 3, 1, 1).unwrap();
        layer.weight.data_mut().fill(1.0);
        let x = Tensor::ones(&[1, 1, 5, 5]);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.get(&[0, 0, 2, 2]), 9.0);
        assert_eq!(y.get(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.get(&[0, 0, 0, 2]), 6.0);
    }

    #[test]
    fn strided_output_size() {
        let g = ConvGeometry::same(3, 2, 1);
        assert_eq!(g.output_size(48, 3).unwrap(), 24);
        let g = ConvGeometry::same(3, 1, 4);
        assert_eq!(g.output_size(12, 3).unwrap(), 12);
        let g = ConvGeometry {
            stride: 1,
            dilation: 4,
            padding: 0,
        };
        assert!(g.output_size(8, 3).is_err());
    }

    #[test]
    fn channel_mismatch() {
        let layer = Conv2dLayer::<f64>::new(2, 1, 1, 1, 1).unwrap();
        let x = Tensor::ones(&[1, 3, 2, 2]);
        assert!(matches!(layer.forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let x = Tensor::full(&[1, 2, 3, 3], 0.7f64);
        let y = upsample_bilinear(&x, 7, 9).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let one = Tensor::full(&[1, 1, 1, 1], -2.5f64);
        let y = upsample_bilinear(&one, 4, 5).unwrap();
        assert!(y.data().iter().all(|&v| v == -2.5));
    }

    #[test]
    fn upsample_identity_is_exact() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f64).sin());
        assert_eq!(upsample_bilinear(&x, 4, 5).unwrap(), x);
    }

    #[test]
    fn upsample_rejects_shrinking() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(upsample_bilinear(&x, 2, 4).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut a = Conv2dLayer::<f32>::new(8, 16, 3, 1, 2).unwrap();
        let mut b = a.clone();
        let mut c = a.clone();
        a.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        b.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        c.init_params(&mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        assert_ne!(a.weight, c.weight);
        let bound = (6.0f32 / 72.0).sqrt();
        assert!(a.weight.data().iter().all(|v| v.abs() <= bound));
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
    }
}
