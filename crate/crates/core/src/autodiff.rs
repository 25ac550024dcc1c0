//! Minimal reverse-mode autodiff over dense `[C, H, W]` float tensors.
//!
//! A [`Tape`] records the forward graph of one sample; [`Tape::backward`]
//! walks it in reverse and accumulates gradients into every node that
//! requires them. The op set is exactly what the restoration network and its
//! losses need. All ops are deterministic: same inputs, same outputs, same
//! gradients, bit for bit.
//!
//! Convolutions materialize a padded plane per channel and then run
//! span-copy im2col + GEMM (grouped) or tight valid loops (depthwise), which
//! keeps the inner loops free of bounds logic.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::imaging::RegionMasks;

/// Dense tensor in `[channels, height, width]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::shape(
                "tensor data",
                format!("{}", c * h * w),
                format!("{}", data.len()),
            ));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            c: 1,
            h: 1,
            w: 1,
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, o: &Self) -> bool {
        self.c == o.c && self.h == o.h && self.w == o.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    /// `[H, W, C]` image to `[C, H, W]` tensor.
    pub fn from_image(img: &ImageTensor) -> Self {
        let (h, w, c) = img.dims();
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[ch * h * w + y * w + x] = img.get(y, x, ch);
                }
            }
        }
        Self { c, h, w, data }
    }

    /// `[C, H, W]` tensor back to an `[H, W, C]` image.
    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::from_fn(self.h, self.w, self.c, |y, x, ch| {
            self.data[ch * self.h * self.w + y * self.w + x]
        })
    }

    /// Single-channel tensor from a binary mask.
    pub fn from_mask(mask: &ndarray::Array2<bool>) -> Self {
        let (h, w) = mask.dim();
        Self {
            c: 1,
            h,
            w,
            data: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Indicator of the occluded (non-clear) region from region masks.
    pub fn occluded_indicator(masks: &RegionMasks) -> Self {
        let (h, w) = masks.dims();
        let mut t = Tensor::zeros(1, h, w);
        for (i, (&p, &c)) in masks.partial.iter().zip(masks.complete.iter()).enumerate() {
            t.data[i] = if p || c { 1.0 } else { 0.0 };
        }
        t
    }
}

/// Spatial padding mode of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    /// No padding; output shrinks by `k - 1`.
    Valid,
    /// Zero padding of the given width.
    Zero(usize),
    /// Mirror padding of the given width (no edge repeat).
    Reflect(usize),
}

impl Pad {
    fn width(self) -> usize {
        match self {
            Pad::Valid => 0,
            Pad::Zero(p) | Pad::Reflect(p) => p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Pad,
        groups: usize,
    },
    LeakyRelu {
        input: NodeId,
        slope: f32,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    /// `[C,H,W] * [1,H,W]`, mask broadcast across channels.
    MulBroadcast {
        feat: NodeId,
        mask: NodeId,
    },
    /// `mul * x + add` with compile-time constants; only the slope
    /// matters to the gradient.
    Affine {
        input: NodeId,
        mul: f32,
    },
    Abs {
        input: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    UpsampleNearest2 {
        input: NodeId,
    },
    AvgPool2 {
        input: NodeId,
    },
    MeanAll {
        input: NodeId,
    },
    /// Elementwise `x^e`; gradient defined as 0 where `x <= 0`.
    PowConst {
        input: NodeId,
        exp: f32,
    },
}

/// Forward/backward recording for one forward pass.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f32>>>,
    ops: Vec<Op>,
    needs: Vec<bool>,
}

/// Reflect an index into `[0, n)` (mirror, no edge repeat).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Per-axis source index of each padded coordinate; `usize::MAX` marks a
/// zero-padded (no-source) cell.
fn pad_index_map(n: usize, p: usize, pad: Pad) -> Vec<usize> {
    (0..n + 2 * p)
        .map(|i| {
            let s = i as isize - p as isize;
            match pad {
                Pad::Valid | Pad::Zero(_) => {
                    if s >= 0 && (s as usize) < n {
                        s as usize
                    } else {
                        usize::MAX
                    }
                }
                Pad::Reflect(_) => reflect(s, n),
            }
        })
        .collect()
}

/// Materializes one padded channel plane.
fn fill_padded(plane: &[f32], w: usize, ys: &[usize], xs: &[usize], out: &mut [f32]) {
    let wp = xs.len();
    for (py, &sy) in ys.iter().enumerate() {
        let row = &mut out[py * wp..(py + 1) * wp];
        if sy == usize::MAX {
            row.fill(0.0);
        } else {
            let src = &plane[sy * w..sy * w + w];
            for (px, &sx) in xs.iter().enumerate() {
                row[px] = if sx == usize::MAX { 0.0 } else { src[sx] };
            }
        }
    }
}

/// Folds a padded gradient plane back onto the source plane.
fn fold_padded(dpad: &[f32], w: usize, ys: &[usize], xs: &[usize], dst: &mut [f32]) {
    let wp = xs.len();
    for (py, &sy) in ys.iter().enumerate() {
        if sy == usize::MAX {
            continue;
        }
        let row = &dpad[py * wp..(py + 1) * wp];
        let out = &mut dst[sy * w..sy * w + w];
        for (px, &sx) in xs.iter().enumerate() {
            if sx != usize::MAX {
                out[sx] += row[px];
            }
        }
    }
}

fn im2col(
    input: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let (c_in, h, w) = input.shape();
    let p = pad.width();
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let ys = pad_index_map(h, p, pad);
    let xs = pad_index_map(w, p, pad);
    let mut padded = vec![0.0f32; hp * wp];
    let mut cols = Array2::zeros((c_in * kh * kw, ho * wo));
    let cols_slice = cols.as_slice_mut().expect("cols contiguous");
    for ci in 0..c_in {
        fill_padded(
            &input.data[ci * h * w..(ci + 1) * h * w],
            w,
            &ys,
            &xs,
            &mut padded,
        );
        for ky in 0..kh {
            for kx in 0..kw {
                let row_base = (ci * kh * kw + ky * kw + kx) * ho * wo;
                if stride == 1 {
                    for y in 0..ho {
                        let src = &padded[(y + ky) * wp + kx..(y + ky) * wp + kx + wo];
                        cols_slice[row_base + y * wo..row_base + (y + 1) * wo].copy_from_slice(src);
                    }
                } else {
                    for y in 0..ho {
                        let src_row = (y * stride + ky) * wp + kx;
                        let dst = &mut cols_slice[row_base + y * wo..row_base + (y + 1) * wo];
                        for (x, d) in dst.iter_mut().enumerate() {
                            *d = padded[src_row + x * stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_accumulate(
    d_cols: &Array2<f32>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let p = pad.width();
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let ys = pad_index_map(h, p, pad);
    let xs = pad_index_map(w, p, pad);
    let d_slice = d_cols.as_slice().expect("contiguous");
    let mut dpad = vec![0.0f32; hp * wp];
    for ci in 0..c_in {
        dpad.fill(0.0);
        for ky in 0..kh {
            for kx in 0..kw {
                let row_base = (ci * kh * kw + ky * kw + kx) * ho * wo;
                if stride == 1 {
                    for y in 0..ho {
                        let src = &d_slice[row_base + y * wo..row_base + (y + 1) * wo];
                        let dst = &mut dpad[(y + ky) * wp + kx..(y + ky) * wp + kx + wo];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                } else {
                    for y in 0..ho {
                        let dst_row = (y * stride + ky) * wp + kx;
                        let src = &d_slice[row_base + y * wo..row_base + (y + 1) * wo];
                        for (x, &s) in src.iter().enumerate() {
                            dpad[dst_row + x * stride] += s;
                        }
                    }
                }
            }
        }
        fold_padded(&dpad, w, &ys, &xs, &mut dx[ci * h * w..(ci + 1) * h * w]);
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad,
    ho: usize,
    wo: usize,
) -> Tensor {
    let (c, h, w) = input.shape();
    let p = pad.width();
    let wp = w + 2 * p;
    let ys = pad_index_map(h, p, pad);
    let xs = pad_index_map(w, p, pad);
    let mut padded = vec![0.0f32; (h + 2 * p) * wp];
    let mut out = Tensor::zeros(c, ho, wo);
    for ch in 0..c {
        fill_padded(
            &input.data[ch * h * w..(ch + 1) * h * w],
            w,
            &ys,
            &xs,
            &mut padded,
        );
        let kern = &weight.data[ch * kh * kw..(ch + 1) * kh * kw];
        let b = bias.map(|b| b[ch]).unwrap_or(0.0);
        let out_plane = &mut out.data[ch * ho * wo..(ch + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0f32;
                for ky in 0..kh {
                    let src = &padded[(y * stride + ky) * wp + x * stride
                        ..(y * stride + ky) * wp + x * stride + kw];
                    let kr = &kern[ky * kw..ky * kw + kw];
                    for i in 0..kw {
                        acc += kr[i] * src[i];
                    }
                }
                out_plane[y * wo + x] = acc + b;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.values[id.0].len(), 1);
        self.values[id.0].data[0]
    }

    /// Gradient of the last `backward` root w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.needs.push(needs_grad);
        NodeId(self.values.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    fn unary<F: Fn(f32) -> f32>(&mut self, input: NodeId, op: Op, f: F) -> NodeId {
        let v = &self.values[input.0];
        let out = Tensor {
            c: v.c,
            h: v.h,
            w: v.w,
            data: v.data.iter().map(|&x| f(x)).collect(),
        };
        let ng = self.needs(input);
        self.push(out, op, ng)
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f32) -> NodeId {
        self.unary(input, Op::LeakyRelu { input, slope }, |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Op::Relu { input }, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Op::Sigmoid { input }, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn affine(&mut self, input: NodeId, mul: f32, add: f32) -> NodeId {
        self.unary(input, Op::Affine { input, mul }, |x| mul * x + add)
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Op::Abs { input }, f32::abs)
    }

    pub fn pow_const(&mut self, input: NodeId, exp: f32) -> NodeId {
        self.unary(input, Op::PowConst { input, exp }, |x| x.powf(exp))
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        if !va.same_shape(vb) {
            return Err(Error::shape(
                what,
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        Ok(va.shape())
    }

    fn binary<F: Fn(f32, f32) -> f32>(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        op: Op,
        f: F,
    ) -> Result<NodeId> {
        let (c, h, w) = self.binary_shapes(a, b, what)?;
        let data = self.values[a.0]
            .data
            .iter()
            .zip(self.values[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { c, h, w, data }, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", Op::Div { a, b }, |x, y| x / y)
    }

    pub fn mul_broadcast(&mut self, feat: NodeId, mask: NodeId) -> Result<NodeId> {
        let vf = &self.values[feat.0];
        let vm = &self.values[mask.0];
        if vm.c != 1 || vm.h != vf.h || vm.w != vf.w {
            return Err(Error::shape(
                "mul_broadcast mask",
                format!("1x{}x{}", vf.h, vf.w),
                format!("{:?}", vm.shape()),
            ));
        }
        let hw = vf.h * vf.w;
        let mut data = Vec::with_capacity(vf.len());
        for c in 0..vf.c {
            let plane = &vf.data[c * hw..(c + 1) * hw];
            for (v, m) in plane.iter().zip(&vm.data) {
                data.push(v * m);
            }
        }
        let out = Tensor {
            c: vf.c,
            h: vf.h,
            w: vf.w,
            data,
        };
        let ng = self.needs(feat) || self.needs(mask);
        Ok(self.push(out, Op::MulBroadcast { feat, mask }, ng))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let (h, w) = {
            let v = &self.values[parts[0].0];
            (v.h, v.w)
        };
        let mut c_total = 0;
        for &p in parts {
            let v = &self.values[p.0];
            if v.h != h || v.w != w {
                return Err(Error::shape(
                    "concat",
                    format!("_x{h}x{w}"),
                    format!("{:?}", v.shape()),
                ));
            }
            c_total += v.c;
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            data.extend_from_slice(&self.values[p.0].data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor {
                c: c_total,
                h,
                w,
                data,
            },
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn upsample_nearest2(&mut self, input: NodeId) -> NodeId {
        let v = &self.values[input.0];
        let (c, h, w) = v.shape();
        let mut out = Tensor::zeros(c, h * 2, w * 2);
        for ch in 0..c {
            for y in 0..2 * h {
                let src = &v.data[ch * h * w + (y / 2) * w..ch * h * w + (y / 2) * w + w];
                let dst =
                    &mut out.data[ch * 4 * h * w + y * 2 * w..ch * 4 * h * w + (y + 1) * 2 * w];
                for x in 0..w {
                    dst[2 * x] = src[x];
                    dst[2 * x + 1] = src[x];
                }
            }
        }
        let ng = self.needs(input);
        self.push(out, Op::UpsampleNearest2 { input }, ng)
    }

    /// 2x2 mean pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn avg_pool2(&mut self, input: NodeId) -> NodeId {
        let v = &self.values[input.0];
        let (c, h, w) = v.shape();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(c, ho, wo);
        for ch in 0..c {
            for y in 0..ho {
                let top = &v.data[ch * h * w + 2 * y * w..ch * h * w + 2 * y * w + w];
                let bot = &v.data[ch * h * w + (2 * y + 1) * w..ch * h * w + (2 * y + 1) * w + w];
                let dst = &mut out.data[ch * ho * wo + y * wo..ch * ho * wo + (y + 1) * wo];
                for x in 0..wo {
                    dst[x] = (top[2 * x] + top[2 * x + 1] + bot[2 * x] + bot[2 * x + 1]) * 0.25;
                }
            }
        }
        let ng = self.needs(input);
        self.push(out, Op::AvgPool2 { input }, ng)
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let v = &self.values[input.0];
        let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let ng = self.needs(input);
        self.push(Tensor::scalar(mean as f32), Op::MeanAll { input }, ng)
    }

    /// 2-D convolution (cross-correlation) with optional bias.
    ///
    /// `weight` is interpreted as `[c_out, c_in/groups, kh, kw]` flattened in
    /// that order; `groups` must be 1 or equal to the input channel count
    /// (depthwise).
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        kernel: (usize, usize),
        stride: usize,
        pad: Pad,
        groups: usize,
    ) -> Result<NodeId> {
        let (kh, kw) = kernel;
        let (c_in, h, w) = self.values[input.0].shape();
        if groups != 1 && groups != c_in {
            return Err(Error::Config(format!(
                "conv groups must be 1 or {c_in}, got {groups}"
            )));
        }
        let c_in_g = c_in / groups;
        let wlen = self.values[weight.0].len();
        if wlen % (c_in_g * kh * kw) != 0 {
            return Err(Error::shape(
                "conv weight",
                format!("multiple of {}", c_in_g * kh * kw),
                format!("{wlen}"),
            ));
        }
        let c_out = wlen / (c_in_g * kh * kw);
        if groups == c_in && c_out != c_in {
            return Err(Error::Config(
                "depthwise conv requires c_out == c_in".into(),
            ));
        }
        let p = pad.width();
        if h + 2 * p < kh || w + 2 * p < kw {
            return Err(Error::shape(
                "conv input",
                format!("at least {kh}x{kw} after padding"),
                format!("{h}x{w} with pad {p}"),
            ));
        }
        let ho = (h + 2 * p - kh) / stride + 1;
        let wo = (w + 2 * p - kw) / stride + 1;

        let out = if groups == 1 {
            let cols = im2col(&self.values[input.0], kh, kw, stride, pad, ho, wo);
            let wv = &self.values[weight.0];
            let w_mat = ArrayView2::from_shape((c_out, c_in_g * kh * kw), wv.data.as_slice())
                .expect("weight shape checked");
            let out_mat = w_mat.dot(&cols);
            let mut data = out_mat.into_raw_vec_and_offset().0;
            if let Some(b) = bias {
                let bv = &self.values[b.0];
                for (co, &bval) in bv.data.iter().enumerate() {
                    for v in &mut data[co * ho * wo..(co + 1) * ho * wo] {
                        *v += bval;
                    }
                }
            }
            Tensor {
                c: c_out,
                h: ho,
                w: wo,
                data,
            }
        } else {
            depthwise_forward(
                &self.values[input.0],
                &self.values[weight.0],
                bias.map(|b| self.values[b.0].data.as_slice()),
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            )
        };

        let ng =
            self.needs(input) || self.needs(weight) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                kh,
                kw,
                stride,
                pad,
                groups,
            },
            ng,
        ))
    }

    /// Backpropagates from a scalar node, accumulating gradients into every
    /// node that requires them.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(Error::Config("backward root must be scalar".into()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.needs[i] || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            let op = self.ops[i].clone();
            self.apply_backward(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn apply_backward(&mut self, node_idx: usize, op: &Op, g: &[f32]) {
        let needs = &self.needs;
        let values = &self.values;
        let grads = &mut self.grads;
        // Values and gradients live in separate fields, so one grad buffer
        // can be borrowed mutably while values stay readable.
        macro_rules! gbuf {
            ($id:expr) => {{
                let len = values[$id.0].len();
                grads[$id.0]
                    .get_or_insert_with(|| vec![0.0; len])
                    .as_mut_slice()
            }};
        }

        match *op {
            Op::Leaf => {}
            Op::LeakyRelu { input, slope } => {
                if needs[input.0] {
                    let x = &values[input.0].data;
                    let d = gbuf!(input);
                    for i in 0..g.len() {
                        d[i] += g[i] * if x[i] > 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::Relu { input } => {
                if needs[input.0] {
                    let x = &values[input.0].data;
                    let d = gbuf!(input);
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { input } => {
                if needs[input.0] {
                    let y = &values[node_idx].data;
                    let d = gbuf!(input);
                    for i in 0..g.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Add { a, b } => {
                if needs[a.0] {
                    let d = gbuf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i];
                    }
                }
                if needs[b.0] {
                    let d = gbuf!(b);
                    for i in 0..g.len() {
                        d[i] += g[i];
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs[a.0] {
                    let d = gbuf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i];
                    }
                }
                if needs[b.0] {
                    let d = gbuf!(b);
                    for i in 0..g.len() {
                        d[i] -= g[i];
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs[a.0] {
                    let bv = &values[b.0].data;
                    let d = gbuf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if needs[b.0] {
                    let av = &values[a.0].data;
                    let d = gbuf!(b);
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div { a, b } => {
                let bv = &values[b.0].data;
                if needs[a.0] {
                    let d = gbuf!(a);
                    for i in 0..g.len() {
                        d[i] += g[i] / bv[i];
                    }
                }
                if needs[b.0] {
                    let y = &values[node_idx].data;
                    let d = gbuf!(b);
                    for i in 0..g.len() {
                        d[i] -= g[i] * y[i] / bv[i];
                    }
                }
            }
            Op::MulBroadcast { feat, mask } => {
                let (c, h, w) = values[feat.0].shape();
                let hw = h * w;
                if needs[feat.0] {
                    let m = &values[mask.0].data;
                    let d = gbuf!(feat);
                    for ch in 0..c {
                        for i in 0..hw {
                            d[ch * hw + i] += g[ch * hw + i] * m[i];
                        }
                    }
                }
                if needs[mask.0] {
                    let f = &values[feat.0].data;
                    let d = gbuf!(mask);
                    for ch in 0..c {
                        for i in 0..hw {
                            d[i] += g[ch * hw + i] * f[ch * hw + i];
                        }
                    }
                }
            }
            Op::Affine { input, mul } => {
                if needs[input.0] {
                    let d = gbuf!(input);
                    for i in 0..g.len() {
                        d[i] += mul * g[i];
                    }
                }
            }
            Op::Abs { input } => {
                if needs[input.0] {
                    let x = &values[input.0].data;
                    let d = gbuf!(input);
                    for i in 0..g.len() {
                        d[i] += g[i]
                            * if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                    }
                }
            }
            Op::Concat { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = values[p.0].len();
                    if needs[p.0] {
                        let d = gbuf!(p);
                        for (dv, &gv) in d.iter_mut().zip(&g[offset..offset + len]) {
                            *dv += gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::UpsampleNearest2 { input } => {
                if needs[input.0] {
                    let (c, h, w) = values[input.0].shape();
                    let d = gbuf!(input);
                    for ch in 0..c {
                        for y in 0..2 * h {
                            let grow =
                                &g[ch * 4 * h * w + y * 2 * w..ch * 4 * h * w + (y + 1) * 2 * w];
                            let drow =
                                &mut d[ch * h * w + (y / 2) * w..ch * h * w + (y / 2) * w + w];
                            for x in 0..w {
                                drow[x] += grow[2 * x] + grow[2 * x + 1];
                            }
                        }
                    }
                }
            }
            Op::AvgPool2 { input } => {
                if needs[input.0] {
                    let (c, h, w) = values[input.0].shape();
                    let (ho, wo) = (h / 2, w / 2);
                    let d = gbuf!(input);
                    for ch in 0..c {
                        for y in 0..ho {
                            let grow = &g[ch * ho * wo + y * wo..ch * ho * wo + (y + 1) * wo];
                            for x in 0..wo {
                                let gi = grow[x] * 0.25;
                                let base = ch * h * w + 2 * y * w + 2 * x;
                                d[base] += gi;
                                d[base + 1] += gi;
                                d[base + w] += gi;
                                d[base + w + 1] += gi;
                            }
                        }
                    }
                }
            }
            Op::MeanAll { input } => {
                if needs[input.0] {
                    let n = values[input.0].len();
                    let gi = g[0] / n as f32;
                    let d = gbuf!(input);
                    for dv in d.iter_mut() {
                        *dv += gi;
                    }
                }
            }
            Op::PowConst { input, exp } => {
                if needs[input.0] {
                    let x = &values[input.0].data;
                    let d = gbuf!(input);
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i] * exp * x[i].powf(exp - 1.0);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                kh,
                kw,
                stride,
                pad,
                groups,
            } => {
                let (c_in, h, w) = values[input.0].shape();
                let c_in_g = c_in / groups;
                let c_out = values[weight.0].len() / (c_in_g * kh * kw);
                let p = pad.width();
                let ho = (h + 2 * p - kh) / stride + 1;
                let wo = (w + 2 * p - kw) / stride + 1;

                if let Some(b) = bias {
                    if needs[b.0] {
                        let d = gbuf!(b);
                        for (co, dv) in d.iter_mut().enumerate() {
                            *dv += g[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f32>();
                        }
                    }
                }

                if groups == 1 {
                    let g_mat = ArrayView2::from_shape((c_out, ho * wo), g).expect("grad shape");
                    let need_w = needs[weight.0];
                    let need_x = needs[input.0];
                    if need_w || need_x {
                        let cols = im2col(&values[input.0], kh, kw, stride, pad, ho, wo);
                        if need_w {
                            let dw = g_mat.dot(&cols.t());
                            let (dw_vec, _) = dw.into_raw_vec_and_offset();
                            let d = gbuf!(weight);
                            for (dv, gv) in d.iter_mut().zip(dw_vec) {
                                *dv += gv;
                            }
                        }
                        if need_x {
                            let w_mat = ArrayView2::from_shape(
                                (c_out, c_in_g * kh * kw),
                                values[weight.0].data.as_slice(),
                            )
                            .expect("weight shape");
                            let d_cols = w_mat.t().dot(&g_mat);
                            let d = gbuf!(input);
                            col2im_accumulate(&d_cols, c_in, h, w, kh, kw, stride, pad, ho, wo, d);
                        }
                    }
                } else {
                    // Depthwise: padded-plane accumulation per channel.
                    let (hp, wp) = (h + 2 * p, w + 2 * p);
                    let ys = pad_index_map(h, p, pad);
                    let xs = pad_index_map(w, p, pad);
                    let wdata = &values[weight.0].data;
                    if needs[input.0] {
                        let d = gbuf!(input);
                        let mut dpad = vec![0.0f32; hp * wp];
                        for ch in 0..c_in {
                            dpad.fill(0.0);
                            let kern = &wdata[ch * kh * kw..(ch + 1) * kh * kw];
                            for y in 0..ho {
                                let grow = &g[ch * ho * wo + y * wo..ch * ho * wo + (y + 1) * wo];
                                for ky in 0..kh {
                                    let prow = (y * stride + ky) * wp;
                                    let kr = &kern[ky * kw..ky * kw + kw];
                                    for x in 0..wo {
                                        let gi = grow[x];
                                        let base = prow + x * stride;
                                        for i in 0..kw {
                                            dpad[base + i] += gi * kr[i];
                                        }
                                    }
                                }
                            }
                            fold_padded(&dpad, w, &ys, &xs, &mut d[ch * h * w..(ch + 1) * h * w]);
                        }
                    }
                    if needs[weight.0] {
                        let d = gbuf!(weight);
                        let mut padded = vec![0.0f32; hp * wp];
                        for ch in 0..c_in {
                            fill_padded(
                                &values[input.0].data[ch * h * w..(ch + 1) * h * w],
                                w,
                                &ys,
                                &xs,
                                &mut padded,
                            );
                            for y in 0..ho {
                                let grow = &g[ch * ho * wo + y * wo..ch * ho * wo + (y + 1) * wo];
                                for ky in 0..kh {
                                    let prow = (y * stride + ky) * wp;
                                    for x in 0..wo {
                                        let gi = grow[x];
                                        let base = prow + x * stride;
                                        for i in 0..kw {
                                            d[ch * kh * kw + ky * kw + i] += gi * padded[base + i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
