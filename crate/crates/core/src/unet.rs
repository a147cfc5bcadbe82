//! Convolutional U-Net denoiser for FS-GCC magnitude matrices.
//!
//! Everything (forward, backward, Adam, training loop, persistence) is
//! implemented here on plain `f64` buffers. Convolutions go through
//! im2col + GEMM.
//!
//! Wiring for an encoder of depth `D`:
//!
//! ```text
//! e0 = enc0(x), e1 = enc1(e0), ..., e[D-1]
//! d0 = dec0(up(e[D-1]))
//! dj = decj(up(concat(d[j-1], e[D-1-j])))      j = 1..D
//! y  = relu(conv1x1(d[D-1]))
//! ```
//!
//! Encoder convolutions use stride 2; decoder convolutions follow a 2x
//! nearest upsampling and use stride 1, so every decoder stage doubles the
//! resolution back.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::UNetError;

pub const MODEL_MAGIC: &[u8; 10] = b"FSGCCUNET1";
/// Trainable-parameter count quoted for the reference architecture.
pub const REFERENCE_PARAMETER_COUNT: usize = 301_097;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Dense `(batch, channels, height, width)` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self, UNetError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(UNetError::Shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(UNetError::Shape(format!("non-finite value at {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    fn item(&self, b: usize) -> &[f64] {
        let n = self.shape[1] * self.plane();
        &self.data[b * n..(b + 1) * n]
    }

    fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.shape[1] * self.plane();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Stacks equally shaped `1 × C × H × W` items along the batch axis.
    pub fn stack(items: &[&[f64]], channels: usize, height: usize, width: usize) -> Result<Self, UNetError> {
        let n = channels * height * width;
        let mut data = Vec::with_capacity(items.len() * n);
        for item in items {
            if item.len() != n {
                return Err(UNetError::Shape(format!("item of {} values, expected {n}", item.len())));
            }
            data.extend_from_slice(item);
        }
        Self::new([items.len(), channels, height, width], data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// `(out, in, kh, kw)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: vec![0.0; out_channels * in_channels * kernel.0 * kernel.1],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-style uniform fan-in initialisation, zero bias.
    pub fn he_uniform<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let mut c = Self::zeros(in_channels, out_channels, kernel, stride);
        let bound = (6.0 / (in_channels * kernel.0 * kernel.1) as f64).sqrt();
        for w in c.weight.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        c
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    fn geometry(&self, h: usize, w: usize) -> ConvGeometry {
        let (oh, pt) = same_padding(h, self.kernel.0, self.stride.0);
        let (ow, pl) = same_padding(w, self.kernel.1, self.stride.1);
        ConvGeometry { h, w, oh, ow, pt, pl }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pt: usize,
    pl: usize,
}

/// Output length and leading pad for "same" padding; the odd remainder of
/// the total pad goes to the high-index edge.
fn same_padding(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (out, total / 2)
}

fn im2col(x: &[f64], conv: &Conv2d, g: &ConvGeometry, cols: &mut [f64]) {
    let (kh, kw) = conv.kernel;
    let (sh, sw) = conv.stride;
    let p = g.oh * g.ow;
    for ci in 0..conv.in_channels {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * sh + ky) as isize - g.pt as isize;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * sw + kx) as isize - g.pl as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], conv: &Conv2d, g: &ConvGeometry, dx: &mut [f64]) {
    let (kh, kw) = conv.kernel;
    let (sh, sw) = conv.stride;
    let p = g.oh * g.ow;
    for ci in 0..conv.in_channels {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * sh + ky) as isize - g.pt as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, s) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * sw + kx) as isize - g.pl as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// `C (m×n) = alpha · op(A) · op(B) + beta · C` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride-1 "same" kernel bank laid out `(out, in, kh, kw)`.
struct Taps<'a> {
    weight: &'a [f64],
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pt: usize,
    pl: usize,
}

/// Direct stride-1 convolution of one `cin × h × w` item into `cout × h × w`:
/// row-wise AXPYs, which beat im2col + GEMM for the narrow channel counts
/// used here.
fn direct_forward(x: &[f64], t: &Taps, bias: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let plane = h * w;
    for co in 0..t.cout {
        let oplane = &mut out[co * plane..(co + 1) * plane];
        oplane.fill(bias[co]);
        for ci in 0..t.cin {
            let iplane = &x[ci * plane..(ci + 1) * plane];
            let wk = &t.weight[(co * t.cin + ci) * t.kh * t.kw..][..t.kh * t.kw];
            for oy in 0..h {
                let orow = &mut oplane[oy * w..(oy + 1) * w];
                for ky in 0..t.kh {
                    let iy = (oy + ky) as isize - t.pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..t.kw {
                        let (o0, o1, i0) = tap_span(kx, t.pl, w);
                        let wv = wk[ky * t.kw + kx];
                        for (o, i) in orow[o0..o1].iter_mut().zip(&irow[i0..]) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[o0, o1)` touched by tap `kx`, and the first input column.
fn tap_span(kx: usize, pl: usize, w: usize) -> (usize, usize, usize) {
    let o0 = pl.saturating_sub(kx);
    let o1 = w.min((w + pl).saturating_sub(kx));
    let i0 = (o0 + kx).saturating_sub(pl);
    (o0, o1.max(o0), i0)
}

/// Accumulates input and weight gradients of `direct_forward`.
fn direct_backward(x: &[f64], t: &Taps, h: usize, w: usize, dy: &[f64], dx: &mut [f64], dw: &mut [f64]) {
    let plane = h * w;
    for co in 0..t.cout {
        let gplane = &dy[co * plane..(co + 1) * plane];
        for ci in 0..t.cin {
            let iplane = &x[ci * plane..(ci + 1) * plane];
            let dplane = &mut dx[ci * plane..(ci + 1) * plane];
            let base = (co * t.cin + ci) * t.kh * t.kw;
            for oy in 0..h {
                let grow = &gplane[oy * w..(oy + 1) * w];
                for ky in 0..t.kh {
                    let iy = (oy + ky) as isize - t.pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let r = iy as usize * w..(iy as usize + 1) * w;
                    let irow = &iplane[r.clone()];
                    let drow = &mut dplane[r];
                    for kx in 0..t.kw {
                        let (o0, o1, i0) = tap_span(kx, t.pl, w);
                        let wv = t.weight[base + ky * t.kw + kx];
                        let mut acc = 0.0;
                        for ((gv, i), d) in grow[o0..o1].iter().zip(&irow[i0..]).zip(&mut drow[i0..]) {
                            acc += gv * i;
                            *d += wv * gv;
                        }
                        dw[base + ky * t.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

fn plain_taps<'a>(conv: &'a Conv2d, g: &ConvGeometry) -> Taps<'a> {
    Taps {
        weight: &conv.weight,
        cin: conv.in_channels,
        cout: conv.out_channels,
        kh: conv.kernel.0,
        kw: conv.kernel.1,
        pt: g.pt,
        pl: g.pl,
    }
}

/// Collapses a kernel applied to a 2x nearest-upsampled input into one
/// kernel per output phase on the original grid. For output row `2q + p`
/// and tap `k`, the source row is `q + floor((p + k - pad) / 2)`.
#[derive(Debug, Clone)]
struct PhaseMap {
    /// First low-resolution offset for phase 0 and 1.
    start: [isize; 2],
    len: [usize; 2],
}

impl PhaseMap {
    fn new(k: usize, pad: usize) -> Self {
        let mut start = [0; 2];
        let mut len = [0; 2];
        for p in 0..2 {
            let lo = (p as isize - pad as isize).div_euclid(2);
            let hi = (p as isize + k as isize - 1 - pad as isize).div_euclid(2);
            start[p] = lo;
            len[p] = (hi - lo + 1) as usize;
        }
        Self { start, len }
    }

    fn slot(&self, p: usize, k: usize, pad: usize) -> usize {
        ((p as isize + k as isize - pad as isize).div_euclid(2) - self.start[p]) as usize
    }
}

struct UpsampledConv {
    ymap: PhaseMap,
    xmap: PhaseMap,
    pt: usize,
    pl: usize,
}

impl UpsampledConv {
    fn new(conv: &Conv2d) -> Self {
        // stride 1 on the doubled grid: total pad k - 1, low half first
        let pt = (conv.kernel.0 - 1) / 2;
        let pl = (conv.kernel.1 - 1) / 2;
        Self {
            ymap: PhaseMap::new(conv.kernel.0, pt),
            xmap: PhaseMap::new(conv.kernel.1, pl),
            pt,
            pl,
        }
    }

    fn phase_weights(&self, conv: &Conv2d, py: usize, px: usize) -> Vec<f64> {
        let (kh, kw) = conv.kernel;
        let (ny, nx) = (self.ymap.len[py], self.xmap.len[px]);
        let mut out = vec![0.0; conv.out_channels * conv.in_channels * ny * nx];
        for pair in 0..conv.out_channels * conv.in_channels {
            for ky in 0..kh {
                let j = self.ymap.slot(py, ky, self.pt);
                for kx in 0..kw {
                    let i = self.xmap.slot(px, kx, self.pl);
                    out[(pair * ny + j) * nx + i] += conv.weight[(pair * kh + ky) * kw + kx];
                }
            }
        }
        out
    }

    fn taps<'a>(&self, conv: &Conv2d, weight: &'a [f64], py: usize, px: usize) -> Taps<'a> {
        Taps {
            weight,
            cin: conv.in_channels,
            cout: conv.out_channels,
            kh: self.ymap.len[py],
            kw: self.xmap.len[px],
            pt: (-self.ymap.start[py]) as usize,
            pl: (-self.xmap.start[px]) as usize,
        }
    }
}

/// `conv2d_forward(upsample_nearest_2x(input), conv)` for a stride-1 layer,
/// evaluated on the low-resolution grid.
pub fn upsampled_conv2d_forward(input: &Tensor, conv: &Conv2d) -> Result<Tensor, UNetError> {
    check_conv_input(input, conv)?;
    if conv.stride != (1, 1) {
        return Err(UNetError::Shape("fused upsampling needs a stride-1 layer".into()));
    }
    let [n, _, h, w] = input.shape();
    let uc = UpsampledConv::new(conv);
    let mut out = Tensor::zeros([n, conv.out_channels, 2 * h, 2 * w]);
    let mut tmp = vec![0.0; conv.out_channels * h * w];
    for py in 0..2 {
        for px in 0..2 {
            let wp = uc.phase_weights(conv, py, px);
            let taps = uc.taps(conv, &wp, py, px);
            for b in 0..n {
                direct_forward(input.item(b), &taps, &conv.bias, h, w, &mut tmp);
                let o = out.item_mut(b);
                for c in 0..conv.out_channels {
                    for q in 0..h {
                        let dst = &mut o[(c * 2 * h + 2 * q + py) * 2 * w..][..2 * w];
                        let src = &tmp[(c * h + q) * w..][..w];
                        for (r, v) in src.iter().enumerate() {
                            dst[2 * r + px] = *v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of `upsampled_conv2d_forward`; the input gradient is on the
/// low-resolution grid.
pub fn upsampled_conv2d_backward(
    input: &Tensor,
    conv: &Conv2d,
    grad_output: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>), UNetError> {
    check_conv_input(input, conv)?;
    let [n, _, h, w] = input.shape();
    if grad_output.shape() != [n, conv.out_channels, 2 * h, 2 * w] {
        return Err(UNetError::Shape(format!(
            "upstream gradient {:?} does not match layer output",
            grad_output.shape()
        )));
    }
    let (kh, kw) = conv.kernel;
    let uc = UpsampledConv::new(conv);
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = vec![0.0; conv.weight.len()];
    let mut db = vec![0.0; conv.out_channels];
    for b in 0..n {
        let go = grad_output.item(b);
        for (c, d) in db.iter_mut().enumerate() {
            *d += go[c * 4 * h * w..(c + 1) * 4 * h * w].iter().sum::<f64>();
        }
    }
    let mut gphase = vec![0.0; conv.out_channels * h * w];
    for py in 0..2 {
        for px in 0..2 {
            let wp = uc.phase_weights(conv, py, px);
            let taps = uc.taps(conv, &wp, py, px);
            let mut dwp = vec![0.0; wp.len()];
            for b in 0..n {
                let go = grad_output.item(b);
                for c in 0..conv.out_channels {
                    for q in 0..h {
                        let src = &go[(c * 2 * h + 2 * q + py) * 2 * w..][..2 * w];
                        let dst = &mut gphase[(c * h + q) * w..][..w];
                        for (r, d) in dst.iter_mut().enumerate() {
                            *d = src[2 * r + px];
                        }
                    }
                }
                direct_backward(input.item(b), &taps, h, w, &gphase, dx.item_mut(b), &mut dwp);
            }
            let (ny, nx) = (taps.kh, taps.kw);
            for pair in 0..conv.out_channels * conv.in_channels {
                for ky in 0..kh {
                    let j = uc.ymap.slot(py, ky, uc.pt);
                    for kx in 0..kw {
                        let i = uc.xmap.slot(px, kx, uc.pl);
                        dw[(pair * kh + ky) * kw + kx] += dwp[(pair * ny + j) * nx + i];
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

fn check_conv_input(input: &Tensor, conv: &Conv2d) -> Result<(), UNetError> {
    if input.channels() != conv.in_channels {
        return Err(UNetError::Shape(format!(
            "input has {} channels, layer expects {}",
            input.channels(),
            conv.in_channels
        )));
    }
    if input.height() == 0 || input.width() == 0 {
        return Err(UNetError::Shape("empty spatial extent".into()));
    }
    Ok(())
}

/// Zero-padded "same" convolution (cross-correlation) with the layer's stride.
pub fn conv2d_forward(input: &Tensor, conv: &Conv2d) -> Result<Tensor, UNetError> {
    check_conv_input(input, conv)?;
    let g = conv.geometry(input.height(), input.width());
    let p = g.oh * g.ow;
    let k = conv.fan_in();
    let mut out = Tensor::zeros([input.batch(), conv.out_channels, g.oh, g.ow]);
    if conv.stride == (1, 1) {
        for b in 0..input.batch() {
            direct_forward(input.item(b), &plain_taps(conv, &g), &conv.bias, g.h, g.w, out.item_mut(b));
        }
        return Ok(out);
    }
    let mut cols = vec![0.0; k * p];
    for b in 0..input.batch() {
        im2col(input.item(b), conv, &g, &mut cols);
        let o = out.item_mut(b);
        for (c, bias) in conv.bias.iter().enumerate() {
            o[c * p..(c + 1) * p].fill(*bias);
        }
        gemm(conv.out_channels, k, p, &conv.weight, false, &cols, false, 1.0, o);
    }
    Ok(out)
}

/// Returns `(d input, d weight, d bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    conv: &Conv2d,
    grad_output: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>), UNetError> {
    check_conv_input(input, conv)?;
    let g = conv.geometry(input.height(), input.width());
    if grad_output.shape() != [input.batch(), conv.out_channels, g.oh, g.ow] {
        return Err(UNetError::Shape(format!(
            "upstream gradient {:?} does not match layer output",
            grad_output.shape()
        )));
    }
    let p = g.oh * g.ow;
    let k = conv.fan_in();
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = vec![0.0; conv.weight.len()];
    let mut db = vec![0.0; conv.out_channels];
    let direct = conv.stride == (1, 1);
    let (mut cols, mut dcols) = if direct { (Vec::new(), Vec::new()) } else { (vec![0.0; k * p], vec![0.0; k * p]) };
    for b in 0..input.batch() {
        let go = grad_output.item(b);
        for (c, d) in db.iter_mut().enumerate() {
            *d += go[c * p..(c + 1) * p].iter().sum::<f64>();
        }
        if direct {
            direct_backward(input.item(b), &plain_taps(conv, &g), g.h, g.w, go, dx.item_mut(b), &mut dw);
            continue;
        }
        im2col(input.item(b), conv, &g, &mut cols);
        // dW += dY · colsᵀ
        gemm(conv.out_channels, p, k, go, false, &cols, true, 1.0, &mut dw);
        // dcols = Wᵀ · dY
        gemm(k, conv.out_channels, p, &conv.weight, true, go, false, 0.0, &mut dcols);
        col2im(&dcols, conv, &g, dx.item_mut(b));
    }
    Ok((dx, dw, db))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

fn bn_forward_cached(input: &Tensor, bn: &mut BatchNorm, mode: Mode) -> Result<(Tensor, Option<BnCache>), UNetError> {
    let [n, c, _, _] = input.shape();
    if c != bn.channels() {
        return Err(UNetError::Shape(format!(
            "input has {c} channels, batch norm has {}",
            bn.channels()
        )));
    }
    let plane = input.plane();
    let mut out = Tensor::zeros(input.shape());
    match mode {
        Mode::Inference => {
            for ch in 0..c {
                let inv = 1.0 / (bn.running_var[ch] + bn.epsilon).sqrt();
                let (mu, ga, be) = (bn.running_mean[ch], bn.gamma[ch], bn.beta[ch]);
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        out.data[i] = ga * (input.data[i] - mu) * inv + be;
                    }
                }
            }
            Ok((out, None))
        }
        Mode::Train => {
            if n < 2 {
                return Err(UNetError::BatchTooSmall);
            }
            let m = (n * plane) as f64;
            let mut x_hat = Tensor::zeros(input.shape());
            let mut inv_std = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sum += input.data[off..off + plane].iter().sum::<f64>();
                }
                let mean = sum / m;
                let mut ss = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    ss += input.data[off..off + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = ss / m;
                let inv = 1.0 / (var + bn.epsilon).sqrt();
                inv_std[ch] = inv;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        let xh = (input.data[i] - mean) * inv;
                        x_hat.data[i] = xh;
                        out.data[i] = bn.gamma[ch] * xh + bn.beta[ch];
                    }
                }
                // running variance tracks the unbiased estimate
                let unbiased = ss / (m - 1.0);
                bn.running_mean[ch] = (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean;
                bn.running_var[ch] = (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * unbiased;
            }
            Ok((out, Some(BnCache { x_hat, inv_std })))
        }
    }
}

/// Batch normalisation. Train mode uses batch statistics and updates the
/// running averages; inference mode uses the running averages.
pub fn batchnorm_forward(input: &Tensor, bn: &mut BatchNorm, mode: Mode) -> Result<Tensor, UNetError> {
    bn_forward_cached(input, bn, mode).map(|(t, _)| t)
}

/// Returns `(d input, d gamma, d beta)` for a train-mode forward pass.
fn bn_backward(cache: &BnCache, bn: &BatchNorm, dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = dy.shape();
    let plane = dy.plane();
    let m = (n * plane) as f64;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sdy, mut sdy_xh) = (0.0, 0.0);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sdy += dy.data[i];
                sdy_xh += dy.data[i] * cache.x_hat.data[i];
            }
        }
        dgamma[ch] = sdy_xh;
        dbeta[ch] = sdy;
        let k = bn.gamma[ch] * cache.inv_std[ch] / m;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dx.data[i] = k * (m * dy.data[i] - sdy - cache.x_hat.data[i] * sdy_xh);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape,
        data: input.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Gradient through `relu`, given its output.
pub fn relu_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    Tensor {
        shape: grad.shape,
        data: output
            .data
            .iter()
            .zip(&grad.data)
            .map(|(y, g)| if *y > 0.0 { *g } else { 0.0 })
            .collect(),
    }
}

pub fn upsample_nearest_2x(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for p in 0..n * c {
        let src = &input.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Adjoint of `upsample_nearest_2x`: sums each 2×2 block.
pub fn upsample_nearest_2x_backward(grad: &Tensor) -> Tensor {
    let [n, c, h2, w2] = grad.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        let src = &grad.data[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out.data[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    out
}

/// Channel concatenation, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor, UNetError> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(UNetError::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..na {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Ok(Tensor {
        shape: [na, ca + cb, ha, wa],
        data,
    })
}

/// Splits a gradient of `concat_channels(a, b)` back into `(da, db)`.
pub fn split_channels(grad: &Tensor, first: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = grad.shape();
    let plane = h * w;
    let mut a = Tensor::zeros([n, first, h, w]);
    let mut b = Tensor::zeros([n, c - first, h, w]);
    for i in 0..n {
        let g = grad.item(i);
        a.item_mut(i).copy_from_slice(&g[..first * plane]);
        b.item_mut(i).copy_from_slice(&g[first * plane..]);
    }
    (a, b)
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64, UNetError> {
    if pred.shape() != target.shape() {
        return Err(UNetError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.data.len() as f64;
    Ok(pred.data.iter().zip(&target.data).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Gradient of `mse_loss` with respect to the prediction.
pub fn mse_loss_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor, UNetError> {
    if pred.shape() != target.shape() {
        return Err(UNetError::Shape("prediction and target differ".into()));
    }
    let n = pred.data.len() as f64;
    Ok(Tensor {
        shape: pred.shape,
        data: pred.data.iter().zip(&target.data).map(|(p, t)| 2.0 * (p - t) / n).collect(),
    })
}

/// Convolution, optional batch norm, ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
    /// Input is nearest-upsampled 2x before the convolution.
    pub upsample: bool,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor,
    bn: Option<BnCache>,
    output: Tensor,
}

impl ConvBlock {
    fn forward(&mut self, input: Tensor, mode: Mode) -> Result<(Tensor, BlockCache), UNetError> {
        let mut z = if self.upsample {
            upsampled_conv2d_forward(&input, &self.conv)?
        } else {
            conv2d_forward(&input, &self.conv)?
        };
        let mut bn_cache = None;
        if let Some(bn) = self.bn.as_mut() {
            let (y, c) = bn_forward_cached(&z, bn, mode)?;
            z = y;
            bn_cache = c;
        }
        let out = relu(&z);
        Ok((
            out.clone(),
            BlockCache {
                input,
                bn: bn_cache,
                output: out,
            },
        ))
    }

    /// Returns the input gradient and pushes parameter gradients in
    /// declaration order (weight, bias, gamma, beta).
    fn backward(&self, cache: &BlockCache, grad: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>), UNetError> {
        let mut dz = relu_backward(&cache.output, grad);
        let mut bn_grads = None;
        if let Some(bn) = &self.bn {
            let c = cache.bn.as_ref().ok_or(UNetError::NotTraining)?;
            let (dx, dg, db) = bn_backward(c, bn, &dz);
            dz = dx;
            bn_grads = Some((dg, db));
        }
        let (dx, dw, db) = if self.upsample {
            upsampled_conv2d_backward(&cache.input, &self.conv, &dz)?
        } else {
            conv2d_backward(&cache.input, &self.conv, &dz)?
        };
        let mut grads = vec![dw, db];
        if let Some((dg, dbeta)) = bn_grads {
            grads.push(dg);
            grads.push(dbeta);
        }
        Ok((dx, grads))
    }

    fn parameter_count(&self) -> usize {
        self.conv.weight.len()
            + self.conv.bias.len()
            + self.bn.as_ref().map_or(0, |b| b.gamma.len() + b.beta.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetArchitecture {
    pub encoder_filters: Vec<usize>,
    /// One entry per encoder stage; a 1×1 single-channel output layer follows.
    pub decoder_filters: Vec<usize>,
    pub kernel: (usize, usize),
}

impl UNetArchitecture {
    /// Encoder 8, 16, 32, 64; decoder 64, 32, 16, 8, then 1; 10×5 kernels.
    pub fn reference() -> Self {
        Self {
            encoder_filters: vec![8, 16, 32, 64],
            decoder_filters: vec![64, 32, 16, 8],
            kernel: (10, 5),
        }
    }

    /// Small variant used for gradient checks: 2, 4 / 4, 2, 1.
    pub fn reduced() -> Self {
        Self {
            encoder_filters: vec![2, 4],
            decoder_filters: vec![4, 2],
            kernel: (10, 5),
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_filters.len()
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        if self.encoder_filters.is_empty() || self.encoder_filters.len() != self.decoder_filters.len() {
            return Err(UNetError::InvalidConfig(
                "encoder and decoder need the same, non-zero number of stages".into(),
            ));
        }
        if self.encoder_filters.iter().chain(&self.decoder_filters).any(|f| *f == 0)
            || self.kernel.0 == 0
            || self.kernel.1 == 0
        {
            return Err(UNetError::InvalidConfig("zero filter count or kernel size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_halving_patience: usize,
    pub validation_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Mirror each training pair along the lag axis with probability ½ per
    /// epoch (the microphone-swapped scene). Validation pairs are never
    /// mirrored.
    pub mirror_augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 17,
            early_stop_patience: 10,
            lr_halving_patience: 3,
            validation_fraction: 0.2,
            batch_size: 16,
            seed: 42,
            mirror_augmentation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), UNetError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(UNetError::InvalidConfig(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.batch_size < 2 {
            return Err(UNetError::InvalidConfig("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || self.max_epochs == 0 {
            return Err(UNetError::InvalidConfig("learning rate and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Gradients in the same block order as `UNetModel::parameters`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel {
    architecture: UNetArchitecture,
    encoder: Vec<ConvBlock>,
    decoder: Vec<ConvBlock>,
    output: ConvBlock,
    mode: Mode,
    train_config: Option<TrainConfig>,
}

struct ForwardCache {
    encoder: Vec<BlockCache>,
    decoder: Vec<BlockCache>,
    output: BlockCache,
}

impl UNetModel {
    pub fn new(architecture: UNetArchitecture, seed: u64) -> Result<Self, UNetError> {
        architecture.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = architecture.kernel;
        let d = architecture.depth();
        let mut encoder = Vec::with_capacity(d);
        let mut in_ch = 1;
        for &f in &architecture.encoder_filters {
            encoder.push(ConvBlock {
                conv: Conv2d::he_uniform(in_ch, f, k, (2, 2), &mut rng),
                bn: Some(BatchNorm::new(f)),
                upsample: false,
            });
            in_ch = f;
        }
        let mut decoder = Vec::with_capacity(d);
        for (j, &f) in architecture.decoder_filters.iter().enumerate() {
            let skip = if j == 0 { 0 } else { architecture.encoder_filters[d - 1 - j] };
            decoder.push(ConvBlock {
                conv: Conv2d::he_uniform(in_ch + skip, f, k, (1, 1), &mut rng),
                bn: Some(BatchNorm::new(f)),
                upsample: true,
            });
            in_ch = f;
        }
        let output = ConvBlock {
            conv: Conv2d::he_uniform(in_ch, 1, (1, 1), (1, 1), &mut rng),
            bn: None,
            upsample: false,
        };
        Ok(Self {
            architecture,
            encoder,
            decoder,
            output,
            mode: Mode::Train,
            train_config: None,
        })
    }

    pub fn architecture(&self) -> &UNetArchitecture {
        &self.architecture
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn train_config(&self) -> Option<&TrainConfig> {
        self.train_config.as_ref()
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.encoder.iter().chain(&self.decoder).chain(std::iter::once(&self.output))
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain(std::iter::once(&mut self.output))
    }

    /// Layer `i` of the network in order (encoder, decoder, output).
    pub fn block(&self, i: usize) -> Option<&ConvBlock> {
        self.blocks().nth(i)
    }

    pub fn block_mut(&mut self, i: usize) -> Option<&mut ConvBlock> {
        self.blocks_mut().nth(i)
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().map(ConvBlock::parameter_count).sum()
    }

    /// Trainable parameter blocks in declaration order.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in self.blocks() {
            out.push(&b.conv.weight);
            out.push(&b.conv.bias);
            if let Some(bn) = &b.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in self.blocks_mut() {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            if let Some(bn) = b.bn.as_mut() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    fn running_stats(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in self.blocks() {
            if let Some(bn) = &b.bn {
                out.push(&bn.running_mean);
                out.push(&bn.running_var);
            }
        }
        out
    }

    fn running_stats_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in self.blocks_mut() {
            if let Some(bn) = b.bn.as_mut() {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }

    pub fn check_input(&self, input: &Tensor) -> Result<(), UNetError> {
        let [_, c, h, w] = input.shape();
        if c != 1 {
            return Err(UNetError::Shape(format!("expected one input channel, got {c}")));
        }
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(UNetError::NotPowerOfTwo(h, w));
        }
        let min = 1 << self.architecture.depth();
        if h < min || w < min {
            return Err(UNetError::Shape(format!(
                "spatial dims {h}x{w} below the {min}x{min} minimum for this depth"
            )));
        }
        Ok(())
    }

    fn forward_cached(&mut self, input: &Tensor) -> Result<(Tensor, ForwardCache), UNetError> {
        self.check_input(input)?;
        let mode = self.mode;
        let d = self.architecture.depth();
        let mut enc_caches = Vec::with_capacity(d);
        let mut enc_outs: Vec<Tensor> = Vec::with_capacity(d);
        let mut x = input.clone();
        for block in self.encoder.iter_mut() {
            let (y, c) = block.forward(x, mode)?;
            enc_outs.push(y.clone());
            enc_caches.push(c);
            x = y;
        }
        let mut dec_caches = Vec::with_capacity(d);
        for (j, block) in self.decoder.iter_mut().enumerate() {
            let h = if j == 0 { x } else { concat_channels(&x, &enc_outs[d - 1 - j])? };
            let (y, c) = block.forward(h, mode)?;
            dec_caches.push(c);
            x = y;
        }
        let (y, out_cache) = self.output.forward(x, mode)?;
        Ok((
            y,
            ForwardCache {
                encoder: enc_caches,
                decoder: dec_caches,
                output: out_cache,
            },
        ))
    }

    /// Forward pass. In train mode this also advances the batch-norm running
    /// statistics.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, UNetError> {
        self.forward_cached(input).map(|(y, _)| y)
    }

    /// Inference-mode forward pass that leaves the model untouched.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, UNetError> {
        let mut m = self.clone();
        m.mode = Mode::Inference;
        m.forward(input)
    }

    /// Gradients of an arbitrary upstream gradient on the output. Needs a
    /// train-mode forward pass; returns `(output, gradients)`.
    pub fn backward_from(
        &mut self,
        input: &Tensor,
        upstream: impl FnOnce(&Tensor) -> Result<Tensor, UNetError>,
    ) -> Result<(Tensor, Gradients), UNetError> {
        if self.mode != Mode::Train {
            return Err(UNetError::NotTraining);
        }
        let (y, cache) = self.forward_cached(input)?;
        let grad = upstream(&y)?;
        if grad.shape() != y.shape() {
            return Err(UNetError::Shape("upstream gradient shape".into()));
        }
        let d = self.architecture.depth();
        let (mut g, out_grads) = self.output.backward(&cache.output, &grad)?;
        let mut dec_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); d];
        let mut enc_in: Vec<Option<Tensor>> = vec![None; d];
        for j in (0..d).rev() {
            let (dh, pg) = self.decoder[j].backward(&cache.decoder[j], &g)?;
            dec_grads[j] = pg;
            if j == 0 {
                add_into(&mut enc_in[d - 1], dh);
                g = Tensor::zeros([0, 0, 0, 0]);
            } else {
                let first = self.decoder[j - 1].conv.out_channels;
                let (dprev, dskip) = split_channels(&dh, first);
                add_into(&mut enc_in[d - 1 - j], dskip);
                g = dprev;
            }
        }
        let mut enc_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); d];
        for i in (0..d).rev() {
            let gi = enc_in[i].take().expect("every encoder stage receives a gradient");
            let (dx, pg) = self.encoder[i].backward(&cache.encoder[i], &gi)?;
            enc_grads[i] = pg;
            if i > 0 {
                add_into(&mut enc_in[i - 1], dx);
            }
        }
        let blocks = enc_grads
            .into_iter()
            .chain(dec_grads)
            .chain(std::iter::once(out_grads))
            .flatten()
            .collect();
        Ok((y, Gradients { blocks }))
    }

    /// MSE loss against `target` and its parameter gradients.
    pub fn backward(&mut self, input: &Tensor, target: &Tensor) -> Result<(f64, Gradients), UNetError> {
        let mut loss = 0.0;
        let (_, grads) = self.backward_from(input, |y| {
            loss = mse_loss(y, target)?;
            mse_loss_grad(y, target)
        })?;
        Ok((loss, grads))
    }
}

fn add_into(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&t.data) {
                *a += b;
            }
        }
        None => *slot = Some(t),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &UNetModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<(), UNetError> {
    let same = params.len() == grads.blocks.len()
        && params.len() == state.m.len()
        && params.iter().zip(&grads.blocks).zip(&state.m).all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !same {
        return Err(UNetError::Shape("parameter, gradient and state blocks differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(&grads.blocks).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Noisy/clean magnitude pairs, each `height × width` row-major.
#[derive(Debug, Clone, Default)]
pub struct PairSet {
    pub height: usize,
    pub width: usize,
    pub noisy: Vec<Vec<f64>>,
    pub clean: Vec<Vec<f64>>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor), UNetError> {
        let x: Vec<&[f64]> = idx.iter().map(|&i| self.noisy[i].as_slice()).collect();
        let y: Vec<&[f64]> = idx.iter().map(|&i| self.clean[i].as_slice()).collect();
        Ok((
            Tensor::stack(&x, 1, self.height, self.width)?,
            Tensor::stack(&y, 1, self.height, self.width)?,
        ))
    }

    fn mirrored_batch(&self, idx: &[usize], mirror: &[bool]) -> Result<(Tensor, Tensor), UNetError> {
        let pick = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
            idx.iter()
                .zip(mirror)
                .map(|(&i, &m)| if m { mirror_lags(&set[i], self.width) } else { set[i].clone() })
                .collect()
        };
        let (x, y) = (pick(&self.noisy), pick(&self.clean));
        let xr: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let yr: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
        Ok((
            Tensor::stack(&xr, 1, self.height, self.width)?,
            Tensor::stack(&yr, 1, self.height, self.width)?,
        ))
    }
}

/// Maps lag `τ` to `−τ` in every row of a centred `width`-column matrix
/// (column `c` holds lag `c − width/2`; the unpaired lag `−width/2` stays).
/// For the FS-GCC magnitude this is exactly the scene with swapped
/// microphones.
pub fn mirror_lags(values: &[f64], width: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    for (row, src) in out.chunks_mut(width).zip(values.chunks(width)) {
        for c in 1..width {
            row[c] = src[width - c];
        }
    }
    out
}

/// Scales `values` by the reciprocal of their maximum; returns that maximum
/// (1 for an all-non-positive matrix, which is left as is).
pub fn normalize_by_max(values: &mut [f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        for v in values.iter_mut() {
            *v /= max;
        }
        max
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned snapshot.
    pub best_epoch: usize,
    pub early_stopped: bool,
}

/// Seeded split: the first `ceil(fraction · n)` shuffled indices validate.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((fraction * n as f64).ceil() as usize).clamp(1, n.saturating_sub(2).max(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Splits into batches of `size`; a trailing single item joins the previous
/// batch so batch statistics stay defined.
fn make_batches(idx: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = idx.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

fn evaluate_loss(model: &UNetModel, data: &PairSet, idx: &[usize], batch: usize) -> Result<f64, UNetError> {
    let mut inference = model.clone();
    inference.mode = Mode::Inference;
    let mut total = 0.0;
    for chunk in idx.chunks(batch) {
        let (x, y) = data.batch(chunk)?;
        let p = inference.forward(&x)?;
        total += mse_loss(&p, &y)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Adam training with early stopping and learning-rate halving on plateaus.
/// Returns the snapshot with the best validation loss (in inference mode).
pub fn train(
    mut model: UNetModel,
    data: &PairSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(UNetModel, TrainHistory), UNetError> {
    config.validate()?;
    if data.is_empty() {
        return Err(UNetError::EmptyDataset);
    }
    if data.noisy.len() != data.clean.len() {
        return Err(UNetError::Shape("noisy and clean counts differ".into()));
    }
    if data.len() < 3 {
        return Err(UNetError::InvalidConfig("need at least three pairs to split".into()));
    }
    let (mut train_idx, val_idx) = validation_split(data.len(), config.validation_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    model.mode = Mode::Train;
    model.train_config = Some(config.clone());
    let mut state = AdamState::new(&model);
    let mut lr = config.learning_rate;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, UNetModel)> = None;
    let mut since_best = 0;
    let mut plateau = 0;
    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in make_batches(&train_idx, config.batch_size) {
            let (x, y) = if config.mirror_augmentation {
                let flips: Vec<bool> = batch.iter().map(|_| rng.gen_bool(0.5)).collect();
                data.mirrored_batch(&batch, &flips)?
            } else {
                data.batch(&batch)?
            };
            let (loss, grads) = model.backward(&x, &y)?;
            sum += loss * batch.len() as f64;
            adam_step(&mut model.parameters_mut(), &grads, &mut state, lr, config)?;
        }
        let train_loss = sum / train_idx.len() as f64;
        let val_loss = evaluate_loss(&model, data, &val_idx, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            let mut snap = model.clone();
            snap.mode = Mode::Inference;
            best = Some((val_loss, snap));
            history.best_epoch = epoch;
            since_best = 0;
            plateau = 0;
        } else {
            since_best += 1;
            plateau += 1;
            if since_best >= config.early_stop_patience {
                history.early_stopped = true;
                break;
            }
            if plateau >= config.lr_halving_patience {
                lr *= 0.5;
                plateau = 0;
            }
        }
    }
    let (_, model) = best.ok_or(UNetError::EmptyDataset)?;
    Ok((model, history))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    architecture: UNetArchitecture,
    parameter_count: usize,
    parameter_blocks: Vec<usize>,
    running_stat_blocks: Vec<usize>,
    bn_momentum: f64,
    bn_epsilon: f64,
    train_config: Option<TrainConfig>,
}

impl UNetModel {
    /// `magic | u64 header length | JSON header | f64 LE blocks`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = FileHeader {
            architecture: self.architecture.clone(),
            parameter_count: self.parameter_count(),
            parameter_blocks: self.parameters().iter().map(|b| b.len()).collect(),
            running_stat_blocks: self.running_stats().iter().map(|b| b.len()).collect(),
            bn_momentum: BN_MOMENTUM,
            bn_epsilon: BN_EPSILON,
            train_config: self.train_config.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for block in self.parameters().into_iter().chain(self.running_stats()) {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, UNetError> {
        let fmt = |m: &str| UNetError::Format(m.to_string());
        if bytes.len() < MODEL_MAGIC.len() + 8 || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
            return Err(fmt("missing FSGCCUNET1 magic"));
        }
        let mut pos = MODEL_MAGIC.len();
        let hlen = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes")) as usize;
        pos += 8;
        if bytes.len() < pos + hlen {
            return Err(fmt("truncated header"));
        }
        let header: FileHeader =
            serde_json::from_slice(&bytes[pos..pos + hlen]).map_err(|e| UNetError::Format(format!("header: {e}")))?;
        pos += hlen;
        let mut model = Self::new(header.architecture.clone(), 0)?;
        let expect_params: Vec<usize> = model.parameters().iter().map(|b| b.len()).collect();
        let expect_stats: Vec<usize> = model.running_stats().iter().map(|b| b.len()).collect();
        if expect_params != header.parameter_blocks
            || expect_stats != header.running_stat_blocks
            || header.parameter_count != model.parameter_count()
        {
            return Err(fmt("parameter layout does not match the architecture"));
        }
        if header.bn_momentum != BN_MOMENTUM || header.bn_epsilon != BN_EPSILON {
            return Err(fmt("batch-norm constants differ from this build"));
        }
        let total: usize = expect_params.iter().chain(&expect_stats).sum();
        if bytes.len() != pos + 8 * total {
            return Err(UNetError::Format(format!(
                "expected {} bytes of parameters, found {}",
                8 * total,
                bytes.len() - pos
            )));
        }
        let mut read_into = |blocks: Vec<&mut [f64]>| {
            for block in blocks {
                for v in block.iter_mut() {
                    *v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes"));
                    pos += 8;
                }
            }
        };
        read_into(model.parameters_mut());
        read_into(model.running_stats_mut());
        model.train_config = header.train_config;
        model.mode = Mode::Inference;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), UNetError> {
        let io = |source| UNetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, UNetError> {
        let io = |source| UNetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        Self::from_bytes(&bytes)
    }
}
