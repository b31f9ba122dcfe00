//! Forward and backward kernels for the network primitives.
//!
//! All kernels work on flat row-major `[N, C, H, W]` buffers. Backward
//! kernels take the upstream gradient of the primitive's output and return
//! (or accumulate) gradients for its inputs.

use super::{Real, TensorError};

/// Smallest probability fed to `ln` by the likelihood loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Shapes and output size of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 4],
        kernel: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let [batch, in_channels, height, width] = input;
        let [filters, kc, kernel_h, kernel_w] = kernel;
        if kc != in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
                reason: "input channels differ from kernel channels",
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if kernel_h == 0
            || kernel_w == 0
            || kernel_h > height + 2 * padding
            || kernel_w > width + 2 * padding
        {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
                reason: "kernel larger than padded input",
            });
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            filters,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kx - padding` is in range.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = if self.padding > kx {
            (self.padding - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.width + self.padding > kx {
            ((self.width + self.padding - kx - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// Unfolds one sample into a `[C·kH·kW, H'·W']` patch matrix.
fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (h, w, ow, l) = (g.height, g.width, g.out_w, g.out_plane());
    let mut row_idx = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = &mut col[row_idx * l..(row_idx + 1) * l];
                row_idx += 1;
                let cols = g.valid_cols(kx);
                for oy in 0..g.out_h {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize || cols.is_empty() {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..cols.start].fill(T::zero());
                    dst[cols.end..].fill(T::zero());
                    let ix0 = cols.start * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        dst[cols.clone()].copy_from_slice(&src[ix0..ix0 + cols.len()]);
                    } else {
                        for (i, ox) in cols.clone().enumerate() {
                            dst[ox] = src[ix0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto one sample, accumulating.
fn col2im<T: Real>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (h, w, ow, l) = (g.height, g.width, g.out_w, g.out_plane());
    let mut row_idx = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = &col[row_idx * l..(row_idx + 1) * l];
                row_idx += 1;
                let cols = g.valid_cols(kx);
                if cols.is_empty() {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let ix0 = cols.start * g.stride + kx - g.padding;
                    for (i, ox) in cols.clone().enumerate() {
                        dst[ix0 + i * g.stride] += src[ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) plus per-filter bias.
pub fn conv2d_forward<T: Real>(g: &ConvGeometry, x: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (ckk, l, f) = (g.patch_len(), g.out_plane(), g.filters);
    let mut out = vec![T::zero(); g.batch * f * l];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * l]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
        let ob = &mut out[b * f * l..(b + 1) * f * l];
        for (fi, chunk) in ob.chunks_mut(l).enumerate() {
            chunk.fill(bias[fi]);
        }
        let patches: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        T::gemm(false, false, f, l, ckk, kernel, patches, T::one(), ob);
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    want_input: bool,
) -> ConvGrads<T> {
    let (ckk, l, f) = (g.patch_len(), g.out_plane(), g.filters);
    let mut dk = vec![T::zero(); f * ckk];
    let mut db = vec![T::zero(); f];
    let mut dx = want_input.then(|| vec![T::zero(); g.batch * g.in_sample()]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * l]
    };
    let mut dcol = vec![T::zero(); ckk * l];
    for b in 0..g.batch {
        let xb = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
        let dyb = &dy[b * f * l..(b + 1) * f * l];
        for (fi, chunk) in dyb.chunks(l).enumerate() {
            db[fi] += chunk.iter().copied().sum::<T>();
        }
        let patches: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        T::gemm(false, true, f, ckk, l, dyb, patches, T::one(), &mut dk);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.in_sample()..(b + 1) * g.in_sample()];
            if g.is_pointwise() {
                T::gemm(true, false, ckk, l, f, kernel, dyb, T::zero(), dxb);
            } else {
                T::gemm(true, false, ckk, l, f, kernel, dyb, T::zero(), &mut dcol);
                col2im(g, &dcol, dxb);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

/// 2×2, stride-2 max pooling. Returns the output and, per output value, the
/// flat input index it came from (first maximum in row-major window order).
pub fn maxpool2d_forward<T: Real>(dims: [usize; 4], x: &[T]) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2d_backward<T: Real>(input_len: usize, argmax: &[usize], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&src, &g) in argmax.iter().zip(dy) {
        dx[src] += g;
    }
    dx
}

/// Interpolation taps for one axis under the aligned-corner convention:
/// output `o` samples input coordinate `o·(src−1)/(dst−1)`, so the first and
/// last samples of both grids coincide.
struct Taps<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

fn taps<T: Real>(src: usize, dst: usize) -> Taps<T> {
    let mut t = Taps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for o in 0..dst {
        if src == 1 || dst == 1 {
            t.lo.push(0);
            t.hi.push(0);
            t.frac.push(T::zero());
            continue;
        }
        let num = o * (src - 1);
        let den = dst - 1;
        let lo = num / den;
        t.lo.push(lo);
        t.hi.push((lo + 1).min(src - 1));
        t.frac.push(T::lit((num % den) as f64) / T::lit(den as f64));
    }
    t
}

pub fn upsample_bilinear_forward<T: Real>(dims: [usize; 4], factor: usize, x: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h * factor, w * factor);
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks(h * w) {
        for oy in 0..oh {
            let r0 = &plane[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
            let r1 = &plane[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
            let wy = ty.frac[oy];
            for ox in 0..ow {
                let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                // lerp as a + w·(b − a) so constant inputs stay exactly constant.
                let top = r0[x0] + wx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + wx * (r1[x1] - r1[x0]);
                out.push(top + wy * (bot - top));
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Real>(dims: [usize; 4], factor: usize, dy: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h * factor, w * factor);
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, gplane) in dx.chunks_mut(h * w).zip(dy.chunks(oh * ow)) {
        for oy in 0..oh {
            let wy = ty.frac[oy];
            for ox in 0..ow {
                let g = gplane[oy * ow + ox];
                let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let g_top = g - wy * g;
                let g_bot = wy * g;
                let (y0, y1) = (ty.lo[oy] * w, ty.hi[oy] * w);
                plane[y0 + x0] += g_top - wx * g_top;
                plane[y0 + x1] += wx * g_top;
                plane[y1 + x0] += g_bot - wx * g_bot;
                plane[y1 + x1] += wx * g_bot;
            }
        }
    }
    dx
}

/// Per-pixel softmax across the channel axis, max-subtracted.
/// Replaces subnormal values with zero. Saturated softmax outputs otherwise
/// seed subnormals that slow every downstream GEMM by an order of magnitude.
#[inline]
fn flush<T: Real>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

pub fn softmax_channels_forward<T: Real>(dims: [usize; 4], x: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * plane;
        for px in 0..plane {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(x[base + ch * plane + px]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * plane + px] - max).exp();
                out[base + ch * plane + px] = e;
                total += e;
            }
            for ch in 0..c {
                out[base + ch * plane + px] = flush(out[base + ch * plane + px] / total);
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Real>(dims: [usize; 4], p: &[T], dy: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut dx = vec![T::zero(); p.len()];
    for b in 0..n {
        let base = b * c * plane;
        for px in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + px;
                dot += dy[i] * p[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + px;
                dx[i] = flush(p[i] * (dy[i] - dot));
            }
        }
    }
    dx
}

pub fn concat_channels_forward<T: Real>(
    a_dims: [usize; 4],
    a: &[T],
    b_dims: [usize; 4],
    b: &[T],
) -> Vec<T> {
    let [n, ca, h, w] = a_dims;
    let cb = b_dims[1];
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for s in 0..n {
        out.extend_from_slice(&a[s * ca * plane..(s + 1) * ca * plane]);
        out.extend_from_slice(&b[s * cb * plane..(s + 1) * cb * plane]);
    }
    out
}

/// Splits a concatenated gradient back into its two channel groups.
pub fn concat_channels_backward<T: Real>(
    a_dims: [usize; 4],
    b_dims: [usize; 4],
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let [n, ca, h, w] = a_dims;
    let cb = b_dims[1];
    let plane = h * w;
    let mut da = Vec::with_capacity(n * ca * plane);
    let mut db = Vec::with_capacity(n * cb * plane);
    for chunk in dy.chunks((ca + cb) * plane) {
        da.extend_from_slice(&chunk[..ca * plane]);
        db.extend_from_slice(&chunk[ca * plane..]);
    }
    (da, db)
}

pub fn relu_forward<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// Mean over batch and pixels of `−ln max(p[target], 1e−12)`.
///
/// `targets` holds one class id per `(n, y, x)` position.
pub fn nll_forward<T: Real>(dims: [usize; 4], probs: &[T], targets: &[u8]) -> T {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut acc = 0.0f64;
    for b in 0..n {
        for px in 0..plane {
            let t = targets[b * plane + px] as usize;
            let p = probs[(b * c + t) * plane + px].to_f64().unwrap_or(f64::NAN);
            acc -= p.max(PROB_FLOOR).ln();
        }
    }
    T::lit(acc / (n * plane) as f64)
}

pub fn nll_backward<T: Real>(dims: [usize; 4], probs: &[T], targets: &[u8], dy: T) -> Vec<T> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let scale = dy / T::lit((n * plane) as f64);
    let floor = T::lit(PROB_FLOOR);
    let mut dp = vec![T::zero(); probs.len()];
    for b in 0..n {
        for px in 0..plane {
            let t = targets[b * plane + px] as usize;
            let i = (b * c + t) * plane + px;
            if probs[i] > floor {
                dp[i] = -scale / probs[i];
            }
        }
    }
    dp
}
