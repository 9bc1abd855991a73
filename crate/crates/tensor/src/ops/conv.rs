//! Dilated 2-D convolution by explicit patch gathering (im2col) and GEMM,
//! plus non-overlapping max pooling.

use crate::error::{NnError, Result};
use crate::ops::{slot, Op};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tape::{Node, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `dilation * (k - 1)` split evenly; preserves extents at stride 1.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for ConvOptions {
    fn default() -> Self {
        ConvOptions {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

impl ConvOptions {
    pub fn same(dilation: usize) -> Self {
        ConvOptions {
            stride: 1,
            dilation,
            padding: Padding::Same,
        }
    }

    pub fn valid() -> Self {
        ConvOptions {
            stride: 1,
            dilation: 1,
            padding: Padding::Valid,
        }
    }
}

/// Output extent of a dilated convolution along one axis, or `None` when the
/// (padded) input is smaller than the dilated kernel.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad_total: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + pad_total;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], opts: ConvOptions) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(NnError::shape(
                "conv2d",
                format!("expected input [N,C,H,W] and kernel [K,C,kh,kw], got {input:?} and {kernel:?}"),
            ));
        }
        if input[1] != kernel[1] {
            return Err(NnError::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", kernel[1], input[1]),
            ));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(NnError::invalid("conv2d", "stride and dilation must be >= 1"));
        }
        let (kh, kw) = (kernel[2], kernel[3]);
        let (ph, pw) = match opts.padding {
            Padding::Same => (opts.dilation * (kh - 1), opts.dilation * (kw - 1)),
            Padding::Valid => (0, 0),
        };
        let out_h = conv_output_extent(input[2], kh, opts.stride, opts.dilation, ph);
        let out_w = conv_output_extent(input[3], kw, opts.stride, opts.dilation, pw);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(NnError::shape(
                "conv2d",
                format!("input {input:?} smaller than dilated kernel {kernel:?} (dilation {})", opts.dilation),
            ));
        };
        Ok(ConvGeometry {
            channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kh,
            kw,
            stride: opts.stride,
            dilation: opts.dilation,
            pad_top: ph / 2,
            pad_left: pw / 2,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input coordinate for output coordinate `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn source(o: usize, t: usize, stride: usize, dilation: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + t * dilation).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    /// Gathers every receptive field of one image into rows of `cols`
    /// (`patch_len` rows with leading dimension `ld`), starting at column `offset`.
    fn im2col<F: Scalar>(&self, x: &[F], cols: &mut [F], ld: usize, offset: usize) {
        let ol = self.out_len();
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * ld + offset;
                    let dst = &mut cols[row..row + ol];
                    for oy in 0..self.out_h {
                        let seg = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match Self::source(oy, i, self.stride, self.dilation, self.pad_top, self.height) {
                            None => seg.fill(F::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in seg.iter_mut().enumerate() {
                                    *v = match Self::source(ox, j, self.stride, self.dilation, self.pad_left, self.width) {
                                        Some(ix) => src[ix],
                                        None => F::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds the columns written by [`Self::im2col`] back onto one image gradient.
    fn col2im<F: Scalar>(&self, cols: &[F], ld: usize, offset: usize, dx: &mut [F]) {
        let ol = self.out_len();
        for c in 0..self.channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * ld + offset;
                    let src = &cols[row..row + ol];
                    for oy in 0..self.out_h {
                        let Some(iy) = Self::source(oy, i, self.stride, self.dilation, self.pad_top, self.height) else {
                            continue;
                        };
                        let dst = &mut plane[iy * self.width..(iy + 1) * self.width];
                        for (ox, &v) in src[oy * self.out_w..(oy + 1) * self.out_w].iter().enumerate() {
                            if let Some(ix) = Self::source(ox, j, self.stride, self.dilation, self.pad_left, self.width) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Stride-1 convolutions over wide images skip patch gathering and
    /// accumulate shifted copies of a zero-padded plane instead.
    fn algorithm(&self) -> Algorithm {
        if self.stride == 1 && self.out_w >= DIRECT_MIN_WIDTH && self.channels * self.filters <= DIRECT_MAX_PAIRS {
            Algorithm::Direct
        } else {
            Algorithm::Gemm {
                chunk: GEMM_CHUNK_COLUMNS.div_ceil(self.out_len()).max(1),
            }
        }
    }

    /// Padded plane extents `(rows, cols)` and the flat span covering every
    /// output position, for the direct algorithm.
    fn padded(&self) -> (usize, usize, usize) {
        let hp = self.out_h + self.dilation * (self.kh - 1);
        let wp = self.out_w + self.dilation * (self.kw - 1);
        (hp, wp, (self.out_h - 1) * wp + self.out_w)
    }

    /// Writes every element of the padded planes exactly once.
    fn pad_image<F: Scalar>(&self, x: &[F], buf: &mut [F]) {
        let (hp, wp, _) = self.padded();
        let cols = self.width.min(wp - self.pad_left);
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            let dst = &mut buf[c * hp * wp..(c + 1) * hp * wp];
            for (py, row) in dst.chunks_exact_mut(wp).enumerate() {
                match py.checked_sub(self.pad_top).filter(|&y| y < self.height) {
                    Some(y) => {
                        row[..self.pad_left].fill(F::zero());
                        row[self.pad_left..self.pad_left + cols].copy_from_slice(&plane[y * self.width..][..cols]);
                        row[self.pad_left + cols..].fill(F::zero());
                    }
                    None => row.fill(F::zero()),
                }
            }
        }
    }

    fn tap_offsets(&self, wp: usize) -> Vec<usize> {
        (0..self.kh)
            .flat_map(|i| (0..self.kw).map(move |j| (i, j)))
            .map(|(i, j)| i * self.dilation * wp + j * self.dilation)
            .collect()
    }

    fn forward_direct<F: Scalar>(&self, x: &[F], w: &[F], bias: Option<&[F]>, out: &mut [F], scratch: &mut Vec<F>) {
        let (hp, wp, span) = self.padded();
        let plane = hp * wp;
        let (k_n, c_n) = (self.filters, self.channels);
        scratch.resize(c_n * plane + 4 * span, F::zero());
        let (xpad, acc) = scratch.split_at_mut(c_n * plane);
        self.pad_image(x, xpad);
        let taps = self.kh * self.kw;
        let offs = self.tap_offsets(wp);
        let mut k = 0;
        while k < k_n {
            let block = if taps == 9 && k + 4 <= k_n { 4 } else { 1 };
            for b in 0..block {
                acc[b * span..(b + 1) * span].fill(bias.map_or(F::zero(), |bs| bs[k + b]));
            }
            for c in 0..c_n {
                let src = &xpad[c * plane..(c + 1) * plane];
                let wsel = |b: usize| &w[((k + b) * c_n + c) * taps..][..taps];
                if block == 4 {
                    let (a0, rest) = acc.split_at_mut(span);
                    let (a1, rest) = rest.split_at_mut(span);
                    let (a2, a3) = rest.split_at_mut(span);
                    let ws = [0, 1, 2, 3].map(|b| <&[F; 9]>::try_from(wsel(b)).expect("3x3 taps"));
                    let o = <&[usize; 9]>::try_from(offs.as_slice()).expect("3x3 taps");
                    kernels::correlate4([a0, a1, a2, &mut a3[..span]], src, o, ws);
                } else {
                    kernels::correlate(&mut acc[..span], src, &offs, wsel(0));
                }
            }
            for b in 0..block {
                let dst = &mut out[(k + b) * self.out_len()..(k + b + 1) * self.out_len()];
                let a = &acc[b * span..(b + 1) * span];
                for oy in 0..self.out_h {
                    dst[oy * self.out_w..(oy + 1) * self.out_w].copy_from_slice(&a[oy * wp..oy * wp + self.out_w]);
                }
            }
            k += block;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_direct<F: Scalar>(
        &self,
        x: &[F],
        w: &[F],
        g: &[F],
        dw: Option<&mut [F]>,
        dx: Option<&mut [F]>,
        scratch: &mut Vec<F>,
        cols: &mut Vec<F>,
    ) {
        let (hp, wp, span) = self.padded();
        let plane = hp * wp;
        let taps = self.kh * self.kw;
        let (k_n, c_n) = (self.filters, self.channels);
        let offs = self.tap_offsets(wp);
        let max_off = offs[taps - 1];
        // Each output gradient plane sits at `max_off` inside a zeroed buffer
        // so the input gradient is a correlation with the flipped taps.
        let ext = max_off + plane;
        scratch.resize(k_n * ext + c_n * plane, F::zero());
        let (gbuf, xbuf) = scratch.split_at_mut(k_n * ext);
        for k in 0..k_n {
            let (head, body) = gbuf[k * ext..(k + 1) * ext].split_at_mut(max_off);
            head.fill(F::zero());
            for (oy, row) in body.chunks_exact_mut(wp).enumerate() {
                if oy < self.out_h {
                    row[..self.out_w].copy_from_slice(&g[k * self.out_len() + oy * self.out_w..][..self.out_w]);
                    row[self.out_w..].fill(F::zero());
                } else {
                    row.fill(F::zero());
                }
            }
        }
        if let Some(dw) = dw {
            self.pad_image(x, xbuf);
            if k_n >= DOTS_MAX_FILTERS {
                // Many filters: shifted copies of the padded planes form the
                // patch matrix and one product `G · colsᵀ` amortizes them.
                cols.resize(c_n * taps * span, F::zero());
                for c in 0..c_n {
                    for (t, &o) in offs.iter().enumerate() {
                        cols[(c * taps + t) * span..][..span].copy_from_slice(&xbuf[c * plane + o..][..span]);
                    }
                }
                gemm(
                    k_n,
                    span,
                    c_n * taps,
                    &gbuf[max_off..],
                    Layout::Normal { cols: ext },
                    cols,
                    Layout::Transposed { cols: span },
                    F::one(),
                    dw,
                );
                return self.backward_direct_dx(w, gbuf, ext, max_off, xbuf, dx);
            }
            // dW[k, c, t] = Σ_p g[k, p] · x[c, p + o_t]: blocks of four filters
            // against one kernel row of taps share every load.
            let g_at = |k: usize| &gbuf[k * ext + max_off..][..span];
            for c in 0..c_n {
                let xc = &xbuf[c * plane..(c + 1) * plane];
                for row in offs.chunks(self.kw) {
                    let t0 = (row.as_ptr() as usize - offs.as_ptr() as usize) / std::mem::size_of::<usize>();
                    let mut k = 0;
                    while k < k_n {
                        if row.len() == 3 {
                            let o = [row[0], row[1], row[2]];
                            let block = (k_n - k).min(4);
                            let d = match block {
                                4 => kernels::dots::<F, 4, 3>([g_at(k), g_at(k + 1), g_at(k + 2), g_at(k + 3)], xc, o),
                                3 => pad4(kernels::dots::<F, 3, 3>([g_at(k), g_at(k + 1), g_at(k + 2)], xc, o)),
                                2 => pad4(kernels::dots::<F, 2, 3>([g_at(k), g_at(k + 1)], xc, o)),
                                _ => pad4(kernels::dots::<F, 1, 3>([g_at(k)], xc, o)),
                            };
                            for (b, db) in d.iter().take(block).enumerate() {
                                for (j, v) in db.iter().enumerate() {
                                    dw[((k + b) * c_n + c) * taps + t0 + j] += *v;
                                }
                            }
                            k += block;
                        } else {
                            for (j, &o) in row.iter().enumerate() {
                                let d = kernels::dots::<F, 1, 1>([g_at(k)], xc, [o]);
                                dw[(k * c_n + c) * taps + t0 + j] += d[0][0];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
        self.backward_direct_dx(w, gbuf, ext, max_off, xbuf, dx);
    }

    /// Input gradient: correlation of the shifted output gradient with the
    /// flipped taps, cropped back to the unpadded extent.
    fn backward_direct_dx<F: Scalar>(&self, w: &[F], gbuf: &[F], ext: usize, max_off: usize, xbuf: &mut [F], dx: Option<&mut [F]>) {
        let (hp, wp, _) = self.padded();
        let plane = hp * wp;
        let taps = self.kh * self.kw;
        let (k_n, c_n) = (self.filters, self.channels);
        let offs = self.tap_offsets(wp);
        if let Some(dx) = dx {
            let flipped: Vec<usize> = offs.iter().map(|&o| max_off - o).collect();
            let flip9 = <&[usize; 9]>::try_from(flipped.as_slice()).ok();
            let mut wt = [[F::zero(); 9]; 4];
            xbuf.fill(F::zero());
            let mut c = 0;
            while c < c_n {
                let block = if flip9.is_some() && c + 4 <= c_n { 4 } else { 1 };
                let dst = &mut xbuf[c * plane..(c + block) * plane];
                for k in 0..k_n {
                    let gk = &gbuf[k * ext..(k + 1) * ext];
                    if let (4, Some(o)) = (block, flip9) {
                        for (b, wb) in wt.iter_mut().enumerate() {
                            wb.copy_from_slice(&w[(k * c_n + c + b) * taps..][..taps]);
                        }
                        let (d0, rest) = dst.split_at_mut(plane);
                        let (d1, rest) = rest.split_at_mut(plane);
                        let (d2, d3) = rest.split_at_mut(plane);
                        kernels::correlate4([d0, d1, d2, d3], gk, o, [&wt[0], &wt[1], &wt[2], &wt[3]]);
                    } else {
                        kernels::correlate(dst, gk, &flipped, &w[(k * c_n + c) * taps..][..taps]);
                    }
                }
                for b in 0..block {
                    let src = &dst[b * plane..(b + 1) * plane];
                    let img = &mut dx[(c + b) * self.height * self.width..(c + b + 1) * self.height * self.width];
                    for y in 0..self.height.min(hp - self.pad_top) {
                        let cols = self.width.min(wp - self.pad_left);
                        let at = (y + self.pad_top) * wp + self.pad_left;
                        for (d, &s) in img[y * self.width..y * self.width + cols].iter_mut().zip(&src[at..at + cols]) {
                            *d += s;
                        }
                    }
                }
                c += block;
            }
        }
    }

    /// Forward over `n` images packed in `x`, writing `out[n, K, oh, ow]`.
    fn forward_batch<F: Scalar>(&self, n: usize, x: &[F], w: &[F], bias: Option<&[F]>, out: &mut [F]) {
        self.forward_with(self.algorithm(), n, x, w, bias, out)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_with<F: Scalar>(&self, algo: Algorithm, n: usize, x: &[F], w: &[F], bias: Option<&[F]>, out: &mut [F]) {
        let (pl, ol, il, k) = (self.patch_len(), self.out_len(), self.in_len(), self.filters);
        match algo {
            Algorithm::Direct => {
                let mut scratch = Vec::new();
                for img in 0..n {
                    self.forward_direct(&x[img * il..(img + 1) * il], w, bias, &mut out[img * k * ol..(img + 1) * k * ol], &mut scratch);
                }
            }
            Algorithm::Gemm { chunk } => {
                let chunk = chunk.min(n);
                let mut cols = vec![F::zero(); pl * chunk * ol];
                let mut tmp = vec![F::zero(); k * chunk * ol];
                for first in (0..n).step_by(chunk) {
                    let nb = chunk.min(n - first);
                    let ld = nb * ol;
                    for b in 0..nb {
                        let img = first + b;
                        self.im2col(&x[img * il..(img + 1) * il], &mut cols, ld, b * ol);
                    }
                    gemm(k, pl, ld, w, Layout::Normal { cols: pl }, &cols, Layout::Normal { cols: ld }, F::zero(), &mut tmp);
                    for b in 0..nb {
                        let dst = &mut out[(first + b) * k * ol..(first + b + 1) * k * ol];
                        for kk in 0..k {
                            let row = &tmp[kk * ld + b * ol..kk * ld + (b + 1) * ol];
                            let bv = bias.map_or(F::zero(), |bs| bs[kk]);
                            for (d, &s) in dst[kk * ol..(kk + 1) * ol].iter_mut().zip(row) {
                                *d = s + bv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates kernel and input gradients for `n` images.
    #[allow(clippy::too_many_arguments)]
    fn backward_batch<F: Scalar>(
        &self,
        n: usize,
        x: &[F],
        w: &[F],
        g: &[F],
        dw: Option<&mut [F]>,
        dx: Option<&mut [F]>,
    ) {
        self.backward_with(self.algorithm(), n, x, w, g, dw, dx)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_with<F: Scalar>(
        &self,
        algo: Algorithm,
        n: usize,
        x: &[F],
        w: &[F],
        g: &[F],
        mut dw: Option<&mut [F]>,
        mut dx: Option<&mut [F]>,
    ) {
        let (pl, ol, il, k) = (self.patch_len(), self.out_len(), self.in_len(), self.filters);
        match algo {
            Algorithm::Direct => {
                let mut scratch = Vec::new();
                let mut cols = Vec::new();
                for img in 0..n {
                    self.backward_direct(
                        &x[img * il..(img + 1) * il],
                        w,
                        &g[img * k * ol..(img + 1) * k * ol],
                        dw.as_deref_mut(),
                        dx.as_deref_mut().map(|d| &mut d[img * il..(img + 1) * il]),
                        &mut scratch,
                        &mut cols,
                    );
                }
            }
            Algorithm::Gemm { chunk } => {
                let chunk = chunk.min(n);
                let mut cols = vec![F::zero(); pl * chunk * ol];
                let mut gperm = vec![F::zero(); k * chunk * ol];
                for first in (0..n).step_by(chunk) {
                    let nb = chunk.min(n - first);
                    let ld = nb * ol;
                    for b in 0..nb {
                        let src = &g[(first + b) * k * ol..(first + b + 1) * k * ol];
                        for kk in 0..k {
                            gperm[kk * ld + b * ol..kk * ld + (b + 1) * ol].copy_from_slice(&src[kk * ol..(kk + 1) * ol]);
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        for b in 0..nb {
                            let img = first + b;
                            self.im2col(&x[img * il..(img + 1) * il], &mut cols, ld, b * ol);
                        }
                        gemm(k, ld, pl, &gperm, Layout::Normal { cols: ld }, &cols, Layout::Transposed { cols: ld }, F::one(), dw);
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        gemm(pl, k, ld, w, Layout::Transposed { cols: pl }, &gperm, Layout::Normal { cols: ld }, F::zero(), &mut cols);
                        for b in 0..nb {
                            let img = first + b;
                            self.col2im(&cols, ld, b * ol, &mut dx[img * il..(img + 1) * il]);
                        }
                    }
                }
            }
        }
    }
}

/// Convolutions narrower than this always go through GEMM.
const DIRECT_MIN_WIDTH: usize = 16;
/// Channel pairs above which GEMM wins even on wide images.
const DIRECT_MAX_PAIRS: usize = 256;
/// Target GEMM width when packing several small images into one product.
/// From this many filters on, the kernel gradient goes through one GEMM.
const DOTS_MAX_FILTERS: usize = 16;
const GEMM_CHUNK_COLUMNS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Algorithm {
    Direct,
    Gemm { chunk: usize },
}

/// Inner loops of the direct convolution. On x86-64 with AVX2 the same
/// code is compiled a second time with wider vectors and picked at run
/// time; no fused multiply-add is enabled, so both builds round
/// identically.
fn pad4<F: Scalar, const B: usize>(v: [[F; 3]; B]) -> [[F; 3]; 4] {
    let mut out = [[F::zero(); 3]; 4];
    out[..B].copy_from_slice(&v);
    out
}

mod kernels {
    use crate::scalar::Scalar;

    const LANES: usize = 8;

    /// `out[b][j] = Σ_p g[b][p] · src[p + offs[j]]` over `p < g[b].len()`.
    pub(super) fn dots<F: Scalar, const B: usize, const J: usize>(g: [&[F]; B], src: &[F], offs: [usize; J]) -> [[F; J]; B] {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            if std::arch::is_x86_feature_detected!("fma") && B <= 4 && J == 3 {
                if let Some(out) = dots4x3_f32(&g, src, &offs) {
                    return out;
                }
            }
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { dots_avx2(g, src, offs) };
        }
        dots_body(g, src, offs)
    }

    /// The f32 case of [`dots`] with up to four filters and three taps, using explicit FMA vectors.
    #[cfg(target_arch = "x86_64")]
    fn dots4x3_f32<F: Scalar, const B: usize, const J: usize>(
        g: &[&[F]; B],
        src: &[F],
        offs: &[usize; J],
    ) -> Option<[[F; J]; B]> {
        use std::any::TypeId;
        if TypeId::of::<F>() != TypeId::of::<f32>() {
            return None;
        }
        let n = g[0].len();
        assert!(g.iter().all(|gb| gb.len() >= n));
        assert!(offs.iter().all(|&o| o + n <= src.len()));
        // SAFETY: F is f32 (checked above), so the casts are identities; the
        // asserts bound every access; avx2 and fma were detected by the caller.
        let sums = unsafe {
            let gp: [*const f32; B] = std::array::from_fn(|b| g[b].as_ptr() as *const f32);
            let sp: [*const f32; 3] = std::array::from_fn(|j| (src.as_ptr() as *const f32).add(offs[j]));
            match B {
                1 => widen(dots_fma::<1>(gp[..1].try_into().unwrap(), sp, n)),
                2 => widen(dots_fma::<2>(gp[..2].try_into().unwrap(), sp, n)),
                3 => widen(dots_fma::<3>(gp[..3].try_into().unwrap(), sp, n)),
                _ => widen(dots_fma::<4>(gp[..4].try_into().unwrap(), sp, n)),
            }
        };
        let mut out = [[F::zero(); J]; B];
        for b in 0..B {
            for j in 0..J {
                out[b][j] = F::from_f32(sums[b][j]).unwrap_or_else(F::zero);
            }
        }
        Some(out)
    }

    #[cfg(target_arch = "x86_64")]
    fn widen<const B: usize>(v: [[f32; 3]; B]) -> [[f32; 3]; 4] {
        let mut out = [[0.0; 3]; 4];
        out[..B].copy_from_slice(&v);
        out
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn dots_fma<const B: usize>(g: [*const f32; B], s: [*const f32; 3], n: usize) -> [[f32; 3]; B] {
        use std::arch::x86_64::*;
        let mut acc = [[_mm256_setzero_ps(); 3]; B];
        let full = n / 8 * 8;
        let mut p = 0;
        while p < full {
            let x0 = _mm256_loadu_ps(s[0].add(p));
            let x1 = _mm256_loadu_ps(s[1].add(p));
            let x2 = _mm256_loadu_ps(s[2].add(p));
            for b in 0..B {
                let gv = _mm256_loadu_ps(g[b].add(p));
                acc[b][0] = _mm256_fmadd_ps(gv, x0, acc[b][0]);
                acc[b][1] = _mm256_fmadd_ps(gv, x1, acc[b][1]);
                acc[b][2] = _mm256_fmadd_ps(gv, x2, acc[b][2]);
            }
            p += 8;
        }
        let mut out = [[0.0f32; 3]; B];
        for b in 0..B {
            for j in 0..3 {
                let mut lanes = [0.0f32; 8];
                _mm256_storeu_ps(lanes.as_mut_ptr(), acc[b][j]);
                let mut v: f32 = lanes.iter().sum();
                for q in full..n {
                    v += *g[b].add(q) * *s[j].add(q);
                }
                out[b][j] = v;
            }
        }
        out
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn dots_avx2<F: Scalar, const B: usize, const J: usize>(g: [&[F]; B], src: &[F], offs: [usize; J]) -> [[F; J]; B] {
        dots_body(g, src, offs)
    }

    #[inline(always)]
    fn dots_body<F: Scalar, const B: usize, const J: usize>(g: [&[F]; B], src: &[F], offs: [usize; J]) -> [[F; J]; B] {
        let n = g[0].len();
        let g: [&[F]; B] = std::array::from_fn(|b| &g[b][..n]);
        let s: [&[F]; J] = std::array::from_fn(|j| &src[offs[j]..offs[j] + n]);
        // Lane-wise partial sums vectorize without reassociating a reduction.
        let mut acc = [[[F::zero(); LANES]; J]; B];
        let full = n / LANES * LANES;
        let mut p = 0;
        while p < full {
            for j in 0..J {
                let x: &[F; LANES] = s[j][p..p + LANES].try_into().unwrap();
                for b in 0..B {
                    let gv: &[F; LANES] = g[b][p..p + LANES].try_into().unwrap();
                    for l in 0..LANES {
                        acc[b][j][l] += gv[l] * x[l];
                    }
                }
            }
            p += LANES;
        }
        let mut out = [[F::zero(); J]; B];
        for b in 0..B {
            for j in 0..J {
                let mut v = acc[b][j].iter().fold(F::zero(), |a, &x| a + x);
                for q in full..n {
                    v += g[b][q] * s[j][q];
                }
                out[b][j] = v;
            }
        }
        out
    }

    /// `acc[p] += Σ_t w[t] · src[p + offs[t]]` for every `p` in `acc`.
    pub(super) fn correlate<F: Scalar>(acc: &mut [F], src: &[F], offs: &[usize], w: &[F]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { correlate_avx2(acc, src, offs, w) };
        }
        correlate_body(acc, src, offs, w)
    }

    /// Four [`correlate`] calls sharing one source plane: `acc[b]` uses
    /// taps `w[b]`.
    pub(super) fn correlate4<F: Scalar>(acc: [&mut [F]; 4], src: &[F], offs: &[usize; 9], w: [&[F; 9]; 4]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { correlate4_avx2(acc, src, offs, w) };
        }
        correlate4_body(acc, src, offs, w)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn correlate4_avx2<F: Scalar>(acc: [&mut [F]; 4], src: &[F], offs: &[usize; 9], w: [&[F; 9]; 4]) {
        correlate4_body(acc, src, offs, w)
    }

    #[inline(always)]
    fn correlate4_body<F: Scalar>(acc: [&mut [F]; 4], src: &[F], o: &[usize; 9], w: [&[F; 9]; 4]) {
        let [a0, a1, a2, a3] = acc;
        let n = a0.len();
        let (a1, a2, a3) = (&mut a1[..n], &mut a2[..n], &mut a3[..n]);
        let s: [&[F]; 9] = std::array::from_fn(|t| &src[o[t]..o[t] + n]);
        let [s0, s1, s2, s3, s4, s5, s6, s7, s8] = s;
        let (s0, s1, s2, s3, s4, s5, s6, s7, s8) = (
            &s0[..n], &s1[..n], &s2[..n], &s3[..n], &s4[..n], &s5[..n], &s6[..n], &s7[..n], &s8[..n],
        );
        let [w0, w1, w2, w3] = w;
        for p in 0..n {
            let x = [s0[p], s1[p], s2[p], s3[p], s4[p], s5[p], s6[p], s7[p], s8[p]];
            let mut v0 = a0[p];
            let mut v1 = a1[p];
            let mut v2 = a2[p];
            let mut v3 = a3[p];
            for t in 0..9 {
                v0 += w0[t] * x[t];
                v1 += w1[t] * x[t];
                v2 += w2[t] * x[t];
                v3 += w3[t] * x[t];
            }
            a0[p] = v0;
            a1[p] = v1;
            a2[p] = v2;
            a3[p] = v3;
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn correlate_avx2<F: Scalar>(acc: &mut [F], src: &[F], offs: &[usize], w: &[F]) {
        correlate_body(acc, src, offs, w)
    }

    #[inline(always)]
    fn correlate_body<F: Scalar>(acc: &mut [F], src: &[F], offs: &[usize], w: &[F]) {
        let n = acc.len();
        if let (Ok(o), Ok(w)) = (<&[usize; 9]>::try_from(offs), <&[F; 9]>::try_from(w)) {
            let s0 = &src[o[0]..][..n];
            let s1 = &src[o[1]..][..n];
            let s2 = &src[o[2]..][..n];
            let s3 = &src[o[3]..][..n];
            let s4 = &src[o[4]..][..n];
            let s5 = &src[o[5]..][..n];
            let s6 = &src[o[6]..][..n];
            let s7 = &src[o[7]..][..n];
            let s8 = &src[o[8]..][..n];
            for p in 0..n {
                let mut v = acc[p];
                v += w[0] * s0[p];
                v += w[1] * s1[p];
                v += w[2] * s2[p];
                v += w[3] * s3[p];
                v += w[4] * s4[p];
                v += w[5] * s5[p];
                v += w[6] * s6[p];
                v += w[7] * s7[p];
                v += w[8] * s8[p];
                acc[p] = v;
            }
            return;
        }
        for (&o, &wt) in offs.iter().zip(w) {
            for (d, &s) in acc.iter_mut().zip(&src[o..o + n]) {
                *d += wt * s;
            }
        }
    }
}

impl<F: Scalar> Tape<F> {
    /// `input[N,C,H,W] * kernel[K,C,kh,kw] + bias[K] -> [N,K,H',W']`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), opts)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.filters] {
                return Err(NnError::shape(
                    "conv2d",
                    format!("bias {:?} for {} filters", self.shape(b), geom.filters),
                ));
            }
        }
        let n = self.shape(input)[0];
        let k = geom.filters;
        let mut out = vec![F::zero(); n * k * geom.out_len()];
        geom.forward_batch(
            n,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::from_parts(vec![n, k, geom.out_h, geom.out_w], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Max pooling over non-overlapping `window x window` tiles (floor on ragged edges).
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 || window == 0 || s[2] < window || s[3] < window {
            return Err(NnError::shape(
                "max_pool2d",
                format!("cannot pool {s:?} with window {window}"),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / window, w / window);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            // strict comparison keeps the first maximum
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }
}

pub(crate) fn backward<F: Scalar>(
    op: &Op<F>,
    nodes: &[Node<F>],
    g: &[F],
    adj: &mut [Option<Vec<F>>],
) {
    match op {
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let n = nodes[input.0].value.shape()[0];
            let (ol, k) = (geom.out_len(), geom.filters);
            let x = nodes[input.0].value.data();
            let w = nodes[kernel.0].value.data();
            if let Some(b) = bias {
                if let Some(s) = slot(adj, nodes, *b) {
                    for (idx, chunk) in g.chunks(ol).enumerate() {
                        s[idx % k] += chunk.iter().copied().sum::<F>();
                    }
                }
            }
            // Both adjoint buffers are needed at once: move them out of `adj`
            // and put them back afterwards.
            let mut dw = slot(adj, nodes, *kernel).is_some().then(|| adj[kernel.0].take()).flatten();
            let aliased = input.0 == kernel.0;
            let mut dx = if aliased {
                dw.is_some().then(|| vec![F::zero(); x.len()])
            } else {
                slot(adj, nodes, *input).is_some().then(|| adj[input.0].take()).flatten()
            };
            geom.backward_batch(n, x, w, g, dw.as_deref_mut(), dx.as_deref_mut());
            adj[kernel.0] = dw.or(adj[kernel.0].take());
            if let Some(v) = dx {
                match adj[input.0].as_mut() {
                    Some(acc) if aliased => acc.iter_mut().zip(&v).for_each(|(a, &b)| *a += b),
                    _ => adj[input.0] = Some(v),
                }
            }
        }
        Op::MaxPool { input, argmax } => {
            if let Some(s) = slot(adj, nodes, *input) {
                for (&idx, &gv) in argmax.iter().zip(g) {
                    s[idx as usize] += gv;
                }
            }
        }
        _ => unreachable!("not a convolution op"),
    }
}


#[cfg(test)]
mod kernel_timing {
    use super::*;

    #[test]
    #[ignore]
    fn time_kernels() {
        let n = 66 * 63 + 64;
        let src: Vec<f32> = (0..n + 300).map(|i| (i % 17) as f32).collect();
        let offs: Vec<usize> = (0..3).flat_map(|i| (0..3).map(move |j| i * 2 * 66 + j * 2)).collect();
        let o9 = <&[usize; 9]>::try_from(offs.as_slice()).unwrap();
        let w = [0.5f32; 9];
        let mut acc = vec![0.0f32; 4 * n];
        let reps = 2000;
        let t = std::time::Instant::now();
        for _ in 0..reps {
            kernels::correlate(&mut acc[..n], &src, &offs, &w);
        }
        let e = t.elapsed().as_secs_f64();
        println!("correlate: {:.2} GMAC/s", (reps * n * 9) as f64 / e / 1e9);
        let t = std::time::Instant::now();
        for _ in 0..reps / 4 {
            let (a0, r) = acc.split_at_mut(n);
            let (a1, r) = r.split_at_mut(n);
            let (a2, a3) = r.split_at_mut(n);
            kernels::correlate4([a0, a1, a2, a3], &src, o9, [&w, &w, &w, &w]);
        }
        let e = t.elapsed().as_secs_f64();
        println!("correlate4: {:.2} GMAC/s", (reps * n * 9) as f64 / e / 1e9);
        let g: Vec<f32> = (0..n).map(|i| (i % 5) as f32).collect();
        let t = std::time::Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps / 12 {
            let d = kernels::dots::<f32, 4, 3>([&g, &g, &g, &g], &src, [0, 1, 2]);
            sink += d[0][0];
        }
        let e = t.elapsed().as_secs_f64();
        println!("dots4x3: {:.2} GMAC/s {sink}", (reps / 12 * n * 12) as f64 / e / 1e9);
    }
}
