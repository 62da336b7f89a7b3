//! Dense (im2col + GEMM) and depthwise 3-D convolution kernels.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Kernel geometry of a 3-D convolution, axes ordered `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvGeom {
    /// Cubic kernel with "same" padding for the given dilation.
    pub fn cubic(kernel: usize, stride: usize, dilation: usize) -> Self {
        let pad = dilation * (kernel - 1) / 2;
        Self {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [pad; 3],
            dilation: [dilation; 3],
        }
    }

    pub fn pointwise() -> Self {
        Self::cubic(1, 1, 1)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_identity_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = input[a] + 2 * self.padding[a];
            if padded < span || self.stride[a] == 0 {
                return Err(NnError::Shape(format!(
                    "input extent {} too small for kernel span {span} on axis {a}",
                    input[a]
                )));
            }
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Offset of kernel tap `k` on axis `a` relative to `out * stride`.
    #[inline]
    fn offset(&self, a: usize, k: usize) -> isize {
        (k * self.dilation[a]) as isize - self.padding[a] as isize
    }
}

/// Range of output indices `o` such that `o * stride + off` lies in `[0, n_in)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = n_in as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(n_out as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Iterates over every (output z, output y) row of a kernel tap whose input row
/// exists, yielding `(output row start, input row start, x lo, x hi, x offset)`.
#[inline]
fn for_each_row(
    geom: &ConvGeom,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    tap: [usize; 3],
    mut f: impl FnMut(usize, usize, usize, usize, isize),
) {
    let [d, h, w] = in_dims;
    let [od, oh, ow] = out_dims;
    let offs = [
        geom.offset(0, tap[0]),
        geom.offset(1, tap[1]),
        geom.offset(2, tap[2]),
    ];
    let (z0, z1) = valid_range(od, d, geom.stride[0], offs[0]);
    let (y0, y1) = valid_range(oh, h, geom.stride[1], offs[1]);
    let (x0, x1) = valid_range(ow, w, geom.stride[2], offs[2]);
    if x0 >= x1 {
        return;
    }
    for z in z0..z1 {
        let iz = (z * geom.stride[0]) as isize + offs[0];
        for y in y0..y1 {
            let iy = (y * geom.stride[1]) as isize + offs[1];
            let out_row = (z * oh + y) * ow;
            let in_row = (iz as usize * h + iy as usize) * w;
            f(out_row, in_row, x0, x1, offs[2]);
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for i in 0..16 {
            acc[i] += xa[i] * xb[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn taps(geom: &ConvGeom) -> impl Iterator<Item = [usize; 3]> + '_ {
    let [k0, k1, k2] = geom.kernel;
    (0..k0).flat_map(move |a| (0..k1).flat_map(move |b| (0..k2).map(move |c| [a, b, c])))
}

fn im2col(
    x: &[f32],
    channels: usize,
    in_dims: [usize; 3],
    geom: &ConvGeom,
    out_dims: [usize; 3],
    cols: &mut [f32],
) {
    let vol: usize = in_dims.iter().product();
    let p: usize = out_dims.iter().product();
    let sx = geom.stride[2];
    cols.fill(0.0);
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * vol..(c + 1) * vol];
        for tap in taps(geom) {
            let dst = &mut cols[row * p..(row + 1) * p];
            for_each_row(geom, in_dims, out_dims, tap, |orow, irow, lo, hi, off| {
                let out = &mut dst[orow + lo..orow + hi];
                if sx == 1 {
                    let start = (irow as isize + lo as isize + off) as usize;
                    out.copy_from_slice(&xc[start..start + (hi - lo)]);
                } else {
                    for (i, o) in out.iter_mut().enumerate() {
                        let ix = ((lo + i) * sx) as isize + off;
                        *o = xc[irow + ix as usize];
                    }
                }
            });
            row += 1;
        }
    }
}

fn col2im(
    cols: &[f32],
    channels: usize,
    in_dims: [usize; 3],
    geom: &ConvGeom,
    out_dims: [usize; 3],
    dx: &mut [f32],
) {
    let vol: usize = in_dims.iter().product();
    let p: usize = out_dims.iter().product();
    let sx = geom.stride[2];
    let mut row = 0;
    for c in 0..channels {
        let dxc = &mut dx[c * vol..(c + 1) * vol];
        for tap in taps(geom) {
            let src = &cols[row * p..(row + 1) * p];
            for_each_row(geom, in_dims, out_dims, tap, |orow, irow, lo, hi, off| {
                let vals = &src[orow + lo..orow + hi];
                if sx == 1 {
                    let start = (irow as isize + lo as isize + off) as usize;
                    for (d, v) in dxc[start..start + (hi - lo)].iter_mut().zip(vals) {
                        *d += v;
                    }
                } else {
                    for (i, v) in vals.iter().enumerate() {
                        let ix = ((lo + i) * sx) as isize + off;
                        dxc[irow + ix as usize] += v;
                    }
                }
            });
            row += 1;
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: slice lengths cover every strided index for the given m, k, n
    // (asserted above); `c` is row-major m×n and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_conv_shapes(x: &Tensor, w: &Tensor, depthwise: bool) -> Result<([usize; 5], [usize; 5])> {
    let xd = x.dims5()?;
    let wd = w.dims5()?;
    let expect_in = if depthwise { 1 } else { xd[1] };
    if wd[1] != expect_in || (depthwise && wd[0] != xd[1]) {
        return Err(NnError::Shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    Ok((xd, wd))
}

/// Dense convolution forward pass.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: &ConvGeom) -> Result<Tensor> {
    let (xd, wd) = check_conv_shapes(x, w, false)?;
    let [n, ci, d, h, wi] = xd;
    let co = wd[0];
    let in_dims = [d, h, wi];
    let out_dims = geom.output_dims(in_dims)?;
    let p: usize = out_dims.iter().product();
    let kk = ci * geom.kernel_volume();
    let mut out = Tensor::zeros(&[n, co, out_dims[0], out_dims[1], out_dims[2]]);
    let mut cols = if geom.is_identity_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * p]
    };
    let vol = d * h * wi;
    for s in 0..n {
        let xs = &x.data()[s * ci * vol..(s + 1) * ci * vol];
        let b_mat: &[f32] = if geom.is_identity_pointwise() {
            xs
        } else {
            im2col(xs, ci, in_dims, geom, out_dims, &mut cols);
            &cols
        };
        let ys = &mut out.data_mut()[s * co * p..(s + 1) * co * p];
        gemm(co, kk, p, w.data(), (kk as isize, 1), b_mat, (p as isize, 1), 0.0, ys);
        if let Some(b) = b {
            for (c, bias) in b.data().iter().enumerate() {
                for v in &mut ys[c * p..(c + 1) * p] {
                    *v += bias;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

/// Dense convolution backward pass. `dx` is only computed when requested.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeom,
    dy: &Tensor,
    need_dx: bool,
) -> Result<ConvGrads> {
    let (xd, wd) = check_conv_shapes(x, w, false)?;
    let [n, ci, d, h, wi] = xd;
    let co = wd[0];
    let in_dims = [d, h, wi];
    let out_dims = geom.output_dims(in_dims)?;
    let p: usize = out_dims.iter().product();
    let kk = ci * geom.kernel_volume();
    let vol = d * h * wi;
    let pointwise = geom.is_identity_pointwise();
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    let mut dcols = if need_dx && !pointwise {
        vec![0.0; kk * p]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let xs = &x.data()[s * ci * vol..(s + 1) * ci * vol];
        let dys = &dy.data()[s * co * p..(s + 1) * co * p];
        for (c, acc) in db.data_mut().iter_mut().enumerate() {
            *acc += dys[c * p..(c + 1) * p].iter().sum::<f32>();
        }
        let b_mat: &[f32] = if pointwise {
            xs
        } else {
            im2col(xs, ci, in_dims, geom, out_dims, &mut cols);
            &cols
        };
        // dW[co, kk] += dY[co, p] · cols[kk, p]^T
        gemm(co, p, kk, dys, (p as isize, 1), b_mat, (1, p as isize), 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * ci * vol..(s + 1) * ci * vol];
            if pointwise {
                // dX[ci, p] = W[co, ci]^T · dY[co, p]
                gemm(ci, co, p, w.data(), (1, kk as isize), dys, (p as isize, 1), 0.0, dxs);
            } else {
                gemm(kk, co, p, w.data(), (1, kk as isize), dys, (p as isize, 1), 0.0, &mut dcols);
                col2im(&dcols, ci, in_dims, geom, out_dims, dxs);
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Zero-padded frame for stride-1 "same" depthwise kernels: every tap becomes a
/// single contiguous shifted multiply-add over the flattened padded volume.
const CHUNK: usize = 2048;

struct PaddedFrame {
    dims: [usize; 3],
    pad: [usize; 3],
    padded: [usize; 3],
    first: usize,
    len: usize,
    offsets: Vec<isize>,
}

impl PaddedFrame {
    fn new(geom: &ConvGeom, dims: [usize; 3]) -> Option<Self> {
        if geom.stride != [1; 3] {
            return None;
        }
        for a in 0..3 {
            if geom.kernel[a] % 2 == 0 || geom.padding[a] != geom.dilation[a] * (geom.kernel[a] - 1) / 2 {
                return None;
            }
        }
        let pad = geom.padding;
        let padded = [dims[0] + 2 * pad[0], dims[1] + 2 * pad[1], dims[2] + 2 * pad[2]];
        let total: usize = padded.iter().product();
        let vol: usize = dims.iter().product();
        if total > 4 * vol {
            return None;
        }
        let index = |z: usize, y: usize, x: usize| (z * padded[1] + y) * padded[2] + x;
        let first = index(pad[0], pad[1], pad[2]);
        let last = index(pad[0] + dims[0] - 1, pad[1] + dims[1] - 1, pad[2] + dims[2] - 1);
        let offsets = taps(geom)
            .map(|t| {
                let o = [geom.offset(0, t[0]), geom.offset(1, t[1]), geom.offset(2, t[2])];
                (o[0] * padded[1] as isize + o[1]) * padded[2] as isize + o[2]
            })
            .collect();
        Some(Self {
            dims,
            pad,
            padded,
            first,
            len: last - first + 1,
            offsets,
        })
    }

    fn total(&self) -> usize {
        self.padded.iter().product()
    }

    fn rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let [d, h, w] = self.dims;
        (0..d).flat_map(move |z| {
            (0..h).map(move |y| {
                let p = ((z + self.pad[0]) * self.padded[1] + y + self.pad[1]) * self.padded[2] + self.pad[2];
                ((z * h + y) * w, p)
            })
        })
    }

    fn embed(&self, src: &[f32], dst: &mut [f32]) {
        let w = self.dims[2];
        for (s, p) in self.rows() {
            dst[p..p + w].copy_from_slice(&src[s..s + w]);
        }
    }

    fn extract_add(&self, src: &[f32], dst: &mut [f32]) {
        let w = self.dims[2];
        for (s, p) in self.rows() {
            for (d, v) in dst[s..s + w].iter_mut().zip(&src[p..p + w]) {
                *d += v;
            }
        }
    }

    /// Cache-sized pieces of the written span `[first, first + len)`.
    fn chunks(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (self.first..self.first + self.len)
            .step_by(CHUNK)
            .map(|a| a..(a + CHUNK).min(self.first + self.len))
    }

    /// `range` shifted to the input positions read by tap `t`.
    fn shifted(&self, range: &std::ops::Range<usize>, t: usize) -> std::ops::Range<usize> {
        let start = (range.start as isize + self.offsets[t]) as usize;
        start..start + range.len()
    }
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Depthwise convolution (one filter per channel) forward pass.
pub fn depthwise_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: &ConvGeom) -> Result<Tensor> {
    let (xd, _) = check_conv_shapes(x, w, true)?;
    let [n, c, d, h, wi] = xd;
    let in_dims = [d, h, wi];
    let out_dims = geom.output_dims(in_dims)?;
    let p: usize = out_dims.iter().product();
    let vol = d * h * wi;
    let kv = geom.kernel_volume();
    let sx = geom.stride[2];
    let mut out = Tensor::zeros(&[n, c, out_dims[0], out_dims[1], out_dims[2]]);
    if let Some(frame) = PaddedFrame::new(geom, in_dims) {
        let mut xp = vec![0.0; frame.total()];
        let mut yp = vec![0.0; frame.total()];
        for s in 0..n {
            for ch in 0..c {
                frame.embed(&x.data()[(s * c + ch) * vol..][..vol], &mut xp);
                let ys = &mut out.data_mut()[(s * c + ch) * p..][..p];
                ys.fill(b.map_or(0.0, |b| b.data()[ch]));
                let wk = &w.data()[ch * kv..(ch + 1) * kv];
                for r in frame.chunks() {
                    let acc = &mut yp[r.clone()];
                    acc.fill(0.0);
                    for (t, &wv) in wk.iter().enumerate() {
                        axpy(wv, &xp[frame.shifted(&r, t)], acc);
                    }
                }
                frame.extract_add(&yp, ys);
            }
        }
        return Ok(out);
    }
    for s in 0..n {
        for ch in 0..c {
            let xs = &x.data()[(s * c + ch) * vol..][..vol];
            let ys = &mut out.data_mut()[(s * c + ch) * p..][..p];
            if let Some(b) = b {
                ys.fill(b.data()[ch]);
            }
            let wk = &w.data()[ch * kv..(ch + 1) * kv];
            for (t, tap) in taps(geom).enumerate() {
                let wv = wk[t];
                for_each_row(geom, in_dims, out_dims, tap, |orow, irow, lo, hi, off| {
                    let out = &mut ys[orow + lo..orow + hi];
                    if sx == 1 {
                        let start = (irow as isize + lo as isize + off) as usize;
                        for (o, v) in out.iter_mut().zip(&xs[start..start + (hi - lo)]) {
                            *o += wv * v;
                        }
                    } else {
                        for (i, o) in out.iter_mut().enumerate() {
                            let ix = ((lo + i) * sx) as isize + off;
                            *o += wv * xs[irow + ix as usize];
                        }
                    }
                });
            }
        }
    }
    Ok(out)
}

/// Depthwise convolution backward pass.
pub fn depthwise_backward(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeom,
    dy: &Tensor,
    need_dx: bool,
) -> Result<ConvGrads> {
    let (xd, _) = check_conv_shapes(x, w, true)?;
    let [n, c, d, h, wi] = xd;
    let in_dims = [d, h, wi];
    let out_dims = geom.output_dims(in_dims)?;
    let p: usize = out_dims.iter().product();
    let vol = d * h * wi;
    let kv = geom.kernel_volume();
    let sx = geom.stride[2];
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    if let Some(frame) = PaddedFrame::new(geom, in_dims) {
        let mut xp = vec![0.0; frame.total()];
        let mut gp = vec![0.0; frame.total()];
        let mut dxp = vec![0.0; if need_dx { frame.total() } else { 0 }];
        for s in 0..n {
            for ch in 0..c {
                let dys = &dy.data()[(s * c + ch) * p..][..p];
                db.data_mut()[ch] += dys.iter().sum::<f32>();
                frame.embed(&x.data()[(s * c + ch) * vol..][..vol], &mut xp);
                frame.embed(dys, &mut gp);
                dxp.fill(0.0);
                let wk = &w.data()[ch * kv..(ch + 1) * kv];
                let dwk = &mut dw.data_mut()[ch * kv..(ch + 1) * kv];
                for r in frame.chunks() {
                    let g = &gp[r.clone()];
                    for t in 0..kv {
                        let span = frame.shifted(&r, t);
                        dwk[t] += dot(g, &xp[span.clone()]);
                        if need_dx {
                            axpy(wk[t], g, &mut dxp[span]);
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    frame.extract_add(&dxp, &mut dx.data_mut()[(s * c + ch) * vol..][..vol]);
                }
            }
        }
        return Ok(ConvGrads { dx, dw, db });
    }
    for s in 0..n {
        for ch in 0..c {
            let xs = &x.data()[(s * c + ch) * vol..][..vol];
            let dys = &dy.data()[(s * c + ch) * p..][..p];
            db.data_mut()[ch] += dys.iter().sum::<f32>();
            let wk = &w.data()[ch * kv..(ch + 1) * kv];
            let mut dxs = dx
                .as_mut()
                .map(|t| &mut t.data_mut()[(s * c + ch) * vol..][..vol]);
            for (t, tap) in taps(geom).enumerate() {
                let wv = wk[t];
                let mut gw = 0.0f32;
                for_each_row(geom, in_dims, out_dims, tap, |orow, irow, lo, hi, off| {
                    let g = &dys[orow + lo..orow + hi];
                    if sx == 1 {
                        let start = (irow as isize + lo as isize + off) as usize;
                        let xin = &xs[start..start + (hi - lo)];
                        gw += dot(g, xin);
                        if let Some(dxs) = dxs.as_deref_mut() {
                            for (d, gv) in dxs[start..start + (hi - lo)].iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    } else {
                        for (i, gv) in g.iter().enumerate() {
                            let ix = irow + (((lo + i) * sx) as isize + off) as usize;
                            gw += gv * xs[ix];
                            if let Some(dxs) = dxs.as_deref_mut() {
                                dxs[ix] += wv * gv;
                            }
                        }
                    }
                });
                dw.data_mut()[ch * kv + t] += gw;
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}
