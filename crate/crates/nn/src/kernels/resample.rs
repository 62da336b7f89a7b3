//! Separable order-0/order-1 resizing of `[n, c, z, y, x]` tensors.
//!
//! Sample positions follow the half-voxel-centre convention: output index `i`
//! maps to input coordinate `(i + 0.5) · n_in / n_out − 0.5`, clamped to the grid.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interp {
    Nearest,
    Linear,
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f32,
}

fn axis_taps(n_in: usize, n_out: usize, mode: Interp) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| match mode {
            Interp::Nearest => {
                let j = (((i as f64 + 0.5) * scale).floor() as usize).min(n_in - 1);
                Tap { i0: j, i1: j, w1: 0.0 }
            }
            Interp::Linear => {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                Tap {
                    i0,
                    i1,
                    w1: (pos - i0 as f64) as f32,
                }
            }
        })
        .collect()
}

/// Applies taps along the middle axis of a `[outer, n, inner]` array.
fn apply_axis(src: &[f32], outer: usize, n_in: usize, inner: usize, taps: &[Tap]) -> Vec<f32> {
    let n_out = taps.len();
    let mut dst = vec![0f32; outer * n_out * inner];
    for o in 0..outer {
        let s = &src[o * n_in * inner..(o + 1) * n_in * inner];
        let d = &mut dst[o * n_out * inner..(o + 1) * n_out * inner];
        for (i, t) in taps.iter().enumerate() {
            let row = &mut d[i * inner..(i + 1) * inner];
            let a = &s[t.i0 * inner..(t.i0 + 1) * inner];
            let b = &s[t.i1 * inner..(t.i1 + 1) * inner];
            let w0 = 1.0 - t.w1;
            for ((r, &x0), &x1) in row.iter_mut().zip(a).zip(b) {
                *r = w0 * x0 + t.w1 * x1;
            }
        }
    }
    dst
}

/// Transpose of [`apply_axis`].
fn apply_axis_t(src: &[f32], outer: usize, n_in: usize, inner: usize, taps: &[Tap]) -> Vec<f32> {
    let n_out = taps.len();
    let mut dst = vec![0f32; outer * n_in * inner];
    for o in 0..outer {
        let s = &src[o * n_out * inner..(o + 1) * n_out * inner];
        let d = &mut dst[o * n_in * inner..(o + 1) * n_in * inner];
        for (i, t) in taps.iter().enumerate() {
            let g = &s[i * inner..(i + 1) * inner];
            let w0 = 1.0 - t.w1;
            for (k, &gv) in g.iter().enumerate() {
                d[t.i0 * inner + k] += w0 * gv;
            }
            if t.w1 != 0.0 {
                for (k, &gv) in g.iter().enumerate() {
                    d[t.i1 * inner + k] += t.w1 * gv;
                }
            }
        }
    }
    dst
}

pub fn resize_forward(x: &Tensor, out: [usize; 3], mode: Interp) -> Tensor {
    let s = x.shape();
    let (nc, [d, h, w]) = (s[0] * s[1], [s[2], s[3], s[4]]);
    let [od, oh, ow] = out;
    let mut data = apply_axis(x.data(), nc * d * h, w, 1, &axis_taps(w, ow, mode));
    data = apply_axis(&data, nc * d, h, ow, &axis_taps(h, oh, mode));
    data = apply_axis(&data, nc, d, oh * ow, &axis_taps(d, od, mode));
    Tensor::from_vec(&[s[0], s[1], od, oh, ow], data).expect("resize shape")
}

pub fn resize_backward(dy: &Tensor, in_dims: [usize; 3], mode: Interp) -> Tensor {
    let s = dy.shape();
    let (nc, [od, oh, ow]) = (s[0] * s[1], [s[2], s[3], s[4]]);
    let [d, h, w] = in_dims;
    let mut data = apply_axis_t(dy.data(), nc, d, oh * ow, &axis_taps(d, od, mode));
    data = apply_axis_t(&data, nc * d, h, ow, &axis_taps(h, oh, mode));
    data = apply_axis_t(&data, nc * d * h, w, 1, &axis_taps(w, ow, mode));
    Tensor::from_vec(&[s[0], s[1], d, h, w], data).expect("resize shape")
}
