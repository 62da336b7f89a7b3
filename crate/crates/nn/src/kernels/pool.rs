//! Non-overlapping max pooling with per-axis window sizes.

use crate::tensor::Tensor;

/// Max pooling where window = stride per axis; trailing remainders are dropped.
/// Returns the pooled tensor and, per output element, the flat index of the
/// winning input element within its `(sample, channel)` grid.
pub fn max_pool_forward(x: &Tensor, window: [usize; 3]) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let (nc, [d, h, w]) = (s[0] * s[1], [s[2], s[3], s[4]]);
    let [od, oh, ow] = [d / window[0], h / window[1], w / window[2]];
    let vol = d * h * w;
    let p = od * oh * ow;
    let mut out = Tensor::zeros(&[s[0], s[1], od, oh, ow]);
    let mut arg = vec![0u32; nc * p];
    for g in 0..nc {
        let src = &x.data()[g * vol..(g + 1) * vol];
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best_i = (z * window[0] * h + y * window[1]) * w + xo * window[2];
                    let mut best = src[best_i];
                    for a in 0..window[0] {
                        for b in 0..window[1] {
                            let row = ((z * window[0] + a) * h + y * window[1] + b) * w;
                            for c in 0..window[2] {
                                let i = row + xo * window[2] + c;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = (z * oh + y) * ow + xo;
                    out.data_mut()[g * p + o] = best;
                    arg[g * p + o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(dy: &Tensor, arg: &[u32], in_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let vol: usize = in_shape[2..].iter().product();
    let p: usize = dy.shape()[2..].iter().product();
    let nc = in_shape[0] * in_shape[1];
    for g in 0..nc {
        for o in 0..p {
            dx.data_mut()[g * vol + arg[g * p + o] as usize] += dy.data()[g * p + o];
        }
    }
    dx
}
