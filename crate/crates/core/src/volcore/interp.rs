//! Separable order-1 interpolation along grid axes.

/// One output sample as a blend of two input samples: `(1 - w)·v[i0] + w·v[i1]`.
/// `w` may leave `[0, 1]` for linear extrapolation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    i0: usize,
    i1: usize,
    w: f64,
}

/// Output index `i` samples input coordinate `i · step` (voxel-0 centres
/// coincide). Past the last sample the end segment is extended linearly so
/// that globally linear fields are reproduced everywhere.
pub(crate) fn origin_aligned(n_in: usize, n_out: usize, step: f64) -> Vec<Tap> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 {
                return Tap { i0: 0, i1: 0, w: 0.0 };
            }
            let u = i as f64 * step;
            let i0 = (u.floor() as usize).min(n_in - 2);
            Tap {
                i0,
                i1: i0 + 1,
                w: u - i0 as f64,
            }
        })
        .collect()
}

/// Output index `i` samples input coordinate `(i + 0.5)·n_in/n_out − 0.5`,
/// clamped to the grid (cell-centre alignment, no extrapolation).
pub(crate) fn centre_aligned(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let u = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            Tap { i0, i1, w: u - i0 as f64 }
        })
        .collect()
}

/// Position of output voxel 0 in input voxel units under [`centre_aligned`].
pub(crate) fn centre_aligned_offset(n_in: usize, n_out: usize) -> f64 {
    0.5 * n_in as f64 / n_out as f64 - 0.5
}

fn apply_axis(data: &[f64], dims: [usize; 3], axis: usize, taps: &[Tap]) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = taps.len();
    let [nx, ny, _] = dims;
    let [ox, oy, oz] = out_dims;
    let mut out = vec![0.0; ox * oy * oz];
    let src = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)];
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut p = [x, y, z];
                let t = taps[p[axis]];
                p[axis] = t.i0;
                let a = src(p[0], p[1], p[2]);
                p[axis] = t.i1;
                let b = src(p[0], p[1], p[2]);
                out[x + ox * (y + oy * z)] = a + t.w * (b - a);
            }
        }
    }
    (out, out_dims)
}

/// Trilinear resampling with per-axis taps (x, y, z).
pub(crate) fn resample(data: &[f32], dims: [usize; 3], taps: [Vec<Tap>; 3]) -> Vec<f32> {
    let mut cur: Vec<f64> = data.iter().map(|&v| v as f64).collect();
    let mut d = dims;
    for (axis, t) in taps.iter().enumerate() {
        if d[axis] == t.len() && t.iter().enumerate().all(|(i, tap)| tap.i0 == i && tap.w == 0.0) {
            continue;
        }
        let (next, nd) = apply_axis(&cur, d, axis, t);
        cur = next;
        d = nd;
    }
    cur.into_iter().map(|v| v as f32).collect()
}
