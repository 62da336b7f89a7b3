//! Independent metric implementations: union-find components over explicit
//! coordinates, Dice by direct counting and greedy pairing by repeated maximum
//! search.

use volseg::volcore::Mask3D;

pub struct Grid {
    pub dims: [usize; 3],
    pub on: Vec<bool>,
}

impl Grid {
    pub fn from_mask(m: &Mask3D) -> Self {
        Self {
            dims: m.dims(),
            on: m.data().iter().map(|&v| v != 0).collect(),
        }
    }

    fn at(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Components as sorted voxel lists, in order of their lowest voxel.
pub fn components(g: &Grid) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = g.dims;
    let mut parent: Vec<usize> = (0..g.on.len()).collect();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.at(x, y, z);
                if !g.on[i] {
                    continue;
                }
                for z2 in z.saturating_sub(1)..=(z + 1).min(nz - 1) {
                    for y2 in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                        for x2 in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                            let j = g.at(x2, y2, z2);
                            if g.on[j] {
                                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                                parent[a.max(b)] = a.min(b);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..g.on.len() {
        if g.on[i] {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|c| c[0]);
    out
}

pub fn dice(a: &Grid, b: &Grid) -> f64 {
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for i in 0..a.on.len() {
        na += a.on[i] as usize;
        nb += b.on[i] as usize;
        inter += (a.on[i] && b.on[i]) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

fn set_dice(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|v| b.contains(v)).count();
    2.0 * inter as f64 / (a.len() + b.len()) as f64
}

/// `(tp, fn, fp)` of greedy matching at detection threshold `dt`.
pub fn pairing(gt: &Grid, pred: &Grid, dt: f64) -> (usize, usize, usize) {
    let gc = components(gt);
    let pc = components(pred);
    let mut g_free = vec![true; gc.len()];
    let mut p_free = vec![true; pc.len()];
    let mut tp = 0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, g) in gc.iter().enumerate().filter(|(i, _)| g_free[*i]) {
            for (j, p) in pc.iter().enumerate().filter(|(j, _)| p_free[*j]) {
                let d = set_dice(g, p);
                if d <= 0.0 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => d > bd || (d == bd && (g[0], p[0]) < (gc[bi][0], pc[bj][0])),
                };
                if better {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((d, i, j)) = best else { break };
        g_free[i] = false;
        p_free[j] = false;
        tp += usize::from(d > dt);
    }
    (tp, gc.len() - tp, pc.len() - tp)
}

/// Recall, precision and F1 in percent from summed counts.
pub fn cohort(counts: &[(usize, usize, usize)]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let tp: usize = counts.iter().map(|c| c.0).sum();
    let fn_: usize = counts.iter().map(|c| c.1).sum();
    let fp: usize = counts.iter().map(|c| c.2).sum();
    let r = (tp + fn_ > 0).then(|| 100.0 * tp as f64 / (tp + fn_) as f64);
    let p = (tp + fp > 0).then(|| 100.0 * tp as f64 / (tp + fp) as f64);
    let f = match (r, p) {
        (Some(r), Some(p)) if r + p > 0.0 => Some(2.0 * r * p / (r + p)),
        _ => None,
    };
    (r, p, f)
}
