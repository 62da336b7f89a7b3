//! Class-average soft Dice loss on single-channel foreground probabilities.
//!
//! For each sample, foreground and background soft Dice are
//! `(2·Σ p·g + ε) / (Σ p + Σ g + ε)` with the background using `1 − p` and
//! `1 − g`; the loss is `1 − (fg + bg) / 2`, averaged over the batch.
//! All sums are carried in `f64`.

pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default)]
struct SampleSums {
    inter_fg: f64,
    sum_fg: f64,
    inter_bg: f64,
    sum_bg: f64,
}

fn sums(pred: &[f32], target: &[f32]) -> SampleSums {
    let mut s = SampleSums::default();
    for (&p, &g) in pred.iter().zip(target) {
        let (p, g) = (p as f64, g as f64);
        s.inter_fg += p * g;
        s.sum_fg += p + g;
        s.inter_bg += (1.0 - p) * (1.0 - g);
        s.sum_bg += (1.0 - p) + (1.0 - g);
    }
    s
}

/// Mean loss over `batch` equally sized samples laid out back to back.
pub fn dice_loss(pred: &[f32], target: &[f32], batch: usize) -> f64 {
    let per = pred.len() / batch.max(1);
    (0..batch)
        .map(|n| {
            let s = sums(&pred[n * per..(n + 1) * per], &target[n * per..(n + 1) * per]);
            let fg = (2.0 * s.inter_fg + DICE_EPS) / (s.sum_fg + DICE_EPS);
            let bg = (2.0 * s.inter_bg + DICE_EPS) / (s.sum_bg + DICE_EPS);
            1.0 - 0.5 * (fg + bg)
        })
        .sum::<f64>()
        / batch.max(1) as f64
}

/// Gradient of [`dice_loss`] with respect to every prediction, times `seed`.
pub fn dice_loss_grad(pred: &[f32], target: &[f32], batch: usize, seed: f64) -> Vec<f32> {
    let per = pred.len() / batch.max(1);
    let mut grad = vec![0f32; pred.len()];
    for n in 0..batch {
        let range = n * per..(n + 1) * per;
        let s = sums(&pred[range.clone()], &target[range.clone()]);
        let den_fg = s.sum_fg + DICE_EPS;
        let num_fg = 2.0 * s.inter_fg + DICE_EPS;
        let den_bg = s.sum_bg + DICE_EPS;
        let num_bg = 2.0 * s.inter_bg + DICE_EPS;
        let k = -0.5 * seed / batch as f64;
        for i in range {
            let g = target[i] as f64;
            let d_fg = (2.0 * g * den_fg - num_fg) / (den_fg * den_fg);
            let d_bg = -(2.0 * (1.0 - g) * den_bg - num_bg) / (den_bg * den_bg);
            grad[i] = (k * (d_fg + d_bg)) as f32;
        }
    }
    grad
}
