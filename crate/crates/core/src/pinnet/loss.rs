use crate::micrograd::{Scalar, Tensor};

use super::NetworkOutput;

/// Probabilities are clamped here before the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Direction class of a displacement: `2i` for a positive step on the axis of
/// largest magnitude, `2i + 1` otherwise (zero included). Lowest axis wins ties.
pub fn gt_label(d_gt: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in d_gt.iter().enumerate().skip(1) {
        if v.abs() > d_gt[best].abs() {
            best = i;
        }
    }
    if d_gt[best] > 0.0 {
        2 * best
    } else {
        2 * best + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    /// Mean squared displacement error per component.
    pub regression: f64,
    /// Mean negative log-probability of the true class.
    pub classification: f64,
}

/// Joint loss over a batch: `(1-α)·regression + α·classification`.
pub fn loss(outputs: &[NetworkOutput], d_gt: &[Vec<f64>], alpha: f64) -> LossTerms {
    let n = outputs.len() as f64;
    let mut sq = 0.0;
    let mut nll = 0.0;
    let mut n_o = 1;
    for (out, gt) in outputs.iter().zip(d_gt) {
        n_o = gt.len();
        sq += out.d.iter().zip(gt).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
        nll -= out.p[gt_label(gt)].max(PROB_FLOOR).ln();
    }
    let regression = sq / (n_o as f64 * n);
    let classification = nll / n;
    LossTerms { total: (1.0 - alpha) * regression + alpha * classification, regression, classification }
}

/// Loss plus the gradient seeds for the `d` (`[n, n_o]`) and `P` (`[n, 2n_o]`) outputs.
pub fn loss_and_seeds<T: Scalar>(
    d: &Tensor<T>,
    p: &Tensor<T>,
    d_gt: &[Vec<f64>],
    alpha: f64,
) -> (LossTerms, Tensor<T>, Tensor<T>) {
    let n = d_gt.len();
    let n_o = d.shape()[1];
    let outputs: Vec<NetworkOutput> = d
        .data()
        .chunks(n_o)
        .zip(p.data().chunks(2 * n_o))
        .map(|(dc, pc)| NetworkOutput {
            d: dc.iter().map(|v| v.as_f64()).collect(),
            p: pc.iter().map(|v| v.as_f64()).collect(),
        })
        .collect();
    let terms = loss(&outputs, d_gt, alpha);

    let reg_scale = 2.0 * (1.0 - alpha) / (n_o * n) as f64;
    let mut gd = Tensor::zeros(d.shape());
    let mut gp = Tensor::zeros(p.shape());
    for (k, (out, gt)) in outputs.iter().zip(d_gt).enumerate() {
        for i in 0..n_o {
            gd.data_mut()[k * n_o + i] = T::from_f64(reg_scale * (out.d[i] - gt[i]));
        }
        let c = gt_label(gt);
        let pc = out.p[c];
        if alpha != 0.0 && pc > PROB_FLOOR {
            gp.data_mut()[k * 2 * n_o + c] = T::from_f64(-alpha / (n as f64 * pc));
        }
    }
    (terms, gd, gp)
}
