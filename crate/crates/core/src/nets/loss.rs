use ndarray::Array2;

use super::layers::Tensor4;
use crate::dataio::NUM_CLASSES;
use crate::error::{Error, Result};

/// Composite regions used by the soft-Dice term: whole, core, enhancing.
const COMPOSITES: [&[usize]; 3] = [&[1, 2, 3], &[1, 3], &[3]];
const DICE_SMOOTH: f64 = 1.0;

/// Hybrid segmentation loss: mean pixel cross-entropy plus a soft-Dice term
/// on the nested composite regions.
#[derive(Clone, Debug)]
pub struct SegLoss {
    pub cross_entropy: f64,
    pub dice: f64,
    /// Gradient of `cross_entropy + dice` with respect to the logits.
    pub grad: Tensor4,
}

impl SegLoss {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.dice
    }
}

/// Per-pixel softmax over the class channel.
pub fn softmax_channels(logits: &Tensor4) -> Tensor4 {
    let area = logits.h * logits.w;
    let mut out = logits.zeros_like();
    for n in 0..logits.n {
        for p in 0..area {
            let at = |c: usize| (n * logits.c + c) * area + p;
            let max = (0..logits.c).map(|c| logits.data[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..logits.c {
                let e = (logits.data[at(c)] - max).exp();
                out.data[at(c)] = e;
                total += e;
            }
            for c in 0..logits.c {
                out.data[at(c)] /= total;
            }
        }
    }
    out
}

/// Gradient with respect to the logits given the softmax output and the
/// gradient with respect to the probabilities.
pub fn softmax_backward(probs: &Tensor4, grad_probs: &Tensor4) -> Tensor4 {
    let area = probs.h * probs.w;
    let mut out = probs.zeros_like();
    for n in 0..probs.n {
        for p in 0..area {
            let at = |c: usize| (n * probs.c + c) * area + p;
            let dot: f64 = (0..probs.c).map(|c| probs.data[at(c)] * grad_probs.data[at(c)]).sum();
            for c in 0..probs.c {
                out.data[at(c)] = probs.data[at(c)] * (grad_probs.data[at(c)] - dot);
            }
        }
    }
    out
}

pub fn segmentation_loss(logits: &Tensor4, labels: &[&Array2<u8>]) -> Result<SegLoss> {
    if logits.c != NUM_CLASSES {
        return Err(Error::validation("logits", format!("expected {NUM_CLASSES} channels")));
    }
    if labels.len() != logits.n {
        return Err(Error::validation("labels", "label count differs from batch size"));
    }
    for l in labels {
        if l.dim() != (logits.h, logits.w) {
            return Err(Error::validation("labels", "label shape differs from logits"));
        }
        if let Some(v) = l.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::validation("labels", format!("label value {v} out of range")));
        }
    }
    let area = logits.h * logits.w;
    let npix = (logits.n * area) as f64;
    let probs = softmax_channels(logits);
    let at = |n: usize, c: usize, p: usize| (n * NUM_CLASSES + c) * area + p;
    let label_at = |n: usize, p: usize| labels[n][[p / logits.w, p % logits.w]] as usize;

    let mut ce = 0.0;
    // d(total)/d(prob), accumulated before the softmax backward
    let mut grad_p = logits.zeros_like();
    for n in 0..logits.n {
        for p in 0..area {
            let y = label_at(n, p);
            let py = probs.data[at(n, y, p)];
            ce -= (py.max(f64::MIN_POSITIVE)).ln();
        }
    }
    ce /= npix;

    let mut dice_sum = 0.0;
    for region in COMPOSITES {
        let mut inter = 0.0;
        let mut pred = 0.0;
        let mut truth = 0.0;
        for n in 0..logits.n {
            for p in 0..area {
                let pr: f64 = region.iter().map(|&c| probs.data[at(n, c, p)]).sum();
                let gt = if region.contains(&label_at(n, p)) { 1.0 } else { 0.0 };
                inter += pr * gt;
                pred += pr;
                truth += gt;
            }
        }
        let denom = pred + truth + DICE_SMOOTH;
        let numer = 2.0 * inter + DICE_SMOOTH;
        dice_sum += numer / denom;
        let scale = -1.0 / COMPOSITES.len() as f64;
        for n in 0..logits.n {
            for p in 0..area {
                let gt = if region.contains(&label_at(n, p)) { 1.0 } else { 0.0 };
                let d = scale * (2.0 * gt * denom - numer) / (denom * denom);
                for &c in region {
                    grad_p.data[at(n, c, p)] += d;
                }
            }
        }
    }
    let dice = 1.0 - dice_sum / COMPOSITES.len() as f64;

    let mut grad = logits.zeros_like();
    for n in 0..logits.n {
        for p in 0..area {
            let dot: f64 = (0..NUM_CLASSES)
                .map(|c| probs.data[at(n, c, p)] * grad_p.data[at(n, c, p)])
                .sum();
            let y = label_at(n, p);
            for c in 0..NUM_CLASSES {
                let pc = probs.data[at(n, c, p)];
                let ce_grad = (pc - if c == y { 1.0 } else { 0.0 }) / npix;
                grad.data[at(n, c, p)] = ce_grad + pc * (grad_p.data[at(n, c, p)] - dot);
            }
        }
    }
    Ok(SegLoss {
        cross_entropy: ce,
        dice,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> (Tensor4, Vec<Array2<u8>>) {
        let logits = Tensor4::from_vec(n, 4, h, w, (0..n * 4 * h * w).map(|_| rng.random_range(-2.0..2.0)).collect());
        let labels = (0..n).map(|_| Array2::from_shape_fn((h, w), |_| rng.random_range(0..4u8))).collect();
        (logits, labels)
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let logits = Tensor4::zeros(2, 4, 3, 3);
        let labels = vec![Array2::from_elem((3, 3), 2u8), Array2::from_elem((3, 3), 0u8)];
        let refs: Vec<_> = labels.iter().collect();
        let loss = segmentation_loss(&logits, &refs).unwrap();
        assert!((loss.cross_entropy - 4.0f64.ln()).abs() < 1e-12);
        assert!((loss.cross_entropy - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_give_zero_ce() {
        let label = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 4) as u8);
        let mut logits = Tensor4::zeros(1, 4, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let i = logits.idx(0, label[[y, x]] as usize, y, x);
                logits.data[i] = 60.0;
            }
        }
        let loss = segmentation_loss(&logits, &[&label]).unwrap();
        assert!(loss.cross_entropy < 1e-20);
    }

    #[test]
    fn pixel_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (logits, labels) = random_case(&mut rng, 1, 4, 4);
        let base = segmentation_loss(&logits, &[&labels[0]]).unwrap();
        // reverse pixel order in both inputs
        let mut perm_logits = logits.clone();
        for c in 0..4 {
            for p in 0..16 {
                perm_logits.data[c * 16 + p] = logits.data[c * 16 + 15 - p];
            }
        }
        let perm_label = Array2::from_shape_fn((4, 4), |(y, x)| {
            let p = 15 - (y * 4 + x);
            labels[0][[p / 4, p % 4]]
        });
        let perm = segmentation_loss(&perm_logits, &[&perm_label]).unwrap();
        assert!((perm.total() - base.total()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor4::zeros(1, 4, 2, 2);
        let label = Array2::from_elem((2, 2), 4u8);
        assert!(matches!(segmentation_loss(&logits, &[&label]), Err(Error::Validation { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (logits, labels) = random_case(&mut rng, 2, 3, 4);
        let refs: Vec<_> = labels.iter().collect();
        let analytic = segmentation_loss(&logits, &refs).unwrap().grad.data;
        let numeric = central_difference(
            |x| {
                let t = Tensor4::from_vec(2, 4, 3, 4, x.to_vec());
                segmentation_loss(&t, &refs).unwrap().total()
            },
            &logits.data,
            1e-5,
        );
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }
}
