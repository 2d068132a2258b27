//! Segmentation objectives on `[B, K, H, W]` logits and integer label maps.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DICE_SMOOTH: f64 = 1e-5;

/// One-hot encoding of `labels` (row-major `[B, H, W]`) as `[B, K, H, W]`.
pub fn one_hot<T: Element>(labels: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
    let (b, k, h, w) = dims(shape)?;
    if labels.len() != b * h * w {
        return Err(Error::invalid(
            "one_hot",
            format!("{} labels for logits {shape:?}", labels.len()),
        ));
    }
    let mut data = vec![T::zero(); b * k * h * w];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
        let (bi, px) = (i / (h * w), i % (h * w));
        data[(bi * k + l) * h * w + px] = T::one();
    }
    Tensor::new(shape.to_vec(), data)
}

fn dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, k, h, w] => Ok((b, k, h, w)),
        _ => Err(Error::invalid(
            "loss",
            format!("expected [B, K, H, W] logits, got {shape:?}"),
        )),
    }
}

/// `[B, K, H, W] -> [K]`, summing over batch and pixels.
fn per_class_sum<T: Element>(g: &mut Graph<T>, x: Var, b: usize, k: usize, hw: usize) -> Result<Var> {
    let x = g.reshape(x, vec![b, k, hw])?;
    let x = g.sum(x, 2)?;
    let x = if b == 1 { g.reshape(x, vec![k])? } else { g.sum(x, 0)? };
    Ok(x)
}

/// Softmax dice loss: `1 - mean_k (2 Σ p g + s) / (Σ p + Σ g + s)`, sums
/// taken over the whole batch.
pub fn dice_loss<T: Element>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, smooth: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if target.shape() != shape.as_slice() {
        return Err(Error::shape("dice_loss", &shape, target.shape()));
    }
    let (b, k, h, w) = dims(&shape)?;
    let p = g.softmax(logits, 1)?;
    let t = g.constant(target.clone());
    let pt = g.mul(p, t)?;
    let inter = per_class_sum(g, pt, b, k, h * w)?;
    let psum = per_class_sum(g, p, b, k, h * w)?;
    let tsum = per_class_sum(g, t, b, k, h * w)?;
    let s = T::from_f64_lossy(smooth);
    let num = g.scale(inter, T::from_f64_lossy(2.0));
    let num = g.add_scalar(num, s);
    let den = g.add(psum, tsum)?;
    let den = g.add_scalar(den, s);
    let ratio = g.div(num, den)?;
    let m = g.mean_all(ratio);
    let neg = g.scale(m, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

/// Mean pixelwise cross-entropy.
pub fn ce_loss<T: Element>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if target.shape() != shape.as_slice() {
        return Err(Error::shape("ce_loss", &shape, target.shape()));
    }
    let (b, _, h, w) = dims(&shape)?;
    let lp = g.log_softmax(logits, 1)?;
    let t = g.constant(target.clone());
    let picked = g.mul(lp, t)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, T::from_f64_lossy(-1.0 / (b * h * w) as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dice: 0.6, ce: 0.4 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub dice: Var,
    pub ce: Var,
    pub total: Var,
}

pub fn combined_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    weights: LossWeights,
) -> Result<LossTerms> {
    let target = one_hot::<T>(labels, g.shape(logits))?;
    let dice = dice_loss(g, logits, &target, DICE_SMOOTH)?;
    let ce = ce_loss(g, logits, &target)?;
    let a = g.scale(dice, T::from_f64_lossy(weights.dice));
    let b = g.scale(ce, T::from_f64_lossy(weights.ce));
    let total = g.add(a, b)?;
    Ok(LossTerms { dice, ce, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, GradcheckOptions};

    fn peaked(labels: &[usize], k: usize, h: usize, w: usize, margin: f64) -> Tensor<f64> {
        let b = labels.len() / (h * w);
        let mut d = vec![0.0; b * k * h * w];
        for (i, &l) in labels.iter().enumerate() {
            let (bi, px) = (i / (h * w), i % (h * w));
            d[(bi * k + l) * h * w + px] = margin;
        }
        Tensor::new(vec![b, k, h, w], d).unwrap()
    }

    fn eval(logits: Tensor<f64>, labels: &[usize], weights: LossWeights) -> (f64, f64, f64) {
        let mut g = Graph::new();
        let x = g.constant(logits);
        let t = combined_loss(&mut g, x, labels, weights).unwrap();
        (g.value(t.dice).item(), g.value(t.ce).item(), g.value(t.total).item())
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in 2..=8 {
            let labels: Vec<usize> = (0..2 * 3 * 5).map(|i| i % k).collect();
            let (_, ce, _) = eval(Tensor::zeros(vec![2, k, 3, 5]), &labels, LossWeights::default());
            assert!((ce - (k as f64).ln()).abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn uniform_binary_balanced_dice_is_half() {
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let (dice, _, _) = eval(Tensor::zeros(vec![1, 2, 4, 4]), &labels, LossWeights::default());
        // per class (2*4 + s) / (8 + 8 + s)
        let s = DICE_SMOOTH;
        assert!((dice - (1.0 - (8.0 + s) / (16.0 + s))).abs() < 1e-12);
        assert!((dice - 0.5).abs() < 1e-6);
    }

    #[test]
    fn peaked_logits_drive_losses_to_zero() {
        let labels: Vec<usize> = (0..2 * 36).map(|i| (i * 7 / 5) % 3).collect();
        let (dice, ce, total) = eval(peaked(&labels, 3, 6, 6, 20.0), &labels, LossWeights::default());
        assert!((0.0..0.01).contains(&dice));
        assert!((0.0..1e-6).contains(&ce));
        assert!(total < 0.01);
    }

    #[test]
    fn ce_weight_is_linear() {
        let labels: Vec<usize> = (0..16).map(|i| (i / 3) % 2).collect();
        let logits = Tensor::from_f64(
            vec![1, 2, 4, 4],
            &(0..32).map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.6).collect::<Vec<_>>(),
        )
        .unwrap();
        let (d, c, t1) = eval(logits.clone(), &labels, LossWeights { dice: 0.6, ce: 0.4 });
        let (_, _, t2) = eval(logits, &labels, LossWeights { dice: 0.6, ce: 0.8 });
        assert!((t1 - (0.6 * d + 0.4 * c)).abs() < 1e-12);
        assert!(((t2 - t1) - 0.4 * c).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_labels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        assert!(matches!(
            combined_loss(&mut g, x, &[0, 1, 2, 0], LossWeights::default()),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(combined_loss(&mut g, x, &[0, 1, 1], LossWeights::default()).is_err());
    }

    #[test]
    fn losses_gradcheck() {
        let labels: Vec<usize> = (0..2 * 9).map(|i| (i * 5 / 3) % 3).collect();
        let x = Tensor::from_f64(
            vec![2, 3, 3, 3],
            &(0..54).map(|i| ((i * 29) % 13) as f64 / 5.0 - 1.2).collect::<Vec<_>>(),
        )
        .unwrap();
        let target = one_hot::<f64>(&labels, &[2, 3, 3, 3]).unwrap();
        for which in 0..3 {
            let rep = gradcheck(
                |g, v| match which {
                    0 => dice_loss(g, v[0], &target, DICE_SMOOTH),
                    1 => ce_loss(g, v[0], &target),
                    _ => Ok(combined_loss(g, v[0], &labels, LossWeights::default())?.total),
                },
                std::slice::from_ref(&x),
                &GradcheckOptions::with_tol(1e-4),
            )
            .unwrap();
            assert!(rep.passed, "{which}: {rep}");
        }
    }
}
