//! BCE + Dice training loss and thresholded segmentation metrics.

use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Probability clamp `[EPS, 1 - EPS]`.
pub const PROB_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 1.0, dice: 1.0 }
    }
}

fn check_target<S: Scalar>(pred: &[usize], target: &Tensor<S>) -> Result<()> {
    if pred != target.shape() {
        return Err(Error::Shape {
            op: "loss",
            lhs: pred.to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if let Some(v) = target.data().iter().find(|&&v| v != S::zero() && v != S::one()) {
        return Err(Error::Contract(format!("target mask must be 0/1, found {v}")));
    }
    Ok(())
}

/// `clamp(sigmoid(logits), EPS, 1 - EPS)`.
pub fn probabilities<'t, S: Scalar>(logits: &Var<'t, S>) -> Var<'t, S> {
    logits.sigmoid().clamp(S::c(PROB_EPS), S::c(1.0 - PROB_EPS))
}

/// `-mean(y ln p + (1 - y) ln(1 - p))` over every pixel.
pub fn bce_from_probs<'t, S: Scalar>(p: &Var<'t, S>, target: &Tensor<S>) -> Result<Var<'t, S>> {
    check_target(p.shape(), target)?;
    let tape = p.tape();
    let y = tape.constant(target.clone());
    let not_y = tape.constant(target.map(|v| S::one() - v));
    let pos = y.mul(&p.ln())?;
    let neg = not_y.mul(&p.neg().add_scalar(S::one()).ln())?;
    Ok(pos.add(&neg)?.mean_all().neg())
}

/// Per-sample soft Dice `1 - (2 Σ p y + s) / (Σ p + Σ y + s)`, averaged over the batch axis.
pub fn dice_from_probs<'t, S: Scalar>(p: &Var<'t, S>, target: &Tensor<S>, smooth: f64) -> Result<Var<'t, S>> {
    check_target(p.shape(), target)?;
    let b = p.shape().first().copied().unwrap_or(1).max(1);
    let per = p.value().len() / b;
    let y = p.tape().constant(target.clone());
    let flat_p = p.reshape(vec![b, per])?;
    let flat_y = y.reshape(vec![b, per])?;
    let inter = flat_p.mul(&flat_y)?.sum_axis(1, false)?;
    let denom = flat_p.sum_axis(1, false)?.add(&flat_y.sum_axis(1, false)?)?.add_scalar(S::c(smooth));
    let ratio = inter.scale(S::c(2.0)).add_scalar(S::c(smooth)).div(&denom)?;
    Ok(ratio.neg().add_scalar(S::one()).mean_all())
}

/// `λ_bce · BCE + λ_dice · Dice` of one logit map.
pub fn bce_dice_loss<'t, S: Scalar>(logits: &Var<'t, S>, target: &Tensor<S>, w: LossWeights) -> Result<Var<'t, S>> {
    let p = probabilities(logits);
    let bce = bce_from_probs(&p, target)?;
    let dice = dice_from_probs(&p, target, DICE_SMOOTH)?;
    bce.scale(S::c(w.bce)).add(&dice.scale(S::c(w.dice)))
}

/// Mean of the per-head losses (one head without deep supervision).
pub fn multi_head_loss<'t, S: Scalar>(heads: &[Var<'t, S>], target: &Tensor<S>, w: LossWeights) -> Result<Var<'t, S>> {
    let (first, rest) = heads
        .split_first()
        .ok_or_else(|| Error::Contract("no prediction heads".into()))?;
    let mut total = bce_dice_loss(first, target, w)?;
    for h in rest {
        total = total.add(&bce_dice_loss(h, target, w)?)?;
    }
    Ok(total.scale(S::c(1.0 / heads.len() as f64)))
}

/// Pixel counts after thresholding; summable across shards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// `p >= threshold` is a positive prediction.
pub fn confusion<S: Scalar>(probs: &Tensor<S>, target: &Tensor<S>, threshold: f64) -> Result<ConfusionCounts> {
    check_target(probs.shape(), target)?;
    let th = S::c(threshold);
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.data().iter().zip(target.data()) {
        match (p >= th, y == S::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Fractions in `[0, 1]`. `miou` is the foreground IoU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub dsc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    Metrics {
        miou: ratio(c.tp, c.tp + c.fp + c.fn_),
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        acc: ratio(c.tp + c.tn, c.total()),
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
    }
}

/// Mean of foreground and background IoU.
pub fn two_class_miou(c: &ConfusionCounts) -> f64 {
    0.5 * (ratio(c.tp, c.tp + c.fp + c.fn_) + ratio(c.tn, c.tn + c.fp + c.fn_))
}
