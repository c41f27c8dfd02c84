//! Segmentation losses over sigmoid probabilities.
//!
//! Tensors are treated as `[batch, ...]`; BCE averages over every pixel in
//! the batch, Dice is evaluated per sample and averaged over the batch.
//! Rank-0/1 tensors count as a single sample.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Bce,
    Dice,
    BceDice,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Bce, LossKind::Dice, LossKind::BceDice];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::Dice => "dice",
            LossKind::BceDice => "bce_dice",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "dice" => Ok(LossKind::Dice),
            "bce_dice" => Ok(LossKind::BceDice),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected bce | dice | bce_dice)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Dice smoothing term.
    pub epsilon: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` before logs.
    pub clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::BceDice,
            epsilon: 1e-5,
            bce_weight: 0.3,
            dice_weight: 0.7,
            clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("loss epsilon must be positive".into()));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::Config("loss clamp must lie in (0, 0.5)".into()));
        }
        if self.bce_weight < 0.0
            || self.dice_weight < 0.0
            || (self.bce_weight + self.dice_weight - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(
                "bce/dice weights must be non-negative and sum to 1".into(),
            ));
        }
        Ok(())
    }

    pub fn evaluate<S: Scalar>(&self, pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
        Ok(self.value_and_grad(pred, target, false)?.0)
    }

    /// Loss value and, when `with_grad`, its gradient with respect to `pred`.
    pub fn value_and_grad<S: Scalar>(
        &self,
        pred: &Tensor<S>,
        target: &Tensor<S>,
        with_grad: bool,
    ) -> Result<(S, Option<Tensor<S>>)> {
        check_pair(pred, target)?;
        let (wb, wd) = match self.kind {
            LossKind::Bce => (1.0, 0.0),
            LossKind::Dice => (0.0, 1.0),
            LossKind::BceDice => (self.bce_weight, self.dice_weight),
        };
        let mut value = S::zero();
        let mut grad = with_grad.then(|| vec![S::zero(); pred.numel()]);
        if wb != 0.0 {
            value += S::lit(wb) * bce_impl(pred, target, self.clamp, S::lit(wb), grad.as_deref_mut());
        }
        if wd != 0.0 {
            value += S::lit(wd) * dice_impl(pred, target, self.epsilon, S::lit(wd), grad.as_deref_mut());
        }
        let grad = match grad {
            Some(g) => Some(Tensor::new(pred.shape().to_vec(), g)?),
            None => None,
        };
        Ok((value, grad))
    }
}

fn check_pair<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(shape_err!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    Ok(())
}

fn batch_of<S: Scalar>(t: &Tensor<S>) -> usize {
    if t.rank() >= 2 {
        t.shape()[0]
    } else {
        1
    }
}

fn bce_impl<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    clamp: f64,
    weight: S,
    grad: Option<&mut [S]>,
) -> S {
    let lo = S::lit(clamp);
    let hi = S::one() - lo;
    let n = S::lit(pred.numel() as f64);
    let mut total = S::zero();
    for (&s, &r) in pred.data().iter().zip(target.data()) {
        let s = s.max(lo).min(hi);
        total -= r * s.ln() + (S::one() - r) * (S::one() - s).ln();
    }
    if let Some(g) = grad {
        for ((gi, &s), &r) in g.iter_mut().zip(pred.data()).zip(target.data()) {
            // clamp is flat outside [lo, hi]
            if s < lo || s > hi {
                continue;
            }
            *gi += weight * (-r / s + (S::one() - r) / (S::one() - s)) / n;
        }
    }
    total / n
}

fn dice_impl<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    epsilon: f64,
    weight: S,
    mut grad: Option<&mut [S]>,
) -> S {
    let batch = batch_of(pred);
    let per = pred.numel() / batch;
    let eps = S::lit(epsilon);
    let two = S::lit(2.0);
    let bs = S::lit(batch as f64);
    let mut total = S::zero();
    for b in 0..batch {
        let s = &pred.data()[b * per..(b + 1) * per];
        let r = &target.data()[b * per..(b + 1) * per];
        let inter: S = s.iter().zip(r).map(|(&a, &b)| a * b).sum();
        let ssum: S = s.iter().copied().sum();
        let rsum: S = r.iter().copied().sum();
        let num = two * inter + eps;
        let den = ssum + rsum + eps;
        total += S::one() - num / den;
        if let Some(g) = grad.as_deref_mut() {
            let den2 = den * den;
            for (gi, &ri) in g[b * per..(b + 1) * per].iter_mut().zip(r) {
                *gi -= weight * (two * ri * den - num) / den2 / bs;
            }
        }
    }
    total / bs
}

/// Mean binary cross entropy with probability clamping.
pub fn bce_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    LossConfig::new(LossKind::Bce).evaluate(pred, target)
}

/// `1 - (2 sum(s r) + eps) / (sum(s) + sum(r) + eps)`, averaged over the batch.
pub fn dice_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    LossConfig::new(LossKind::Dice).evaluate(pred, target)
}

/// `0.3 * BCE + 0.7 * Dice`.
pub fn bce_dice_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    LossConfig::new(LossKind::BceDice).evaluate(pred, target)
}
