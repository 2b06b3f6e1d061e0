//! Segmentation cross-entropy, soft Dice loss, multi-task EWC penalty and the
//! weighted composite objective.

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::fisher::FisherSnapshot;
use crate::model::{ParamVars, SegLogits};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_seg: f64,
    pub w_dice: f64,
    pub w_ewc: f64,
    /// Dice smoothing term.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_seg: 1.0, w_dice: 0.3, w_ewc: 10.0, epsilon: 1e-6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_seg < 0.0 || self.w_dice < 0.0 || self.w_ewc < 0.0 {
            bail!(Config, "loss weights must be nonnegative: {:?}", self);
        }
        if self.epsilon <= 0.0 {
            bail!(Config, "dice epsilon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub dice: f64,
    pub ewc: f64,
    pub total: f64,
}

fn check_mask<T: Scalar>(tape: &Tape<T>, logits: Var, mask: &Tensor<T>) -> Result<(usize, usize)> {
    let s = tape.shape(logits);
    if s.len() != 4 || s[1] != 2 {
        bail!(Dimension, "segmentation logits must be [batch, 2, H, W], got {:?}", s);
    }
    if mask.shape() != [s[0], s[2], s[3]] {
        bail!(Dimension, "mask shape {:?} does not match logits {:?}", mask.shape(), s);
    }
    if let Some(v) = mask.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        bail!(Input, "mask value {v} outside {{0, 1}}");
    }
    Ok((s[0], s[2] * s[3]))
}

/// Mean two-class cross-entropy over batch and pixels, softmax over channels.
pub fn seg_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, mask: &Tensor<T>) -> Result<Var> {
    let (batch, hw) = check_mask(tape, logits, mask)?;
    let mut onehot = Vec::with_capacity(batch * 2 * hw);
    for b in 0..batch {
        let m = &mask.data()[b * hw..(b + 1) * hw];
        onehot.extend(m.iter().map(|&y| T::one() - y));
        onehot.extend_from_slice(m);
    }
    let target = tape.constant(Tensor::new(tape.shape(logits).to_vec(), onehot)?);
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -T::one() / T::of((batch * hw) as f64)))
}

/// Soft Dice loss on the foreground softmax probability.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, mask: &Tensor<T>, epsilon: T) -> Result<Var> {
    let (batch, hw) = check_mask(tape, logits, mask)?;
    let probs = tape.softmax(logits, 1)?;
    let fg = tape.select(probs, 1, 1)?;
    let fg = tape.reshape(fg, &[batch, hw])?;
    let y = mask.clone().reshape(&[batch, hw])?;
    let y_sum: Vec<T> = (0..batch).map(|b| y.data()[b * hw..(b + 1) * hw].iter().copied().sum::<T>() + epsilon).collect();
    let y = tape.constant(y);
    let inter = tape.mul(fg, y)?;
    let inter = tape.sum_axis(inter, 1)?;
    let p_sum = tape.sum_axis(fg, 1)?;
    let y_sum = tape.constant(Tensor::new(vec![batch], y_sum)?);
    let denom = tape.add(p_sum, y_sum)?;
    let num = tape.scale(inter, T::of(2.0));
    let ratio = tape.div(num, denom)?;
    let mean = tape.mean(ratio)?;
    let neg = tape.neg(mean);
    Ok(tape.add_scalar(neg, T::one()))
}

/// Sum over snapshots `j` and groups `m` of
/// `w_m^(j) Σ_{θ∈m} F^(j)(θ) (θ - θ*^(j))²`, using each snapshot's own
/// frozen group assignment. Returns a constant zero when `snapshots` is empty.
pub fn ewc_penalty<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, snapshots: &[FisherSnapshot]) -> Result<Var> {
    let mut terms = Vec::new();
    for snap in snapshots {
        for (name, anchor) in &snap.anchor {
            let Some(&param) = vars.get(name) else {
                bail!(State, "snapshot {} anchors unknown block `{name}`", snap.task_id);
            };
            if tape.shape(param).iter().product::<usize>() != anchor.len() {
                bail!(State, "snapshot {}: anchor of `{name}` has {} values, parameter has shape {:?}", snap.task_id, anchor.len(), tape.shape(param));
            }
            let coef = snap.coefficients(name)?;
            if coef.iter().all(|&c| c == 0.0) {
                continue;
            }
            let shape = tape.shape(param).to_vec();
            let anchor = tape.constant(Tensor::new(shape.clone(), anchor.iter().map(|&v| T::of(v)).collect())?);
            let coef = tape.constant(Tensor::new(shape, coef.into_iter().map(T::of).collect())?);
            let diff = tape.sub(param, anchor)?;
            let sq = tape.mul(diff, diff)?;
            let weighted = tape.mul(sq, coef)?;
            terms.push(tape.sum(weighted));
        }
    }
    let mut acc = tape.constant(Tensor::scalar(T::zero()));
    for t in terms {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Weighted total of already-evaluated loss components.
pub fn total_loss(seg: f64, dice: f64, ewc: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("seg", seg), ("dice", dice), ("ewc", ewc)] {
        if !v.is_finite() {
            bail!(Numeric, "{name} loss component is {v}");
        }
    }
    let total = weights.w_seg * seg + weights.w_dice * dice + weights.w_ewc * ewc;
    Ok(LossBreakdown { seg, dice, ewc, total })
}

/// Handles of the composite objective recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CompositeLoss {
    pub seg: Var,
    pub dice: Var,
    pub ewc: Var,
    pub total: Var,
}

impl CompositeLoss {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> Result<LossBreakdown> {
        let v = |x: Var| -> Result<f64> { Ok(tape.value(x).item()?.to_f64_lossy()) };
        Ok(LossBreakdown { seg: v(self.seg)?, dice: v(self.dice)?, ewc: v(self.ewc)?, total: v(self.total)? })
    }
}

/// Records `w_seg·seg + w_dice·dice + w_ewc·ewc` on the tape.
pub fn composite_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    logits: Var,
    mask: &Tensor<T>,
    snapshots: &[FisherSnapshot],
    weights: &LossWeights,
) -> Result<CompositeLoss> {
    let seg = seg_ce(tape, logits, mask)?;
    let dice = dice_loss(tape, logits, mask, T::of(weights.epsilon))?;
    let ewc = ewc_penalty(tape, vars, snapshots)?;
    let a = tape.scale(seg, T::of(weights.w_seg));
    let b = tape.scale(dice, T::of(weights.w_dice));
    let c = tape.scale(ewc, T::of(weights.w_ewc));
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(CompositeLoss { seg, dice, ewc, total })
}

/// Cross-entropy of materialized logits.
pub fn seg_ce_value(logits: &SegLogits, mask: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.values.clone());
    let v = seg_ce(&mut tape, l, mask)?;
    tape.value(v).item()
}

/// Dice loss of materialized logits.
pub fn dice_loss_value(logits: &SegLogits, mask: &Tensor, epsilon: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.values.clone());
    let v = dice_loss(&mut tape, l, mask, epsilon)?;
    tape.value(v).item()
}
