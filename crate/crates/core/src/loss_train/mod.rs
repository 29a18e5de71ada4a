//! Training objective, optimizer, patching and the training loop.

mod adam;
mod patches;
mod train;

use crate::error::{Error, Result};
use crate::tensorad::{Real, Tape, Tensor, Var};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use patches::{fuse_patches, generate_patches, Patch};
pub use train::{
    enhance_frame, train, train_from, EpochStats, ManifestSample, TrainConfig, TrainManifest, TrainOutput,
    TrainSample,
};

/// Below this product of variances the correlation term is treated as
/// undefined.
pub const PCC_DEGENERATE_EPS: f64 = 1e-12;

fn check_pair<T: Real>(tape: &Tape<T>, pred: Var, target: Var, what: &str) -> Result<usize> {
    let (p, t) = (tape.value(pred), tape.value(target));
    if p.shape() != t.shape() {
        return Err(Error::Shape(format!("{what}: pred {:?} vs target {:?}", p.shape(), t.shape())));
    }
    Ok(p.numel())
}

/// `(1/n) Σ (pred − target)²`.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, pred, target, "mse")?;
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.reduce_mean(sq))
}

/// `1 − Cov(p, t) / √(Var p · Var t)` with population moments, the ratio
/// clamped to `[−1, 1]`.
///
/// When `Var p · Var t` falls below [`PCC_DEGENERATE_EPS`] the loss is the
/// constant 1 (no gradient) and the returned flag is set.
pub fn pcc_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<(Var, bool)> {
    let n = check_pair(tape, pred, target, "pcc")?;
    if n < 2 {
        return Err(Error::Shape(format!("pcc needs at least 2 values, got {n}")));
    }
    let vp = tape.reduce_var(pred);
    let vt = tape.reduce_var(target);
    let prod = tape.mul(vp, vt)?;
    let pv = tape.value(prod).data()[0].to_f64().unwrap_or(0.0);
    if !(pv >= PCC_DEGENERATE_EPS) {
        return Ok((tape.constant(Tensor::scalar(T::one())), true));
    }
    let cov = tape.reduce_cov(pred, target)?;
    let inv = tape.powf(prod, T::of(-0.5));
    let r = tape.mul(cov, inv)?;
    // Rounding can push |r| past 1 for perfectly (anti-)correlated inputs.
    let r = tape.clamp(r, -T::one(), T::one());
    let neg = tape.scale(r, -T::one());
    Ok((tape.add_scalar(neg, T::one()), false))
}

/// Node handles of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub mse: Var,
    pub pcc: Var,
    pub degenerate: bool,
}

/// `mse + alpha · pcc`.
pub fn joint_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, alpha: f64) -> Result<JointLoss> {
    let mse = mse_loss(tape, pred, target)?;
    let (pcc, degenerate) = pcc_loss(tape, pred, target)?;
    let weighted = tape.scale(pcc, T::of(alpha));
    let total = tape.add(mse, weighted)?;
    Ok(JointLoss { total, mse, pcc, degenerate })
}

/// Loss values for plain slices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub pcc: f64,
    pub degenerate: bool,
}

/// Evaluates [`joint_loss`] on plain 64-bit slices.
pub fn evaluate_loss(pred: &[f64], target: &[f64], alpha: f64) -> Result<LossValue> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::column(pred.to_vec())?);
    let t = tape.constant(Tensor::column(target.to_vec())?);
    let l = joint_loss(&mut tape, p, t, alpha)?;
    let v = |x: Var| tape.value(x).data()[0];
    Ok(LossValue { total: v(l.total), mse: v(l.mse), pcc: v(l.pcc), degenerate: l.degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(evaluate_loss(&[1.0, 3.0], &[0.0, 0.0], 0.0).unwrap().mse, 5.0);
        assert_eq!(evaluate_loss(&[1.0, 3.0], &[1.0, 3.0], 0.0).unwrap().mse, 0.0);
    }

    #[test]
    fn pcc_examples() {
        let same = evaluate_loss(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0], 1.0).unwrap();
        assert!(same.pcc.abs() < 1e-12);
        assert_eq!(same.total, same.pcc);
        let anti = evaluate_loss(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], 1.0).unwrap();
        assert!((anti.pcc - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_variance_gives_one() {
        let v = evaluate_loss(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0], 1.0).unwrap();
        assert!(v.degenerate);
        assert_eq!(v.pcc, 1.0);
        assert!(evaluate_loss(&[1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn degenerate_branch_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::column(vec![2.0; 4]).unwrap());
        let t = tape.constant(Tensor::column(vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (l, degenerate) = pcc_loss(&mut tape, p, t).unwrap();
        assert!(degenerate);
        let g = tape.backward(l).unwrap();
        assert!(g.get(p).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
