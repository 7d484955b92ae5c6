use gdmsr_numerics::{c, softplus, Real, Tape, Tensor, Var};

use crate::Result;

/// `-sum ln sigmoid(pos) - sum ln(1 - sigmoid(neg))` on a tape. Either side
/// may be absent; both absent gives a constant zero.
pub fn bce_link_loss<T: Real>(tape: &mut Tape<T>, pos: Option<Var>, neg: Option<Var>) -> Var {
    let pos = pos.map(|p| {
        let n = tape.neg(p);
        let l = tape.softplus(n);
        tape.sum(l)
    });
    let neg = neg.map(|q| {
        let l = tape.softplus(q);
        tape.sum(l)
    });
    match (pos, neg) {
        (Some(a), Some(b)) => tape.add(a, b).expect("scalars"),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => tape.constant(Tensor::scalar(T::zero())),
    }
}

pub fn bce_link_loss_value(pos: &[f64], neg: &[f64]) -> f64 {
    pos.iter().map(|&x| softplus(-x)).sum::<f64>() + neg.iter().map(|&x| softplus(x)).sum::<f64>()
}

/// `alpha * bce + (1 - alpha) * bpr`.
pub fn joint_loss<T: Real>(tape: &mut Tape<T>, bce: Var, bpr: Var, alpha: f64) -> Result<Var> {
    let a = tape.scale(bce, c::<T>(alpha));
    let b = tape.scale(bpr, c::<T>(1.0 - alpha));
    Ok(tape.add(a, b)?)
}

pub fn joint_loss_value(bce: f64, bpr: f64, alpha: f64) -> f64 {
    alpha * bce + (1.0 - alpha) * bpr
}
