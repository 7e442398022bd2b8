//! Central finite-difference checking of tape gradients. Used by unit tests
//! and by the acceptance suite; kept out of `#[cfg(test)]` for that reason.

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Evaluate the scalar produced by `build` on the given leaf values.
fn eval(leaves: &[Tensor], build: &impl Fn(&mut Tape, &[VarId]) -> VarId) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids);
    tape.value(root).item()
}

/// Compare analytic gradients of a scalar-valued graph against central finite
/// differences over every element of every leaf. Returns the worst symmetric
/// relative error |a - f| / (|a| + |f| + 1e-6).
pub fn check_leaf_gradients(
    leaves: &[Tensor],
    build: impl Fn(&mut Tape, &[VarId]) -> VarId,
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root);

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, id) in ids.iter().enumerate() {
        let analytic = grads[*id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(leaves[li].shape()));
        for ei in 0..work[li].len() {
            let orig = work[li].data()[ei];
            let eps = 1e-5 * orig.abs().max(1.0);
            work[li].data_mut()[ei] = orig + eps;
            let fp = eval(&work, &build);
            work[li].data_mut()[ei] = orig - eps;
            let fm = eval(&work, &build);
            work[li].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[ei];
            let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
