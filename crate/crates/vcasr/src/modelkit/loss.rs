//! Label-smoothed cross entropy.

use crate::error::{Error, Result};
use crate::modelkit::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Cross entropy of `logits` (L x V) against smoothed one-hot targets,
/// q = (1 - eps) * onehot + eps / V, averaged over positions where `active`
/// is true. Inactive positions (padding) contribute nothing.
pub fn label_smoothed_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[u32],
    active: &[bool],
    eps: f64,
) -> Result<Var> {
    let (l, v) = (g.rows(logits), g.cols(logits));
    if targets.len() != l || active.len() != l {
        return Err(Error::Shape(format!(
            "loss over {l} positions, got {} targets / {} mask entries",
            targets.len(),
            active.len()
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let m = active.iter().filter(|&&a| a).count();
    if m == 0 {
        return Err(Error::Input("loss over zero active positions".into()));
    }
    let mut q = Tensor::zeros(l, v);
    for (i, (&t, &a)) in targets.iter().zip(active).enumerate() {
        if !a {
            continue;
        }
        if t as usize >= v {
            return Err(Error::Input(format!("target {t} outside vocabulary of {v}")));
        }
        let row = q.row_mut(i);
        let fill = eps / v as f64;
        for x in row.iter_mut() {
            *x = fill;
        }
        row[t as usize] += 1.0 - eps;
    }
    let qv = g.input(&q);
    let logp = g.log_softmax_rows(logits);
    let prod = g.mul(logp, qv);
    let total = g.sum_all(prod);
    Ok(g.scale(total, -1.0 / m as f64))
}
