//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::modelkit::params::{GradStore, Params};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compare `grads` (from one analytic backward pass) against central finite
/// differences of `loss_fn` over every element of every parameter.
///
/// The error measure is |analytic - fd| / max(|analytic|, |fd|, 1e-3); the
/// absolute floor keeps finite-difference noise on near-zero gradients from
/// dominating the report while still catching any real sign/scale bug.
pub fn gradient_check<F>(
    params: &mut Params,
    grads: &GradStore,
    mut loss_fn: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Params) -> Result<f64>,
{
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        tol,
    };
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let fp = loss_fn(params);
            params.get_mut(id).data_mut()[i] = orig - h;
            let fm = loss_fn(params);
            params.get_mut(id).data_mut()[i] = orig;
            let (fp, fm) = (fp?, fm?);
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.get(id).data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::graph::{Graph, Tape};
    use crate::modelkit::params::xavier;
    use crate::seeds;
    use crate::tensor::Tensor;

    /// Single linear layer + quadratic loss: gradients are exact, so the
    /// relative error is tiny.
    #[test]
    fn linear_quadratic_is_exact() {
        let mut rng = seeds::rng(2, "gc");
        let mut p = Params::new();
        let w = p.add("w", xavier(3, 2, &mut rng));
        let x = Tensor::row_vector(vec![0.7, -1.3, 2.1]);

        let loss_of = |p: &Params| -> Result<f64> {
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, p);
            let wv = g.param(w);
            let xv = g.input(&x);
            let y = g.matmul(xv, wv);
            let sq = g.mul(y, y);
            let l = g.sum_all(sq);
            Ok(g.value(l)[0])
        };

        let mut grads = GradStore::zeros_like(&p);
        {
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, &p);
            let wv = g.param(w);
            let xv = g.input(&x);
            let y = g.matmul(xv, wv);
            let sq = g.mul(y, y);
            let l = g.sum_all(sq);
            g.backward(l, 1.0, &mut grads);
        }
        let report = gradient_check(&mut p, &grads, loss_of, 1e-4, 1e-3).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 6);
    }

    /// Negative control: doubling the analytic gradients must fail the check.
    #[test]
    fn corrupted_gradients_fail() {
        let mut rng = seeds::rng(2, "gc");
        let mut p = Params::new();
        let w = p.add("w", xavier(3, 2, &mut rng));
        let x = Tensor::row_vector(vec![0.7, -1.3, 2.1]);

        let loss_of = |p: &Params| -> Result<f64> {
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, p);
            let wv = g.param(w);
            let xv = g.input(&x);
            let y = g.matmul(xv, wv);
            let sq = g.mul(y, y);
            let l = g.sum_all(sq);
            Ok(g.value(l)[0])
        };

        let mut grads = GradStore::zeros_like(&p);
        {
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, &p);
            let wv = g.param(w);
            let xv = g.input(&x);
            let y = g.matmul(xv, wv);
            let sq = g.mul(y, y);
            let l = g.sum_all(sq);
            g.backward(l, 1.0, &mut grads);
        }
        grads.scale(2.0);
        let report = gradient_check(&mut p, &grads, loss_of, 1e-4, 1e-3).unwrap();
        assert!(!report.passed(), "doubled gradients must not pass");
    }
}
