//! Finite-difference certification of the gradient tape.
//!
//! Central differences `(f(x+h) - f(x-h)) / 2h` on a scalar-terminal graph,
//! compared against the tape's analytic gradients, one parameter element at a
//! time. If a probe pair lands on different sides of a max-type tie (the
//! argmax signature of the two forward passes differs), that element sits on a
//! non-differentiable point and is excluded from the comparison rather than
//! failed.

use crate::autodiff::{Graph, NodeId, ParamId};
use crate::error::{Error, Result};

/// Outcome for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: ParamId,
    pub elements: usize,
    /// Elements excluded because a probe crossed a non-differentiable tie.
    pub excluded: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Full report of one [`check_gradients`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn total_excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded).sum()
    }
}

/// Relative error with an absolute floor so exact zero gradients compare clean.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients of `terminal` against central finite
/// differences over every element of every registered parameter.
///
/// `terminal` must be scalar. The graph's leaf values are restored on return.
pub fn check_gradients(
    graph: &mut Graph,
    terminal: NodeId,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if graph.value(terminal).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient check needs a scalar terminal, got shape {:?}",
            graph.value(terminal).shape()
        )));
    }

    let analytic = graph.backward_scalar(terminal)?;
    let params: Vec<(ParamId, NodeId)> = graph.params().collect();

    let mut report = GradCheckReport {
        step,
        tol,
        params: Vec::with_capacity(params.len()),
    };

    for (pid, node) in params {
        let n = graph.value(node).numel();
        let grad = analytic
            .get(pid)
            .expect("registered param missing from gradients")
            .data()
            .to_vec();
        let mut max_err: f64 = 0.0;
        let mut excluded = 0usize;

        for e in 0..n {
            graph.nudge_param(node, e, step);
            graph.recompute_forward()?;
            let f_plus = graph.value(terminal).item();
            let sig_plus = graph.argmax_signature();

            graph.nudge_param(node, e, -2.0 * step);
            graph.recompute_forward()?;
            let f_minus = graph.value(terminal).item();
            let sig_minus = graph.argmax_signature();

            graph.nudge_param(node, e, step); // restore; next probe recomputes

            if sig_plus != sig_minus {
                excluded += 1;
                continue;
            }
            let fd = (f_plus - f_minus) / (2.0 * step);
            max_err = max_err.max(rel_err(grad[e], fd));
        }

        report.params.push(ParamCheck {
            param: pid,
            elements: n,
            excluded,
            max_rel_err: max_err,
            pass: max_err < tol,
        });
    }

    graph.recompute_forward()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes() {
        // f = x'x is polynomial; exact for central differences.
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::from_vec(vec![3, 1], vec![1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let f = g.sum_all(sq);
        let report = check_gradients(&mut g, f, 1e-5, 1e-4).unwrap();
        assert!(report.all_pass(), "worst {}", report.worst());
        assert_eq!(report.total_excluded(), 0);
    }

    #[test]
    fn non_scalar_terminal_rejected() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::zeros(&[2, 2]));
        let y = g.exp(x);
        assert!(check_gradients(&mut g, y, 1e-5, 1e-4).is_err());
    }

    #[test]
    fn tie_point_is_excluded() {
        // Two equal entries feed a column max: probing either crosses the tie.
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]));
        let m = g.max_rows(x).unwrap();
        let f = g.sum_all(m);
        let report = check_gradients(&mut g, f, 1e-5, 1e-4).unwrap();
        assert!(report.total_excluded() > 0);
        assert!(report.all_pass());
    }

    #[test]
    fn activations_pass_at_random_points() {
        let mut g = Graph::new();
        let x = g.param(
            ParamId(0),
            Tensor::from_vec(vec![4, 1], vec![0.37, -1.21, 2.05, -0.48]),
        );
        let a = g.tanh(x);
        let b = g.sigmoid(a);
        let c = g.softplus(b);
        let d = g.silu(c);
        let e = g.leaky_relu(d, 0.01);
        let f = g.sum_all(e);
        let report = check_gradients(&mut g, f, 1e-5, 1e-4).unwrap();
        assert!(report.all_pass(), "worst {}", report.worst());
    }
}
