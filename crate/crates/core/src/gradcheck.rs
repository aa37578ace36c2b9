//! Central-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass on an inference
//! graph, so it is independent of every backward closure it checks.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates probed per input tensor (evenly strided when the tensor is larger).
    pub max_coords: usize,
    /// Norms below this are treated as zero when forming relative errors.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords: 48,
            floor: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst per-input `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub coords_checked: usize,
    /// Per-input relative error.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares backprop gradients of the scalar `f(inputs)` with central differences.
pub fn check<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &vars);
        let grads = g.backward(loss);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |ts: &[Tensor]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<Var<'_>> = ts.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).value().data()[0]
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let step = n.div_ceil(opts.max_coords.max(1)).max(1);
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for j in (0..n).step_by(step) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - opts.eps;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * opts.eps);
            let ana = analytic[i].data()[j];
            diff2 += (num - ana).powi(2);
            an2 += ana * ana;
            nu2 += num * num;
            coords_checked += 1;
        }
        let denom = an2.sqrt().max(nu2.sqrt());
        let rel = if denom < opts.floor {
            diff2.sqrt()
        } else {
            diff2.sqrt() / denom
        };
        per_input.push(rel);
    }
    let (worst_input, max_rel_error) =
        per_input
            .iter()
            .cloned()
            .enumerate()
            .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    GradCheckReport {
        max_rel_error,
        worst_input,
        coords_checked,
        per_input,
    }
}

/// Fixed projection used to turn a tensor output into a scalar for checking:
/// `sum(out * weights)` with deterministic, non-symmetric weights.
pub fn probe<'g>(out: Var<'g>) -> Var<'g> {
    let shape = out.shape();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.618_033_988_7).fract() - 0.5);
    out.mul(out.constant_like(w)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // f(x) = sum(x^2) via an op with correct backward passes
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 0.6);
        let ok = check(
            std::slice::from_ref(&x),
            |_, v| v[0].square().sum(),
            &GradCheckOptions::default(),
        );
        assert!(ok.passes(1e-6), "{ok:?}");
        // detach hides the dependency from backprop, so the check must fail
        let bad = check(
            &[x],
            |_, v| v[0].square().sum().add(v[0].detach().square().sum()),
            &GradCheckOptions::default(),
        );
        assert!(!bad.passes(1e-3));
    }
}
