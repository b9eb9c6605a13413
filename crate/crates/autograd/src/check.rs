//! Central finite-difference gradient checking.

use crate::{Graph, Tensor, Var};

/// Largest step tried; it is shrunk whenever a perturbation crosses a kink.
const INITIAL_STEP: f64 = 1e-5;
const MIN_STEP: f64 = 1e-9;
/// Gradients smaller than this are compared absolutely.
const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares reverse-mode gradients of a scalar-valued `build` against central
/// differences, entry by entry, for every tensor in `inputs`.
///
/// `build` receives a fresh graph and one tracked leaf per input and must
/// return a `1 × 1` node. When a perturbed evaluation lands on a different
/// piecewise branch than the unperturbed one, the step is reduced.
pub fn check_gradients<F>(inputs: &[Tensor], build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> (f64, u64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        (g.value(out).item(), g.branch_signature())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let base_signature = g.branch_signature();
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    drop(g);

    let mut values = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for input in 0..values.len() {
        for entry in 0..values[input].len() {
            let original = values[input].data()[entry];
            let mut step = INITIAL_STEP;
            let numeric = loop {
                values[input].data_mut()[entry] = original + step;
                let (plus, sig_plus) = eval(&values);
                values[input].data_mut()[entry] = original - step;
                let (minus, sig_minus) = eval(&values);
                let smooth = sig_plus == base_signature && sig_minus == base_signature;
                if smooth || step <= MIN_STEP {
                    break (plus - minus) / (2.0 * step);
                }
                step *= 0.1;
            };
            values[input].data_mut()[entry] = original;
            let a = analytic[input].data()[entry];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                if err >= report.max_rel_error {
                    report.worst = Some(Mismatch {
                        input,
                        entry,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    report
}
