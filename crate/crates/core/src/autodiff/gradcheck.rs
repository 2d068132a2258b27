use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_checks_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-5,
            floor: 1e-6,
            max_checks_per_input: None,
            seed: 0,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat element)` of the worst relative error.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel={:.3e} (tol {:.0e}) at input {} elem {}: analytic {:.6e} numeric {:.6e}, {} elements",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tol,
            self.worst.0,
            self.worst.1,
            self.analytic,
            self.numeric,
            self.checked
        )
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok(g.value(out).item())
}

/// Compares tape gradients of the scalar function `f` against central
/// finite differences `(f(x+eps) - f(x-eps)) / 2eps` for every (or a sampled
/// subset of every) input element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol: opts.tol,
        passed: true,
    };
    let mut perturbed = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.len();
        let elems: Vec<usize> = match opts.max_checks_per_input {
            Some(cap) if cap < n => {
                let mut v = sample(&mut rng, n, cap).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for e in elems {
            let x0 = input.data()[e];
            perturbed[ii].data_mut()[e] = x0 + opts.eps;
            let fp = eval(&f, &perturbed)?;
            perturbed[ii].data_mut()[e] = x0 - opts.eps;
            let fm = eval(&f, &perturbed)?;
            perturbed[ii].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[ii].data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel.is_nan() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ii, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
