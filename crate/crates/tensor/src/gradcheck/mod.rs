//! Central finite-difference gradient checking in 64-bit precision.

mod suite;

pub use suite::{op_suite, OP_SUITE_TOLERANCE};

use std::fmt;

use crate::error::NnError;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which input scalars are perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Selection {
    All,
    /// `ceil(fraction * total)` distinct scalars drawn uniformly over all inputs.
    Fraction { fraction: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step `h`.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// which are zero up to rounding do not produce spurious failures.
    pub floor: f64,
    pub selection: Selection,
    /// Second step for scalars that fail at `step`; the smaller error is
    /// kept. Separates kinks of piecewise-linear ops straddled by the wider
    /// step from genuine mismatches.
    pub retry_step: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            selection: Selection::All,
            retry_step: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst scalar.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.max_rel_error.is_finite()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} max rel err {:.3e} (tol {:.0e}, {} scalars)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.checked
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<G, E>(inputs: &[Tensor<f64>], f: &G) -> std::result::Result<f64, E>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> std::result::Result<Var, E>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(format!("input{i}"), t.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Compares the tape's adjoints of the scalar built by `f` against central
/// differences with respect to every (or a sample of) input scalar.
///
/// `f` may fail with any error type that tape errors convert into.
pub fn grad_check<G, E>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: G,
    opts: GradCheckOptions,
) -> std::result::Result<GradCheckReport, E>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> std::result::Result<Var, E>,
    E: From<NnError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(format!("input{i}"), t.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut picks: Vec<usize> = match opts.selection {
        Selection::All => (0..total).collect(),
        Selection::Fraction { fraction, seed } => {
            let want = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
            let mut all: Vec<usize> = (0..total).collect();
            RngStream::new(seed).shuffle(&mut all);
            all.truncate(want);
            all
        }
    };
    picks.sort_unstable();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance: opts.tolerance,
    };
    for global in picks {
        let input = offsets.partition_point(|&o| o <= global) - 1;
        let elem = global - offsets[input];
        let orig = work[input].data()[elem];
        let mut difference = |h: f64| -> std::result::Result<f64, E> {
            work[input].data_mut()[elem] = orig + h;
            let plus = evaluate(&work, &f)?;
            work[input].data_mut()[elem] = orig - h;
            let minus = evaluate(&work, &f)?;
            work[input].data_mut()[elem] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let a = analytic[input].data()[elem];
        let mut err = relative_error(a, difference(opts.step)?, opts.floor);
        if let Some(h) = opts.retry_step.filter(|_| err.is_nan() || err >= opts.tolerance) {
            err = err.min(relative_error(a, difference(h)?, opts.floor));
        }
        report.checked += 1;
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = Some((input, elem));
        }
    }
    Ok(report)
}
