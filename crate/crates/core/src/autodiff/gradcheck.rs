use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: Real,
    /// Probe at most this many entries per input (chosen at random); all
    /// entries when `None`.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: Real,
    pub numeric: Real,
}

/// Central-difference check of `f`'s gradient wrt every input.
///
/// Returns the largest `|a - n| / max(1, |a|, |n|)` over the probed entries.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: Real) -> Result<Real>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    gradcheck_with(
        f,
        inputs,
        GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
    .map(|r| r.max_rel_error)
}

pub fn gradcheck_with<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Invalid("gradcheck eps must be positive".into()));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        if out.numel() != 1 {
            return Err(Error::Shape(format!(
                "gradcheck needs a scalar function, got {:?}",
                out.shape()
            )));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };
    let eval = |inputs: &[Tensor]| -> Real {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let indices: Vec<usize> = match opts.max_probes {
            Some(k) if k < input.numel() => sample(&mut rng, input.numel(), k).into_vec(),
            _ => (0..input.numel()).collect(),
        };
        for idx in indices {
            let orig = input.data()[idx];
            work[which].data_mut()[idx] = orig + opts.eps;
            let plus = eval(&work);
            work[which].data_mut()[idx] = orig - opts.eps;
            let minus = eval(&work);
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[which].data()[idx];
            let err = (a - numeric).abs() / (1.0 as Real).max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error || err.is_nan() {
                report = GradCheckReport {
                    max_rel_error: if err.is_nan() { Real::INFINITY } else { err },
                    worst_input: which,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
