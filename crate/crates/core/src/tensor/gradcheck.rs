//! Central finite-difference verification of the tape's analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which input entries to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Entries {
    All,
    /// At most `per_input` entries per input tensor, chosen with `seed`.
    Sample { per_input: usize, seed: u64 },
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, entry index) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::GradCheck("function is not scalar-valued".into()));
    }
    Ok(v.data()[0])
}

/// Relative error used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare reverse-mode gradients of scalar `f` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_entries(f, inputs, eps, Entries::All).map(|r| r.max_rel_error)
}

pub fn grad_check_entries<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    entries: Entries,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::GradCheck("function is not scalar-valued".into()));
    }
    let base = g.value(out).data()[0];
    if evaluate(&f, inputs)?.to_bits() != base.to_bits() {
        return Err(Error::GradCheck("function is not deterministic".into()));
    }
    g.backward(out)?;

    let mut rng = match entries {
        Entries::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Entries::All => None,
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let n = inputs[input].len();
        let analytic = g.grad(*var).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = match (entries, rng.as_mut()) {
            (Entries::Sample { per_input, .. }, Some(rng)) if per_input < n => {
                let mut p = sample(rng, n, per_input).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..n).collect(),
        };
        for e in picks {
            let orig = work[input].data()[e];
            work[input].data_mut()[e] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[input].data_mut()[e] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[input].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((input, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_f64(&[2, 3], &[0.1, -2.0, 3.5, 4.0, 0.0, 1e3]).unwrap();
        let err = grad_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let calls = Cell::new(0.0);
        let x = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let res = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let s = g.sum(v[0]);
                Ok(g.scale(s, calls.get()))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(res, Err(Error::GradCheck(_))));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // A scaled sum checked against itself is fine; the relative error of a
        // deliberately wrong pair is large.
        assert!(relative_error(1.0, 1.0) == 0.0);
        assert!(relative_error(1.0, 0.5) > 0.3);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
