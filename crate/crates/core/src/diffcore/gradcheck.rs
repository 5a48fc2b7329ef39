use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error and the (input, coordinate) it came from.
type Probe = (f64, (usize, usize));

/// Central-difference gradient check settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many coordinates per input (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Scales the analytic gradient before comparing. Only useful to prove
    /// that a check can fail.
    pub analytic_scale: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-5,
            max_coords: None,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub value: f64,
    pub max_rel_err: f64,
    /// `(input, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation crossed a kink (relu/hinge or a
    /// noted discrete branch) and were excluded.
    pub skipped_kinks: usize,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)` where `floor = 1e-7 * max(1, |f|)` keeps
/// coordinates with near-zero gradient from amplifying rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, value: f64) -> f64 {
    let floor = 1e-7 * value.abs().max(1.0);
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        Self {
            eps,
            tol,
            ..Self::default()
        }
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Compares the tape gradient of `f` at `point` with central differences
    /// `(f(x + eps) - f(x - eps)) / (2 eps)` coordinate by coordinate.
    pub fn run<F>(&self, f: F, point: &[Tensor]) -> Result<CheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
    {
        if !(self.eps > 0.0) {
            return Err(Error::invalid("grad_check eps must be positive"));
        }
        let mut tape = Tape::with_kink_tracking();
        let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).clone();
        if !value.is_scalar() {
            return Err(Error::NonScalar(value.shape().to_vec()));
        }
        let value = value.item();
        let base_sig = tape.signature();
        let grads = tape.backward(out)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut coords = Vec::new();
        for (i, t) in point.iter().enumerate() {
            let n = t.numel();
            match self.max_coords {
                Some(k) if k < n => {
                    let mut picked = sample(&mut rng, n, k).into_vec();
                    picked.sort_unstable();
                    coords.extend(picked.into_iter().map(|c| (i, c)));
                }
                _ => coords.extend((0..n).map(|c| (i, c))),
            }
        }

        let eval = |input: usize, coord: usize, delta: f64| -> Result<(f64, u64)> {
            let mut t = Tape::with_kink_tracking();
            let vars: Vec<Var> = point
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    if j == input {
                        let mut q = p.clone();
                        q.values_mut()[coord] += delta;
                        t.leaf(q)
                    } else {
                        t.leaf(p.clone())
                    }
                })
                .collect();
            let out = f(&mut t, &vars)?;
            Ok((t.value(out).item(), t.signature()))
        };

        let results: Vec<Result<Option<Probe>>> = coords
            .par_iter()
            .map(|&(i, c)| {
                let (fp, sp) = eval(i, c, self.eps)?;
                let (fm, sm) = eval(i, c, -self.eps)?;
                if sp != base_sig || sm != base_sig {
                    return Ok(None);
                }
                let numeric = (fp - fm) / (2.0 * self.eps);
                let a = analytic[i].values()[c] * self.analytic_scale;
                Ok(Some((relative_error(a, numeric, value), (i, c))))
            })
            .collect();

        let mut report = CheckReport {
            value,
            max_rel_err: 0.0,
            worst: None,
            checked: 0,
            skipped_kinks: 0,
            tol: self.tol,
        };
        for r in results {
            match r? {
                None => report.skipped_kinks += 1,
                Some((err, at)) => {
                    report.checked += 1;
                    if report.worst.is_none() || err > report.max_rel_err {
                        report.max_rel_err = err;
                        report.worst = Some(at);
                    }
                }
            }
        }
        Ok(report)
    }
}

/// Convenience wrapper with default coordinate coverage.
pub fn grad_check<F>(f: F, point: &[Tensor], eps: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    GradCheck::new(eps, tol).run(f, point)
}
