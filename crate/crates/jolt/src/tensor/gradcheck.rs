//! Central-difference gradient verification.
//!
//! The loss closure is called once with `want_grads = true` to collect
//! analytic gradients, then twice per sampled coordinate at `theta +- h`.
//! Double precision makes 1e-4 relative agreement a comfortable bar for a
//! correct backward pass and an unmissable alarm for a wrong one.

use super::Tensor;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (parameter index, flat coordinate, analytic, numeric) of the worst case.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Loss closure contract: `f(params, want_grads)` returns the scalar loss;
/// when `want_grads` is true it must also deposit analytic gradients into
/// each requires_grad parameter via `Tensor::set_grad`/`Tape::harvest_into`.
pub type LossFn<'a> = dyn FnMut(&mut [Tensor], bool) -> Result<f64> + 'a;

/// Max relative error between analytic and central-difference gradients over
/// sampled coordinates. `sample_per_param = 0` checks every coordinate;
/// otherwise that many are drawn per parameter from `seed`. A NaN from the
/// loss is reported as a failed check (infinite error), never a panic.
pub fn finite_diff_check(
    f: &mut LossFn<'_>,
    params: &mut [Tensor],
    h: f64,
    sample_per_param: usize,
    seed: u64,
) -> Result<f64> {
    finite_diff_check_detailed(f, params, h, sample_per_param, seed).map(|r| r.max_rel_err)
}

pub fn finite_diff_check_detailed(
    f: &mut LossFn<'_>,
    params: &mut [Tensor],
    h: f64,
    sample_per_param: usize,
    seed: u64,
) -> Result<FiniteDiffReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArg(format!(
            "step size h must lie in [1e-7, 1e-3], got {h}"
        )));
    }

    // Analytic pass.
    let base = f(params, true)?;
    if base.is_nan() {
        return Ok(nan_report());
    }
    let analytic: Vec<Option<Vec<f64>>> = params
        .iter()
        .map(|p| {
            if p.requires_grad() {
                Some(
                    p.grad()
                        .expect("loss closure must fill grads of requires_grad params")
                        .to_vec(),
                )
            } else {
                None
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };

    for pi in 0..params.len() {
        let Some(grads) = &analytic[pi] else { continue };
        let n = params[pi].numel();
        let coords: Vec<usize> = if sample_per_param == 0 || sample_per_param >= n {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, sample_per_param).into_vec()
        };

        for &ci in &coords {
            let orig = params[pi].data()[ci];
            params[pi].data_mut()[ci] = orig + h;
            let up = f(params, false)?;
            params[pi].data_mut()[ci] = orig - h;
            let down = f(params, false)?;
            params[pi].data_mut()[ci] = orig;

            if up.is_nan() || down.is_nan() {
                return Ok(nan_report());
            }
            let numeric = (up - down) / (2.0 * h);
            let a = grads[ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci, a, numeric));
            }
        }
    }
    Ok(report)
}

fn nan_report() -> FiniteDiffReport {
    FiniteDiffReport {
        max_rel_err: f64::INFINITY,
        coords_checked: 0,
        worst: None,
    }
}
