//! Central-difference verification of analytic gradients.

use super::param::{ParamGrads, ParamSet};
use crate::error::{Error, Result};
use crate::rng::{hash_str, SplitMix64};

/// Coordinates checked per tensor; smaller tensors are checked in full.
pub const MAX_COORDS_PER_TENSOR: usize = 64;

const SUBSAMPLE_SEED: u64 = 0x6772_6164_6368_6b00;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Indices checked for a tensor of `n` elements.
pub fn checked_coords(name: &str, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > MAX_COORDS_PER_TENSOR {
        SplitMix64::new(hash_str(SUBSAMPLE_SEED, name)).shuffle(&mut idx);
        idx.truncate(MAX_COORDS_PER_TENSOR);
        idx.sort_unstable();
    }
    idx
}

/// Compares the analytic gradient returned by `f` against central
/// differences `(f(x+eps) − f(x−eps)) / 2eps`.
pub fn grad_check<F>(f: F, params: &ParamSet<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet<f64>) -> Result<(f64, ParamGrads<f64>)>,
{
    let (_, analytic) = f(params)?;
    grad_check_against(|ps| f(ps).map(|(v, _)| v), &analytic, params, eps)
}

/// Like [`grad_check`], with the analytic gradient supplied up front so the
/// perturbed evaluations only need the scalar value.
pub fn grad_check_against<F>(
    value: F,
    analytic: &ParamGrads<f64>,
    params: &ParamSet<f64>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet<f64>) -> Result<f64>,
{
    if !value(params)?.is_finite() {
        return Err(Error::NonFinite("grad_check: base value".into()));
    }
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::new(),
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.value(&name)?.numel();
        let coords = checked_coords(&name, n);
        let mut worst = 0.0f64;
        for &i in &coords {
            let x0 = params.value(&name)?.data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                work.get_mut(&name)?.value.data_mut()[i] = x;
                let v = value(&work)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("grad_check: `{name}`[{i}]")));
                }
                Ok(v)
            };
            let plus = eval(x0 + eps)?;
            let minus = eval(x0 - eps)?;
            work.get_mut(&name)?.value.data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.params.push(ParamCheck {
            name,
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
