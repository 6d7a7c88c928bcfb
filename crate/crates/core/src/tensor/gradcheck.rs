//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor for the relative error. Below this gradient magnitude
/// the comparison is effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input (sampled); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward-pass gradients of the scalar `f(inputs)` against
/// central differences, one report per input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    let root = f(&tracked)?;
    if root.numel() != 1 {
        return Err(Error::Contract("gradcheck: function must return a scalar".into()));
    }
    let grads = root.backward()?;

    let plain: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    let eval = |args: &[Tensor<f64>]| -> Result<f64> { f(args)?.item() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, input) in plain.iter().enumerate() {
        let analytic = grads.wrt(&tracked[idx]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(limit) if limit < input.numel() => {
                let mut c = sample(&mut rng, input.numel(), limit).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.numel()).collect(),
        };
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            coords_checked: coords.len(),
        };
        let mut args = plain.clone();
        for &c in &coords {
            let base = input.data()[c];
            let mut values = input.to_vec();
            values[c] = base + opts.step;
            args[idx] = Tensor::from_vec(input.shape(), values.clone())?;
            let plus = eval(&args)?;
            values[c] = base - opts.step;
            args[idx] = Tensor::from_vec(input.shape(), values)?;
            let minus = eval(&args)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[c];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Largest relative error across all reports.
pub fn worst(reports: &[GradCheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}
