//! Predicted variance of the register-and-average estimate under a
//! spatially correlated gain.

use crate::error::{Error, Result};

/// Variance of `X0/L * sum_k g(u + s_k)` for a stationary gain field with
/// variance `gain_var` and correlation `autocorr(dx, dy)`:
/// `X0^2/L^2 * (L var + 2 sum_{p<q} var * autocorr(s_p - s_q))`.
pub fn averaging_variance(
    autocorr: impl Fn(f64, f64) -> f64,
    gain_var: f64,
    x0: f64,
    shifts: &[(f64, f64)],
) -> Result<f64> {
    let r0 = autocorr(0.0, 0.0);
    if (r0 - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("autocorrelation at lag 0 must be 1, got {r0}")));
    }
    if shifts.is_empty() {
        return Err(Error::Config("at least one shift is required".into()));
    }
    let l = shifts.len() as f64;
    let mut cov = 0.0;
    for p in 0..shifts.len() {
        for q in p + 1..shifts.len() {
            cov += gain_var * autocorr(shifts[p].0 - shifts[q].0, shifts[p].1 - shifts[q].1);
        }
    }
    Ok(x0 * x0 / (l * l) * (l * gain_var + 2.0 * cov))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_shifts_give_no_benefit() {
        let rho = |dx: f64, dy: f64| (-(dx.abs() + dy.abs()) / 3.0).exp();
        let v = averaging_variance(rho, 0.01, 2.0, &[(1.0, 1.0); 5]).unwrap();
        assert!((v - 4.0 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn uncorrelated_scales_as_one_over_l() {
        let rho = |dx: f64, dy: f64| if dx == 0.0 && dy == 0.0 { 1.0 } else { 0.0 };
        for l in 1..10 {
            let shifts: Vec<_> = (0..l).map(|k| (k as f64, 0.0)).collect();
            let v = averaging_variance(rho, 0.01, 1.0, &shifts).unwrap();
            assert!((v - 0.01 / l as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn bad_autocorrelation_is_rejected() {
        assert!(averaging_variance(|_, _| 0.5, 0.01, 1.0, &[(0.0, 0.0)]).is_err());
    }
}
