//! Error statistics, bootstrap standard errors and log–log rate fits.

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{EsrfError, Result};
use crate::rng::{NoiseStream, Purpose, StreamId};

/// `((1/n)Σ vᵢ^p)^{1/p}`.
pub fn power_mean(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let s: f64 = values.iter().map(|v| v.abs().powf(p)).sum();
    (s / values.len() as f64).powf(1.0 / p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DEstimate {
    pub d: f64,
    pub se: f64,
}

/// `D = (mean_r Δ_r^p)^{1/p}` over replications, with a bootstrap standard
/// error from `resamples` resamples of the replications. `stream` separates
/// the bootstrap draws of different estimates under one seed.
pub fn d_estimate(
    deltas: &[f64],
    p: f64,
    resamples: usize,
    seed: u64,
    stream: u64,
) -> Result<DEstimate> {
    if deltas.len() < 2 {
        return Err(EsrfError::InvalidArgument(format!(
            "D needs at least 2 replications, got {}",
            deltas.len()
        )));
    }
    let d = power_mean(deltas, p);
    let boot = bootstrap(deltas.len(), resamples, seed, stream, |idx| {
        let sample: Vec<f64> = idx.iter().map(|&i| deltas[i]).collect();
        power_mean(&sample, p)
    });
    Ok(DEstimate {
        d,
        se: std_dev(&boot),
    })
}

/// Evaluates `stat` on `resamples` index resamples (with replacement) of `0..n`.
pub fn bootstrap<T>(
    n: usize,
    resamples: usize,
    seed: u64,
    stream: u64,
    mut stat: impl FnMut(&[usize]) -> T,
) -> Vec<T> {
    let mut rng = NoiseStream::new(seed, StreamId::new(Purpose::Bootstrap, stream, 0)).rng(0);
    let mut idx = vec![0usize; n];
    (0..resamples)
        .map(|_| {
            for slot in idx.iter_mut() {
                *slot = rng.random_range(0..n);
            }
            stat(&idx)
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (`n − 1` normalization).
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% interval from the residual variance and Student-t quantile.
    pub slope_ci: (f64, f64),
    pub slope_se: f64,
}

pub const MIN_FIT_POINTS: usize = 4;

/// Ordinary least squares of `log D` on `log M`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < MIN_FIT_POINTS {
        return Err(EsrfError::DegenerateFit(format!(
            "need at least {MIN_FIT_POINTS} points, got {}",
            points.len()
        )));
    }
    if let Some(&(m, d)) = points.iter().find(|&&(m, d)| !(d > 0.0) || !(m > 0.0)) {
        return Err(EsrfError::DegenerateFit(format!(
            "non-positive value at M = {m}: D = {d}"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(EsrfError::DegenerateFit("all M values coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let n = points.len() as f64;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let slope_se = (rss / (n - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 2.0)
        .map_err(|e| EsrfError::DegenerateFit(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(RateFit {
        slope,
        intercept,
        slope_ci: (slope - t * slope_se, slope + t * slope_se),
        slope_se,
    })
}

/// Percentile bootstrap interval of the slope: replications are resampled
/// independently within each ensemble size and the fit is repeated.
pub fn bootstrap_slope_ci(
    per_m: &[(usize, Vec<f64>)],
    p: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rngs: Vec<_> = per_m
        .iter()
        .map(|(m, _)| {
            NoiseStream::new(seed, StreamId::new(Purpose::Bootstrap, *m as u64, 1)).rng(0)
        })
        .collect();
    let mut slopes = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let points: Vec<(f64, f64)> = per_m
            .iter()
            .zip(rngs.iter_mut())
            .map(|((m, deltas), rng)| {
                let sample: Vec<f64> = (0..deltas.len())
                    .map(|_| deltas[rng.random_range(0..deltas.len())])
                    .collect();
                (*m as f64, power_mean(&sample, p))
            })
            .collect();
        slopes.push(fit_rate(&points)?.slope);
    }
    Ok((quantile(&slopes, 0.025), quantile(&slopes, 0.975)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_mean_examples() {
        assert_eq!(power_mean(&[0.0, 0.0], 2.0), 0.0);
        for p in [1.0, 2.0, 4.0] {
            assert!((power_mean(&[0.3; 5], p) - 0.3).abs() < 1e-15);
        }
        let d = d_estimate(&[1.0, 2.0], 2.0, 100, 0, 0).unwrap();
        assert!((d.d - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn exact_power_law() {
        let pts: Vec<(f64, f64)> = [16.0, 32.0, 64.0, 128.0]
            .iter()
            .map(|&m: &f64| (m, 3.0 * m.powf(-0.5)))
            .collect();
        let fit = fit_rate(&pts).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.slope_se < 1e-12);
    }

    #[test]
    fn degenerate_fits() {
        assert!(matches!(
            fit_rate(&[(1.0, 1.0); 3]),
            Err(EsrfError::DegenerateFit(_))
        ));
        let with_zero = [(8.0, 1.0), (16.0, 0.0), (32.0, 0.5), (64.0, 0.2)];
        assert!(matches!(
            fit_rate(&with_zero),
            Err(EsrfError::DegenerateFit(_))
        ));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 1.0], 0.25), 0.25);
    }
}
