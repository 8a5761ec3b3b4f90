//! Least squares and goodness-of-fit helpers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const DEFAULT_RCOND: f64 = 1e-10;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean, using the unbiased sample variance.
/// Zero for fewer than two values.
pub fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Coefficient of determination of `fitted` against `observed`, clamped to
/// `[0, 1]`. A constant `observed` series that is matched exactly scores 1.
pub fn r_squared(observed: &[f64], fitted: &[f64]) -> f64 {
    debug_assert_eq!(observed.len(), fitted.len());
    let m = mean(observed);
    let ss_tot: f64 = observed.iter().map(|y| (y - m).powi(2)).sum();
    let ss_res: f64 = observed.iter().zip(fitted).map(|(y, f)| (y - f).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
}

/// Simple linear regression `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub n: usize,
}

impl LineFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() {
        return Err(Error::invalid("x and y lengths differ"));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::insufficient(format!("line fit needs at least 2 points, got {n}")));
    }
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * n as f64 * mx.abs().max(1.0).powi(2) {
        return Err(Error::insufficient("all x values are identical"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let fitted: Vec<f64> = xs.iter().map(|x| slope * x + intercept).collect();
    let r2 = r_squared(ys, &fitted);
    let (slope_se, intercept_se) = if n > 2 {
        let ss_res: f64 = ys.iter().zip(&fitted).map(|(y, f)| (y - f).powi(2)).sum();
        let s2 = ss_res / (n - 2) as f64;
        let sum_x2: f64 = xs.iter().map(|x| x * x).sum();
        ((s2 / sxx).sqrt(), (s2 * sum_x2 / (n as f64 * sxx)).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(LineFit {
        slope,
        intercept,
        r2,
        slope_se,
        intercept_se,
        n,
    })
}

/// Minimum-norm least-squares solution with inference statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeastSquares {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub rank: usize,
    pub residual_norm: f64,
    pub r2: f64,
    pub adjusted_r2: f64,
    pub n_obs: usize,
}

/// Solves `min ||X b - y||` through the SVD pseudo-inverse. Singular values
/// at or below `rcond * s_max` are dropped, giving the minimum-norm solution
/// when the design is rank deficient.
///
/// Standard errors come from `s^2 * diag(pinv(X'X))` with `n - rank` residual
/// degrees of freedom; they are NaN when no degrees of freedom remain.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, rcond: f64) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::invalid("design and response row counts differ"));
    }
    if n == 0 || p == 0 {
        return Err(Error::insufficient("empty design matrix"));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let s_max = s.iter().copied().fold(0.0_f64, f64::max);
    let cutoff = rcond * s_max;

    let mut coef = DVector::zeros(p);
    let mut var_diag = vec![0.0; p];
    let mut rank = 0;
    for (k, &sk) in s.iter().enumerate() {
        if sk <= cutoff || sk == 0.0 {
            continue;
        }
        rank += 1;
        let uy = u.column(k).dot(y);
        let vk = v_t.row(k).transpose();
        coef += &vk * (uy / sk);
        for (j, d) in var_diag.iter_mut().enumerate() {
            *d += (vk[j] / sk).powi(2);
        }
    }

    let fitted = x * &coef;
    let resid = y - &fitted;
    let residual_norm = resid.norm();
    let y_vec: Vec<f64> = y.iter().copied().collect();
    let fitted_vec: Vec<f64> = fitted.iter().copied().collect();
    let r2 = r_squared(&y_vec, &fitted_vec);
    let dof = n.saturating_sub(rank);
    let adjusted_r2 = if dof > 0 && rank > 0 {
        1.0 - (1.0 - r2) * (n as f64 - 1.0) / dof as f64
    } else {
        f64::NAN
    };

    let (std_errors, t_values, p_values) = if dof > 0 {
        let s2 = residual_norm.powi(2) / dof as f64;
        let se: Vec<f64> = var_diag.iter().map(|d| (s2 * d).sqrt()).collect();
        let tv: Vec<f64> = coef.iter().zip(&se).map(|(c, e)| c / e).collect();
        let dist = StudentsT::new(0.0, 1.0, dof as f64).expect("positive dof");
        let pv = tv
            .iter()
            .map(|t| {
                if t.is_finite() {
                    2.0 * (1.0 - dist.cdf(t.abs()))
                } else {
                    f64::NAN
                }
            })
            .collect();
        (se, tv, pv)
    } else {
        (vec![f64::NAN; p], vec![f64::NAN; p], vec![f64::NAN; p])
    };

    Ok(LeastSquares {
        coefficients: coef.iter().copied().collect(),
        std_errors,
        t_values,
        p_values,
        rank,
        residual_norm,
        r2,
        adjusted_r2,
        n_obs: n,
    })
}

/// One-sample Kolmogorov-Smirnov test result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

impl KsResult {
    /// Asymptotic critical value `sqrt(-ln(alpha / 2) / 2) / sqrt(n)`.
    pub fn critical_value(&self, alpha: f64) -> f64 {
        ks_critical_value(self.n, alpha)
    }

    pub fn passes(&self, alpha: f64) -> bool {
        self.statistic < self.critical_value(alpha)
    }
}

pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Compares a sample against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> Result<KsResult> {
    if sample.is_empty() {
        return Err(Error::insufficient("KS test needs a non-empty sample"));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sqrt_n = n.sqrt();
    let p_value = kolmogorov_survival((sqrt_n + 0.12 + 0.11 / sqrt_n) * d);
    Ok(KsResult {
        statistic: d,
        p_value,
        n: xs.len(),
    })
}

/// `P(K > x)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.18 {
        // Small-x form converges much faster here.
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * x * x)).exp();
        let c = (2.0 * std::f64::consts::PI).sqrt() / x;
        let s: f64 = (0..50).map(|k| y.powi((2 * k + 1) * (2 * k + 1))).sum();
        return (1.0 - c * s).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
