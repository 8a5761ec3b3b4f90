//! Pre-inflection analytics for the random-discovery phase.
//!
//! Purchases before the inflection point form a renewal process with
//! exponential interarrival times, so the time to the `n`-th purchase is
//! Erlang(n, rate) and the count by time `t` is Poisson(rate * t).

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::stats::r_squared;

/// Exponential interarrival model with rate in purchases per hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenewalModel {
    pub rate: f64,
    pub fit_r2: f64,
    pub n_obs: usize,
}

impl RenewalModel {
    /// A model with a known rate and no fit diagnostics.
    pub fn with_rate(rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(Self {
            rate,
            fit_r2: 1.0,
            n_obs: 0,
        })
    }

    /// `P(N_L < theta)`. With `include_zero == false` this is the telescoped
    /// sum over `n = 1..theta-1`, i.e. `F_1(L) - F_theta(L)`, which leaves out
    /// deals with no purchase at all; with `true` it is `1 - F_theta(L)`.
    pub fn failure_probability(&self, theta: u64, lifetime: f64, include_zero: bool) -> Result<f64> {
        if !(lifetime.is_finite() && lifetime > 0.0) {
            return Err(Error::invalid("lifetime must be positive"));
        }
        failure_over(self.rate, theta, lifetime, include_zero)
    }

    /// `P(N_L < theta | N_{t1} = n1)`: the unconditional formula applied to
    /// the remaining horizon `L - t1` and remaining count `theta - n1`.
    pub fn conditional_failure_probability(
        &self,
        theta: u64,
        n1: u64,
        t1: f64,
        lifetime: f64,
        include_zero: bool,
    ) -> Result<f64> {
        if !(t1.is_finite() && t1 >= 0.0) {
            return Err(Error::invalid("observation time must be non-negative"));
        }
        if !(lifetime.is_finite() && lifetime > 0.0) {
            return Err(Error::invalid("lifetime must be positive"));
        }
        if t1 > lifetime {
            return Err(Error::invalid(format!(
                "observation time {t1} exceeds lifetime {lifetime}"
            )));
        }
        if theta < 1 {
            return Err(Error::invalid("tipping point must be at least 1"));
        }
        if n1 >= theta {
            return Ok(0.0);
        }
        failure_over(self.rate, theta - n1, lifetime - t1, include_zero)
    }

    pub fn tipping_time_density(&self, theta: u64, t: f64) -> Result<f64> {
        tipping_time_density(theta, self.rate, t)
    }

    pub fn mean_tipping_time(&self, theta: u64) -> f64 {
        theta as f64 / self.rate
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && rate > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("rate must be positive, got {rate}")))
    }
}

fn failure_over(rate: f64, theta: u64, horizon: f64, include_zero: bool) -> Result<f64> {
    check_rate(rate)?;
    if theta < 1 {
        return Err(Error::invalid("tipping point must be at least 1"));
    }
    let x = rate * horizon;
    let (below, _) = poisson_tails(theta, x);
    if include_zero {
        Ok(below)
    } else {
        Ok((below - (-x).exp()).max(0.0))
    }
}

/// Maximum-likelihood exponential fit (`rate = 1 / mean`). The reported R²
/// compares the empirical CDF of the sorted sample, evaluated at plotting
/// positions `(i + 1/2) / n`, with the fitted CDF.
pub fn fit_exponential(interarrivals: &[f64]) -> Result<RenewalModel> {
    if interarrivals.len() < 2 {
        return Err(Error::insufficient(format!(
            "exponential fit needs at least 2 interarrival times, got {}",
            interarrivals.len()
        )));
    }
    if let Some(bad) = interarrivals.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::invalid(format!("interarrival time {bad} is not positive")));
    }
    let n = interarrivals.len();
    let mean = interarrivals.iter().sum::<f64>() / n as f64;
    let rate = 1.0 / mean;

    let mut sorted = interarrivals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let empirical: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let fitted: Vec<f64> = sorted.iter().map(|x| -(-rate * x).exp_m1()).collect();
    Ok(RenewalModel {
        rate,
        fit_r2: r_squared(&empirical, &fitted),
        n_obs: n,
    })
}

/// `P(S_n <= t)` where `S_n` is the sum of `n` iid Exponential(rate) times,
/// equivalently `P(Poisson(rate * t) >= n)`.
pub fn erlang_cdf(n: u64, rate: f64, t: f64) -> Result<f64> {
    if n < 1 {
        return Err(Error::invalid("Erlang shape must be at least 1"));
    }
    check_rate(rate)?;
    if !(t >= 0.0) {
        return Err(Error::invalid("time must be non-negative"));
    }
    if t.is_infinite() {
        return Ok(1.0);
    }
    Ok(poisson_tails(n, rate * t).1)
}

/// Gamma(theta, rate) density of the time at which the `theta`-th purchase
/// arrives.
pub fn tipping_time_density(theta: u64, rate: f64, t: f64) -> Result<f64> {
    if theta < 1 {
        return Err(Error::invalid("tipping point must be at least 1"));
    }
    check_rate(rate)?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::invalid("time must be a non-negative number"));
    }
    if t == 0.0 {
        return Ok(if theta == 1 { rate } else { 0.0 });
    }
    let k = theta as f64;
    let log_density = k * rate.ln() + (k - 1.0) * t.ln() - rate * t - ln_factorial(theta - 1);
    Ok(log_density.exp())
}

/// `(P(N < n), P(N >= n))` for `N ~ Poisson(x)`.
///
/// The smaller tail is summed directly in log space, starting from the term
/// nearest the boundary and moving away from the mode so terms shrink
/// monotonically; the other tail is its complement.
pub(crate) fn poisson_tails(n: u64, x: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    if x <= 0.0 {
        return (1.0, 0.0);
    }
    let log_pmf = |k: u64| -x + k as f64 * x.ln() - ln_factorial(k);

    if (n as f64) > x {
        // Upper tail: k = n, n+1, ...; ratio x / (k+1) < 1.
        let mut log_term = log_pmf(n);
        let lead = log_term;
        let mut acc = 0.0;
        let mut k = n;
        loop {
            let rel = (log_term - lead).exp();
            acc += rel;
            if rel < 1e-17 * acc {
                break;
            }
            k += 1;
            log_term += x.ln() - (k as f64).ln();
        }
        let upper = (lead + acc.ln()).exp().min(1.0);
        (1.0 - upper, upper)
    } else {
        // Lower tail: k = n-1 down to 0; ratio k / x <= 1.
        let mut k = n - 1;
        let mut log_term = log_pmf(k);
        let lead = log_term;
        let mut acc = 0.0;
        loop {
            let rel = (log_term - lead).exp();
            acc += rel;
            if k == 0 || rel < 1e-17 * acc {
                break;
            }
            log_term += (k as f64).ln() - x.ln();
            k -= 1;
        }
        let lower = (lead + acc.ln()).exp().min(1.0);
        (lower, 1.0 - lower)
    }
}
