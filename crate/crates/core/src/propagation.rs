//! Post-inflection analytics for the social-propagation phase.
//!
//! After the inflection point a deal grows multiplicatively,
//! `N_t = N_{t-1} (1 + r(t) X_t)`, where `X_t` are iid positive growth
//! shocks and `r(t)` is a novelty factor that decays over time. For small
//! shocks `log N_T - log N_0 ~ sum r(t) X_t`, which is what the estimators
//! here work with.

use std::io::Write;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::fit_line;
use crate::trace::{Dataset, TIME_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    /// Whole hours after the inflection point.
    pub t: f64,
    pub r: f64,
}

/// Novelty decay: a measured table `r(t)` normalised so that `r(1) = 1`,
/// optionally summarised by a fitted `r(t) ~ exp(a t + b)`.
///
/// `scale` is the first-hour mean log-increment the table was normalised
/// by, so `scale * r(t)` is the absolute expected log-growth in hour `t`
/// (for unit-mean shocks). Tables built by hand use `scale = 1`. The
/// exponential fit is made against `scale * r(t)`, so `exp(a t + b)` is on
/// the same absolute footing as a table entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyDecay {
    pub r_table: Vec<DecayPoint>,
    pub scale: f64,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub fit_r2: Option<f64>,
    /// Traces that contributed to the table.
    #[serde(default)]
    pub cohort_size: usize,
}

impl NoveltyDecay {
    /// Purely parametric decay `r(t) = exp(a t + b)`.
    pub fn exponential(a: f64, b: f64) -> Self {
        Self {
            r_table: Vec::new(),
            scale: 1.0,
            a: Some(a),
            b: Some(b),
            fit_r2: None,
            cohort_size: 0,
        }
    }

    /// A table given directly, entries for `t = 1, 2, ...`.
    pub fn from_table(values: &[f64]) -> Result<Self> {
        if values.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid("decay factors must be non-negative"));
        }
        Ok(Self {
            r_table: values
                .iter()
                .enumerate()
                .map(|(i, &r)| DecayPoint { t: (i + 1) as f64, r })
                .collect(),
            scale: 1.0,
            a: None,
            b: None,
            fit_r2: None,
            cohort_size: 0,
        })
    }

    pub fn is_fitted(&self) -> bool {
        self.a.is_some() && self.b.is_some()
    }

    /// Absolute decay factor for hour `t >= 1` after inflection: the table
    /// inside its horizon, `exp(a t + b)` beyond it, zero when neither exists.
    pub fn factor(&self, t: u32) -> f64 {
        if t == 0 {
            return 0.0;
        }
        if let Some(p) = self.r_table.get(t as usize - 1) {
            return self.scale * p.r;
        }
        match (self.a, self.b) {
            (Some(a), Some(b)) => (a * t as f64 + b).exp(),
            _ => 0.0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.r_table.len()
    }
}

/// Distribution of the growth shocks `X_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum GrowthNoise {
    /// `log X ~ Normal(mu, sigma)`.
    LogNormal { mu: f64, sigma: f64 },
    /// `X` fixed at `value`. A value of zero switches growth off.
    Constant { value: f64 },
}

impl GrowthNoise {
    /// Log-normal shocks with `E[X] = 1`.
    pub fn unit_mean_lognormal(sigma: f64) -> Self {
        GrowthNoise::LogNormal {
            mu: -0.5 * sigma * sigma,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GrowthNoise::LogNormal { mu, sigma } => {
                if !mu.is_finite() || !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::invalid("noise: mu must be finite and sigma non-negative"));
                }
            }
            GrowthNoise::Constant { value } => {
                if !(value.is_finite() && value >= 0.0) {
                    return Err(Error::invalid("noise: constant value must be non-negative"));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            GrowthNoise::LogNormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            GrowthNoise::Constant { value } => value,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            GrowthNoise::LogNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
            GrowthNoise::Constant { value } => value,
        }
    }
}

impl Default for GrowthNoise {
    fn default() -> Self {
        GrowthNoise::unit_mean_lognormal(0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationModel {
    pub decay: NoveltyDecay,
    pub noise: GrowthNoise,
    /// Length of one multiplicative growth step, hours.
    #[serde(default = "default_step_hours")]
    pub step_hours: f64,
}

fn default_step_hours() -> f64 {
    1.0
}

impl PropagationModel {
    pub fn new(decay: NoveltyDecay, noise: GrowthNoise, step_hours: f64) -> Result<Self> {
        let m = Self {
            decay,
            noise,
            step_hours,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_hours.is_finite() && self.step_hours > 0.0 && self.step_hours <= 1.0) {
            return Err(Error::invalid("propagation.step_hours must lie in (0, 1]"));
        }
        self.noise.validate()
    }

    /// `sum_{t=1}^{floor(T)} r(t) E[X]`, the expected log multiplier after
    /// `T` hours of propagation.
    pub fn expected_log_growth(&self, hours: f64) -> f64 {
        if !(hours >= 1.0) {
            return 0.0;
        }
        let ex = self.noise.mean();
        let whole = (hours + TIME_EPS).floor() as u32;
        (1..=whole).map(|t| self.decay.factor(t) * ex).sum()
    }
}

/// Where each trace's propagation phase begins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflectionAnchor {
    /// First sample reaching the tipping point: the trace's own attribute
    /// when `None`, otherwise the given value for every trace.
    Tipping(Option<u64>),
    /// A fixed number of hours after launch.
    Fixed(f64),
}

impl InflectionAnchor {
    pub fn locate(&self, tr: &crate::trace::PurchaseTrace) -> Option<f64> {
        match *self {
            InflectionAnchor::Tipping(None) => tr
                .tipped_at
                .or_else(|| tr.tipping_point().and_then(|th| tr.first_time_reaching(th))),
            InflectionAnchor::Tipping(Some(theta)) => tr.first_time_reaching(theta),
            InflectionAnchor::Fixed(h) => Some(h),
        }
    }
}

/// Cumulative counts read at whole hours `0..=horizon` after each trace's
/// inflection point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignedCohort {
    pub horizon: u32,
    pub series: Vec<(String, Vec<u64>)>,
}

impl AlignedCohort {
    /// Traces without an inflection point, or whose samples stop before
    /// `inflection + horizon`, are left out.
    pub fn from_dataset(ds: &Dataset, anchor: InflectionAnchor, horizon: u32) -> Self {
        let series = ds
            .traces
            .iter()
            .filter_map(|tr| {
                let start = anchor.locate(tr)?;
                let end = start + horizon as f64;
                if tr.last_time()? + TIME_EPS < end {
                    return None;
                }
                let counts = (0..=horizon).map(|k| tr.count_at(start + k as f64)).collect();
                Some((tr.deal_id.clone(), counts))
            })
            .collect();
        Self { horizon, series }
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

/// Estimates `r(t) = (E log N_t - E log N_{t-1}) / (E log N_1 - E log N_0)`
/// for `t = 1..=horizon` from sample means over the cohort.
pub fn estimate_decay(cohort: &AlignedCohort, horizon: u32) -> Result<NoveltyDecay> {
    if horizon < 1 {
        return Err(Error::invalid("decay horizon must be at least 1 hour"));
    }
    if horizon > cohort.horizon {
        return Err(Error::invalid(format!(
            "cohort is aligned for {} hours, {horizon} requested",
            cohort.horizon
        )));
    }
    let len = horizon as usize + 1;
    let mut sums = vec![0.0_f64; len];
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (_, counts) in &cohort.series {
        let counts = &counts[..len];
        if counts.contains(&0) {
            excluded += 1;
            continue;
        }
        for (s, &n) in sums.iter_mut().zip(counts) {
            *s += (n as f64).ln();
        }
        used += 1;
    }
    if excluded > 0 {
        warn!("decay estimation: excluded {excluded} trace(s) with zero purchases inside the window");
    }
    if used == 0 {
        return Err(Error::insufficient("no traces with positive counts over the decay window"));
    }
    let means: Vec<f64> = sums.iter().map(|s| s / used as f64).collect();
    let first = means[1] - means[0];
    if !(first > 0.0) {
        return Err(Error::insufficient(
            "cohort shows no growth in the first hour after inflection",
        ));
    }
    let r_table = (1..len)
        .map(|t| DecayPoint {
            t: t as f64,
            r: ((means[t] - means[t - 1]) / first).max(0.0),
        })
        .collect();
    Ok(NoveltyDecay {
        r_table,
        scale: first,
        a: None,
        b: None,
        fit_r2: None,
        cohort_size: used,
    })
}

/// Least-squares fit of `log(scale * r(t)) = a t + b` over table points with
/// `r > 0`.
pub fn fit_decay_exponential(decay: &NoveltyDecay) -> Result<NoveltyDecay> {
    let (ts, logs): (Vec<f64>, Vec<f64>) = decay
        .r_table
        .iter()
        .filter(|p| p.r > 0.0)
        .map(|p| (p.t, (decay.scale * p.r).ln()))
        .unzip();
    if ts.len() < 3 {
        return Err(Error::insufficient(format!(
            "exponential decay fit needs 3 positive points, got {}",
            ts.len()
        )));
    }
    let line = fit_line(&ts, &logs)?;
    Ok(NoveltyDecay {
        a: Some(line.slope),
        b: Some(line.intercept),
        fit_r2: Some(line.r2),
        ..decay.clone()
    })
}

/// Writes the table as `t_hours,r`.
pub fn write_decay_csv<W: Write>(decay: &NoveltyDecay, mut out: W) -> Result<()> {
    writeln!(out, "t_hours,r")?;
    for p in &decay.r_table {
        writeln!(out, "{},{}", p.t, p.r)?;
    }
    Ok(())
}
