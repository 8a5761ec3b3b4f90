//! Seeded synthetic cohorts from the two-phase purchase process.
//!
//! Before the inflection point purchases arrive as a Poisson process whose
//! rate may be modulated by hour of day. After it the (fractional) count is
//! multiplied by `1 + r(t) X dt` every growth step, where `r` is indexed by
//! whole hours since inflection. Reported counts are the internal count
//! rounded down.
//!
//! Every deal draws from its own ChaCha stream keyed by `(seed, deal_index)`,
//! so cohorts are identical regardless of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::{GrowthNoise, NoveltyDecay, PropagationModel};
use crate::trace::{Dataset, DealAttributes, PurchaseTrace, TraceSample, TIME_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum InflectionRule {
    /// Propagation starts with the purchase that reaches the tipping point.
    Tipping,
    /// Propagation starts a fixed number of hours after launch.
    Fixed { hours: f64 },
}

/// Per-deal heterogeneity. Each deal draws
/// `theta_i = max(1, round(theta * exp(theta_log_sd * Z1)))` and
/// `rate_i = rate * (theta_i / theta)^rate_elasticity * exp(rate_log_sd * Z2)`.
/// With unit elasticity the expected tipping time stays near `theta / rate`;
/// below one, deals with larger tipping points take longer to tip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DealMix {
    pub theta_log_sd: f64,
    pub rate_log_sd: f64,
    #[serde(default = "unit")]
    pub rate_elasticity: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Base purchase rate before inflection, purchases per hour.
    pub rate: f64,
    pub tipping_point: u64,
    pub lifetime_hours: f64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval_hours: f64,
    pub propagation: PropagationModel,
    pub inflection: InflectionRule,
    /// 24 hour-of-day rate multipliers averaging 1.
    #[serde(default)]
    pub seasonality: Option<Vec<f64>>,
    #[serde(default)]
    pub launch_hour: u8,
    #[serde(default)]
    pub max_sales: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mix: Option<DealMix>,
}

fn default_sample_interval() -> f64 {
    1.0 / 3.0
}

impl SimConfig {
    /// Tipping-point deals with the Groupon-style decay `exp(-0.21 t - 2)`.
    /// Tipping points spread log-normally around 22 and discovery rates grow
    /// a little slower than tipping points, so larger deals tip later.
    pub fn groupon() -> Self {
        Self {
            rate: 2.1,
            tipping_point: 22,
            lifetime_hours: 24.0,
            sample_interval_hours: 1.0 / 3.0,
            propagation: PropagationModel {
                decay: NoveltyDecay::exponential(-0.21, -2.0),
                noise: GrowthNoise::unit_mean_lognormal(0.5),
                step_hours: 1.0 / 3.0,
            },
            inflection: InflectionRule::Tipping,
            seasonality: None,
            launch_hour: 5,
            max_sales: None,
            seed: 0,
            mix: Some(DealMix {
                theta_log_sd: 1.2,
                rate_log_sd: 0.15,
                rate_elasticity: 0.85,
            }),
        }
    }

    /// Fixed four-hour inflection with the LivingSocial-style decay
    /// `exp(-0.11 t - 0.28)`.
    pub fn livingsocial() -> Self {
        Self {
            rate: 5.0,
            tipping_point: 1,
            lifetime_hours: 24.0,
            sample_interval_hours: 1.0 / 3.0,
            propagation: PropagationModel {
                decay: NoveltyDecay::exponential(-0.11, -0.28),
                noise: GrowthNoise::unit_mean_lognormal(0.5),
                step_hours: 1.0 / 3.0,
            },
            inflection: InflectionRule::Fixed { hours: 4.0 },
            seasonality: None,
            launch_hour: 5,
            max_sales: None,
            seed: 0,
            mix: Some(DealMix {
                theta_log_sd: 0.0,
                rate_log_sd: 1.0,
                rate_elasticity: 1.0,
            }),
        }
    }

    /// Checks every field; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("rate", self.rate)?;
        positive("lifetime_hours", self.lifetime_hours)?;
        positive("sample_interval_hours", self.sample_interval_hours)?;
        if self.tipping_point < 1 {
            return Err(Error::invalid("tipping_point must be at least 1"));
        }
        self.propagation.validate()?;
        if let InflectionRule::Fixed { hours } = self.inflection {
            if !(hours.is_finite() && hours >= 0.0) {
                return Err(Error::invalid("inflection.hours must be non-negative"));
            }
        }
        if let Some(profile) = &self.seasonality {
            if profile.len() != 24 {
                return Err(Error::invalid(format!(
                    "seasonality must have 24 entries, got {}",
                    profile.len()
                )));
            }
            if profile.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::invalid("seasonality entries must be non-negative"));
            }
            let mean = profile.iter().sum::<f64>() / 24.0;
            if (mean - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("seasonality must average 1, got {mean}")));
            }
        }
        if self.launch_hour > 23 {
            return Err(Error::invalid("launch_hour must lie in 0-23"));
        }
        if self.max_sales == Some(0) {
            return Err(Error::invalid("max_sales must be at least 1"));
        }
        if let Some(mix) = &self.mix {
            if !(mix.theta_log_sd >= 0.0 && mix.rate_log_sd >= 0.0) {
                return Err(Error::invalid("mix standard deviations must be non-negative"));
            }
            if !mix.rate_elasticity.is_finite() {
                return Err(Error::invalid("mix.rate_elasticity must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub dataset: Dataset,
    /// Exact inflection time of each deal; `None` for deals that never left
    /// the discovery phase.
    pub per_deal_inflection: Vec<(String, Option<f64>)>,
    pub config: SimConfig,
}

/// One simulated deal along with the exact time its propagation began.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDeal {
    pub trace: PurchaseTrace,
    pub inflection: Option<f64>,
}

pub fn deal_id(index: u64) -> String {
    format!("deal-{index:06}")
}

fn deal_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn simulate_deal(cfg: &SimConfig, deal_index: u64) -> PurchaseTrace {
    simulate_deal_detailed(cfg, deal_index).trace
}

pub fn simulate_deal_detailed(cfg: &SimConfig, deal_index: u64) -> SimulatedDeal {
    let mut rng = deal_rng(cfg.seed, deal_index);
    let (theta, rate) = match cfg.mix {
        Some(mix) => {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let theta = (cfg.tipping_point as f64 * (mix.theta_log_sd * z1).exp())
                .round()
                .max(1.0);
            let rate = cfg.rate
                * (theta / cfg.tipping_point as f64).powf(mix.rate_elasticity)
                * (mix.rate_log_sd * z2).exp();
            (theta as u64, rate)
        }
        None => (cfg.tipping_point, cfg.rate),
    };
    let lifetime = cfg.lifetime_hours;
    let cap = cfg.max_sales.unwrap_or(u64::MAX);

    // Discovery phase.
    let stop_time = match cfg.inflection {
        InflectionRule::Tipping => lifetime,
        InflectionRule::Fixed { hours } => hours.min(lifetime),
    };
    let clock = ArrivalClock {
        rate,
        seasonality: cfg.seasonality.as_deref(),
        launch_hour: cfg.launch_hour,
    };
    let mut arrivals: Vec<f64> = Vec::new();
    let mut inflection = None;
    let mut t = 0.0;
    loop {
        if arrivals.len() as u64 >= cap {
            break;
        }
        if cfg.inflection == InflectionRule::Tipping && arrivals.len() as u64 >= theta {
            break;
        }
        let e: f64 = Exp1.sample(&mut rng);
        match clock.advance(t, e, stop_time) {
            Some(next) => {
                t = next;
                arrivals.push(t);
            }
            None => break,
        }
    }
    match cfg.inflection {
        InflectionRule::Tipping => {
            if arrivals.len() as u64 >= theta {
                inflection = Some(arrivals[theta as usize - 1]);
            }
        }
        InflectionRule::Fixed { hours } => {
            if hours < lifetime {
                inflection = Some(hours);
            }
        }
    }

    // Propagation phase: (step time, reported count) after each growth step.
    let mut growth: Vec<(f64, u64)> = Vec::new();
    if let Some(start) = inflection {
        let prop = &cfg.propagation;
        let dt = prop.step_hours;
        let mut count = arrivals.len() as f64;
        let mut j: u64 = 1;
        loop {
            let elapsed = j as f64 * dt;
            let at = start + elapsed;
            if at > lifetime + TIME_EPS {
                break;
            }
            let hour = (elapsed - TIME_EPS).ceil().max(1.0) as u32;
            let x = prop.noise.sample(&mut rng);
            count *= 1.0 + prop.decay.factor(hour) * x * dt;
            count = count.min(cap as f64);
            growth.push((at, count.floor() as u64));
            j += 1;
        }
    }

    let interval = cfg.sample_interval_hours;
    let steps = (lifetime / interval + TIME_EPS).floor() as u64;
    let base = arrivals.len() as u64;
    let samples = (0..=steps)
        .map(|k| {
            let at = k as f64 * interval;
            let n = match inflection {
                Some(start) if at + TIME_EPS >= start => {
                    let done = growth.partition_point(|&(g, _)| g <= at + TIME_EPS);
                    if done == 0 {
                        base
                    } else {
                        growth[done - 1].1
                    }
                }
                _ => arrivals.partition_point(|&a| a <= at) as u64,
            };
            TraceSample::new(at, n)
        })
        .collect();

    let attributes = DealAttributes {
        tipping_point: theta,
        featured: false,
        duration_hours: lifetime,
        limited: cfg.max_sales.is_some(),
        price: 20.0,
        discount_pct: 50.0,
        launch_day: "Mon".into(),
        category: "synthetic".into(),
        city: "synthetic".into(),
    };
    let mut trace = PurchaseTrace::new(deal_id(deal_index), samples)
        .expect("grid times are strictly increasing")
        .with_attributes(attributes);
    trace.launch_hour_of_day = cfg.launch_hour;
    SimulatedDeal { trace, inflection }
}

pub fn simulate_cohort(cfg: &SimConfig, n_deals: u64) -> Result<SimResult> {
    if n_deals < 1 {
        return Err(Error::invalid("n_deals must be at least 1"));
    }
    cfg.validate()?;
    let deals: Vec<SimulatedDeal> = (0..n_deals)
        .into_par_iter()
        .map(|i| simulate_deal_detailed(cfg, i))
        .collect();
    let per_deal_inflection = deals
        .iter()
        .map(|d| (d.trace.deal_id.clone(), d.inflection))
        .collect();
    let traces = deals.into_iter().map(|d| d.trace).collect();
    Ok(SimResult {
        dataset: Dataset::new(traces, format!("simulated seed={}", cfg.seed))?,
        per_deal_inflection,
        config: cfg.clone(),
    })
}

/// Piecewise-constant arrival intensity over clock hours.
struct ArrivalClock<'a> {
    rate: f64,
    seasonality: Option<&'a [f64]>,
    launch_hour: u8,
}

impl ArrivalClock<'_> {
    fn rate_at(&self, t: f64) -> f64 {
        match self.seasonality {
            None => self.rate,
            Some(profile) => {
                let hour = (self.launch_hour as u64 + t.floor() as u64) % 24;
                self.rate * profile[hour as usize]
            }
        }
    }

    /// Time at which the integrated intensity from `t` reaches `work`, or
    /// `None` if that happens after `limit`.
    fn advance(&self, mut t: f64, mut work: f64, limit: f64) -> Option<f64> {
        if self.seasonality.is_none() {
            let next = t + work / self.rate;
            return (next <= limit).then_some(next);
        }
        while t <= limit {
            let seg_end = t.floor() + 1.0;
            let rho = self.rate_at(t);
            let capacity = rho * (seg_end - t);
            if rho > 0.0 && capacity >= work {
                let next = t + work / rho;
                return (next <= limit).then_some(next);
            }
            work -= capacity;
            t = seg_end;
        }
        None
    }
}

/// Mean cumulative-count curve of a group of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthCurve {
    /// Launch hour shared by the group, when grouped.
    pub launch_hour: Option<u8>,
    pub n_traces: usize,
    pub points: Vec<(f64, f64)>,
}

/// Pointwise mean of cumulative counts on the grid `0, dt, ...` up to the
/// shortest trace in each group. With `normalize_by_launch_hour`, traces are
/// grouped by launch hour (ascending) and each group gets its own curve.
pub fn mean_growth_curve(ds: &Dataset, dt: f64, normalize_by_launch_hour: bool) -> Result<Vec<GrowthCurve>> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot average an empty dataset"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid("curve step must be positive"));
    }
    let groups: Vec<(Option<u8>, Vec<&PurchaseTrace>)> = if normalize_by_launch_hour {
        let mut by_hour: std::collections::BTreeMap<u8, Vec<&PurchaseTrace>> = Default::default();
        for tr in &ds.traces {
            by_hour.entry(tr.launch_hour_of_day).or_default().push(tr);
        }
        by_hour.into_iter().map(|(h, v)| (Some(h), v)).collect()
    } else {
        vec![(None, ds.traces.iter().collect())]
    };

    groups
        .into_iter()
        .map(|(launch_hour, traces)| {
            let end = traces
                .iter()
                .map(|t| t.last_time().unwrap_or(0.0))
                .fold(f64::INFINITY, f64::min);
            let steps = (end / dt + TIME_EPS).floor() as usize;
            let points = (0..=steps)
                .map(|k| {
                    let at = k as f64 * dt;
                    let total: f64 = traces.iter().map(|t| t.count_at(at) as f64).sum();
                    (at, total / traces.len() as f64)
                })
                .collect();
            Ok(GrowthCurve {
                launch_hour,
                n_traces: traces.len(),
                points,
            })
        })
        .collect()
}
