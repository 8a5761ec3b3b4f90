//! Purchase-count predictors.
//!
//! * baseline1: the count observed at `t1` is the forecast.
//! * baseline2: `N_{t2} = alpha N_{t1} + beta`, fit by least squares.
//! * MLR: `log N = x . beta` on encoded deal attributes.
//! * SP: `log N_{t2} = slope log N_{t1} + intercept`, one fit per
//!   `(t1, t2)` pair, following the log-linear form implied by
//!   multiplicative growth.
//!
//! Hybrid policies pick baseline1 or SP depending on the deal's state.

use std::collections::BTreeSet;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{fit_line, least_squares, DEFAULT_RCOND};
use crate::trace::{Dataset, DealAttributes, PurchaseTrace, TIME_EPS};

/// Numeric columns ahead of the one-hot blocks.
pub const NUMERIC_FEATURES: [&str; 7] = [
    "intercept",
    "log_tipping_point",
    "featured",
    "duration_hours",
    "limited",
    "price",
    "discount_pct",
];

fn to_count(x: f64) -> u64 {
    if x.is_nan() || x <= 0.0 {
        0
    } else if x >= u64::MAX as f64 {
        u64::MAX
    } else {
        x.round() as u64
    }
}

pub fn predict_baseline1(n_t1: u64) -> u64 {
    n_t1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline2Params {
    pub alpha: f64,
    pub beta: f64,
}

impl Baseline2Params {
    pub fn train(pairs: &[(u64, u64)]) -> Result<Self> {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let line = fit_line(&xs, &ys)?;
        Ok(Self {
            alpha: line.slope,
            beta: line.intercept,
        })
    }

    /// `alpha n + beta`, floored at zero and rounded to a whole count.
    pub fn predict(&self, n_t1: u64) -> u64 {
        to_count(self.alpha * n_t1 as f64 + self.beta)
    }
}

pub fn train_baseline2(pairs: &[(u64, u64)]) -> Result<Baseline2Params> {
    Baseline2Params::train(pairs)
}

pub fn predict_baseline2(p: &Baseline2Params, n_t1: u64) -> u64 {
    p.predict(n_t1)
}

/// Vocabularies for the categorical attributes, sorted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryEncoder {
    pub launch_days: Vec<String>,
    pub categories: Vec<String>,
    pub cities: Vec<String>,
}

impl CategoryEncoder {
    pub fn fit<'a, I: IntoIterator<Item = &'a DealAttributes>>(attrs: I) -> Self {
        let mut days = BTreeSet::new();
        let mut cats = BTreeSet::new();
        let mut cities = BTreeSet::new();
        for a in attrs {
            days.insert(a.launch_day.clone());
            cats.insert(a.category.clone());
            cities.insert(a.city.clone());
        }
        Self {
            launch_days: days.into_iter().collect(),
            categories: cats.into_iter().collect(),
            cities: cities.into_iter().collect(),
        }
    }

    pub fn width(&self) -> usize {
        NUMERIC_FEATURES.len() + self.launch_days.len() + self.categories.len() + self.cities.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = NUMERIC_FEATURES.iter().map(|s| s.to_string()).collect();
        names.extend(self.launch_days.iter().map(|v| format!("launch_day={v}")));
        names.extend(self.categories.iter().map(|v| format!("category={v}")));
        names.extend(self.cities.iter().map(|v| format!("city={v}")));
        names
    }

    /// `[1, log theta, f, L, l, p, d, onehot(w), onehot(c), onehot(g)]`.
    /// A label outside the vocabulary leaves its block all zero.
    pub fn encode(&self, a: &DealAttributes) -> Result<Vec<f64>> {
        if a.tipping_point < 1 {
            return Err(Error::invalid("tipping_point must be at least 1 to take its log"));
        }
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let mut v = Vec::with_capacity(self.width());
        v.extend_from_slice(&[
            1.0,
            (a.tipping_point as f64).ln(),
            flag(a.featured),
            a.duration_hours,
            flag(a.limited),
            a.price,
            a.discount_pct,
        ]);
        for (vocab, label) in [
            (&self.launch_days, &a.launch_day),
            (&self.categories, &a.category),
            (&self.cities, &a.city),
        ] {
            v.extend(vocab.iter().map(|x| flag(x == label)));
        }
        Ok(v)
    }
}

pub fn encode_attributes(a: &DealAttributes, enc: &CategoryEncoder) -> Result<Vec<f64>> {
    enc.encode(a)
}

/// One row of the regression table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrModel {
    pub encoder: CategoryEncoder,
    pub coefficients: Vec<Coefficient>,
    pub rank: usize,
    pub n_obs: usize,
    pub r2: f64,
    pub adjusted_r2: f64,
    /// Residual norm divided by the response norm.
    pub relative_residual: f64,
}

/// Which count an MLR model is trained to explain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MlrTarget {
    /// The last observed count, `N_L`.
    Final,
    /// The count at a fixed hour.
    At(f64),
}

impl MlrModel {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn predict(&self, a: &DealAttributes) -> Result<u64> {
        let x = self.encoder.encode(a)?;
        let eta: f64 = x.iter().zip(&self.coefficients).map(|(x, c)| x * c.value).sum();
        Ok(to_count(eta.exp()))
    }
}

pub fn train_mlr(ds: &Dataset) -> Result<MlrModel> {
    train_mlr_on(ds, MlrTarget::Final)
}

/// Least squares of `log N` on the encoded attributes, minimum-norm when the
/// design is rank deficient.
pub fn train_mlr_on(ds: &Dataset, target: MlrTarget) -> Result<MlrModel> {
    let mut rows: Vec<(&DealAttributes, f64)> = Vec::with_capacity(ds.len());
    for tr in &ds.traces {
        let attrs = tr.attributes.as_ref().ok_or_else(|| {
            Error::invalid(format!("deal {:?} has no attributes", tr.deal_id))
        })?;
        let n = match target {
            MlrTarget::Final => tr.final_count(),
            MlrTarget::At(t) => tr.count_at(t),
        };
        if n < 1 {
            return Err(Error::invalid(format!(
                "deal {:?} has no purchases; log count undefined",
                tr.deal_id
            )));
        }
        rows.push((attrs, (n as f64).ln()));
    }
    if rows.len() < 2 {
        return Err(Error::insufficient(format!(
            "regression needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let encoder = CategoryEncoder::fit(rows.iter().map(|r| r.0));
    let p = encoder.width();
    let mut data = Vec::with_capacity(rows.len() * p);
    for (a, _) in &rows {
        data.extend(encoder.encode(a)?);
    }
    let x = DMatrix::from_row_slice(rows.len(), p, &data);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let sol = least_squares(&x, &y, DEFAULT_RCOND)?;
    if sol.rank < p {
        warn!(
            "regression design has rank {} for {} columns; using the minimum-norm solution",
            sol.rank, p
        );
    }
    let coefficients = encoder
        .feature_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| Coefficient {
            name,
            value: sol.coefficients[j],
            std_error: sol.std_errors[j],
            t_value: sol.t_values[j],
            p_value: sol.p_values[j],
        })
        .collect();
    let y_norm = y.norm();
    Ok(MlrModel {
        encoder,
        coefficients,
        rank: sol.rank,
        n_obs: sol.n_obs,
        r2: sol.r2,
        adjusted_r2: sol.adjusted_r2,
        relative_residual: if y_norm > 0.0 { sol.residual_norm / y_norm } else { sol.residual_norm },
    })
}

pub fn predict_mlr(m: &MlrModel, a: &DealAttributes) -> Result<u64> {
    m.predict(a)
}

/// Log-linear fit between the counts at two observation times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpEntry {
    pub t1: f64,
    pub t2: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub n: usize,
}

impl SpEntry {
    fn matches(&self, t1: f64, t2: f64) -> bool {
        (self.t1 - t1).abs() < 1e-6 && (self.t2 - t2).abs() < 1e-6
    }

    pub fn predict(&self, n_t1: u64) -> u64 {
        if n_t1 == 0 {
            warn!("SP prediction with zero purchases at t1; falling back to baseline1");
            return 0;
        }
        to_count((self.slope * (n_t1 as f64).ln() + self.intercept).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpModel {
    pub entries: Vec<SpEntry>,
}

impl SpModel {
    /// Fits every `(t1, t2)` pair in parallel. Pairs that cannot be fit are
    /// skipped with a warning.
    pub fn train(ds: &Dataset, t1s: &[f64], t2: f64) -> Self {
        let entries = t1s
            .par_iter()
            .filter_map(|&t1| match train_sp(ds, t1, t2) {
                Ok(e) => Some(e),
                Err(e) => {
                    warn!("SP pair ({t1}, {t2}) not trained: {e}");
                    None
                }
            })
            .collect();
        Self { entries }
    }

    pub fn entry(&self, t1: f64, t2: f64) -> Option<&SpEntry> {
        self.entries.iter().find(|e| e.matches(t1, t2))
    }

    pub fn predict(&self, n_t1: u64, t1: f64, t2: f64) -> Result<u64> {
        let e = self
            .entry(t1, t2)
            .ok_or_else(|| Error::MissingModel(format!("SP pair t1={t1}, t2={t2}")))?;
        Ok(e.predict(n_t1))
    }
}

/// `(log N_{t1}, log N_{t2})` pairs from traces spanning `t2` with positive
/// counts at both times.
fn sp_pairs(ds: &Dataset, t1: f64, t2: f64) -> (Vec<f64>, Vec<f64>) {
    let mut skipped = 0usize;
    let mut xs = Vec::with_capacity(ds.len());
    let mut ys = Vec::with_capacity(ds.len());
    for tr in &ds.traces {
        if tr.last_time().is_none_or(|t| t + TIME_EPS < t2) {
            continue;
        }
        let (a, b) = (tr.count_at(t1), tr.count_at(t2));
        if a == 0 || b == 0 {
            skipped += 1;
            continue;
        }
        xs.push((a as f64).ln());
        ys.push((b as f64).ln());
    }
    if skipped > 0 {
        warn!("SP ({t1}, {t2}): excluded {skipped} trace(s) with zero purchases");
    }
    (xs, ys)
}

pub fn train_sp(ds: &Dataset, t1: f64, t2: f64) -> Result<SpEntry> {
    if !(t1 < t2) {
        return Err(Error::invalid(format!("t1 ({t1}) must be earlier than t2 ({t2})")));
    }
    let (xs, ys) = sp_pairs(ds, t1, t2);
    if xs.len() < 2 {
        return Err(Error::insufficient(format!(
            "SP ({t1}, {t2}) needs at least 2 usable traces, got {}",
            xs.len()
        )));
    }
    let line = fit_line(&xs, &ys)?;
    Ok(SpEntry {
        t1,
        t2,
        slope: line.slope,
        intercept: line.intercept,
        r2: line.r2,
        slope_se: line.slope_se,
        intercept_se: line.intercept_se,
        n: line.n,
    })
}

pub fn predict_sp(m: &SpModel, n_t1: u64, t1: f64, t2: f64) -> Result<u64> {
    m.predict(n_t1, t1, t2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Groupon,
    Livingsocial,
}

impl std::str::FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "groupon" => Ok(PolicyMode::Groupon),
            "livingsocial" => Ok(PolicyMode::Livingsocial),
            other => Err(Error::invalid(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridPolicy {
    pub mode: PolicyMode,
    #[serde(default = "default_cutoff")]
    pub cutoff_hours: f64,
    #[serde(default = "default_override")]
    pub popularity_override: u64,
}

fn default_cutoff() -> f64 {
    3.0
}

fn default_override() -> u64 {
    100
}

impl HybridPolicy {
    pub fn new(mode: PolicyMode) -> Self {
        Self {
            mode,
            cutoff_hours: default_cutoff(),
            popularity_override: default_override(),
        }
    }

    /// Which predictor the policy selects for this prefix.
    ///
    /// Groupon: baseline1 when the first hour brought more than
    /// `popularity_override` purchases or the deal has not tipped by `t1`,
    /// otherwise SP. LivingSocial: baseline1 before `cutoff_hours`, SP after.
    pub fn choose(&self, prefix: &PurchaseTrace, t1: f64, tipping_point: Option<u64>) -> Result<HybridChoice> {
        match self.mode {
            PolicyMode::Groupon => {
                if prefix.count_at(1.0) > self.popularity_override {
                    return Ok(HybridChoice::Baseline1);
                }
                let theta = tipping_point.or_else(|| prefix.tipping_point()).ok_or_else(|| {
                    Error::invalid(format!(
                        "groupon policy needs the tipping point of deal {:?}",
                        prefix.deal_id
                    ))
                })?;
                if prefix.count_at(t1) < theta {
                    Ok(HybridChoice::Baseline1)
                } else {
                    Ok(HybridChoice::Sp)
                }
            }
            PolicyMode::Livingsocial => {
                if t1 < self.cutoff_hours {
                    Ok(HybridChoice::Baseline1)
                } else {
                    Ok(HybridChoice::Sp)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HybridChoice {
    Baseline1,
    Sp,
}

pub fn predict_hybrid(
    policy: &HybridPolicy,
    prefix: &PurchaseTrace,
    t1: f64,
    t2: f64,
    sp: &SpModel,
    tipping_point: Option<u64>,
) -> Result<u64> {
    let n_t1 = prefix.count_at(t1);
    match policy.choose(prefix, t1, tipping_point)? {
        HybridChoice::Baseline1 => Ok(predict_baseline1(n_t1)),
        HybridChoice::Sp => sp.predict(n_t1, t1, t2),
    }
}

/// Trained models for one target time, as stored by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub t2: f64,
    #[serde(default)]
    pub baseline2: Vec<Baseline2Entry>,
    #[serde(default)]
    pub sp: Option<SpModel>,
    #[serde(default)]
    pub mlr: Option<MlrModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline2Entry {
    pub t1: f64,
    pub params: Baseline2Params,
}

impl ModelBundle {
    pub fn baseline2_at(&self, t1: f64) -> Option<&Baseline2Params> {
        self.baseline2
            .iter()
            .find(|e| (e.t1 - t1).abs() < 1e-6)
            .map(|e| &e.params)
    }
}

/// `(N_{t1}, N_{t2})` from traces spanning `t2`.
pub fn count_pairs(ds: &Dataset, t1: f64, t2: f64) -> Vec<(u64, u64)> {
    ds.traces
        .iter()
        .filter(|tr| tr.last_time().is_some_and(|t| t + TIME_EPS >= t2))
        .map(|tr| (tr.count_at(t1), tr.count_at(t2)))
        .collect()
}
