//! Train/test evaluation of the predictors by relative error.

use std::io::Write;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predict::{
    count_pairs, predict_baseline1, train_mlr_on, train_sp, Baseline2Params, HybridChoice,
    HybridPolicy, MlrModel, MlrTarget, PolicyMode, SpEntry,
};
use crate::stats::{mean, standard_error};
use crate::trace::{Dataset, PurchaseTrace, TIME_EPS};

/// `|real - predicted| / real`.
pub fn relative_error(real: u64, predicted: u64) -> Result<f64> {
    if real == 0 {
        return Err(Error::invalid("relative error is undefined for zero real purchases"));
    }
    Ok(real.abs_diff(predicted) as f64 / real as f64)
}

/// Shuffles with `seed` and puts the first `ceil(ratio * n)` traces in the
/// training half.
pub fn split_dataset(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if ds.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * ds.len() as f64) - 1e-9).ceil() as usize;
    let pick = |ids: &[usize]| Dataset {
        traces: ids.iter().map(|&i| ds.traces[i].clone()).collect(),
        provenance: ds.provenance.clone(),
    };
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Baseline1,
    Baseline2,
    Mlr,
    Sp,
    Hybrid,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 5] = [
        PredictorKind::Baseline1,
        PredictorKind::Baseline2,
        PredictorKind::Mlr,
        PredictorKind::Sp,
        PredictorKind::Hybrid,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PredictorKind::Baseline1 => "baseline1",
            PredictorKind::Baseline2 => "baseline2",
            PredictorKind::Mlr => "mlr",
            PredictorKind::Sp => "sp",
            PredictorKind::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline1" | "b1" => Ok(PredictorKind::Baseline1),
            "baseline2" | "b2" => Ok(PredictorKind::Baseline2),
            "mlr" => Ok(PredictorKind::Mlr),
            "sp" => Ok(PredictorKind::Sp),
            "hybrid" => Ok(PredictorKind::Hybrid),
            other => Err(Error::invalid(format!("unknown predictor {other:?}"))),
        }
    }
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split_ratio: f64,
    pub split_seed: u64,
    /// Observation times `t1`, hours.
    pub horizons: Vec<f64>,
    /// Target time `t2`, hours.
    pub target_hours: f64,
    pub predictors: Vec<PredictorKind>,
    pub policy: HybridPolicy,
    /// Observation time at which error CDFs are reported.
    pub cdf_horizon: f64,
    /// Leave out deals that had not tipped by the target time.
    pub exclude_failed: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split_ratio: 0.5,
            split_seed: 0,
            horizons: (1..=23).map(f64::from).collect(),
            target_hours: 24.0,
            predictors: PredictorKind::ALL.to_vec(),
            policy: HybridPolicy::new(PolicyMode::Groupon),
            cdf_horizon: 12.0,
            exclude_failed: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid("split_ratio must lie in (0, 1)"));
        }
        if !(self.target_hours.is_finite() && self.target_hours > 0.0) {
            return Err(Error::invalid("target_hours must be positive"));
        }
        if let Some(h) = self
            .horizons
            .iter()
            .chain(std::iter::once(&self.cdf_horizon))
            .find(|h| !(**h >= 0.0 && **h < self.target_hours))
        {
            return Err(Error::invalid(format!(
                "horizons must lie in [0, target_hours); got {h}"
            )));
        }
        if self.predictors.is_empty() {
            return Err(Error::invalid("predictors must not be empty"));
        }
        if self.policy.cutoff_hours < 0.0 {
            return Err(Error::invalid("policy.cutoff_hours must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub predictor: PredictorKind,
    pub horizon: f64,
    /// `None` when the predictor could not be trained at this horizon.
    pub mean_rel_err: Option<f64>,
    pub stderr: Option<f64>,
    pub n: usize,
    /// Per-deal relative errors in test-set order.
    #[serde(skip)]
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCdf {
    pub predictor: PredictorKind,
    pub horizon: f64,
    /// `(relative error, fraction of deals at or below it)`, ascending.
    pub points: Vec<(f64, f64)>,
}

impl ErrorCdf {
    /// Empirical CDF: the `i`-th smallest error maps to `i / n`.
    pub fn from_errors(predictor: PredictorKind, horizon: f64, errors: &[f64]) -> Self {
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        Self {
            predictor,
            horizon,
            points: sorted
                .into_iter()
                .enumerate()
                .map(|(i, e)| (e, (i + 1) as f64 / n))
                .collect(),
        }
    }

    /// Fraction of deals with error strictly below `threshold`.
    pub fn fraction_below(&self, threshold: f64) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().filter(|p| p.0 < threshold).count() as f64 / self.points.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub cdfs: Vec<ErrorCdf>,
    pub n_train: usize,
    pub n_test: usize,
    pub target_hours: f64,
}

impl EvalReport {
    pub fn cell(&self, predictor: PredictorKind, horizon: f64) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.predictor == predictor && (c.horizon - horizon).abs() < 1e-9)
    }

    pub fn mean_error(&self, predictor: PredictorKind, horizon: f64) -> Option<f64> {
        self.cell(predictor, horizon).and_then(|c| c.mean_rel_err)
    }

    pub fn cdf(&self, predictor: PredictorKind) -> Option<&ErrorCdf> {
        self.cdfs.iter().find(|c| c.predictor == predictor)
    }
}

/// Test deal with its target count.
struct TestDeal<'a> {
    trace: &'a PurchaseTrace,
    real: u64,
}

/// Trains every requested predictor on one half, scores it on the other
/// at each observation time, and collects error CDFs at `cdf_horizon`.
pub fn evaluate(cfg: &EvalConfig, ds: &Dataset) -> Result<EvalReport> {
    cfg.validate()?;
    let t2 = cfg.target_hours;
    let eligible: Vec<PurchaseTrace> = ds
        .traces
        .iter()
        .filter(|tr| tr.last_time().is_some_and(|t| t + TIME_EPS >= t2))
        .filter(|tr| {
            !cfg.exclude_failed
                || tr
                    .tipping_point()
                    .is_some_and(|theta| tr.count_at(t2) >= theta)
        })
        .cloned()
        .collect();
    if eligible.len() < ds.len() {
        warn!(
            "evaluation: {} of {} deals excluded (shorter than {t2} h or failed)",
            ds.len() - eligible.len(),
            ds.len()
        );
    }
    let eligible = Dataset {
        traces: eligible,
        provenance: ds.provenance.clone(),
    };
    if eligible.len() < 2 {
        return Err(Error::insufficient("evaluation needs at least 2 eligible deals"));
    }
    let (train, test) = split_dataset(&eligible, cfg.split_ratio, cfg.split_seed)?;

    let mut unscorable = 0usize;
    let test_deals: Vec<TestDeal> = test
        .traces
        .iter()
        .filter_map(|tr| {
            let real = tr.count_at(t2);
            if real == 0 {
                unscorable += 1;
                None
            } else {
                Some(TestDeal { trace: tr, real })
            }
        })
        .collect();
    if unscorable > 0 {
        warn!("evaluation: {unscorable} test deal(s) with zero purchases at {t2} h are not scored");
    }

    let mlr = if cfg.predictors.contains(&PredictorKind::Mlr) {
        let positive = Dataset {
            traces: train.traces.iter().filter(|tr| tr.count_at(t2) > 0).cloned().collect(),
            provenance: train.provenance.clone(),
        };
        if positive.len() < train.len() {
            warn!(
                "evaluation: MLR skips {} training deal(s) with zero purchases at {t2} h",
                train.len() - positive.len()
            );
        }
        match train_mlr_on(&positive, MlrTarget::At(t2)) {
            Ok(m) => Some(m),
            Err(e) => {
                warn!("evaluation: MLR not trained: {e}");
                None
            }
        }
    } else {
        None
    };

    let mut horizons = cfg.horizons.clone();
    if !horizons.iter().any(|h| (h - cfg.cdf_horizon).abs() < 1e-9) {
        horizons.push(cfg.cdf_horizon);
    }
    let grid: Vec<(PredictorKind, f64)> = cfg
        .predictors
        .iter()
        .flat_map(|&p| horizons.iter().map(move |&h| (p, h)))
        .collect();
    let scored: Vec<(PredictorKind, f64, Option<Vec<f64>>)> = grid
        .par_iter()
        .map(|&(p, h)| {
            let errs = score(p, h, t2, &cfg.policy, &train, &test_deals, mlr.as_ref());
            (p, h, errs)
        })
        .collect();

    let mut cells = Vec::new();
    let mut cdfs = Vec::new();
    for (p, h, errs) in scored {
        if (h - cfg.cdf_horizon).abs() < 1e-9 {
            if let Some(e) = &errs {
                cdfs.push(ErrorCdf::from_errors(p, h, e));
            }
        }
        if !cfg.horizons.iter().any(|x| (x - h).abs() < 1e-9) {
            continue;
        }
        cells.push(match errs {
            Some(e) if !e.is_empty() => EvalCell {
                predictor: p,
                horizon: h,
                mean_rel_err: Some(mean(&e)),
                stderr: Some(standard_error(&e)),
                n: e.len(),
                errors: e,
            },
            _ => EvalCell {
                predictor: p,
                horizon: h,
                mean_rel_err: None,
                stderr: None,
                n: 0,
                errors: Vec::new(),
            },
        });
    }
    Ok(EvalReport {
        cells,
        cdfs,
        n_train: train.len(),
        n_test: test_deals.len(),
        target_hours: t2,
    })
}

fn score(
    predictor: PredictorKind,
    t1: f64,
    t2: f64,
    policy: &HybridPolicy,
    train: &Dataset,
    test: &[TestDeal],
    mlr: Option<&MlrModel>,
) -> Option<Vec<f64>> {
    let fit_sp = || -> Option<SpEntry> {
        train_sp(train, t1, t2)
            .map_err(|e| warn!("evaluation: SP at {t1} h not trained: {e}"))
            .ok()
    };
    let predictions: Vec<u64> = match predictor {
        PredictorKind::Baseline1 => test
            .iter()
            .map(|d| predict_baseline1(d.trace.count_at(t1)))
            .collect(),
        PredictorKind::Baseline2 => {
            let params = Baseline2Params::train(&count_pairs(train, t1, t2))
                .map_err(|e| warn!("evaluation: baseline2 at {t1} h not trained: {e}"))
                .ok()?;
            test.iter().map(|d| params.predict(d.trace.count_at(t1))).collect()
        }
        PredictorKind::Mlr => {
            let m = mlr?;
            test.iter()
                .map(|d| d.trace.attributes.as_ref().and_then(|a| m.predict(a).ok()))
                .collect::<Option<Vec<u64>>>()?
        }
        PredictorKind::Sp => {
            let entry = fit_sp()?;
            test.iter().map(|d| entry.predict(d.trace.count_at(t1))).collect()
        }
        PredictorKind::Hybrid => {
            let entry = fit_sp();
            test.iter()
                .map(|d| {
                    let n1 = d.trace.count_at(t1);
                    match policy.choose(d.trace, t1, None).ok()? {
                        HybridChoice::Baseline1 => Some(n1),
                        HybridChoice::Sp => entry.as_ref().map(|e| e.predict(n1)),
                    }
                })
                .collect::<Option<Vec<u64>>>()?
        }
    };
    Some(
        test.iter()
            .zip(predictions)
            .map(|(d, p)| relative_error(d.real, p).expect("real count is positive"))
            .collect(),
    )
}

/// `predictor,horizon_hours,mean_rel_err,stderr,n`; missing cells leave the
/// error columns empty.
pub fn write_report_csv<W: Write>(report: &EvalReport, mut out: W) -> Result<()> {
    writeln!(out, "predictor,horizon_hours,mean_rel_err,stderr,n")?;
    for c in &report.cells {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            c.predictor,
            c.horizon,
            fmt(c.mean_rel_err),
            fmt(c.stderr),
            c.n
        )?;
    }
    Ok(())
}

/// `predictor,rel_err,cum_fraction`.
pub fn write_cdf_csv<W: Write>(report: &EvalReport, mut out: W) -> Result<()> {
    writeln!(out, "predictor,rel_err,cum_fraction")?;
    for cdf in &report.cdfs {
        for (e, f) in &cdf.points {
            writeln!(out, "{},{},{}", cdf.predictor, e, f)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceSample;

    #[test]
    fn relative_error_values() {
        assert_eq!(format!("{:.2}", relative_error(251, 93).unwrap()), "0.63");
        assert_eq!(format!("{:.2}", relative_error(384, 463).unwrap()), "0.21");
        assert_eq!(relative_error(17, 17).unwrap(), 0.0);
        assert!(relative_error(0, 3).is_err());
    }

    fn flat_dataset(n: usize) -> Dataset {
        let traces = (0..n)
            .map(|i| {
                let samples = (0..=24).map(|h| TraceSample::new(h as f64, 5 + i as u64)).collect();
                PurchaseTrace::new(format!("d{i}"), samples).unwrap()
            })
            .collect();
        Dataset::new(traces, "").unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = flat_dataset(10);
        let (a, b) = split_dataset(&ds, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a2, _) = split_dataset(&ds, 0.5, 3).unwrap();
        assert_eq!(a, a2);
        let ds11 = flat_dataset(11);
        let (a, b) = split_dataset(&ds11, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (6, 5));
        let mut ids: Vec<String> = a.traces.iter().chain(&b.traces).map(|t| t.deal_id.clone()).collect();
        ids.sort();
        let mut all: Vec<String> = ds11.traces.iter().map(|t| t.deal_id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
        assert!(split_dataset(&ds, 1.0, 0).is_err());
        assert!(split_dataset(&Dataset::default(), 0.5, 0).is_err());
    }

    #[test]
    fn flat_traces_give_zero_baseline1_error() {
        let cfg = EvalConfig {
            predictors: vec![PredictorKind::Baseline1, PredictorKind::Baseline2],
            ..EvalConfig::default()
        };
        let report = evaluate(&cfg, &flat_dataset(20)).unwrap();
        for h in 1..=23 {
            assert_eq!(report.mean_error(PredictorKind::Baseline1, h as f64), Some(0.0));
        }
        let cdf = report.cdf(PredictorKind::Baseline1).unwrap();
        assert_eq!(cdf.points.last().unwrap().1, 1.0);
    }

    #[test]
    fn untrainable_cells_are_missing() {
        // No attributes: MLR cannot train; the run still completes.
        let cfg = EvalConfig {
            predictors: vec![PredictorKind::Baseline1, PredictorKind::Mlr],
            horizons: vec![6.0, 12.0],
            ..EvalConfig::default()
        };
        let report = evaluate(&cfg, &flat_dataset(8)).unwrap();
        let cell = report.cell(PredictorKind::Mlr, 6.0).unwrap();
        assert_eq!(cell.mean_rel_err, None);
        assert_eq!(cell.n, 0);
        let mut buf = Vec::new();
        write_report_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("predictor,horizon_hours,mean_rel_err,stderr,n\n"));
        assert!(text.contains("mlr,6,,,0\n"));
    }

    #[test]
    fn config_validation() {
        let bad = EvalConfig {
            horizons: vec![24.0],
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvalConfig {
            split_ratio: 0.0,
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: EvalConfig = serde_json::from_str(r#"{"horizons":[8,12]}"#).unwrap();
        assert_eq!(parsed.target_hours, 24.0);
        assert_eq!(parsed.horizons, vec![8.0, 12.0]);
    }
}
