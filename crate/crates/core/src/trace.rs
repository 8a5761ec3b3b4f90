//! Purchase traces and their file formats.
//!
//! A trace is one deal's cumulative purchase count sampled over time, in
//! hours since launch. Traces are read from a long-format CSV
//! (`deal_id,hours_since_launch,cumulative_purchases`) and optionally joined
//! with a JSON array of deal attributes.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_CSV_HEADER: [&str; 3] = ["deal_id", "hours_since_launch", "cumulative_purchases"];

/// Slack used when comparing sample times against grid or query times.
pub(crate) const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    /// Hours since launch.
    pub t: f64,
    /// Cumulative purchases.
    pub n: u64,
}

impl TraceSample {
    pub fn new(t: f64, n: u64) -> Self {
        Self { t, n }
    }
}

/// Regression covariates describing a deal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DealAttributes {
    pub tipping_point: u64,
    pub featured: bool,
    pub duration_hours: f64,
    pub limited: bool,
    pub price: f64,
    pub discount_pct: f64,
    pub launch_day: String,
    pub category: String,
    pub city: String,
}

impl DealAttributes {
    pub fn validate(&self) -> Result<()> {
        if self.tipping_point < 1 {
            return Err(Error::invalid("tipping_point must be at least 1"));
        }
        if !(self.duration_hours.is_finite() && self.duration_hours > 0.0) {
            return Err(Error::invalid("duration_hours must be positive"));
        }
        if !(self.price.is_finite() && self.price >= 0.0) {
            return Err(Error::invalid("price must be non-negative"));
        }
        if !(0.0..=100.0).contains(&self.discount_pct) {
            return Err(Error::invalid("discount_pct must lie in [0, 100]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurchaseTrace {
    pub deal_id: String,
    pub launch_hour_of_day: u8,
    pub lifetime_hours: f64,
    pub samples: Vec<TraceSample>,
    pub attributes: Option<DealAttributes>,
    pub tipped_at: Option<f64>,
}

impl PurchaseTrace {
    /// Builds a trace from time-sorted samples. Lifetime defaults to the last
    /// sample time; launch hour defaults to 0.
    pub fn new(deal_id: impl Into<String>, samples: Vec<TraceSample>) -> Result<Self> {
        for pair in samples.windows(2) {
            if pair[1].t <= pair[0].t {
                return Err(Error::invalid("sample times must be strictly increasing"));
            }
        }
        if let Some(s) = samples.iter().find(|s| !(s.t.is_finite() && s.t >= 0.0)) {
            return Err(Error::invalid(format!("sample time {} is not a non-negative number", s.t)));
        }
        let lifetime_hours = samples.last().map_or(0.0, |s| s.t);
        Ok(Self {
            deal_id: deal_id.into(),
            launch_hour_of_day: 0,
            lifetime_hours,
            samples,
            attributes: None,
            tipped_at: None,
        })
    }

    /// Attaches attributes, adopting their duration as the deal lifetime and
    /// recomputing the tipping time.
    pub fn with_attributes(mut self, attributes: DealAttributes) -> Self {
        self.lifetime_hours = attributes.duration_hours;
        self.tipped_at = self.first_time_reaching(attributes.tipping_point);
        self.attributes = Some(attributes);
        self
    }

    pub fn tipping_point(&self) -> Option<u64> {
        self.attributes.as_ref().map(|a| a.tipping_point)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.samples.last().map(|s| s.t)
    }

    pub fn final_count(&self) -> u64 {
        self.samples.last().map_or(0, |s| s.n)
    }

    /// Cumulative count at `t`, carrying the last observation forward.
    /// Zero before the first sample.
    pub fn count_at(&self, t: f64) -> u64 {
        let idx = self.samples.partition_point(|s| s.t <= t + TIME_EPS);
        if idx == 0 {
            0
        } else {
            self.samples[idx - 1].n
        }
    }

    /// Time of the first sample whose count reaches `threshold`.
    pub fn first_time_reaching(&self, threshold: u64) -> Option<f64> {
        self.samples.iter().find(|s| s.n >= threshold).map(|s| s.t)
    }

    /// Samples at or before `t_end`.
    pub fn truncated(&self, t_end: f64) -> PurchaseTrace {
        let keep = self.samples.partition_point(|s| s.t <= t_end + TIME_EPS);
        PurchaseTrace {
            samples: self.samples[..keep].to_vec(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub traces: Vec<PurchaseTrace>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(traces: Vec<PurchaseTrace>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = HashMap::with_capacity(traces.len());
        for tr in &traces {
            if seen.insert(tr.deal_id.as_str(), ()).is_some() {
                return Err(Error::invalid(format!("duplicate deal_id {:?}", tr.deal_id)));
            }
        }
        Ok(Self {
            traces,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn get(&self, deal_id: &str) -> Option<&PurchaseTrace> {
        self.traces.iter().find(|t| t.deal_id == deal_id)
    }

    /// Joins attribute records onto traces by deal id. Records for unknown
    /// deals are ignored; traces without a record keep `attributes = None`.
    pub fn attach_attributes(mut self, records: Vec<AttributeRecord>) -> Result<Self> {
        let mut by_id: HashMap<String, AttributeRecord> = HashMap::with_capacity(records.len());
        for rec in records {
            rec.attributes.validate().map_err(|e| {
                Error::invalid(format!("attributes for {:?}: {e}", rec.deal_id))
            })?;
            if let Some(h) = rec.launch_hour {
                if h > 23 {
                    return Err(Error::invalid(format!(
                        "attributes for {:?}: launch_hour {h} outside 0-23",
                        rec.deal_id
                    )));
                }
            }
            by_id.insert(rec.deal_id.clone(), rec);
        }
        self.traces = self
            .traces
            .into_iter()
            .map(|tr| match by_id.remove(&tr.deal_id) {
                Some(rec) => {
                    let mut tr = tr.with_attributes(rec.attributes);
                    if let Some(h) = rec.launch_hour {
                        tr.launch_hour_of_day = h;
                    }
                    tr
                }
                None => tr,
            })
            .collect();
        Ok(self)
    }

    pub fn has_all_attributes(&self) -> bool {
        self.traces.iter().all(|t| t.attributes.is_some())
    }
}

/// One element of the attributes JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub deal_id: String,
    #[serde(flatten)]
    pub attributes: DealAttributes,
    /// Hour of day (0-23) at which the deal launched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub launch_hour: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub kept: usize,
    pub dropped: usize,
    pub dropped_ids: Vec<String>,
    pub threshold: u64,
}

pub const DEFAULT_DROP_THRESHOLD: u64 = 10;

/// Reads the trace CSV. Rows may appear in any order; traces are returned in
/// order of first appearance with their samples sorted by time.
pub fn parse_trace_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    if headers.iter().map(str::trim).ne(TRACE_CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {:?}, found {:?}", TRACE_CSV_HEADER.join(","), headers),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, u64, u64)>> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let deal_id = record[0].trim();
        if deal_id.is_empty() {
            return Err(Error::Parse { line, message: "empty deal_id".into() });
        }
        let t: f64 = record[1].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("hours_since_launch {:?} is not a number", &record[1]),
        })?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Validation {
                line,
                message: format!("hours_since_launch {t} must be a non-negative number"),
            });
        }
        let n: i64 = record[2].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("cumulative_purchases {:?} is not an integer", &record[2]),
        })?;
        if n < 0 {
            return Err(Error::Validation {
                line,
                message: format!("cumulative_purchases {n} is negative"),
            });
        }
        match rows.get_mut(deal_id) {
            Some(v) => v.push((t, n as u64, line)),
            None => {
                order.push(deal_id.to_string());
                rows.insert(deal_id.to_string(), vec![(t, n as u64, line)]);
            }
        }
    }

    let mut traces = Vec::with_capacity(order.len());
    for id in order {
        let mut v = rows.remove(&id).unwrap_or_default();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        if let Some(dup) = v.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Validation {
                line: dup[1].2,
                message: format!("duplicate sample for deal {id:?} at hour {}", dup[1].0),
            });
        }
        let samples = v.into_iter().map(|(t, n, _)| TraceSample::new(t, n)).collect();
        traces.push(PurchaseTrace::new(id, samples)?);
    }
    Dataset::new(traces, "")
}

pub fn write_trace_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRACE_CSV_HEADER).map_err(csv_io)?;
    for tr in &ds.traces {
        for s in &tr.samples {
            w.write_record([tr.deal_id.as_str(), &s.t.to_string(), &s.n.to_string()])
                .map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn parse_attributes_json<R: Read>(input: R) -> Result<Vec<AttributeRecord>> {
    Ok(serde_json::from_reader(input)?)
}

/// Writes the attribute records of every trace that carries attributes.
pub fn write_attributes_json<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let records: Vec<AttributeRecord> = ds
        .traces
        .iter()
        .filter_map(|tr| {
            tr.attributes.as_ref().map(|a| AttributeRecord {
                deal_id: tr.deal_id.clone(),
                attributes: a.clone(),
                launch_hour: Some(tr.launch_hour_of_day),
            })
        })
        .collect();
    serde_json::to_writer_pretty(out, &records)?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Removes traces with a drop of at least `drop_threshold` purchases between
/// consecutive samples and clamps smaller drops to the running maximum.
pub fn clean_dataset(ds: Dataset, drop_threshold: u64) -> Result<(Dataset, CleaningReport)> {
    if drop_threshold < 1 {
        return Err(Error::invalid("drop_threshold must be at least 1"));
    }
    let total = ds.traces.len();
    let mut kept = Vec::with_capacity(total);
    let mut dropped_ids = Vec::new();
    for mut tr in ds.traces {
        let dramatic = tr
            .samples
            .windows(2)
            .any(|w| w[0].n >= w[1].n + drop_threshold);
        if dramatic {
            dropped_ids.push(tr.deal_id);
            continue;
        }
        let mut running = 0;
        for s in &mut tr.samples {
            running = running.max(s.n);
            s.n = running;
        }
        if let Some(theta) = tr.tipping_point() {
            tr.tipped_at = tr.first_time_reaching(theta);
        }
        kept.push(tr);
    }
    let report = CleaningReport {
        kept: kept.len(),
        dropped: dropped_ids.len(),
        dropped_ids,
        threshold: drop_threshold,
    };
    debug_assert_eq!(report.kept + report.dropped, total);
    Ok((
        Dataset {
            traces: kept,
            provenance: ds.provenance,
        },
        report,
    ))
}

/// Puts a trace on the grid `0, dt, 2dt, ...` up to `min(L, last sample)`,
/// carrying the last observed count forward.
pub fn resample_trace(tr: &PurchaseTrace, dt: f64) -> Result<PurchaseTrace> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid("resampling step must be positive"));
    }
    let last = tr
        .last_time()
        .ok_or_else(|| Error::invalid(format!("trace {:?} has no samples", tr.deal_id)))?;
    let end = last.min(tr.lifetime_hours);
    let steps = (end / dt + TIME_EPS).floor() as usize;
    let samples = (0..=steps)
        .map(|k| {
            let t = k as f64 * dt;
            TraceSample::new(t, tr.count_at(t))
        })
        .collect();
    let mut out = PurchaseTrace {
        samples,
        ..tr.clone()
    };
    if let Some(theta) = out.tipping_point() {
        out.tipped_at = out.first_time_reaching(theta);
    }
    Ok(out)
}

/// Reconstructed purchase times: the `m` purchases gained in a sampling
/// interval `(t0, t1]` are spread evenly at `t0 + j (t1 - t0) / (m + 1)`.
/// Launch (hour 0, zero purchases) is the implicit first observation.
pub fn reconstruct_arrivals(tr: &PurchaseTrace) -> Vec<f64> {
    let mut arrivals = Vec::with_capacity(tr.final_count() as usize);
    let (mut prev_t, mut prev_n) = (0.0_f64, 0_u64);
    for s in &tr.samples {
        let gained = s.n.saturating_sub(prev_n);
        if gained > 0 {
            let span = s.t - prev_t;
            let step = span / (gained + 1) as f64;
            arrivals.extend((1..=gained).map(|j| prev_t + j as f64 * step));
        }
        prev_t = s.t;
        prev_n = prev_n.max(s.n);
    }
    arrivals
}

/// Interarrival times of the reconstructed purchases; the first entry is
/// measured from launch.
pub fn interarrival_times(tr: &PurchaseTrace) -> Vec<f64> {
    let arrivals = reconstruct_arrivals(tr);
    let mut prev = 0.0;
    arrivals
        .into_iter()
        .map(|a| {
            let gap = a - prev;
            prev = a;
            gap
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn trace(ns: &[(f64, u64)]) -> PurchaseTrace {
        PurchaseTrace::new(
            "d",
            ns.iter().map(|&(t, n)| TraceSample::new(t, n)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_minimal_input() {
        let csv = "deal_id,hours_since_launch,cumulative_purchases\na,0.0,0\na,0.5,3\n";
        let ds = parse_trace_csv(csv.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.traces[0].samples.len(), 2);
        assert_eq!(ds.traces[0].samples[1], TraceSample::new(0.5, 3));
    }

    #[test]
    fn groups_and_sorts_interleaved_rows() {
        let csv = "deal_id,hours_since_launch,cumulative_purchases\n\
                   a,1,2\nb,0.5,1\na,0,0\nb,0,0\nb,1,4\n";
        let ds = parse_trace_csv(csv.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        let a = ds.get("a").unwrap();
        let b = ds.get("b").unwrap();
        assert_eq!(a.samples.iter().map(|s| s.t).collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(b.samples.iter().map(|s| s.n).collect::<Vec<_>>(), vec![0, 1, 4]);
    }

    #[test]
    fn negative_count_is_a_validation_error_at_its_line() {
        let csv = "deal_id,hours_since_launch,cumulative_purchases\na,0,0\na,1,-3\n";
        match parse_trace_csv(csv.as_bytes()) {
            Err(Error::Validation { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_time_and_duplicates_are_rejected() {
        let neg = "deal_id,hours_since_launch,cumulative_purchases\na,-1,0\n";
        assert!(matches!(
            parse_trace_csv(neg.as_bytes()),
            Err(Error::Validation { line: 2, .. })
        ));
        let dup = "deal_id,hours_since_launch,cumulative_purchases\na,1,0\nb,1,1\na,1,2\n";
        assert!(matches!(
            parse_trace_csv(dup.as_bytes()),
            Err(Error::Validation { line: 4, .. })
        ));
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let bad = "deal_id,hours_since_launch,cumulative_purchases\na,0,0\na,xx,1\n";
        assert!(matches!(parse_trace_csv(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let short = "deal_id,hours_since_launch,cumulative_purchases\na,0\n";
        assert!(matches!(parse_trace_csv(short.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let header = "id,t,n\na,0,0\n";
        assert!(matches!(parse_trace_csv(header.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn attributes_join_and_ignore_unknown_keys() {
        let csv = "deal_id,hours_since_launch,cumulative_purchases\na,0,0\na,1,5\na,2,12\n";
        let json = r#"[{"deal_id":"a","tipping_point":10,"featured":true,"duration_hours":24,
            "limited":false,"price":20,"discount_pct":50,"launch_day":"Mon",
            "category":"Food","city":"austin","title":"ignored"}]"#;
        let ds = parse_trace_csv(csv.as_bytes())
            .unwrap()
            .attach_attributes(parse_attributes_json(json.as_bytes()).unwrap())
            .unwrap();
        let a = &ds.traces[0];
        assert_eq!(a.lifetime_hours, 24.0);
        assert_eq!(a.tipped_at, Some(2.0));
        assert_eq!(a.attributes.as_ref().unwrap().city, "austin");
    }

    #[test]
    fn invalid_attributes_are_rejected() {
        let json = r#"[{"deal_id":"a","tipping_point":0,"featured":true,"duration_hours":24,
            "limited":false,"price":20,"discount_pct":50,"launch_day":"Mon",
            "category":"Food","city":"austin"}]"#;
        let ds = Dataset::new(vec![trace(&[(0.0, 0)])], "").unwrap();
        assert!(ds.attach_attributes(parse_attributes_json(json.as_bytes()).unwrap()).is_err());
    }

    #[test]
    fn cleaning_drops_dramatic_decreases() {
        let ds = Dataset::new(vec![trace(&[(0.0, 5), (1.0, 20), (2.0, 8)])], "").unwrap();
        let (out, report) = clean_dataset(ds, 10).unwrap();
        assert!(out.is_empty());
        assert_eq!(report.dropped_ids, vec!["d".to_string()]);
        assert_eq!((report.kept, report.dropped), (0, 1));
    }

    #[test]
    fn cleaning_clamps_small_decreases() {
        let ds = Dataset::new(vec![trace(&[(0.0, 5), (1.0, 20), (2.0, 18)])], "").unwrap();
        let (out, report) = clean_dataset(ds, 10).unwrap();
        let ns: Vec<u64> = out.traces[0].samples.iter().map(|s| s.n).collect();
        assert_eq!(ns, vec![5, 20, 20]);
        assert_eq!(report.kept, 1);
    }

    #[test]
    fn cleaning_empty_dataset_passes_through() {
        let (out, report) = clean_dataset(Dataset::default(), 10).unwrap();
        assert!(out.is_empty());
        assert_eq!(report.kept + report.dropped, 0);
        assert!(clean_dataset(Dataset::default(), 0).is_err());
    }

    #[test]
    fn resample_carries_forward() {
        let tr = trace(&[(0.1, 2), (0.5, 7)]);
        let out = resample_trace(&tr, 1.0 / 3.0).unwrap();
        let pts: Vec<(f64, u64)> = out.samples.iter().map(|s| (s.t, s.n)).collect();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0], (0.0, 0));
        assert_relative_eq!(pts[1].0, 1.0 / 3.0);
        assert_eq!(pts[1].1, 2);
    }

    #[test]
    fn resample_day_long_trace_on_twenty_minute_grid() {
        let samples = (0..=48).map(|k| TraceSample::new(k as f64 * 0.5, k)).collect();
        let tr = PurchaseTrace::new("d", samples).unwrap();
        let out = resample_trace(&tr, 1.0 / 3.0).unwrap();
        assert_eq!(out.samples.len(), 73);
        assert_eq!(out.samples.last().unwrap().n, 48);
        let again = resample_trace(&out, 1.0 / 3.0).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn resample_rejects_empty_trace_and_bad_step() {
        let empty = PurchaseTrace::new("e", vec![]).unwrap();
        assert!(resample_trace(&empty, 1.0).is_err());
        assert!(resample_trace(&trace(&[(0.0, 0)]), 0.0).is_err());
    }

    #[test]
    fn interarrivals_one_per_interval() {
        let ia = interarrival_times(&trace(&[(0.0, 0), (1.0, 1), (2.0, 2)]));
        assert_eq!(ia.len(), 2);
        assert_relative_eq!(ia[0], 0.5);
        assert_relative_eq!(ia[1], 1.0);
    }

    #[test]
    fn interarrivals_spread_uniformly() {
        let ia = interarrival_times(&trace(&[(0.0, 0), (1.0, 2)]));
        assert_relative_eq!(ia[0], 1.0 / 3.0);
        assert_relative_eq!(ia[1], 1.0 / 3.0);
        assert!(interarrival_times(&trace(&[(0.0, 0), (5.0, 0)])).is_empty());
    }

    #[test]
    fn count_at_and_truncation() {
        let tr = trace(&[(0.5, 1), (1.0, 3), (2.0, 4)]);
        assert_eq!(tr.count_at(0.0), 0);
        assert_eq!(tr.count_at(1.0), 3);
        assert_eq!(tr.count_at(1.5), 3);
        assert_eq!(tr.count_at(9.0), 4);
        assert_eq!(tr.truncated(1.0).samples.len(), 2);
    }

    #[test]
    fn duplicate_deal_ids_rejected() {
        assert!(Dataset::new(vec![trace(&[(0.0, 0)]), trace(&[(0.0, 1)])], "").is_err());
    }
}
