use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use dealflow_core::eval::{evaluate as run_evaluation, write_cdf_csv, write_report_csv};
use dealflow_core::predict::{
    predict_hybrid, train_mlr_on, Baseline2Entry, ModelBundle, MlrTarget,
};
use dealflow_core::propagation::{
    estimate_decay, fit_decay_exponential, AlignedCohort, InflectionAnchor,
};
use dealflow_core::renewal::fit_exponential;
use dealflow_core::sim::simulate_cohort;
use dealflow_core::trace::{
    clean_dataset, interarrival_times, parse_attributes_json, parse_trace_csv,
    write_attributes_json, write_trace_csv, CleaningReport, DEFAULT_DROP_THRESHOLD,
};
use dealflow_core::{
    Baseline2Params, Dataset, Error as CoreError, EvalConfig, HybridPolicy, NoveltyDecay,
    PolicyMode, PredictorKind, RenewalModel, SimConfig, SpModel,
};

use crate::manifest::Recorder;
use crate::usage;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Groupon,
    Livingsocial,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config JSON.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config instead of a file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    n_deals: u64,
    /// Trace CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write per-deal attributes JSON.
    #[arg(long)]
    attrs_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    attrs: Option<PathBuf>,
    /// Inflection at the first sample reaching this count. Without this or
    /// --inflection-hour, each deal's own tipping point is used.
    #[arg(long, conflicts_with = "inflection_hour")]
    tipping_point: Option<u64>,
    /// Inflection a fixed number of hours after launch.
    #[arg(long)]
    inflection_hour: Option<f64>,
    /// Hours after inflection covered by the decay table.
    #[arg(long, default_value_t = 16)]
    horizon: u32,
    /// Fewest aligned deals accepted for decay estimation.
    #[arg(long, default_value_t = 10)]
    min_deals: usize,
    #[arg(long, default_value_t = DEFAULT_DROP_THRESHOLD)]
    drop_threshold: u64,
    /// Model JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the decay table as `t_hours,r`.
    #[arg(long)]
    decay_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    attrs: Option<PathBuf>,
    /// Comma-separated: b1, b2, mlr, sp, hybrid.
    #[arg(long, value_delimiter = ',', default_value = "sp,b2")]
    predictors: Vec<PredictorKind>,
    /// Target time, hours.
    #[arg(long, default_value_t = 24.0)]
    t2: f64,
    /// Observation times to train, hours; defaults to every whole hour before t2.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_DROP_THRESHOLD)]
    drop_threshold: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Models JSON from `train`; not needed for baseline1.
    #[arg(long)]
    models: Option<PathBuf>,
    /// Trace CSV holding each deal's observations up to t1.
    #[arg(long)]
    trace_prefix: PathBuf,
    #[arg(long)]
    t1: f64,
    /// Target time; must match the models when given.
    #[arg(long)]
    t2: Option<f64>,
    #[arg(long, default_value = "groupon")]
    policy: PolicyMode,
    #[arg(long, default_value = "hybrid")]
    predictor: PredictorKind,
    #[arg(long)]
    attrs: Option<PathBuf>,
    /// Tipping point for every deal in the prefix file.
    #[arg(long)]
    tipping_point: Option<u64>,
    /// Write predictions here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    attrs: Option<PathBuf>,
    /// Evaluation config JSON; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DROP_THRESHOLD)]
    drop_threshold: u64,
    /// Report CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Error CDF CSV to write.
    #[arg(long)]
    cdf_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> anyhow::Result<T> {
    serde_json::from_reader(open(path)?)
        .map_err(|e| usage(format!("invalid {what} {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_dataset(traces: &Path, attrs: Option<&Path>) -> anyhow::Result<Dataset> {
    let ds = parse_trace_csv(open(traces)?)
        .with_context(|| format!("parsing {}", traces.display()))?;
    if ds.is_empty() {
        return Err(usage(format!("{} holds no traces", traces.display())));
    }
    match attrs {
        Some(p) => {
            let records = parse_attributes_json(open(p)?)
                .with_context(|| format!("parsing {}", p.display()))?;
            Ok(ds.attach_attributes(records)?)
        }
        None => Ok(ds),
    }
}

fn load_clean(traces: &Path, attrs: Option<&Path>, threshold: u64) -> anyhow::Result<(Dataset, CleaningReport)> {
    let ds = load_dataset(traces, attrs)?;
    let (ds, report) = clean_dataset(ds, threshold)?;
    if report.dropped > 0 {
        warn!(
            "dropped {} of {} traces with purchase drops of {} or more",
            report.dropped,
            report.dropped + report.kept,
            report.threshold
        );
    }
    if ds.is_empty() {
        return Err(CoreError::InsufficientData("no traces left after cleaning".into()).into());
    }
    Ok((ds, report))
}

pub fn simulate(a: SimulateArgs, argv: &[String]) -> anyhow::Result<()> {
    let rec = Recorder::start("simulate", argv);
    let mut cfg: SimConfig = match (&a.config, a.preset) {
        (Some(p), _) => read_json(p, "simulation config")?,
        (None, Some(Preset::Groupon)) => SimConfig::groupon(),
        (None, Some(Preset::Livingsocial)) => SimConfig::livingsocial(),
        (None, None) => return Err(usage("one of --config or --preset is required")),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.n_deals < 1 {
        return Err(usage("--n-deals must be at least 1"));
    }
    let result = simulate_cohort(&cfg, a.n_deals)?;
    let tipped = result.per_deal_inflection.iter().filter(|(_, t)| t.is_some()).count();
    info!("simulated {} deals, {tipped} reached inflection", a.n_deals);

    let mut w = create(&a.out)?;
    write_trace_csv(&result.dataset, &mut w)?;
    w.flush()?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(p) = &a.attrs_out {
        let mut w = create(p)?;
        write_attributes_json(&result.dataset, &mut w)?;
        w.flush()?;
        outputs.push(p);
    }
    let inputs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    #[derive(Serialize)]
    struct Resolved<'a> {
        n_deals: u64,
        sim: &'a SimConfig,
    }
    let resolved = Resolved { n_deals: a.n_deals, sim: &cfg };
    rec.finish(&a.out, Some(cfg.seed), &resolved, &inputs, &outputs)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FitOutput {
    renewal: RenewalModel,
    decay: NoveltyDecay,
    anchor: InflectionAnchor,
    horizon: u32,
    n_traces: usize,
    aligned_deals: usize,
    cleaning: CleaningReport,
}

pub fn fit(a: FitArgs, argv: &[String]) -> anyhow::Result<()> {
    let rec = Recorder::start("fit", argv);
    let (ds, cleaning) = load_clean(&a.traces, a.attrs.as_deref(), a.drop_threshold)?;
    let anchor = match (a.tipping_point, a.inflection_hour) {
        (Some(theta), _) => {
            if theta < 1 {
                return Err(usage("--tipping-point must be at least 1"));
            }
            InflectionAnchor::Tipping(Some(theta))
        }
        (None, Some(h)) => {
            if !(h.is_finite() && h >= 0.0) {
                return Err(usage("--inflection-hour must be non-negative"));
            }
            InflectionAnchor::Fixed(h)
        }
        (None, None) => {
            if !ds.has_all_attributes() {
                return Err(usage(
                    "give --tipping-point, --inflection-hour, or --attrs with per-deal tipping points",
                ));
            }
            InflectionAnchor::Tipping(None)
        }
    };
    if a.horizon < 1 {
        return Err(usage("--horizon must be at least 1"));
    }

    // Discovery phase: interarrivals up to each deal's inflection point.
    let interarrivals: Vec<f64> = ds
        .traces
        .iter()
        .flat_map(|tr| match anchor.locate(tr) {
            Some(t) => interarrival_times(&tr.truncated(t)),
            None => interarrival_times(tr),
        })
        .collect();
    let renewal = fit_exponential(&interarrivals)?;
    info!(
        "renewal fit: rate {:.4}/h, R^2 {:.4} from {} interarrivals",
        renewal.rate, renewal.fit_r2, renewal.n_obs
    );

    let cohort = AlignedCohort::from_dataset(&ds, anchor, a.horizon);
    if cohort.len() < a.min_deals.max(1) {
        return Err(CoreError::InsufficientData(format!(
            "decay estimation needs at least {} deals past inflection with {} h of data, found {}",
            a.min_deals.max(1),
            a.horizon,
            cohort.len()
        ))
        .into());
    }
    let decay = fit_decay_exponential(&estimate_decay(&cohort, a.horizon)?)?;
    info!(
        "decay fit: a {:.4}, b {:.4}, R^2 {:.4} over {} deals",
        decay.a.unwrap_or(f64::NAN),
        decay.b.unwrap_or(f64::NAN),
        decay.fit_r2.unwrap_or(f64::NAN),
        decay.cohort_size
    );

    let out = FitOutput {
        renewal,
        decay,
        anchor,
        horizon: a.horizon,
        n_traces: ds.len(),
        aligned_deals: cohort.len(),
        cleaning,
    };
    write_json(&a.out, &out)?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(p) = &a.decay_csv {
        let mut w = create(p)?;
        dealflow_core::propagation::write_decay_csv(&out.decay, &mut w)?;
        w.flush()?;
        outputs.push(p);
    }
    let mut inputs = vec![a.traces.as_path()];
    inputs.extend(a.attrs.as_deref());
    #[derive(Serialize)]
    struct Resolved {
        anchor: InflectionAnchor,
        horizon: u32,
        min_deals: usize,
        drop_threshold: u64,
    }
    let resolved = Resolved {
        anchor,
        horizon: a.horizon,
        min_deals: a.min_deals,
        drop_threshold: a.drop_threshold,
    };
    rec.finish(&a.out, None, &resolved, &inputs, &outputs)?;
    Ok(())
}

pub fn train(a: TrainArgs, argv: &[String]) -> anyhow::Result<()> {
    let rec = Recorder::start("train", argv);
    if !(a.t2.is_finite() && a.t2 > 0.0) {
        return Err(usage("--t2 must be positive"));
    }
    let wants = |p: PredictorKind| a.predictors.contains(&p);
    if wants(PredictorKind::Mlr) && a.attrs.is_none() {
        return Err(usage("the mlr predictor needs --attrs"));
    }
    let horizons = match &a.horizons {
        Some(h) => h.clone(),
        None => (1..).map(f64::from).take_while(|h| *h < a.t2).collect(),
    };
    if let Some(h) = horizons.iter().find(|h| !(**h >= 0.0 && **h < a.t2)) {
        return Err(usage(format!("observation time {h} must lie in [0, t2)")));
    }
    let (ds, _) = load_clean(&a.traces, a.attrs.as_deref(), a.drop_threshold)?;

    let mut bundle = ModelBundle {
        t2: a.t2,
        baseline2: Vec::new(),
        sp: None,
        mlr: None,
    };
    if wants(PredictorKind::Baseline2) {
        for &t1 in &horizons {
            let pairs = dealflow_core::predict::count_pairs(&ds, t1, a.t2);
            match Baseline2Params::train(&pairs) {
                Ok(params) => bundle.baseline2.push(Baseline2Entry { t1, params }),
                Err(e) => warn!("baseline2 at {t1} h not trained: {e}"),
            }
        }
        if bundle.baseline2.is_empty() {
            return Err(CoreError::InsufficientData("baseline2 could not be trained at any horizon".into()).into());
        }
    }
    if wants(PredictorKind::Sp) || wants(PredictorKind::Hybrid) {
        let sp = SpModel::train(&ds, &horizons, a.t2);
        if sp.entries.is_empty() {
            return Err(CoreError::InsufficientData("SP could not be trained at any horizon".into()).into());
        }
        bundle.sp = Some(sp);
    }
    if wants(PredictorKind::Mlr) {
        let spanning = Dataset {
            traces: ds
                .traces
                .iter()
                .filter(|tr| tr.last_time().is_some_and(|t| t + 1e-9 >= a.t2))
                .filter(|tr| tr.count_at(a.t2) > 0)
                .cloned()
                .collect(),
            provenance: ds.provenance.clone(),
        };
        if spanning.len() < ds.len() {
            warn!(
                "mlr skips {} deal(s) shorter than {} h or with no purchases by then",
                ds.len() - spanning.len(),
                a.t2
            );
        }
        bundle.mlr = Some(train_mlr_on(&spanning, MlrTarget::At(a.t2))?);
    }
    write_json(&a.out, &bundle)?;

    let mut inputs = vec![a.traces.as_path()];
    inputs.extend(a.attrs.as_deref());
    #[derive(Serialize)]
    struct Resolved<'a> {
        predictors: &'a [PredictorKind],
        t2: f64,
        horizons: &'a [f64],
        drop_threshold: u64,
    }
    let resolved = Resolved {
        predictors: &a.predictors,
        t2: a.t2,
        horizons: &horizons,
        drop_threshold: a.drop_threshold,
    };
    rec.finish(&a.out, None, &resolved, &inputs, &[a.out.as_path()])?;
    Ok(())
}

pub fn predict(a: PredictArgs, argv: &[String]) -> anyhow::Result<()> {
    let rec = Recorder::start("predict", argv);
    if !(a.t1.is_finite() && a.t1 >= 0.0) {
        return Err(usage("--t1 must be non-negative"));
    }
    let bundle: Option<ModelBundle> = match &a.models {
        Some(p) => Some(read_json(p, "models file")?),
        None => None,
    };
    if let (Some(b), Some(t2)) = (&bundle, a.t2) {
        if (b.t2 - t2).abs() > 1e-9 {
            return Err(usage(format!("models target {} h but {t2} h was requested", b.t2)));
        }
    }
    let t2 = bundle.as_ref().map(|b| b.t2).or(a.t2);
    if let Some(t2) = t2 {
        if a.t1 >= t2 {
            return Err(usage(format!("--t1 {} must be before the target {t2} h", a.t1)));
        }
    }
    let needs_models = a.predictor != PredictorKind::Baseline1;
    let bundle = match (needs_models, &bundle) {
        (true, None) => {
            return Err(usage(format!("the {} predictor needs --models", a.predictor)));
        }
        _ => bundle,
    };
    let ds = load_dataset(&a.trace_prefix, a.attrs.as_deref())?;
    let policy = HybridPolicy::new(a.policy);

    let mut lines = Vec::with_capacity(ds.len());
    for tr in &ds.traces {
        let n1 = tr.count_at(a.t1);
        let pred = match a.predictor {
            PredictorKind::Baseline1 => n1,
            _ => {
                let b = bundle.as_ref().expect("checked above");
                match a.predictor {
                    PredictorKind::Baseline2 => b
                        .baseline2_at(a.t1)
                        .ok_or_else(|| usage(format!("no baseline2 model for t1 = {} h", a.t1)))?
                        .predict(n1),
                    PredictorKind::Sp => sp_model(b)?.predict(n1, a.t1, b.t2)?,
                    PredictorKind::Hybrid => {
                        predict_hybrid(&policy, tr, a.t1, b.t2, sp_model(b)?, a.tipping_point)?
                    }
                    PredictorKind::Mlr => {
                        let m = b.mlr.as_ref().ok_or_else(|| usage("models file has no mlr model"))?;
                        let attrs = tr.attributes.as_ref().ok_or_else(|| {
                            usage(format!("the mlr predictor needs attributes for {:?}", tr.deal_id))
                        })?;
                        m.predict(attrs)?
                    }
                    PredictorKind::Baseline1 => unreachable!(),
                }
            }
        };
        lines.push(format!("{},{},{}", tr.deal_id, a.t1, pred));
    }

    let text = lines.join("\n") + "\n";
    let manifest_anchor = match &a.out {
        Some(p) => {
            std::fs::write(p, &text).with_context(|| format!("cannot write {}", p.display()))?;
            p.clone()
        }
        None => {
            print!("{text}");
            let mut p = a.trace_prefix.as_os_str().to_owned();
            p.push(".predict");
            PathBuf::from(p)
        }
    };
    let mut inputs = vec![a.trace_prefix.as_path()];
    inputs.extend(a.models.as_deref());
    inputs.extend(a.attrs.as_deref());
    let outputs: Vec<&Path> = a.out.iter().map(PathBuf::as_path).collect();
    #[derive(Serialize)]
    struct Resolved {
        predictor: PredictorKind,
        policy: HybridPolicy,
        t1: f64,
        t2: Option<f64>,
        tipping_point: Option<u64>,
    }
    let resolved = Resolved {
        predictor: a.predictor,
        policy,
        t1: a.t1,
        t2,
        tipping_point: a.tipping_point,
    };
    rec.finish(&manifest_anchor, None, &resolved, &inputs, &outputs)?;
    Ok(())
}

fn sp_model(b: &ModelBundle) -> anyhow::Result<&SpModel> {
    b.sp.as_ref().ok_or_else(|| usage("models file has no sp model"))
}

pub fn evaluate(a: EvaluateArgs, argv: &[String]) -> anyhow::Result<()> {
    let rec = Recorder::start("evaluate", argv);
    let cfg: EvalConfig = match &a.config {
        Some(p) => read_json(p, "evaluation config")?,
        None => EvalConfig::default(),
    };
    cfg.validate()?;
    if cfg.predictors.contains(&PredictorKind::Mlr) && a.attrs.is_none() {
        return Err(usage("the mlr predictor needs --attrs"));
    }
    let (ds, _) = load_clean(&a.traces, a.attrs.as_deref(), a.drop_threshold)?;
    let report = run_evaluation(&cfg, &ds)?;
    info!("evaluated on {} train / {} test deals", report.n_train, report.n_test);

    let mut w = create(&a.out)?;
    write_report_csv(&report, &mut w)?;
    w.flush()?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(p) = &a.cdf_out {
        let mut w = create(p)?;
        write_cdf_csv(&report, &mut w)?;
        w.flush()?;
        outputs.push(p);
    }
    let mut inputs = vec![a.traces.as_path()];
    inputs.extend(a.attrs.as_deref());
    inputs.extend(a.config.as_deref());
    #[derive(Serialize)]
    struct Resolved<'a> {
        eval: &'a EvalConfig,
        drop_threshold: u64,
    }
    let resolved = Resolved { eval: &cfg, drop_threshold: a.drop_threshold };
    rec.finish(&a.out, Some(cfg.split_seed), &resolved, &inputs, &outputs)?;
    Ok(())
}
