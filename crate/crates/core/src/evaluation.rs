//! Fidelity protocol, correlation statistics, metrics and report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetBundle, Sample};
use crate::influence::{
    self, aggregate_over_validation, Estimator, InfluenceError, InfluenceScore,
};
use crate::network::{param_grads, Mlp, NetworkError, SampleTaps};
use crate::numfmt::f17;
use crate::oracle::{OracleError, UtilityFn, MAX_EXACT_BATCH};
use crate::par::{self, Exec};
use crate::trainer::{
    self, CostLedger, CurationMode, EpochStats, ScoreRecord, TracePoint, TrainError,
    TrainerConfig, TrainingReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("correlation undefined: constant input")]
    Constant,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooShort(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::TooShort(xs.len()));
    }
    Ok(())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Constant);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Fraction of samples whose argmax logit (lowest index on ties) is the label.
/// Zero for an empty set.
pub fn accuracy(net: &Mlp, samples: &[Sample]) -> std::result::Result<f64, NetworkError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits = par::map_slice(Exec::default(), samples, |s| {
        let logits = net.logits(&s.features)?;
        let mut best = 0;
        for (k, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = k;
            }
        }
        Ok(usize::from(best == s.label))
    })
    .into_iter()
    .collect::<std::result::Result<Vec<usize>, NetworkError>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Estimators compared against Shapley in the fidelity protocol.
pub const FIDELITY_ESTIMATORS: [Estimator; 4] =
    [Estimator::Ip, Estimator::Ghost, Estimator::Lai, Estimator::Lli];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FidelityConfig {
    pub probe_batch_size: usize,
    /// Checkpoints are taken after `0, k, 2k, …` completed steps.
    pub checkpoint_every: usize,
    pub permutations: usize,
    /// Enumerate all orderings instead of sampling them.
    pub exhaustive: bool,
    /// Pearson floor counted in the summary.
    pub floor: f64,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            probe_batch_size: 16,
            checkpoint_every: 10,
            permutations: 1000,
            exhaustive: false,
            floor: 0.5,
        }
    }
}

impl FidelityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probe_batch_size == 0 {
            return Err(EvalError::InvalidArgument("probe_batch_size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(EvalError::InvalidArgument("checkpoint_every must be positive".into()));
        }
        if self.permutations == 0 {
            return Err(EvalError::InvalidArgument("permutations must be positive".into()));
        }
        if self.exhaustive && self.probe_batch_size > MAX_EXACT_BATCH {
            return Err(EvalError::InvalidArgument(format!(
                "exhaustive enumeration needs probe_batch_size <= {MAX_EXACT_BATCH}"
            )));
        }
        if !self.floor.is_finite() {
            return Err(EvalError::InvalidArgument("floor must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorFidelity {
    pub estimator: Estimator,
    pub benefit: Vec<f64>,
    /// `None` when either score vector is constant.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub step: u64,
    pub sample_ids: Vec<u64>,
    pub shapley: Vec<f64>,
    pub shapley_stderr: Vec<f64>,
    pub estimators: Vec<EstimatorFidelity>,
}

impl FidelityRecord {
    pub fn get(&self, e: Estimator) -> Option<&EstimatorFidelity> {
        self.estimators.iter().find(|f| f.estimator == e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    /// Checkpoints with a defined Pearson value.
    pub count: usize,
    pub degenerate: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub below_floor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub checkpoints: usize,
    pub floor: f64,
    pub permutations: usize,
    /// Shapley references are exact (full enumeration).
    pub exact: bool,
    pub estimators: Vec<EstimatorSummary>,
}

impl FidelitySummary {
    pub fn get(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }
}

pub fn summarize(records: &[FidelityRecord], floor: f64, permutations: usize, exact: bool) -> FidelitySummary {
    let estimators = FIDELITY_ESTIMATORS
        .iter()
        .map(|&e| {
            let vals: Vec<f64> = records
                .iter()
                .filter_map(|r| r.get(e).and_then(|f| f.pearson))
                .collect();
            let n = vals.len();
            let mean = (n > 0).then(|| vals.iter().sum::<f64>() / n as f64);
            let std = mean.map(|m| (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt());
            EstimatorSummary {
                estimator: e,
                count: n,
                degenerate: records.len() - n,
                mean,
                std,
                min: vals.iter().copied().reduce(f64::min),
                max: vals.iter().copied().reduce(f64::max),
                below_floor: vals.iter().filter(|&&v| v < floor).count(),
            }
        })
        .collect();
    FidelitySummary {
        checkpoints: records.len(),
        floor,
        permutations,
        exact,
        estimators,
    }
}

/// Benefit scores of each probe sample under each fidelity estimator,
/// aggregated over `validation`.
pub fn probe_benefits(
    net: &Mlp,
    probe: &[Sample],
    validation: &[Sample],
) -> Result<Vec<(Estimator, Vec<f64>)>> {
    let taps_of = |s: &Sample| net.sample_taps(&s.features, s.label);
    let val_taps = par::map_slice(Exec::default(), validation, taps_of)
        .into_iter()
        .collect::<std::result::Result<Vec<SampleTaps>, _>>()?;
    let val_grads = val_taps
        .iter()
        .map(param_grads)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let per_probe = par::map_slice(Exec::default(), probe, |s| -> Result<[f64; 4]> {
        let t = taps_of(s)?;
        let g = param_grads(&t)?;
        let mut cols: [Vec<InfluenceScore>; 4] = Default::default();
        for (vt, vg) in val_taps.iter().zip(&val_grads) {
            let sims = influence::pair_similarities(vt, &t)?;
            cols[0].push(influence::ip_influence(vg, &g)?);
            cols[1].push(influence::ghost_influence(&sims));
            cols[2].push(influence::lai_influence(&sims));
            cols[3].push(influence::lli_influence(&sims));
        }
        let mut out = [0.0; 4];
        for (o, c) in out.iter_mut().zip(&cols) {
            *o = aggregate_over_validation(c)?.benefit();
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(FIDELITY_ESTIMATORS
        .iter()
        .enumerate()
        .map(|(k, &e)| (e, per_probe.iter().map(|row| row[k]).collect()))
        .collect())
}

fn correlation(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(EvalError::Constant) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores one checkpoint against its Shapley reference.
pub fn fidelity_at(
    net: &Mlp,
    step: u64,
    probe: &[Sample],
    validation: &[Sample],
    learning_rate: f64,
    fcfg: &FidelityConfig,
    seed: u64,
) -> Result<FidelityRecord> {
    let utility = UtilityFn::new(net, validation, learning_rate);
    let shap = if fcfg.exhaustive {
        utility.shapley_exhaustive(probe, Exec::default())?
    } else {
        utility.shapley_mc(probe, fcfg.permutations, seed)?
    };
    let estimators = probe_benefits(net, probe, validation)?
        .into_iter()
        .map(|(estimator, benefit)| {
            let (p, s) = if probe.len() < 2 {
                (None, None)
            } else {
                (
                    correlation(pearson(&benefit, &shap.values))?,
                    correlation(spearman(&benefit, &shap.values))?,
                )
            };
            Ok(EstimatorFidelity {
                estimator,
                benefit,
                pearson: p,
                spearman: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FidelityRecord {
        step,
        sample_ids: probe.iter().map(|s| s.id).collect(),
        shapley: shap.values,
        shapley_stderr: shap.stderr,
        estimators,
    })
}

pub struct FidelityOutcome {
    pub records: Vec<FidelityRecord>,
    pub summary: FidelitySummary,
    pub training: TrainingReport,
}

/// Trains vanilla SGD and compares estimators with Shapley at each checkpoint.
///
/// The probe batch is drawn once from the train split; both the influence
/// aggregation and the Shapley utility use the full validation split.
pub fn run_fidelity(
    cfg: &TrainerConfig,
    initial: &Mlp,
    data: &DatasetBundle,
    fcfg: &FidelityConfig,
) -> Result<FidelityOutcome> {
    fcfg.validate()?;
    if fcfg.probe_batch_size > data.train.len() {
        return Err(EvalError::InvalidArgument(format!(
            "probe batch {} exceeds train size {}",
            fcfg.probe_batch_size,
            data.train.len()
        )));
    }
    let vanilla = TrainerConfig {
        mode: CurationMode::Off,
        ..cfg.clone()
    };
    let mut checkpoints = vec![(0u64, initial.clone())];
    let every = fcfg.checkpoint_every as u64;
    let run = trainer::train_with(&vanilla, initial, data, |step, net| {
        let done = step + 1;
        if done % every == 0 {
            checkpoints.push((done, net.clone()));
        }
    })?;
    let total = run.report.total_steps;
    checkpoints.retain(|(s, _)| *s < total || total == 0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut idx = index::sample(&mut rng, data.train.len(), fcfg.probe_batch_size).into_vec();
    idx.sort_unstable();
    let probe: Vec<Sample> = idx.iter().map(|&i| data.train[i].clone()).collect();

    let records = checkpoints
        .iter()
        .map(|(step, net)| {
            fidelity_at(
                net,
                *step,
                &probe,
                &data.validation,
                cfg.learning_rate,
                fcfg,
                cfg.seed.wrapping_add(*step),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records, fcfg.floor, fcfg.permutations, fcfg.exhaustive);
    Ok(FidelityOutcome {
        records,
        summary,
        training: run.report,
    })
}

/// Aggregate cost figures carried in the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub total_macs: u64,
    pub total_scored: u64,
    pub total_kept: u64,
    pub peak_cache_bytes: u64,
}

impl From<&CostLedger> for CostTotals {
    fn from(l: &CostLedger) -> Self {
        Self {
            total_macs: l.total_macs,
            total_scored: l.total_scored,
            total_kept: l.total_kept,
            peak_cache_bytes: l.peak_cache_bytes,
        }
    }
}

/// Contents of `training_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub mode: CurationMode,
    pub estimator: Option<Estimator>,
    pub seed: u64,
    pub total_steps: u64,
    pub train_size: usize,
    pub epochs: Vec<EpochStats>,
    pub traces: BTreeMap<u64, Vec<TracePoint>>,
    pub cost: CostTotals,
}

impl From<&TrainingReport> for TrainingSummary {
    fn from(r: &TrainingReport) -> Self {
        Self {
            mode: r.mode,
            estimator: r.estimator,
            seed: r.seed,
            total_steps: r.total_steps,
            train_size: r.sample_ids.len(),
            epochs: r.epochs.clone(),
            traces: r.traces.clone(),
            cost: (&r.ledger).into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionRow {
    pub epoch: usize,
    pub sample_id: u64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub step: u64,
    pub estimator: Estimator,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn opt17(v: Option<f64>) -> String {
    v.map(f17).unwrap_or_default()
}

pub fn write_training_report(report: &TrainingReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("training_report.json"), &TrainingSummary::from(report))?;

    let mut inc = Vec::new();
    writeln!(inc, "epoch,sample_id,kept")?;
    for (epoch, row) in report.inclusion.iter().enumerate() {
        for (id, kept) in report.sample_ids.iter().zip(row) {
            writeln!(inc, "{epoch},{id},{}", u8::from(*kept))?;
        }
    }
    fs::write(out_dir.join("inclusion.csv"), inc)?;

    let mut sc = Vec::new();
    writeln!(sc, "step,sample_id,estimator,benefit")?;
    for r in &report.scores {
        writeln!(sc, "{},{},{},{}", r.step, r.sample_id, r.estimator, f17(r.benefit))?;
    }
    fs::write(out_dir.join("scores.csv"), sc)?;
    Ok(())
}

pub fn write_fidelity(records: &[FidelityRecord], summary: &FidelitySummary, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut out = Vec::new();
    writeln!(out, "step,estimator,pearson,spearman")?;
    for r in records {
        for f in &r.estimators {
            writeln!(out, "{},{},{},{}", r.step, f.estimator, opt17(f.pearson), opt17(f.spearman))?;
        }
    }
    fs::write(out_dir.join("fidelity.csv"), out)?;
    write_json(&out_dir.join("fidelity_summary.json"), summary)
}

/// Writes every report file into `out_dir`.
pub fn emit_reports(
    records: &[FidelityRecord],
    summary: &FidelitySummary,
    report: &TrainingReport,
    out_dir: &Path,
) -> Result<()> {
    write_fidelity(records, summary, out_dir)?;
    write_training_report(report, out_dir)
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(EvalError::Parse {
            file,
            line: 1,
            msg: format!("header {got:?}, expected {header:?}"),
        });
    }
    rdr.records()
        .enumerate()
        .map(|(k, r)| Ok((k + 2, r?)))
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, raw: &str, name: &str) -> Result<T> {
    raw.parse().map_err(|_| EvalError::Parse {
        file: path.display().to_string(),
        line,
        msg: format!("bad {name}: {raw:?}"),
    })
}

fn opt_field(path: &Path, line: usize, raw: &str, name: &str) -> Result<Option<f64>> {
    if raw.is_empty() {
        Ok(None)
    } else {
        field(path, line, raw, name).map(Some)
    }
}

fn estimator_field(path: &Path, line: usize, raw: &str) -> Result<Estimator> {
    Estimator::from_name(raw).ok_or_else(|| EvalError::Parse {
        file: path.display().to_string(),
        line,
        msg: format!("unknown estimator {raw:?}"),
    })
}

pub fn read_fidelity_csv(path: &Path) -> Result<Vec<FidelityRow>> {
    read_rows(path, &["step", "estimator", "pearson", "spearman"])?
        .into_iter()
        .map(|(line, r)| {
            Ok(FidelityRow {
                step: field(path, line, &r[0], "step")?,
                estimator: estimator_field(path, line, &r[1])?,
                pearson: opt_field(path, line, &r[2], "pearson")?,
                spearman: opt_field(path, line, &r[3], "spearman")?,
            })
        })
        .collect()
}

pub fn read_inclusion_csv(path: &Path) -> Result<Vec<InclusionRow>> {
    read_rows(path, &["epoch", "sample_id", "kept"])?
        .into_iter()
        .map(|(line, r)| {
            let kept = match &r[2] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(EvalError::Parse {
                        file: path.display().to_string(),
                        line,
                        msg: format!("bad kept: {other:?}"),
                    })
                }
            };
            Ok(InclusionRow {
                epoch: field(path, line, &r[0], "epoch")?,
                sample_id: field(path, line, &r[1], "sample_id")?,
                kept,
            })
        })
        .collect()
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    read_rows(path, &["step", "sample_id", "estimator", "benefit"])?
        .into_iter()
        .map(|(line, r)| {
            Ok(ScoreRecord {
                step: field(path, line, &r[0], "step")?,
                sample_id: field(path, line, &r[1], "sample_id")?,
                estimator: estimator_field(path, line, &r[2])?,
                benefit: field(path, line, &r[3], "benefit")?,
            })
        })
        .collect()
}

pub fn read_training_summary(path: &Path) -> Result<TrainingSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn read_fidelity_summary(path: &Path) -> Result<FidelitySummary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Flattens records into the rows `fidelity.csv` holds.
pub fn fidelity_rows(records: &[FidelityRecord]) -> Vec<FidelityRow> {
    records
        .iter()
        .flat_map(|r| {
            r.estimators.iter().map(move |f| FidelityRow {
                step: r.step,
                estimator: f.estimator,
                pearson: f.pearson,
                spearman: f.spearman,
            })
        })
        .collect()
}

/// Flattens a report's inclusion matrix into `inclusion.csv` rows.
pub fn inclusion_rows(report: &TrainingReport) -> Vec<InclusionRow> {
    report
        .inclusion
        .iter()
        .enumerate()
        .flat_map(|(epoch, row)| {
            report.sample_ids.iter().zip(row).map(move |(&sample_id, &kept)| InclusionRow {
                epoch,
                sample_id,
                kept,
            })
        })
        .collect()
}
