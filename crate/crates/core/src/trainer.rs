//! Online-valuation training loop.
//!
//! Each step after warm-up scores the batch against a cached snapshot of
//! validation taps (or against the batch itself in self-influence mode),
//! drops members whose benefit falls below the threshold, and applies a
//! momentum-SGD step on the survivors. Scoring arithmetic is tallied in a
//! [`CostLedger`] so estimators can be compared on equal footing.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetBundle, Sample};
use crate::evaluation;
use crate::influence::{
    self, aggregate_over_validation, Estimator, InfluenceError, InfluenceScore, PairSimilarities,
    Preconditioner,
};
use crate::network::{dot, param_grads, Mlp, NetworkError};
use crate::par::{self, Exec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("dataset does not match the model: {0}")]
    DataMismatch(String),
    #[error("validation cache from step {cache_step} is stale at step {step} (refresh every {refresh})")]
    StaleCache { cache_step: u64, step: u64, refresh: usize },
    #[error("cache built for {cached} cannot score {wanted}")]
    CacheMismatch { cached: Estimator, wanted: Estimator },
    #[error("no estimator configured for curation")]
    NoEstimator,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("cost ledgers are not comparable: {0}")]
    MismatchedLedger(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurationMode {
    ValidationInfluence,
    SelfInfluence,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyBatchPolicy {
    SkipStep,
    KeepTop1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub estimator: Option<Estimator>,
    pub mode: CurationMode,
    /// Benefit-sign threshold; members with `benefit >= threshold` are kept.
    pub threshold: f64,
    pub val_fraction_per_batch: f64,
    pub cache_refresh_steps: usize,
    pub seed: u64,
    pub empty_batch_policy: EmptyBatchPolicy,
    /// Divide each `α^(l)` by its augmented layer width before scoring.
    pub calibrate_layers: bool,
    pub precond_decay: f64,
    pub precond_floor: f64,
    /// Train ids whose benefit is traced step by step.
    pub trace_ids: Vec<u64>,
    pub histogram_bins: usize,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            warmup_epochs: 3,
            estimator: Some(Estimator::Lai),
            mode: CurationMode::ValidationInfluence,
            threshold: 0.0,
            val_fraction_per_batch: 0.1,
            cache_refresh_steps: 1,
            seed: 0,
            empty_batch_policy: EmptyBatchPolicy::SkipStep,
            calibrate_layers: false,
            precond_decay: influence::DEFAULT_PRECOND_DECAY,
            precond_floor: influence::DEFAULT_PRECOND_FLOOR,
            trace_ids: Vec::new(),
            histogram_bins: 20,
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !self.threshold.is_finite() {
            return bad("threshold must be finite".into());
        }
        if !(self.val_fraction_per_batch > 0.0 && self.val_fraction_per_batch <= 1.0) {
            return bad(format!(
                "val_fraction_per_batch {} must lie in (0, 1]",
                self.val_fraction_per_batch
            ));
        }
        if self.cache_refresh_steps == 0 {
            return bad("cache_refresh_steps must be positive".into());
        }
        if !(self.precond_decay > 0.0 && self.precond_decay < 1.0) {
            return bad(format!("precond_decay {} must lie in (0, 1)", self.precond_decay));
        }
        if !(self.precond_floor > 0.0) {
            return bad("precond_floor must be positive".into());
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be positive".into());
        }
        if self.mode != CurationMode::Off && self.estimator.is_none() && self.warmup_epochs < self.epochs {
            return bad("curation mode needs an estimator".into());
        }
        Ok(())
    }

    pub fn curating(&self) -> bool {
        self.mode != CurationMode::Off
    }
}

/// What one sample contributes to pair scoring for a given estimator.
///
/// Validation cache entries and training-side taps share this type so both
/// sides of a pair always carry the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringTaps {
    pub sample_id: u64,
    /// Augmented activation blocks, concatenated (empty for IP).
    pub activations: Vec<f64>,
    /// `g^(L)`.
    pub output_grad: Vec<f64>,
    /// `g^(1..L)`, Ghost only.
    pub layer_grads: Vec<Vec<f64>>,
    /// Flattened parameter gradient, IP only.
    pub param_grad: Vec<f64>,
}

impl ScoringTaps {
    pub fn build(net: &Mlp, sample: &Sample, estimator: Estimator) -> Result<Self> {
        let fwd = net.forward(&sample.features)?;
        let out = crate::network::loss_and_output_grad(fwd.logits(), sample.label)?;
        let mut taps = ScoringTaps {
            sample_id: sample.id,
            activations: Vec::new(),
            output_grad: Vec::new(),
            layer_grads: Vec::new(),
            param_grad: Vec::new(),
        };
        // Store only what the estimator reads, so `reals` is the cache footprint.
        match estimator {
            Estimator::Lai | Estimator::PrecondLai => {
                taps.activations = fwd.augmented_stack();
                taps.output_grad = out.grad;
            }
            Estimator::Lli => {
                let last = fwd.activations.last().expect("depth >= 1");
                taps.activations = last.iter().copied().chain(std::iter::once(1.0)).collect();
                taps.output_grad = out.grad;
            }
            Estimator::Ghost => {
                taps.activations = fwd.augmented_stack();
                taps.layer_grads = net.backward_taps(fwd, &out)?.layer_grads;
            }
            Estimator::Ip => {
                taps.param_grad = param_grads(&net.backward_taps(fwd, &out)?)?.flatten();
            }
        }
        Ok(taps)
    }

    pub fn reals(&self) -> usize {
        self.activations.len()
            + self.output_grad.len()
            + self.layer_grads.iter().map(Vec::len).sum::<usize>()
            + self.param_grad.len()
    }
}

/// Augmented widths `dim(ã^(l−1))` of the blocks an estimator stores.
pub fn block_widths(net: &Mlp, estimator: Estimator) -> Vec<usize> {
    let all: Vec<usize> = net.layers().iter().map(|l| l.spec.in_dim + 1).collect();
    match estimator {
        Estimator::Ip => Vec::new(),
        Estimator::Lli => vec![*all.last().expect("depth >= 1")],
        _ => all,
    }
}

/// Reals cached per validation sample.
pub fn cache_reals_per_sample(net: &Mlp, estimator: Estimator) -> usize {
    let act: usize = block_widths(net, estimator).iter().sum();
    let out = net.num_classes();
    match estimator {
        Estimator::Ip => net.num_params(),
        Estimator::Ghost => act + net.layers().iter().map(|l| l.spec.out_dim).sum::<usize>(),
        Estimator::Lai | Estimator::PrecondLai | Estimator::Lli => act + out,
    }
}

/// Scoring multiply-accumulates: `(per training sample, per pair)`.
///
/// Per pair: similarity dot products plus the products combining them.
/// Per sample: the backward work beyond the output layer that Ghost and IP
/// need (and the outer products IP materializes). The shared forward pass
/// is not counted.
pub fn scoring_macs(net: &Mlp, estimator: Estimator, calibrate: bool) -> (u64, u64) {
    let specs = net.specs();
    let depth = specs.len() as u64;
    let act: usize = block_widths(net, estimator).iter().sum();
    let out = net.num_classes();
    let backward: usize = specs[1..]
        .iter()
        .map(|s| s.out_dim * s.in_dim + s.in_dim)
        .sum();
    let calib = if calibrate && estimator != Estimator::Ip {
        block_widths(net, estimator).len() as u64
    } else {
        0
    };
    let layer_out: usize = specs.iter().map(|s| s.out_dim).sum();
    match estimator {
        Estimator::Lai => (0, (act + out) as u64 + 1 + calib),
        Estimator::Lli => (0, (act + out) as u64 + 1 + calib),
        Estimator::PrecondLai => (0, (act + 2 * out) as u64 + 1 + calib),
        Estimator::Ghost => (backward as u64, (act + layer_out) as u64 + depth + calib),
        Estimator::Ip => {
            let outer: usize = specs.iter().map(|s| s.num_params()).sum();
            ((backward + outer) as u64, net.num_params() as u64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationCache {
    pub estimator: Estimator,
    /// Step at which the cache was built.
    pub step: u64,
    pub block_widths: Vec<usize>,
    pub entries: Vec<ScoringTaps>,
}

impl ValidationCache {
    pub fn bytes(&self) -> u64 {
        (self.entries.iter().map(ScoringTaps::reals).sum::<usize>() * std::mem::size_of::<f64>()) as u64
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_validation_cache(
    net: &Mlp,
    val_subset: &[Sample],
    estimator: Estimator,
    step: u64,
) -> Result<ValidationCache> {
    if val_subset.is_empty() {
        return Err(TrainError::Empty("validation subset"));
    }
    let entries = val_subset
        .iter()
        .map(|s| ScoringTaps::build(net, s, estimator))
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationCache {
        estimator,
        step,
        block_widths: block_widths(net, estimator),
        entries,
    })
}

/// Inputs shared by every pair score in one scoring pass.
#[derive(Debug, Clone, Copy)]
pub struct PairScorer<'a> {
    pub estimator: Estimator,
    pub block_widths: &'a [usize],
    pub calibrate: bool,
    pub precond: &'a Preconditioner,
}

impl PairScorer<'_> {
    fn alphas(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.block_widths.len());
        let mut start = 0;
        for &w in self.block_widths {
            let d = dot(&a[start..start + w], &b[start..start + w]);
            out.push(if self.calibrate { d / w as f64 } else { d });
            start += w;
        }
        out
    }

    fn alpha_sum(&self, a: &[f64], b: &[f64]) -> f64 {
        if self.calibrate {
            self.alphas(a, b).iter().sum()
        } else {
            dot(a, b)
        }
    }

    /// Influence-sign score of one (validation, training) pair.
    pub fn score(&self, val: &ScoringTaps, train: &ScoringTaps) -> Result<InfluenceScore> {
        Ok(match self.estimator {
            Estimator::Ip => influence::ip_influence_flat(&val.param_grad, &train.param_grad)?,
            Estimator::Ghost => {
                let sims = PairSimilarities {
                    alpha: self.alphas(&val.activations, &train.activations),
                    beta: val
                        .layer_grads
                        .iter()
                        .zip(&train.layer_grads)
                        .map(|(a, b)| dot(a, b))
                        .collect(),
                };
                influence::ghost_influence(&sims)
            }
            Estimator::Lai => influence::lai_from_parts(
                self.alpha_sum(&val.activations, &train.activations),
                dot(&val.output_grad, &train.output_grad),
            ),
            Estimator::Lli => InfluenceScore::raw(
                -self.alpha_sum(&val.activations, &train.activations)
                    * dot(&val.output_grad, &train.output_grad),
                Estimator::Lli,
            ),
            Estimator::PrecondLai => influence::preconditioned_from_parts(
                self.alpha_sum(&val.activations, &train.activations),
                &val.output_grad,
                &train.output_grad,
                self.precond,
            )?,
        })
    }

    /// Aggregated influence-sign score of `train` against every reference.
    pub fn score_against<'r>(
        &self,
        train: &ScoringTaps,
        refs: impl Iterator<Item = &'r ScoringTaps>,
    ) -> Result<InfluenceScore> {
        let pairs = refs
            .map(|v| self.score(v, train))
            .collect::<Result<Vec<_>>>()?;
        if pairs.is_empty() {
            return Ok(InfluenceScore::raw(0.0, self.estimator));
        }
        Ok(aggregate_over_validation(&pairs)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationDecision {
    pub step: u64,
    pub estimator: Estimator,
    pub threshold: f64,
    pub sample_ids: Vec<u64>,
    pub benefit_scores: Vec<f64>,
    pub kept_mask: Vec<bool>,
    /// Batch too small to score (self-influence on one member).
    pub degenerate: bool,
}

impl CurationDecision {
    fn new(step: u64, estimator: Estimator, threshold: f64, sample_ids: Vec<u64>, benefit_scores: Vec<f64>) -> Self {
        let kept_mask = benefit_scores.iter().map(|&b| b >= threshold).collect();
        Self {
            step,
            estimator,
            threshold,
            sample_ids,
            benefit_scores,
            kept_mask,
            degenerate: false,
        }
    }

    /// The same scores re-thresholded.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        let mut d = self.clone();
        d.threshold = threshold;
        if !d.degenerate {
            d.kept_mask = d.benefit_scores.iter().map(|&b| b >= threshold).collect();
        }
        d
    }

    pub fn kept_count(&self) -> usize {
        self.kept_mask.iter().filter(|&&k| k).count()
    }
}

/// Identifies the net/batch/validation shape a ledger entry was measured on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostFingerprint {
    pub layer_dims: Vec<usize>,
    pub batch_size: usize,
    pub reference_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub step: u64,
    pub estimator: Estimator,
    pub scoring_macs: u64,
    pub cache_bytes: u64,
    pub samples_scored: u64,
    pub samples_kept: u64,
    pub fingerprint: CostFingerprint,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<CostEntry>,
    pub total_macs: u64,
    pub total_scored: u64,
    pub total_kept: u64,
    pub peak_cache_bytes: u64,
}

impl CostLedger {
    pub fn record(&mut self, entry: CostEntry) {
        self.total_macs += entry.scoring_macs;
        self.total_scored += entry.samples_scored;
        self.total_kept += entry.samples_kept;
        self.peak_cache_bytes = self.peak_cache_bytes.max(entry.cache_bytes);
        self.entries.push(entry);
    }
}

fn fingerprint(net: &Mlp, batch_size: usize, reference_count: usize) -> CostFingerprint {
    let mut layer_dims = vec![net.input_dim()];
    layer_dims.extend(net.layers().iter().map(|l| l.spec.out_dim));
    CostFingerprint {
        layer_dims,
        batch_size,
        reference_count,
    }
}

/// Scores `batch` against the validation cache and thresholds the benefits.
#[allow(clippy::too_many_arguments)]
pub fn curate_batch(
    net: &Mlp,
    batch: &[Sample],
    cache: &ValidationCache,
    cfg: &TrainerConfig,
    step: u64,
    precond: &Preconditioner,
    ledger: &mut CostLedger,
) -> Result<CurationDecision> {
    curate_batch_with(net, batch, cache, cfg, step, precond, ledger, Exec::default())
}

#[allow(clippy::too_many_arguments)]
pub fn curate_batch_with(
    net: &Mlp,
    batch: &[Sample],
    cache: &ValidationCache,
    cfg: &TrainerConfig,
    step: u64,
    precond: &Preconditioner,
    ledger: &mut CostLedger,
    exec: Exec,
) -> Result<CurationDecision> {
    let estimator = cfg.estimator.ok_or(TrainError::NoEstimator)?;
    if cache.estimator != estimator {
        return Err(TrainError::CacheMismatch {
            cached: cache.estimator,
            wanted: estimator,
        });
    }
    if step < cache.step || step - cache.step >= cfg.cache_refresh_steps as u64 {
        return Err(TrainError::StaleCache {
            cache_step: cache.step,
            step,
            refresh: cfg.cache_refresh_steps,
        });
    }
    let scorer = PairScorer {
        estimator,
        block_widths: &cache.block_widths,
        calibrate: cfg.calibrate_layers,
        precond,
    };
    let benefits = par::map_slice(exec, batch, |s| {
        let taps = ScoringTaps::build(net, s, estimator)?;
        Ok(scorer.score_against(&taps, cache.entries.iter())?.benefit())
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;

    let decision = CurationDecision::new(
        step,
        estimator,
        cfg.threshold,
        batch.iter().map(|s| s.id).collect(),
        benefits,
    );
    let (per_sample, per_pair) = scoring_macs(net, estimator, cfg.calibrate_layers);
    let n = batch.len() as u64;
    ledger.record(CostEntry {
        step,
        estimator,
        scoring_macs: n * (per_sample + per_pair * cache.len() as u64),
        cache_bytes: cache.bytes(),
        samples_scored: n,
        samples_kept: decision.kept_count() as u64,
        fingerprint: fingerprint(net, batch.len(), cache.len()),
    });
    Ok(decision)
}

/// Scores each member against the rest of its own batch.
pub fn self_influence_curate(
    net: &Mlp,
    batch: &[Sample],
    cfg: &TrainerConfig,
    step: u64,
    precond: &Preconditioner,
    ledger: &mut CostLedger,
) -> Result<CurationDecision> {
    let estimator = cfg.estimator.ok_or(TrainError::NoEstimator)?;
    if batch.is_empty() {
        return Err(TrainError::Empty("batch"));
    }
    let ids: Vec<u64> = batch.iter().map(|s| s.id).collect();
    if batch.len() == 1 {
        let mut d = CurationDecision::new(step, estimator, cfg.threshold, ids, vec![0.0]);
        d.kept_mask = vec![true];
        d.degenerate = true;
        return Ok(d);
    }
    let taps = par::map_slice(Exec::default(), batch, |s| ScoringTaps::build(net, s, estimator))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let widths = block_widths(net, estimator);
    let scorer = PairScorer {
        estimator,
        block_widths: &widths,
        calibrate: cfg.calibrate_layers,
        precond,
    };
    let benefits = par::map_range(Exec::default(), taps.len(), |i| {
        let others = taps.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, t)| t);
        Ok(scorer.score_against(&taps[i], others)?.benefit())
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;

    let decision = CurationDecision::new(step, estimator, cfg.threshold, ids, benefits);
    let (per_sample, per_pair) = scoring_macs(net, estimator, cfg.calibrate_layers);
    let n = batch.len() as u64;
    ledger.record(CostEntry {
        step,
        estimator,
        scoring_macs: n * (per_sample + per_pair * (n - 1)),
        cache_bytes: 0,
        samples_scored: n,
        samples_kept: decision.kept_count() as u64,
        fingerprint: fingerprint(net, batch.len(), batch.len() - 1),
    });
    Ok(decision)
}

/// Momentum buffer, flat in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: Vec<f64>,
}

impl MomentumState {
    pub fn zeros(net: &Mlp) -> Self {
        Self {
            velocity: vec![0.0; net.num_params()],
        }
    }
}

/// `v ← μv + mean ∇ℓ`, `θ ← θ − η v` over the kept samples.
pub fn sgd_step(
    net: &mut Mlp,
    kept: &[Sample],
    cfg: &TrainerConfig,
    state: &mut MomentumState,
    step: u64,
) -> Result<()> {
    if kept.is_empty() {
        return Err(TrainError::Empty("kept set"));
    }
    let frozen = &*net;
    let grads = par::map_slice(Exec::default(), kept, |s| {
        let taps = frozen.sample_taps(&s.features, s.label)?;
        Ok(param_grads(&taps)?.flatten())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; net.num_params()];
    for g in &grads {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    let n = kept.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    if !mean.iter().all(|v| v.is_finite()) {
        return Err(TrainError::NonFiniteGradient { step });
    }
    for (v, g) in state.velocity.iter_mut().zip(&mean) {
        *v = cfg.momentum * *v + g;
    }
    net.apply_step(&state.velocity, cfg.learning_rate)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        if values.is_empty() {
            return Self {
                lo: 0.0,
                hi: 0.0,
                counts: vec![0; bins],
            };
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn mass(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub curated: bool,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub test_accuracy: f64,
    pub kept: usize,
    pub scored: usize,
    pub noisy_kept: usize,
    pub noisy_total: usize,
    pub skipped_steps: usize,
    pub benefit_histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub step: u64,
    pub sample_id: u64,
    pub estimator: Estimator,
    pub benefit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: u64,
    pub epoch: usize,
    pub benefit: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub mode: CurationMode,
    pub estimator: Option<Estimator>,
    pub seed: u64,
    pub total_steps: u64,
    pub epochs: Vec<EpochStats>,
    /// Train ids in dataset order; columns of `inclusion`.
    pub sample_ids: Vec<u64>,
    /// `inclusion[epoch][k]`: was `sample_ids[k]` used for an update.
    pub inclusion: Vec<Vec<bool>>,
    pub scores: Vec<ScoreRecord>,
    pub traces: BTreeMap<u64, Vec<TracePoint>>,
    pub ledger: CostLedger,
}

pub struct TrainingRun {
    pub net: Mlp,
    pub report: TrainingReport,
}

fn check_data(net: &Mlp, data: &DatasetBundle) -> Result<()> {
    if data.train.is_empty() || data.validation.is_empty() || data.test.is_empty() {
        return Err(TrainError::DataMismatch("every split must be nonempty".into()));
    }
    if net.input_dim() != data.feature_dim {
        return Err(TrainError::DataMismatch(format!(
            "model expects {} features, data has {}",
            net.input_dim(),
            data.feature_dim
        )));
    }
    if net.num_classes() != data.num_classes {
        return Err(TrainError::DataMismatch(format!(
            "model has {} outputs, data has {} classes",
            net.num_classes(),
            data.num_classes
        )));
    }
    let bad = data
        .train
        .iter()
        .chain(&data.validation)
        .chain(&data.test)
        .find(|s| s.features.len() != data.feature_dim || s.label >= data.num_classes);
    if let Some(s) = bad {
        return Err(TrainError::DataMismatch(format!("sample {} is malformed", s.id)));
    }
    Ok(())
}

pub(crate) fn mean_loss(net: &Mlp, samples: &[Sample]) -> Result<f64> {
    let losses = par::map_slice(Exec::default(), samples, |s| net.loss(&s.features, s.label))
        .into_iter()
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len().max(1) as f64)
}

pub fn train(cfg: &TrainerConfig, initial: &Mlp, data: &DatasetBundle) -> Result<TrainingRun> {
    train_with(cfg, initial, data, |_, _| {})
}

/// Runs the full protocol, calling `on_step(step, net)` after every update.
pub fn train_with(
    cfg: &TrainerConfig,
    initial: &Mlp,
    data: &DatasetBundle,
    mut on_step: impl FnMut(u64, &Mlp),
) -> Result<TrainingRun> {
    cfg.validate()?;
    check_data(initial, data)?;
    let mut net = initial.clone();
    let mut momentum = MomentumState::zeros(&net);
    let mut precond = Preconditioner::identity(net.num_classes(), cfg.precond_decay, cfg.precond_floor)?;
    let mut ledger = CostLedger::default();

    // Separate streams so curation never perturbs the batch order.
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(0);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(1);

    let n_train = data.train.len();
    let val_take = ((cfg.val_fraction_per_batch * data.validation.len() as f64).ceil() as usize)
        .clamp(1, data.validation.len());
    let position: BTreeMap<u64, usize> = data.train.iter().enumerate().map(|(k, s)| (s.id, k)).collect();
    let noisy_total = data.train.iter().filter(|s| s.noisy).count();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut inclusion = Vec::with_capacity(cfg.epochs);
    let mut scores = Vec::new();
    let mut traces: BTreeMap<u64, Vec<TracePoint>> = cfg.trace_ids.iter().map(|&id| (id, Vec::new())).collect();
    let mut cache: Option<ValidationCache> = None;
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let curated = cfg.curating() && epoch >= cfg.warmup_epochs;
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut order_rng);
        let mut included = vec![false; n_train];
        let mut epoch_benefits = Vec::new();
        let mut kept_total = 0;
        let mut noisy_kept = 0;
        let mut skipped = 0;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let kept_mask = if curated {
                let decision = match cfg.mode {
                    CurationMode::ValidationInfluence => {
                        let estimator = cfg.estimator.ok_or(TrainError::NoEstimator)?;
                        let fresh = cache
                            .as_ref()
                            .is_some_and(|c| step - c.step < cfg.cache_refresh_steps as u64);
                        if !fresh {
                            let mut idx = index::sample(&mut val_rng, data.validation.len(), val_take).into_vec();
                            idx.sort_unstable();
                            let subset: Vec<Sample> = idx.iter().map(|&i| data.validation[i].clone()).collect();
                            cache = Some(build_validation_cache(&net, &subset, estimator, step)?);
                        }
                        let c = cache.as_ref().expect("cache built above");
                        curate_batch(&net, &batch, c, cfg, step, &precond, &mut ledger)?
                    }
                    CurationMode::SelfInfluence => {
                        self_influence_curate(&net, &batch, cfg, step, &precond, &mut ledger)?
                    }
                    CurationMode::Off => unreachable!("curated implies a curation mode"),
                };
                if decision.estimator == Estimator::PrecondLai {
                    let out_grads = batch
                        .iter()
                        .map(|s| {
                            let logits = net.logits(&s.features)?;
                            Ok(crate::network::loss_and_output_grad(&logits, s.label)?.grad)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    precond = influence::update_preconditioner(&precond, &out_grads)?;
                }
                for (k, s) in batch.iter().enumerate() {
                    scores.push(ScoreRecord {
                        step,
                        sample_id: s.id,
                        estimator: decision.estimator,
                        benefit: decision.benefit_scores[k],
                    });
                    if let Some(trace) = traces.get_mut(&s.id) {
                        trace.push(TracePoint {
                            step,
                            epoch,
                            benefit: decision.benefit_scores[k],
                            kept: decision.kept_mask[k],
                        });
                    }
                }
                epoch_benefits.extend_from_slice(&decision.benefit_scores);
                let mut mask = decision.kept_mask.clone();
                if !mask.iter().any(|&k| k) && cfg.empty_batch_policy == EmptyBatchPolicy::KeepTop1 {
                    let best = decision
                        .benefit_scores
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                        .map(|(k, _)| k)
                        .expect("nonempty batch");
                    mask[best] = true;
                }
                mask
            } else {
                vec![true; batch.len()]
            };

            let kept: Vec<Sample> = batch
                .iter()
                .zip(&kept_mask)
                .filter(|(_, &k)| k)
                .map(|(s, _)| s.clone())
                .collect();
            if kept.is_empty() {
                skipped += 1;
            } else {
                for s in &kept {
                    included[position[&s.id]] = true;
                    noisy_kept += usize::from(s.noisy);
                }
                kept_total += kept.len();
                sgd_step(&mut net, &kept, cfg, &mut momentum, step)?;
            }
            on_step(step, &net);
            step += 1;
        }

        epochs.push(EpochStats {
            epoch,
            curated,
            train_loss: mean_loss(&net, &data.train)?,
            validation_loss: mean_loss(&net, &data.validation)?,
            test_accuracy: evaluation::accuracy(&net, &data.test)?,
            kept: kept_total,
            scored: epoch_benefits.len(),
            noisy_kept,
            noisy_total,
            skipped_steps: skipped,
            benefit_histogram: Histogram::from_values(&epoch_benefits, cfg.histogram_bins),
        });
        inclusion.push(included);
    }

    let report = TrainingReport {
        mode: cfg.mode,
        estimator: cfg.estimator,
        seed: cfg.seed,
        total_steps: step,
        epochs,
        sample_ids: data.train.iter().map(|s| s.id).collect(),
        inclusion,
        scores,
        traces,
        ledger,
    };
    Ok(TrainingRun { net, report })
}

/// Per-estimator scoring cost on one shared configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub estimator: Estimator,
    pub scoring_macs: u64,
    pub cache_bytes: u64,
    pub samples_scored: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub depth: usize,
    pub fingerprint: CostFingerprint,
    pub rows: Vec<CostRow>,
    /// `MAC(LAI) < MAC(Ghost)` and `cache(LAI) < cache(Ghost)` when depth > 1;
    /// equal scoring MACs at depth 1.
    pub ordering_holds: bool,
}

/// Compares ledger totals across estimators that ran on the same shape.
pub fn ledger_compare(ledger: &CostLedger, methods: &[Estimator]) -> Result<CostComparison> {
    let first = ledger
        .entries
        .first()
        .ok_or_else(|| TrainError::MismatchedLedger("ledger is empty".into()))?;
    let fp = first.fingerprint.clone();
    if let Some(e) = ledger.entries.iter().find(|e| e.fingerprint != fp) {
        return Err(TrainError::MismatchedLedger(format!(
            "{} at step {} ran on {:?}, expected {:?}",
            e.estimator, e.step, e.fingerprint, fp
        )));
    }
    let rows = methods
        .iter()
        .map(|&m| {
            let mine: Vec<&CostEntry> = ledger.entries.iter().filter(|e| e.estimator == m).collect();
            if mine.is_empty() {
                return Err(TrainError::MismatchedLedger(format!("no entries for {m}")));
            }
            Ok(CostRow {
                estimator: m,
                scoring_macs: mine.iter().map(|e| e.scoring_macs).sum(),
                cache_bytes: mine.iter().map(|e| e.cache_bytes).max().unwrap_or(0),
                samples_scored: mine.iter().map(|e| e.samples_scored).sum(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<u64> = rows.iter().map(|r| r.samples_scored).collect();
    if scored.windows(2).any(|w| w[0] != w[1]) {
        return Err(TrainError::MismatchedLedger("methods scored different sample counts".into()));
    }
    let depth = fp.layer_dims.len() - 1;
    let find = |e: Estimator| rows.iter().find(|r| r.estimator == e);
    let ordering_holds = match (find(Estimator::Lai), find(Estimator::Ghost)) {
        (Some(lai), Some(ghost)) if depth > 1 => {
            lai.scoring_macs < ghost.scoring_macs && lai.cache_bytes < ghost.cache_bytes
        }
        (Some(lai), Some(ghost)) => lai.scoring_macs == ghost.scoring_macs,
        _ => true,
    };
    Ok(CostComparison {
        depth,
        fingerprint: fp,
        rows,
        ordering_holds,
    })
}

/// Builds a cache and curates one batch with each estimator on the same net.
pub fn measure_scoring_cost(
    net: &Mlp,
    batch: &[Sample],
    validation: &[Sample],
    estimators: &[Estimator],
    cfg: &TrainerConfig,
) -> Result<CostLedger> {
    let mut ledger = CostLedger::default();
    let precond = Preconditioner::identity(net.num_classes(), cfg.precond_decay, cfg.precond_floor)?;
    for &e in estimators {
        let cfg = TrainerConfig {
            estimator: Some(e),
            ..cfg.clone()
        };
        let cache = build_validation_cache(net, validation, e, 0)?;
        curate_batch(net, batch, &cache, &cfg, 0, &precond, &mut ledger)?;
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests;
