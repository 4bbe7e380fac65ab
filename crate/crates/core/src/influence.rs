//! Gradient-inner-product influence estimators.
//!
//! For a validation sample `z` and a training sample `j`, layer `l`
//! contributes an embedding similarity `α^(l) = ⟨ã_z^(l−1), ã_j^(l−1)⟩`
//! (activations with a constant 1 appended, so biases are covered) and a
//! feedback similarity `β^(l) = ⟨g_z^(l), g_j^(l)⟩`. From these:
//!
//! | estimator | pair value |
//! |-----------|------------|
//! | IP        | `−⟨∇θ ℓ_z, ∇θ ℓ_j⟩` over all parameters |
//! | Ghost     | `−Σ_l α^(l) β^(l)` |
//! | LAI       | `−(Σ_l α^(l)) β^(L)` |
//! | LLI       | `−α^(L) β^(L)` |
//! | PrecondLAI| LAI with `β^(L)` measured in a `D^(−1/2)`-scaled space |
//!
//! All estimators return [`SignConvention::InfluenceSign`] values (lower is
//! more helpful). Curation reads [`SignConvention::BenefitSign`], the
//! negation, where positive means "keeping this sample should lower the
//! validation loss".

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::network::{self, dot, Mlp, NetworkError, ParamGrads, SampleTaps};

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot aggregate mixed estimators or conventions")]
    MixedScores,
    #[error("nothing to aggregate")]
    Empty,
    #[error("preconditioner entry {index} is {value}, must be positive")]
    NonPositivePreconditioner { index: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, InfluenceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ip,
    Ghost,
    Lai,
    Lli,
    PrecondLai,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Ip,
        Estimator::Ghost,
        Estimator::Lai,
        Estimator::Lli,
        Estimator::PrecondLai,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ip => "ip",
            Estimator::Ghost => "ghost",
            Estimator::Lai => "lai",
            Estimator::Lli => "lli",
            Estimator::PrecondLai => "precond_lai",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }

    /// Whether scoring needs per-layer feedback (a full backward pass).
    pub fn needs_layer_grads(self) -> bool {
        matches!(self, Estimator::Ip | Estimator::Ghost)
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// Leading minus as in the influence-function literature.
    InfluenceSign,
    /// `−InfluenceSign`; positive means beneficial.
    BenefitSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub value: f64,
    pub estimator: Estimator,
    pub convention: SignConvention,
}

impl InfluenceScore {
    pub fn raw(value: f64, estimator: Estimator) -> Self {
        Self {
            value,
            estimator,
            convention: SignConvention::InfluenceSign,
        }
    }

    pub fn to_convention(self, convention: SignConvention) -> Self {
        if convention == self.convention {
            self
        } else {
            Self {
                value: -self.value,
                convention,
                ..self
            }
        }
    }

    pub fn benefit(self) -> f64 {
        self.to_convention(SignConvention::BenefitSign).value
    }
}

/// Per-layer `α^(l)` and `β^(l)` for one (validation, training) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarities {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl PairSimilarities {
    pub fn depth(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha.iter().sum()
    }

    pub fn beta_out(&self) -> f64 {
        *self.beta.last().expect("nonempty similarities")
    }

    /// Divides each `α^(l)` by the augmented input width of layer `l`.
    ///
    /// Optional cross-layer rescaling; wide layers otherwise dominate the
    /// LAI sum. Off unless the trainer enables it.
    pub fn dim_calibrated(&self, augmented_dims: &[usize]) -> Result<Self> {
        if augmented_dims.len() != self.alpha.len() {
            return Err(InfluenceError::ShapeMismatch(format!(
                "{} calibration widths for depth {}",
                augmented_dims.len(),
                self.alpha.len()
            )));
        }
        Ok(Self {
            alpha: self
                .alpha
                .iter()
                .zip(augmented_dims)
                .map(|(a, &d)| a / d as f64)
                .collect(),
            beta: self.beta.clone(),
        })
    }
}

/// `α^(l) = ⟨ã_z^(l−1), ã_j^(l−1)⟩`, `β^(l) = ⟨g_z^(l), g_j^(l)⟩`.
pub fn pair_similarities(z: &SampleTaps, j: &SampleTaps) -> Result<PairSimilarities> {
    let depth = z.depth();
    if j.depth() != depth || z.activations.len() != depth || j.activations.len() != depth || depth == 0 {
        return Err(InfluenceError::ShapeMismatch(format!(
            "taps of depth {} and {}",
            z.depth(),
            j.depth()
        )));
    }
    let mut alpha = Vec::with_capacity(depth);
    let mut beta = Vec::with_capacity(depth);
    for l in 0..depth {
        let (az, aj) = (&z.activations[l], &j.activations[l]);
        let (gz, gj) = (&z.layer_grads[l], &j.layer_grads[l]);
        if az.len() != aj.len() || gz.len() != gj.len() {
            return Err(InfluenceError::ShapeMismatch(format!("layer {}", l + 1)));
        }
        alpha.push(dot(az, aj) + 1.0);
        beta.push(dot(gz, gj));
    }
    Ok(PairSimilarities { alpha, beta })
}

/// `−⟨∇θ ℓ_z, ∇θ ℓ_j⟩` over every weight and bias.
pub fn ip_influence(z: &ParamGrads, j: &ParamGrads) -> Result<InfluenceScore> {
    if !z.same_shape(j) {
        return Err(InfluenceError::ShapeMismatch("parameter gradients".into()));
    }
    let total: f64 = z.layers.iter().zip(&j.layers).map(|(a, b)| a.dot(b)).sum();
    Ok(InfluenceScore::raw(-total, Estimator::Ip))
}

/// IP influence of flattened parameter gradients.
pub fn ip_influence_flat(z: &[f64], j: &[f64]) -> Result<InfluenceScore> {
    if z.len() != j.len() {
        return Err(InfluenceError::ShapeMismatch("flattened gradients".into()));
    }
    Ok(InfluenceScore::raw(-dot(z, j), Estimator::Ip))
}

pub fn ghost_influence(sims: &PairSimilarities) -> InfluenceScore {
    let total: f64 = sims.alpha.iter().zip(&sims.beta).map(|(a, b)| a * b).sum();
    InfluenceScore::raw(-total, Estimator::Ghost)
}

pub fn lai_influence(sims: &PairSimilarities) -> InfluenceScore {
    lai_from_parts(sims.alpha_sum(), sims.beta_out())
}

/// LAI from the summed embedding similarity and the output-layer `β^(L)`.
pub fn lai_from_parts(alpha_sum: f64, beta_out: f64) -> InfluenceScore {
    InfluenceScore::raw(-alpha_sum * beta_out, Estimator::Lai)
}

pub fn lli_influence(sims: &PairSimilarities) -> InfluenceScore {
    let last = sims.depth() - 1;
    InfluenceScore::raw(-sims.alpha[last] * sims.beta[last], Estimator::Lli)
}

/// Diagonal EMA of squared output-gradient coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    pub diag: Vec<f64>,
    pub decay: f64,
    pub floor: f64,
}

pub const DEFAULT_PRECOND_DECAY: f64 = 0.9;
pub const DEFAULT_PRECOND_FLOOR: f64 = 1e-8;

impl Preconditioner {
    /// Identity preconditioner over `dim` output coordinates.
    pub fn identity(dim: usize, decay: f64, floor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(InfluenceError::InvalidArgument(format!("decay {decay}")));
        }
        if !(floor > 0.0) {
            return Err(InfluenceError::InvalidArgument(format!("floor {floor}")));
        }
        Ok(Self {
            diag: vec![1.0; dim],
            decay,
            floor,
        })
    }

    fn check(&self) -> Result<()> {
        match self.diag.iter().position(|&d| !(d > 0.0)) {
            Some(index) => Err(InfluenceError::NonPositivePreconditioner {
                index,
                value: self.diag[index],
            }),
            None => Ok(()),
        }
    }

    /// `⟨D^(−1/2) u, D^(−1/2) v⟩`.
    pub fn scaled_dot(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        self.check()?;
        if u.len() != self.diag.len() || v.len() != self.diag.len() {
            return Err(InfluenceError::ShapeMismatch(format!(
                "preconditioner of width {} against vectors of width {} and {}",
                self.diag.len(),
                u.len(),
                v.len()
            )));
        }
        Ok(u.iter()
            .zip(v)
            .zip(&self.diag)
            .map(|((a, b), d)| a * b / d)
            .sum())
    }
}

/// LAI with `β̃^(L) = ⟨D^(−1/2) g_z^(L), D^(−1/2) g_j^(L)⟩`.
pub fn preconditioned_score(
    gl_z: &[f64],
    gl_j: &[f64],
    sims: &PairSimilarities,
    precond: &Preconditioner,
) -> Result<InfluenceScore> {
    preconditioned_from_parts(sims.alpha_sum(), gl_z, gl_j, precond)
}

pub fn preconditioned_from_parts(
    alpha_sum: f64,
    gl_z: &[f64],
    gl_j: &[f64],
    precond: &Preconditioner,
) -> Result<InfluenceScore> {
    let beta = precond.scaled_dot(gl_z, gl_j)?;
    Ok(InfluenceScore::raw(-alpha_sum * beta, Estimator::PrecondLai))
}

/// `D ← decay·D + (1−decay)·mean(g²)`, floored.
pub fn update_preconditioner(precond: &Preconditioner, batch: &[Vec<f64>]) -> Result<Preconditioner> {
    if batch.is_empty() {
        return Err(InfluenceError::InvalidArgument("empty gradient batch".into()));
    }
    let width = precond.diag.len();
    if let Some(bad) = batch.iter().find(|g| g.len() != width) {
        return Err(InfluenceError::ShapeMismatch(format!(
            "gradient of width {} for preconditioner of width {width}",
            bad.len()
        )));
    }
    let n = batch.len() as f64;
    let diag = (0..width)
        .map(|k| {
            let mean_sq = batch.iter().map(|g| g[k] * g[k]).sum::<f64>() / n;
            (precond.decay * precond.diag[k] + (1.0 - precond.decay) * mean_sq).max(precond.floor)
        })
        .collect();
    Ok(Preconditioner {
        diag,
        ..precond.clone()
    })
}

/// Sums per-pair scores over a validation set.
///
/// Values are summed in ascending order, so any permutation of the input
/// yields a bit-identical total.
pub fn aggregate_over_validation(scores: &[InfluenceScore]) -> Result<InfluenceScore> {
    let first = scores.first().ok_or(InfluenceError::Empty)?;
    if scores
        .iter()
        .any(|s| s.estimator != first.estimator || s.convention != first.convention)
    {
        return Err(InfluenceError::MixedScores);
    }
    let mut values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    values.sort_by(f64::total_cmp);
    Ok(InfluenceScore {
        value: values.iter().sum(),
        ..*first
    })
}

/// Diagnostics for the Ghost-vs-LAI gap bound under gradient-norm decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub depth: usize,
    /// Smallest ρ with `‖g^(l)‖ ≤ ρ^(L−l) ‖g^(L)‖` on every sample and layer.
    pub rho_hat: f64,
    /// Largest augmented activation norm.
    pub ca_hat: f64,
    /// Smallest output-layer `α^(L)` over pairs.
    pub alpha_bar: f64,
    pub ghost: f64,
    pub lai: f64,
    /// `|Ghost − LAI| / |LAI|`; `None` when LAI is zero and the gap is not.
    pub measured_rel_gap: Option<f64>,
    /// `(C_a²/ᾱ)·Σ_{k=1}^{L−1} ρ^(2k)`; `None` when `ᾱ ≤ 0`.
    pub bound_value: Option<f64>,
    pub rho_below_one: bool,
    pub alpha_bar_positive: bool,
    pub betas_nonnegative: bool,
    pub alignment_non_increasing: bool,
    pub assumptions_hold: bool,
}

impl BoundReport {
    /// True when the assumptions hold and the measured gap is within the bound.
    pub fn bound_satisfied(&self) -> Option<bool> {
        match (self.measured_rel_gap, self.bound_value) {
            (Some(gap), Some(bound)) if self.assumptions_hold => Some(gap <= bound),
            _ => None,
        }
    }
}

const ALIGNMENT_SLACK: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn cosine(u: &[f64], v: &[f64]) -> Option<f64> {
    let d = norm(u) * norm(v);
    (d > 0.0).then(|| dot(u, v) / d)
}

/// Evaluates the decay/boundedness/alignment assumptions on the given pairs
/// and compares the aggregated Ghost-vs-LAI gap to its geometric bound.
pub fn bound_diagnostics(pairs: &[(&SampleTaps, &SampleTaps)]) -> Result<BoundReport> {
    let (first, _) = pairs
        .first()
        .ok_or_else(|| InfluenceError::InvalidArgument("no pairs".into()))?;
    let depth = first.depth();

    let mut rho_hat: f64 = 0.0;
    let mut ca_hat: f64 = 0.0;
    let mut alpha_bar = f64::INFINITY;
    let mut betas_nonnegative = true;
    let mut alignment_non_increasing = true;
    let mut ghost_terms = Vec::with_capacity(pairs.len());
    let mut lai_terms = Vec::with_capacity(pairs.len());

    for &(z, j) in pairs {
        let sims = pair_similarities(z, j)?;
        for taps in [z, j] {
            let out = norm(&taps.layer_grads[depth - 1]);
            if out > 0.0 {
                for l in 0..depth - 1 {
                    let ratio = norm(&taps.layer_grads[l]) / out;
                    rho_hat = rho_hat.max(ratio.powf(1.0 / (depth - 1 - l) as f64));
                }
            }
            for a in &taps.activations {
                ca_hat = ca_hat.max((dot(a, a) + 1.0).sqrt());
            }
        }
        alpha_bar = alpha_bar.min(sims.alpha[depth - 1]);
        betas_nonnegative &= sims.beta.iter().all(|&b| b >= 0.0);
        // cos(g^(l)) must not exceed cos(g^(l+1)) anywhere down the stack.
        for l in 0..depth.saturating_sub(1) {
            let lower = cosine(&z.layer_grads[l], &j.layer_grads[l]);
            let upper = cosine(&z.layer_grads[l + 1], &j.layer_grads[l + 1]);
            if let (Some(lo), Some(up)) = (lower, upper) {
                alignment_non_increasing &= lo <= up + ALIGNMENT_SLACK;
            }
        }
        ghost_terms.push(ghost_influence(&sims));
        lai_terms.push(lai_influence(&sims));
    }

    let ghost = aggregate_over_validation(&ghost_terms)?.value;
    let lai = aggregate_over_validation(&lai_terms)?.value;
    let gap = (ghost - lai).abs();
    let measured_rel_gap = if gap == 0.0 {
        Some(0.0)
    } else if lai == 0.0 {
        None
    } else {
        Some(gap / lai.abs())
    };
    let geometric: f64 = (1..depth).map(|k| rho_hat.powi(2 * k as i32)).sum();
    let bound_value = (alpha_bar > 0.0).then(|| ca_hat * ca_hat / alpha_bar * geometric);

    let rho_below_one = rho_hat < 1.0;
    let alpha_bar_positive = alpha_bar > 0.0;
    Ok(BoundReport {
        depth,
        rho_hat,
        ca_hat,
        alpha_bar,
        ghost,
        lai,
        measured_rel_gap,
        bound_value,
        rho_below_one,
        alpha_bar_positive,
        betas_nonnegative,
        alignment_non_increasing,
        assumptions_hold: rho_below_one && alpha_bar_positive && betas_nonnegative && alignment_non_increasing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub resamples: usize,
    pub subset_size: usize,
    pub var_ghost: f64,
    pub var_lai: f64,
    /// Recorded observation, not a guarantee.
    pub lai_not_above_ghost: bool,
}

/// Resampling variance of the Ghost and LAI ranking margin of a probe pair.
///
/// Each resample draws `subset_size` validation samples without
/// replacement and records `score(first) − score(second)` for both
/// estimators, aggregated over the subset.
pub fn variance_diagnostic(
    net: &Mlp,
    probe_pair: (&Sample, &Sample),
    val_pool: &[Sample],
    resamples: usize,
    subset_size: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if val_pool.is_empty() || subset_size == 0 || subset_size > val_pool.len() {
        return Err(InfluenceError::InvalidArgument(format!(
            "subset of {subset_size} from a pool of {}",
            val_pool.len()
        )));
    }
    if resamples < 2 {
        return Err(InfluenceError::InvalidArgument("need at least two resamples".into()));
    }
    let taps_of = |s: &Sample| net.sample_taps(&s.features, s.label);
    let (p1, p2) = (taps_of(probe_pair.0)?, taps_of(probe_pair.1)?);
    let pool_taps = val_pool.iter().map(taps_of).collect::<std::result::Result<Vec<_>, _>>()?;
    let per_val = pool_taps
        .iter()
        .map(|v| {
            let (s1, s2) = (pair_similarities(v, &p1)?, pair_similarities(v, &p2)?);
            Ok((
                ghost_influence(&s1).value - ghost_influence(&s2).value,
                lai_influence(&s1).value - lai_influence(&s2).value,
            ))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ghost = Vec::with_capacity(resamples);
    let mut lai = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut idx = index::sample(&mut rng, val_pool.len(), subset_size).into_vec();
        idx.sort_unstable();
        ghost.push(idx.iter().map(|&i| per_val[i].0).sum::<f64>());
        lai.push(idx.iter().map(|&i| per_val[i].1).sum::<f64>());
    }
    let var_ghost = sample_variance(&ghost);
    let var_lai = sample_variance(&lai);
    Ok(VarianceReport {
        resamples,
        subset_size,
        var_ghost,
        var_lai,
        lai_not_above_ghost: var_lai <= var_ghost,
    })
}

pub(crate) fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Convenience: all five influence-sign scores for one pair.
pub fn all_pair_scores(
    z: &SampleTaps,
    j: &SampleTaps,
    precond: &Preconditioner,
) -> Result<[InfluenceScore; 5]> {
    let sims = pair_similarities(z, j)?;
    let ip = ip_influence(&network::param_grads(z)?, &network::param_grads(j)?)?;
    Ok([
        ip,
        ghost_influence(&sims),
        lai_influence(&sims),
        lli_influence(&sims),
        preconditioned_score(&z.output_grad, &j.output_grad, &sims, precond)?,
    ])
}
