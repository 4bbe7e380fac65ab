//! Shapley and leave-one-out references under a one-step utility.
//!
//! The value of a coalition `S` of batch members is the validation-loss
//! decrease produced by one SGD step from a frozen checkpoint in which only
//! the members of `S` contribute gradient:
//!
//! ```text
//! v(S) = ℓ_val(θ) − ℓ_val(θ − η/|B| · Σ_{i∈S} ∇ℓ_i(θ)),   v(∅) = 0
//! ```
//!
//! Dividing by the full batch size (rather than `|S|`) makes a
//! zero-gradient member an exact null player and makes the first-order
//! Shapley value `η/|B|·⟨∇ℓ_val, ∇ℓ_i⟩`, the quantity the influence
//! estimators approximate.

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::network::{param_grads, Mlp, NetworkError};
use crate::par::{self, Exec};

/// Largest batch accepted by exact enumeration.
pub const MAX_EXACT_BATCH: usize = 10;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("batch of {0} is too large for exact enumeration (max {MAX_EXACT_BATCH})")]
    BatchTooLarge(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("need at least one permutation")]
    NoPermutations,
    #[error("subset index {index} outside batch of {len}")]
    BadSubset { index: usize, len: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// A model the utility can probe: per-sample gradients at the frozen
/// parameters and mean loss after a parameter shift.
pub trait ValuationModel: Sync {
    fn num_params(&self) -> usize;

    fn sample_grad(&self, sample: &Sample) -> Result<Vec<f64>>;

    /// Mean loss over `samples` at `θ − delta` (`θ` when `delta` is `None`).
    fn mean_loss(&self, samples: &[Sample], delta: Option<&[f64]>) -> Result<f64>;
}

impl ValuationModel for Mlp {
    fn num_params(&self) -> usize {
        Mlp::num_params(self)
    }

    fn sample_grad(&self, sample: &Sample) -> Result<Vec<f64>> {
        let taps = self.sample_taps(&sample.features, sample.label)?;
        Ok(param_grads(&taps)?.flatten())
    }

    fn mean_loss(&self, samples: &[Sample], delta: Option<&[f64]>) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let shifted;
        let net = match delta {
            Some(d) => {
                let mut probe = self.clone();
                probe.apply_step(d, 1.0)?;
                shifted = probe;
                &shifted
            }
            None => self,
        };
        let mut total = 0.0;
        for s in samples {
            total += net.loss(&s.features, s.label)?;
        }
        Ok(total / samples.len() as f64)
    }
}

/// One-step validation-loss utility against a frozen model.
pub struct UtilityFn<'a, M: ValuationModel> {
    pub model: &'a M,
    pub validation: &'a [Sample],
    pub learning_rate: f64,
}

impl<M: ValuationModel> Clone for UtilityFn<'_, M> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M: ValuationModel> Copy for UtilityFn<'_, M> {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub permutations_used: usize,
    pub seed: Option<u64>,
    /// True for full enumeration (subsets or all orderings).
    pub exact: bool,
}

/// The utility bound to a concrete batch, with gradients precomputed.
pub struct BatchGame<'a, M: ValuationModel> {
    utility: UtilityFn<'a, M>,
    grads: Vec<Vec<f64>>,
    base_loss: f64,
}

impl<'a, M: ValuationModel> BatchGame<'a, M> {
    pub fn new(utility: UtilityFn<'a, M>, batch: &[Sample]) -> Result<Self> {
        let grads = batch
            .iter()
            .map(|s| utility.model.sample_grad(s))
            .collect::<Result<Vec<_>>>()?;
        let base_loss = utility.model.mean_loss(utility.validation, None)?;
        Ok(Self {
            utility,
            grads,
            base_loss,
        })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn step_scale(&self) -> f64 {
        self.utility.learning_rate / self.grads.len() as f64
    }

    /// Utility of a summed member gradient (already scaled).
    fn value_of_delta(&self, delta: &[f64]) -> Result<f64> {
        Ok(self.base_loss - self.utility.model.mean_loss(self.utility.validation, Some(delta))?)
    }

    pub fn value(&self, subset: &[usize]) -> Result<f64> {
        if subset.is_empty() || self.utility.learning_rate == 0.0 {
            return Ok(0.0);
        }
        let mut delta = vec![0.0; self.utility.model.num_params()];
        let scale = self.step_scale();
        for &i in subset {
            let g = self.grads.get(i).ok_or(OracleError::BadSubset {
                index: i,
                len: self.grads.len(),
            })?;
            for (d, v) in delta.iter_mut().zip(g) {
                *d += scale * v;
            }
        }
        self.value_of_delta(&delta)
    }

    fn value_of_mask(&self, mask: u32) -> Result<f64> {
        let members: Vec<usize> = (0..self.len()).filter(|i| mask & (1 << i) != 0).collect();
        self.value(&members)
    }

    /// Marginal contribution of each member along one ordering, indexed by member.
    pub fn marginals(&self, order: &[usize]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        let mut delta = vec![0.0; self.utility.model.num_params()];
        let scale = self.step_scale();
        let mut prev = 0.0;
        for &i in order {
            for (d, v) in delta.iter_mut().zip(&self.grads[i]) {
                *d += scale * v;
            }
            let cur = if self.utility.learning_rate == 0.0 {
                0.0
            } else {
                self.value_of_delta(&delta)?
            };
            out[i] = cur - prev;
            prev = cur;
        }
        Ok(out)
    }
}

impl<'a, M: ValuationModel> UtilityFn<'a, M> {
    pub fn new(model: &'a M, validation: &'a [Sample], learning_rate: f64) -> Self {
        Self {
            model,
            validation,
            learning_rate,
        }
    }

    pub fn subset_utility(&self, batch: &[Sample], subset: &[usize]) -> Result<f64> {
        BatchGame::new(*self, batch)?.value(subset)
    }

    pub fn shapley_exact(&self, batch: &[Sample]) -> Result<ShapleyEstimate> {
        self.shapley_exact_with(batch, Exec::default())
    }

    /// Subset enumeration with each `v(S)` evaluated once per bitmask.
    pub fn shapley_exact_with(&self, batch: &[Sample], exec: Exec) -> Result<ShapleyEstimate> {
        let n = batch.len();
        if n == 0 {
            return Err(OracleError::EmptyBatch);
        }
        if n > MAX_EXACT_BATCH {
            return Err(OracleError::BatchTooLarge(n));
        }
        let game = BatchGame::new(*self, batch)?;
        let values: Vec<f64> = par::map_range(exec, 1 << n, |mask| game.value_of_mask(mask as u32))
            .into_iter()
            .collect::<Result<_>>()?;
        // weight(|S|) = |S|!(n−|S|−1)!/n!
        let factorial = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
        let weights: Vec<f64> = (0..n)
            .map(|s| factorial(s) * factorial(n - s - 1) / factorial(n))
            .collect();
        let phi = (0..n)
            .map(|i| {
                let bit = 1usize << i;
                (0..1usize << n)
                    .filter(|m| m & bit == 0)
                    .map(|m| weights[m.count_ones() as usize] * (values[m | bit] - values[m]))
                    .sum()
            })
            .collect();
        Ok(ShapleyEstimate {
            values: phi,
            stderr: vec![0.0; n],
            permutations_used: 0,
            seed: None,
            exact: true,
        })
    }

    pub fn shapley_mc(&self, batch: &[Sample], permutations: usize, seed: u64) -> Result<ShapleyEstimate> {
        self.shapley_mc_with(batch, permutations, seed, Exec::default())
    }

    /// Average marginal contributions over uniformly sampled orderings.
    ///
    /// Permutation `k` is drawn from its own ChaCha stream, so the estimate
    /// depends only on `seed` and not on the execution mode.
    pub fn shapley_mc_with(
        &self,
        batch: &[Sample],
        permutations: usize,
        seed: u64,
        exec: Exec,
    ) -> Result<ShapleyEstimate> {
        if batch.is_empty() {
            return Err(OracleError::EmptyBatch);
        }
        if permutations == 0 {
            return Err(OracleError::NoPermutations);
        }
        let n = batch.len();
        let game = BatchGame::new(*self, batch)?;
        let rows = par::map_range(exec, permutations, |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            game.marginals(&order)
        });
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let mut est = summarize(&rows, n);
        est.seed = Some(seed);
        Ok(est)
    }

    /// Every one of the `n!` orderings through the permutation estimator.
    pub fn shapley_exhaustive(&self, batch: &[Sample], exec: Exec) -> Result<ShapleyEstimate> {
        let n = batch.len();
        if n == 0 {
            return Err(OracleError::EmptyBatch);
        }
        if n > MAX_EXACT_BATCH {
            return Err(OracleError::BatchTooLarge(n));
        }
        let game = BatchGame::new(*self, batch)?;
        let orders: Vec<Vec<usize>> = (0..n).permutations(n).collect();
        let rows = par::map_slice(exec, &orders, |o| game.marginals(o))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut est = summarize(&rows, n);
        est.exact = true;
        Ok(est)
    }

    /// One-step leave-one-out: `v(B) − v(B∖{i})`.
    pub fn loo_influence(&self, batch: &[Sample]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(OracleError::EmptyBatch);
        }
        let game = BatchGame::new(*self, batch)?;
        let all: Vec<usize> = (0..batch.len()).collect();
        let full = game.value(&all)?;
        (0..batch.len())
            .map(|i| {
                let rest: Vec<usize> = all.iter().copied().filter(|&k| k != i).collect();
                Ok(full - game.value(&rest)?)
            })
            .collect()
    }
}

fn summarize(rows: &[Vec<f64>], n: usize) -> ShapleyEstimate {
    let p = rows.len();
    let mut mean = vec![0.0; n];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= p as f64;
    }
    let stderr = (0..n)
        .map(|i| {
            if p < 2 {
                return 0.0;
            }
            let ss: f64 = rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum();
            (ss / (p - 1) as f64).sqrt() / (p as f64).sqrt()
        })
        .collect();
    ShapleyEstimate {
        values: mean,
        stderr,
        permutations_used: p,
        seed: None,
        exact: false,
    }
}
