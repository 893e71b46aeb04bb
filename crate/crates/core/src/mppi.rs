//! Model predictive path integral (MPPI) solver.
//!
//! Candidate control sequences are drawn around a nominal sequence from a
//! clipped normal distribution, rolled out through the plant model and scored
//! by a cost function. The returned plan is the softmin-weighted average of
//! the candidates with weights `exp(-(J_n - J_min) / T)`.
//!
//! Every sample owns an RNG stream derived from `(seed, solve index, sample
//! index)`, and the weighted sum is accumulated in sample order, so results
//! are bit-identical for any worker count.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::MppiError;
use crate::plant::{DriveState, NavState};

/// States that can be checked for numerical blow-up during a rollout.
pub trait Finite {
    fn is_finite(&self) -> bool;
}

impl Finite for NavState {
    fn is_finite(&self) -> bool {
        NavState::is_finite(self)
    }
}

impl Finite for DriveState {
    fn is_finite(&self) -> bool {
        DriveState::is_finite(self)
    }
}

impl Finite for f64 {
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MppiConfig {
    pub n_samples: usize,
    pub horizon: usize,
    /// Per-dimension lower input bound; its length fixes the input dimension.
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub sigma: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Worker-count hint. 0 or 1 evaluates samples on the calling thread.
    #[serde(default)]
    pub workers: usize,
}

impl MppiConfig {
    pub fn input_dim(&self) -> usize {
        self.input_min.len()
    }

    pub fn sequence_len(&self) -> usize {
        self.horizon * self.input_dim()
    }

    pub fn validate(&self) -> Result<(), MppiError> {
        let bad = |m: &str| Err(MppiError::InvalidConfig(m.to_string()));
        if self.n_samples < 1 {
            return bad("n_samples must be at least 1");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if self.input_min.is_empty() || self.input_min.len() != self.input_max.len() {
            return bad("input bounds must be non-empty and of equal length");
        }
        if self
            .input_min
            .iter()
            .zip(&self.input_max)
            .any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite())
        {
            return bad("input_min must be strictly below input_max");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    /// Zero-input nominal clipped into the bounds.
    pub fn zero_sequence(&self) -> Vec<f64> {
        (0..self.sequence_len())
            .map(|j| {
                let d = j % self.input_dim();
                0.0f64.clamp(self.input_min[d], self.input_max[d])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub min_cost: f64,
    /// Shannon entropy (nats) of the normalized sample weights.
    pub weight_entropy: f64,
    #[serde(skip)]
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct MppiSolution {
    /// Optimal control sequence, row-major `horizon x input_dim`.
    pub sequence: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl MppiSolution {
    pub fn first_input(&self, input_dim: usize) -> &[f64] {
        &self.sequence[..input_dim]
    }
}

/// Simulates the plant along a control sequence.
///
/// Returns `horizon + 1` states: the initial state followed by one state per
/// control step.
pub fn rollout<S, F>(step: F, initial: &S, controls: &[f64], input_dim: usize) -> Result<Vec<S>, MppiError>
where
    S: Finite + Clone,
    F: Fn(&S, &[f64]) -> S,
{
    if input_dim == 0 || controls.len() % input_dim != 0 || controls.is_empty() {
        return Err(MppiError::SequenceLength {
            expected: input_dim.max(1) * (controls.len() / input_dim.max(1)).max(1),
            got: controls.len(),
        });
    }
    let mut states = Vec::with_capacity(controls.len() / input_dim + 1);
    states.push(initial.clone());
    for (i, u) in controls.chunks_exact(input_dim).enumerate() {
        let next = step(&states[i], u);
        if !next.is_finite() {
            return Err(MppiError::NonFiniteState { step: i });
        }
        states.push(next);
    }
    Ok(states)
}

/// Draws `nominal + sigma * z` element-wise and clips each element into its bounds.
pub fn sample_bounded_normal<R: Rng>(
    rng: &mut R,
    nominal: &[f64],
    sigma: f64,
    input_min: &[f64],
    input_max: &[f64],
) -> Vec<f64> {
    let m = input_min.len();
    nominal
        .iter()
        .enumerate()
        .map(|(j, &mu)| {
            let z: f64 = rng.sample(StandardNormal);
            (mu + sigma * z).clamp(input_min[j % m], input_max[j % m])
        })
        .collect()
}

/// Softmin-weighted average of candidate sequences.
///
/// Returns the averaged sequence, the minimum cost, and the weight entropy.
pub fn weighted_average(samples: &[Vec<f64>], costs: &[f64], temperature: f64) -> (Vec<f64>, f64, f64) {
    assert_eq!(samples.len(), costs.len());
    assert!(!samples.is_empty());
    let min_cost = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = costs.iter().map(|c| (-(c - min_cost) / temperature).exp()).collect();
    // The minimizing sample has weight exactly 1, so the sum is >= 1.
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; samples[0].len()];
    for (w, sample) in weights.iter().zip(samples) {
        if *w == 0.0 {
            continue;
        }
        for (o, u) in out.iter_mut().zip(sample) {
            *o += w * u;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    let entropy = weights
        .iter()
        .map(|w| w / total)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    (out, min_cost, entropy)
}

/// Shifts a plan by one step, repeating the last input (warm start).
pub fn shift_warm_start(sequence: &[f64], input_dim: usize) -> Vec<f64> {
    let n = sequence.len();
    if n <= input_dim {
        return sequence.to_vec();
    }
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&sequence[input_dim..]);
    out.extend_from_slice(&sequence[n - input_dim..]);
    out
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the RNG stream for one sample of one solve.
pub fn sample_stream_seed(seed: u64, solve_index: u64, sample_index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(solve_index ^ splitmix64(sample_index.wrapping_add(0x5851_F42D))))
}

/// Stateful MPPI solver. Each call to [`MppiSolver::solve`] advances the solve
/// index so successive control steps draw fresh noise.
pub struct MppiSolver {
    config: MppiConfig,
    pool: Option<rayon::ThreadPool>,
    solves: u64,
}

impl std::fmt::Debug for MppiSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MppiSolver")
            .field("config", &self.config)
            .field("solves", &self.solves)
            .finish()
    }
}

impl MppiSolver {
    pub fn new(config: MppiConfig) -> Result<Self, MppiError> {
        config.validate()?;
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| MppiError::InvalidConfig(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self { config, pool, solves: 0 })
    }

    pub fn config(&self) -> &MppiConfig {
        &self.config
    }

    pub fn solves(&self) -> u64 {
        self.solves
    }

    pub fn reset(&mut self) {
        self.solves = 0;
    }

    pub fn solve<S, F, C>(
        &mut self,
        step: &F,
        cost: &C,
        state: &S,
        nominal: &[f64],
    ) -> Result<MppiSolution, MppiError>
    where
        S: Finite + Clone + Send + Sync,
        F: Fn(&S, &[f64]) -> S + Sync,
        C: Fn(&[S], &[f64]) -> f64 + Sync,
    {
        let index = self.solves;
        self.solves += 1;
        let cfg = &self.config;
        if nominal.len() != cfg.sequence_len() {
            return Err(MppiError::SequenceLength { expected: cfg.sequence_len(), got: nominal.len() });
        }
        let started = Instant::now();
        let m = cfg.input_dim();

        let evaluate = |n: usize| -> Result<(Vec<f64>, f64), MppiError> {
            // Sample 0 re-scores the (clipped) nominal plan itself.
            let controls = if n == 0 {
                nominal
                    .iter()
                    .enumerate()
                    .map(|(j, u)| u.clamp(cfg.input_min[j % m], cfg.input_max[j % m]))
                    .collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_stream_seed(cfg.seed, index, n as u64));
                sample_bounded_normal(&mut rng, nominal, cfg.sigma, &cfg.input_min, &cfg.input_max)
            };
            let states = rollout(step, state, &controls, m)?;
            let j = cost(&states, &controls);
            if !j.is_finite() {
                return Err(MppiError::NonFiniteCost { sample: n });
            }
            Ok((controls, j))
        };

        let results: Vec<Result<(Vec<f64>, f64), MppiError>> = match &self.pool {
            Some(pool) => pool.install(|| (0..cfg.n_samples).into_par_iter().map(evaluate).collect()),
            None => (0..cfg.n_samples).map(evaluate).collect(),
        };
        let mut samples = Vec::with_capacity(cfg.n_samples);
        let mut costs = Vec::with_capacity(cfg.n_samples);
        for r in results {
            let (u, j) = r?;
            samples.push(u);
            costs.push(j);
        }
        let (sequence, min_cost, weight_entropy) = weighted_average(&samples, &costs, cfg.temperature);
        Ok(MppiSolution {
            sequence,
            diagnostics: Diagnostics { min_cost, weight_entropy, elapsed: started.elapsed() },
        })
    }
}
