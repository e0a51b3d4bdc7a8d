//! Keyed random streams.
//!
//! Every rollout draws from a ChaCha8 stream whose 256-bit key is the tuple
//! `(master_seed, trial, decision, rollout)`. ChaCha is a counter-mode
//! generator, so a stream is a pure function of its key: the same key always
//! replays the same increments no matter which worker evaluates it or in what
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Decision index reserved for the noise that drives the true system in a
/// closed-loop trial (as opposed to the planning rollouts at each decision).
pub const SYSTEM_DECISION: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStreamKey {
    pub master_seed: u64,
    pub trial_index: u64,
    pub decision_index: u64,
    pub rollout_index: u64,
}

impl RngStreamKey {
    pub fn new(master_seed: u64, trial_index: u64, decision_index: u64, rollout_index: u64) -> Self {
        Self {
            master_seed,
            trial_index,
            decision_index,
            rollout_index,
        }
    }

    /// Key of the noise driving the true system during `trial`.
    pub fn system(master_seed: u64, trial_index: u64) -> Self {
        Self::new(master_seed, trial_index, SYSTEM_DECISION, 0)
    }

    pub fn with_rollout(self, rollout_index: u64) -> Self {
        Self {
            rollout_index,
            ..self
        }
    }

    pub fn with_decision(self, decision_index: u64) -> Self {
        Self {
            decision_index,
            ..self
        }
    }

    pub fn stream(&self) -> NoiseStream {
        let mut seed = [0u8; 32];
        for (chunk, word) in seed.chunks_exact_mut(8).zip([
            self.master_seed,
            self.trial_index,
            self.decision_index,
            self.rollout_index,
        ]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        NoiseStream {
            rng: ChaCha8Rng::from_seed(seed),
        }
    }
}

/// Standard-normal source bound to one key.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Fill `dw` with independent N(0, step) draws.
    #[inline]
    pub fn fill_increment(&mut self, step: f64, dw: &mut [f64]) {
        let scale = step.sqrt();
        for w in dw.iter_mut() {
            *w = scale * self.standard_normal();
        }
    }
}

/// One Wiener increment over a step of length `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrement {
    pub dw: Vec<f64>,
    pub step: f64,
}

/// `count` increments of a `k`-dimensional Wiener process with step `h`,
/// drawn from the stream identified by `key`.
///
/// Rollouts consume their stream in exactly this order, so
/// `wiener_increments(key, k, h, 1)[0]` is the first increment of the rollout
/// simulated under `key` with a full first step.
pub fn wiener_increments(key: RngStreamKey, k: usize, h: f64, count: usize) -> Vec<NoiseIncrement> {
    assert!(h > 0.0, "step must be positive");
    let mut stream = key.stream();
    (0..count)
        .map(|_| {
            let mut dw = vec![0.0; k];
            stream.fill_increment(h, &mut dw);
            NoiseIncrement { dw, step: h }
        })
        .collect()
}
