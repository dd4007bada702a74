//! Proposal distribution over switch schedules.
//!
//! A schedule is a set of at most `budget` distinct switch times in 1..=T.
//! The sampler first picks the schedule size from a configurable class
//! distribution, then the times within the class. The default gives every
//! admissible size equal probability and is uniform over times within a
//! size; per-time weighting is the lever for biasing samples toward regions
//! where control action is expected, which reduces estimator variance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optional non-uniform knobs for the proposal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalWeights {
    /// Relative weight per schedule size 0..=budget. Empty means uniform
    /// over sizes.
    #[serde(default)]
    pub class_weights: Vec<f64>,
    /// Relative weight per switch time 1..=T. Empty means uniform within a
    /// size class. Only supported for budgets up to 2.
    #[serde(default)]
    pub time_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SwitchProposal {
    horizon: usize,
    budget: usize,
    /// P(size = j), j = 0..=effective budget.
    class_probs: Vec<f64>,
    times: Option<TimeWeighting>,
}

#[derive(Debug, Clone)]
struct TimeWeighting {
    log_weights: Vec<f64>,
    /// Cumulative weights for single-switch draws.
    cum_single: Vec<f64>,
    /// Pair list and cumulative products for two-switch draws.
    pairs: Vec<(u16, u16)>,
    cum_pair: Vec<f64>,
    /// Elementary symmetric sums e1, e2 of the weights.
    e1: f64,
    e2: f64,
}

impl SwitchProposal {
    /// Uniform over sizes, uniform over times within a size.
    pub fn uniform(horizon: usize, budget: usize) -> SwitchProposal {
        SwitchProposal::with_weights(horizon, budget, &ProposalWeights::default())
            .expect("uniform proposal is always valid")
    }

    /// Flat over the whole schedule set: every admissible schedule is
    /// equally likely, so larger sizes dominate in proportion to their
    /// count.
    pub fn flat_over_sets(horizon: usize, budget: usize) -> SwitchProposal {
        let b = budget.min(horizon);
        let class_weights: Vec<f64> = (0..=b).map(|j| choose(horizon, j)).collect();
        SwitchProposal::with_weights(
            horizon,
            budget,
            &ProposalWeights {
                class_weights,
                time_weights: Vec::new(),
            },
        )
        .expect("flat proposal is always valid")
    }

    pub fn with_weights(
        horizon: usize,
        budget: usize,
        weights: &ProposalWeights,
    ) -> Result<SwitchProposal> {
        let b = budget.min(horizon);
        let mut class: Vec<f64> = if weights.class_weights.is_empty() {
            vec![1.0; b + 1]
        } else {
            if weights.class_weights.len() < b + 1 {
                return Err(Error::config(format!(
                    "proposal.class_weights: need {} entries for budget {b}, got {}",
                    b + 1,
                    weights.class_weights.len()
                )));
            }
            weights.class_weights[..=b].to_vec()
        };
        if class.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("proposal.class_weights: weights must be >= 0"));
        }
        let total: f64 = class.iter().sum();
        if !(total > 0.0) {
            return Err(Error::config("proposal.class_weights: all weights are zero"));
        }
        for w in &mut class {
            *w /= total;
        }

        let times = if weights.time_weights.is_empty() {
            None
        } else {
            if b > 2 {
                return Err(Error::config(
                    "proposal.time_weights: only supported for budgets up to 2",
                ));
            }
            if weights.time_weights.len() != horizon {
                return Err(Error::config(format!(
                    "proposal.time_weights: need {horizon} entries (one per switch time), got {}",
                    weights.time_weights.len()
                )));
            }
            if weights.time_weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
                return Err(Error::config(
                    "proposal.time_weights: weights must be strictly positive",
                ));
            }
            Some(TimeWeighting::new(&weights.time_weights))
        };

        Ok(SwitchProposal {
            horizon,
            budget: b,
            class_probs: class,
            times,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Draw a schedule (sorted switch times in 1..=T).
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<u16> {
        let size = self.sample_class(rng);
        if size == 0 {
            return Vec::new();
        }
        match &self.times {
            None => uniform_subset(self.horizon, size, rng),
            Some(tw) => tw.sample(size, rng),
        }
    }

    /// Log-probability of a schedule under this proposal. The schedule must
    /// be sorted, duplicate-free, within the horizon and budget.
    pub fn log_prob(&self, switches: &[u16]) -> f64 {
        let j = switches.len();
        debug_assert!(j <= self.budget);
        debug_assert!(switches.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(switches.iter().all(|&t| t >= 1 && t as usize <= self.horizon));
        let class = self.class_probs[j].ln();
        match &self.times {
            None => class - ln_choose(self.horizon, j),
            Some(tw) => {
                let within = match j {
                    0 => 0.0,
                    1 => tw.log_weights[switches[0] as usize - 1] - tw.e1.ln(),
                    2 => {
                        tw.log_weights[switches[0] as usize - 1]
                            + tw.log_weights[switches[1] as usize - 1]
                            - tw.e2.ln()
                    }
                    _ => unreachable!("time weighting is restricted to budget <= 2"),
                };
                class + within
            }
        }
    }

    fn sample_class<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, &p) in self.class_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        self.class_probs.len() - 1
    }
}

impl TimeWeighting {
    fn new(weights: &[f64]) -> TimeWeighting {
        let e1: f64 = weights.iter().sum();
        let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
        let e2 = 0.5 * (e1 * e1 - sum_sq);
        let mut cum_single = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in weights {
            acc += w;
            cum_single.push(acc);
        }
        let mut pairs = Vec::new();
        let mut cum_pair = Vec::new();
        let mut acc = 0.0;
        for s in 0..weights.len() {
            for t in (s + 1)..weights.len() {
                acc += weights[s] * weights[t];
                pairs.push(((s + 1) as u16, (t + 1) as u16));
                cum_pair.push(acc);
            }
        }
        TimeWeighting {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            cum_single,
            pairs,
            cum_pair,
            e1,
            e2,
        }
    }

    fn sample<R: Rng>(&self, size: usize, rng: &mut R) -> Vec<u16> {
        match size {
            1 => {
                let u: f64 = rng.random_range(0.0..self.e1);
                let idx = self.cum_single.partition_point(|&c| c <= u);
                vec![(idx + 1) as u16]
            }
            2 => {
                let u: f64 = rng.random_range(0.0..self.e2);
                let idx = self.cum_pair.partition_point(|&c| c <= u).min(self.pairs.len() - 1);
                let (s, t) = self.pairs[idx];
                vec![s, t]
            }
            _ => unreachable!("time weighting is restricted to budget <= 2"),
        }
    }
}

/// Uniform `size`-subset of {1..=n} via Floyd's algorithm, returned sorted.
fn uniform_subset<R: Rng>(n: usize, size: usize, rng: &mut R) -> Vec<u16> {
    debug_assert!(size <= n);
    let mut picked: Vec<u16> = Vec::with_capacity(size);
    for i in (n - size + 1)..=n {
        let r = rng.random_range(1..=i) as u16;
        if picked.contains(&r) {
            picked.push(i as u16);
        } else {
            picked.push(r);
        }
    }
    picked.sort_unstable();
    picked
}

fn choose(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut value = 1.0;
    for i in 0..k {
        value *= (n - i) as f64 / (i + 1) as f64;
    }
    value
}

fn ln_choose(n: usize, k: usize) -> f64 {
    choose(n, k).ln()
}
