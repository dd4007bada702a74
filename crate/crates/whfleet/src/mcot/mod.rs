//! Dual solver for the moment-constrained transport problem.
//!
//! For multipliers `lambda >= 0` on the aggregate constraint rows, each
//! agent's candidate trajectories are scored by
//! `ell0(x, y) = -lambda^T f(y) - c(x, y)` against the agent's nominal
//! trajectory `x`; the per-agent log-partition value and self-normalized
//! importance weights come from a log-sum-exp over the candidate batch, and
//! the weighted constraint moments averaged over agents estimate the dual
//! gradient. Multiplier ascent with nonnegativity projection then grows the
//! multipliers of violated rows until the weighted population satisfies the
//! constraints.
//!
//! Candidate batches are produced by a [`TrajectorySource`]; the water-heater
//! population source samples switch schedules, while the finite-instance
//! source used in tests can enumerate its whole candidate space, which turns
//! the stochastic gradient into an exact one.

mod finite;
mod population;

pub use finite::{all_schedules, enumerate_population, FiniteSource, SampleMode};
pub use population::{AgentSpec, PopulationSource};

use serde::{Deserialize, Serialize};

use crate::constraints::{local_cost, ConstraintSet, LocalCost};
use crate::error::{Error, Result};
use crate::model::Trajectory;

/// Dual variables: one nonnegative multiplier per constraint row plus the
/// regularization weight. The solver maintains the sign through projection;
/// scalar online multipliers may temporarily carry free-signed values.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub lambda: Vec<f64>,
    pub epsilon: f64,
}

impl Multipliers {
    pub fn zeros(rows: usize, epsilon: f64) -> Multipliers {
        Multipliers {
            lambda: vec![0.0; rows],
            epsilon,
        }
    }

    pub fn new(lambda: Vec<f64>, epsilon: f64) -> Result<Multipliers> {
        if !(epsilon > 0.0) {
            return Err(Error::config("multipliers: epsilon must be > 0"));
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::config("multipliers: lambda must be finite"));
        }
        Ok(Multipliers { lambda, epsilon })
    }

    /// Rescaled multipliers `zeta = lambda / epsilon`.
    pub fn zeta(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| l / self.epsilon).collect()
    }
}

/// Step-size schedule for the multiplier ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `rho_k = rho0 / (1 + k / k_half)`
    Harmonic { rho0: f64, k_half: f64 },
    Constant { rho: f64 },
}

impl StepSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Harmonic { rho0, k_half } => rho0 / (1.0 + k as f64 / k_half),
            StepSchedule::Constant { rho } => rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Harmonic { rho0, k_half } => rho0 > 0.0 && k_half > 0.0,
            StepSchedule::Constant { rho } => rho > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("step schedule: step sizes must be > 0"))
        }
    }
}

/// Solver knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Candidate trajectories per agent per iteration.
    pub samples_per_agent: usize,
    /// Ascent iterations.
    pub iterations: usize,
    pub step: StepSchedule,
    pub epsilon: f64,
    /// Multipliers grow where constraints are violated (the ascent
    /// direction); disabling flips the update sign.
    pub ascent_on_violation: bool,
    /// Componentwise ceiling on the multipliers; reaching it flags the
    /// subproblem as infeasible-looking.
    pub lambda_cap: f64,
    /// Retain per-sample constraint vectors in the returned batches
    /// (needed by the Hessian diagnostic and some tests).
    pub keep_f: bool,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_agent == 0 || self.iterations == 0 {
            return Err(Error::config(
                "solver: samples_per_agent and iterations must be >= 1",
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("solver: epsilon must be > 0"));
        }
        if !(self.lambda_cap > 0.0) {
            return Err(Error::config("solver: lambda_cap must be > 0"));
        }
        self.step.validate()
    }
}

/// Score of a candidate against its agent's nominal trajectory.
pub fn ell0(
    nominal: &Trajectory,
    candidate: &Trajectory,
    multipliers: &Multipliers,
    cs: &ConstraintSet,
    cost: LocalCost,
) -> f64 {
    let f = cs.evaluate(candidate);
    let dot: f64 = f.iter().zip(&multipliers.lambda).map(|(v, l)| v * l).sum();
    -dot - local_cost(nominal, candidate, cost)
}

/// Self-normalized weights and log-partition value for one agent's batch
/// under uniform sampling: `log_b = eps * (logsumexp_z(ell0_z / eps) - ln Z)`
/// and `w_z` the softmax of `ell0_z / eps` scaled by `Z`, so
/// `(1/Z) sum_z w_z = 1` to machine precision (exactly, for a single sample
/// or equal scores).
pub fn log_weights(ell0s: &[f64], epsilon: f64) -> (Vec<f64>, f64) {
    debug_assert!(!ell0s.is_empty());
    let z = ell0s.len() as f64;
    let mut max_term = f64::NEG_INFINITY;
    for &e in ell0s {
        max_term = max_term.max(e / epsilon);
    }
    let exps: Vec<f64> = ell0s.iter().map(|&e| (e / epsilon - max_term).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_b = epsilon * (max_term + sum.ln() - z.ln());
    let weights = exps.iter().map(|&e| e * z / sum).collect();
    (weights, log_b)
}

/// Generalization to non-uniform enumeration weights `p_z` (candidate
/// probabilities for exhaustive batches): `sum_z p_z w_z = 1` with
/// `log_b = eps * logsumexp_z(log p_z + ell0_z / eps)`.
pub fn log_weights_weighted(ell0s: &[f64], log_probs: &[f64], epsilon: f64) -> (Vec<f64>, f64) {
    debug_assert_eq!(ell0s.len(), log_probs.len());
    let mut max_term = f64::NEG_INFINITY;
    for (&e, &lp) in ell0s.iter().zip(log_probs) {
        max_term = max_term.max(lp + e / epsilon);
    }
    let exps: Vec<f64> = ell0s
        .iter()
        .zip(log_probs)
        .map(|(&e, &lp)| (lp + e / epsilon - max_term).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    let log_b = epsilon * (max_term + sum.ln());
    let weights = exps
        .iter()
        .zip(log_probs)
        .map(|(&e, &lp)| e / (sum * lp.exp()))
        .collect();
    (weights, log_b)
}

/// One candidate in a weighted batch.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    /// Switch schedule of the candidate (empty for finite instances, where
    /// `candidate` indexes the instance's trajectory table instead).
    pub switches: Vec<u16>,
    /// Candidate index for finite instances.
    pub candidate: usize,
    /// Enumeration log-probability of the candidate in its batch.
    pub log_prob: f64,
    pub ell0: f64,
    pub cost: f64,
    pub weight: f64,
    /// Constraint vector, retained when `keep_f` is set.
    pub f: Option<Vec<f64>>,
}

/// One agent's importance-weighted candidate batch.
#[derive(Debug, Clone)]
pub struct AgentBatch {
    pub agent: usize,
    /// Population weight of the agent (1/N, or the nominal-law mass on
    /// finite instances). Sums to one over the batch.
    pub agent_weight: f64,
    pub log_b: f64,
    /// Weighted moment estimate of this agent: `sum_z p_z w_z f(y_z)`.
    pub gradient: Vec<f64>,
    pub samples: Vec<SampleRecord>,
}

impl AgentBatch {
    /// `|sum_z p_z w_z - 1|` for this agent.
    pub fn weight_normalization_error(&self) -> f64 {
        let total: f64 = self
            .samples
            .iter()
            .map(|s| s.log_prob.exp() * s.weight)
            .sum();
        (total - 1.0).abs()
    }
}

/// All agents' batches from one gradient estimation.
#[derive(Debug, Clone, Default)]
pub struct WeightedBatch {
    pub agents: Vec<AgentBatch>,
}

impl WeightedBatch {
    pub fn max_weight_normalization_error(&self) -> f64 {
        self.agents
            .iter()
            .map(|a| a.weight_normalization_error())
            .fold(0.0, f64::max)
    }

    /// Empirical dual value at arbitrary multipliers, assembled from the
    /// stored samples: `-sum_i agent_weight_i * log_b_i(lambda)`. Requires
    /// `keep_f`.
    pub fn empirical_dual_value(&self, multipliers: &Multipliers) -> Result<f64> {
        let mut value = 0.0;
        for agent in &self.agents {
            let mut ell0s = Vec::with_capacity(agent.samples.len());
            let mut log_probs = Vec::with_capacity(agent.samples.len());
            for s in &agent.samples {
                let f = s
                    .f
                    .as_ref()
                    .ok_or_else(|| Error::solver("empirical_dual_value requires keep_f"))?;
                let dot: f64 = f.iter().zip(&multipliers.lambda).map(|(v, l)| v * l).sum();
                ell0s.push(-dot - s.cost);
                log_probs.push(s.log_prob);
            }
            let (_, log_b) = log_weights_weighted(&ell0s, &log_probs, multipliers.epsilon);
            value -= agent.agent_weight * log_b;
        }
        Ok(value)
    }

    /// Gradient estimate at arbitrary multipliers from the stored samples
    /// (common random numbers). Requires `keep_f`.
    pub fn empirical_gradient(&self, multipliers: &Multipliers) -> Result<Vec<f64>> {
        let rows = self
            .agents
            .first()
            .map(|a| a.gradient.len())
            .unwrap_or_default();
        let mut total = vec![0.0; rows];
        for agent in &self.agents {
            let mut ell0s = Vec::with_capacity(agent.samples.len());
            let mut log_probs = Vec::with_capacity(agent.samples.len());
            for s in &agent.samples {
                let f = s
                    .f
                    .as_ref()
                    .ok_or_else(|| Error::solver("empirical_gradient requires keep_f"))?;
                let dot: f64 = f.iter().zip(&multipliers.lambda).map(|(v, l)| v * l).sum();
                ell0s.push(-dot - s.cost);
                log_probs.push(s.log_prob);
            }
            let (weights, _) = log_weights_weighted(&ell0s, &log_probs, multipliers.epsilon);
            for (s, w) in agent.samples.iter().zip(weights) {
                let p = s.log_prob.exp();
                for (slot, v) in total.iter_mut().zip(s.f.as_ref().unwrap()) {
                    *slot += agent.agent_weight * p * w * v;
                }
            }
        }
        Ok(total)
    }
}

/// Provider of per-agent candidate batches.
pub trait TrajectorySource: Sync {
    fn agent_count(&self) -> usize;
    fn constraint_count(&self) -> usize;

    /// Estimate every agent's weighted moment at the given multipliers.
    /// `iteration` seeds the per-(agent, iteration) sample streams.
    fn estimate(
        &self,
        multipliers: &Multipliers,
        iteration: u64,
        keep_f: bool,
    ) -> Result<WeightedBatch>;
}

/// Estimated dual gradient: agent-weighted mean of the per-agent weighted
/// moments, reduced pairwise in a fixed order so results do not depend on
/// thread scheduling. Also returns the batch for reuse.
pub fn estimate_gradient<S: TrajectorySource + ?Sized>(
    source: &S,
    multipliers: &Multipliers,
    iteration: u64,
    keep_f: bool,
) -> Result<(Vec<f64>, WeightedBatch)> {
    let batch = source.estimate(multipliers, iteration, keep_f)?;
    let rows = source.constraint_count();
    let mut terms: Vec<Vec<f64>> = batch
        .agents
        .iter()
        .map(|a| {
            debug_assert_eq!(a.gradient.len(), rows);
            a.gradient.iter().map(|g| g * a.agent_weight).collect()
        })
        .collect();
    let gradient = tree_sum(&mut terms, rows);
    Ok((gradient, batch))
}

/// Hessian diagnostic: agent-averaged weighted second moment of `f` minus
/// the outer product of the agent's weighted mean. Symmetric and positive
/// semidefinite up to sampling noise. Requires a batch built with `keep_f`.
pub fn estimate_hessian(batch: &WeightedBatch) -> Result<Vec<Vec<f64>>> {
    let rows = batch
        .agents
        .first()
        .map(|a| a.gradient.len())
        .unwrap_or_default();
    let mut h = vec![vec![0.0; rows]; rows];
    for agent in &batch.agents {
        let mut second = vec![vec![0.0; rows]; rows];
        for s in &agent.samples {
            let f = s
                .f
                .as_ref()
                .ok_or_else(|| Error::solver("estimate_hessian requires keep_f"))?;
            let pw = s.log_prob.exp() * s.weight;
            for i in 0..rows {
                let fi = pw * f[i];
                for j in 0..rows {
                    second[i][j] += fi * f[j];
                }
            }
        }
        for i in 0..rows {
            for j in 0..rows {
                h[i][j] +=
                    agent.agent_weight * (second[i][j] - agent.gradient[i] * agent.gradient[j]);
            }
        }
    }
    Ok(h)
}

/// One row of the solver trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub grad_norm: f64,
    /// Largest estimated constraint moment (positive means violated).
    pub max_violation: f64,
    /// Fraction of multiplier components at zero.
    pub lambda_sparsity: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub multipliers: Multipliers,
    pub trace: Vec<TraceRow>,
    /// Batch from the last iteration (weights computed at the pre-update
    /// multipliers).
    pub final_batch: WeightedBatch,
    /// Some multiplier ended at the configured cap; the subproblem looks
    /// infeasible.
    pub hit_cap: bool,
    /// Largest per-agent weight-normalization error seen across the run.
    pub max_weight_error: f64,
}

/// Multiplier ascent: `lambda <- clamp(lambda + rho_k * G_k, 0, cap)` with
/// `G_k` the estimated constraint moments (sign flipped when
/// `ascent_on_violation` is off).
pub fn solve<S: TrajectorySource + ?Sized>(
    source: &S,
    config: &SolverConfig,
    initial: Option<Vec<f64>>,
) -> Result<SolveResult> {
    config.validate()?;
    let rows = source.constraint_count();
    let mut lambda = match initial {
        Some(l) => {
            if l.len() != rows {
                return Err(Error::config(format!(
                    "solve: warm start has {} components, constraint set has {rows}",
                    l.len()
                )));
            }
            l.iter().map(|v| v.clamp(0.0, config.lambda_cap)).collect()
        }
        None => vec![0.0; rows],
    };

    let mut trace = Vec::with_capacity(config.iterations);
    let mut final_batch = WeightedBatch::default();
    let mut max_weight_error: f64 = 0.0;
    let mut hit_cap = false;

    for k in 0..config.iterations {
        if rows == 0 {
            trace.push(TraceRow {
                k,
                grad_norm: 0.0,
                max_violation: 0.0,
                lambda_sparsity: 1.0,
            });
            continue;
        }
        let multipliers = Multipliers {
            lambda: lambda.clone(),
            epsilon: config.epsilon,
        };
        let keep = config.keep_f && k + 1 == config.iterations;
        let (gradient, batch) = estimate_gradient(source, &multipliers, k as u64, keep)?;
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::solver(format!(
                "non-finite gradient at iteration {k}: {gradient:?}"
            )));
        }
        max_weight_error = max_weight_error.max(batch.max_weight_normalization_error());

        let grad_norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        let max_violation = gradient.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let zeros = lambda.iter().filter(|&&l| l == 0.0).count();
        trace.push(TraceRow {
            k,
            grad_norm,
            max_violation,
            lambda_sparsity: zeros as f64 / rows as f64,
        });

        let rho = config.step.at(k);
        let direction = if config.ascent_on_violation { 1.0 } else { -1.0 };
        for (l, g) in lambda.iter_mut().zip(&gradient) {
            *l = (*l + direction * rho * g).clamp(0.0, config.lambda_cap);
        }
        if k + 1 == config.iterations {
            final_batch = batch;
        }
    }
    hit_cap |= lambda.iter().any(|&l| l >= config.lambda_cap * (1.0 - 1e-9));

    Ok(SolveResult {
        multipliers: Multipliers {
            lambda,
            epsilon: config.epsilon,
        },
        trace,
        final_batch,
        hit_cap,
        max_weight_error,
    })
}

/// Pairwise summation of equal-length vectors in index order.
fn tree_sum(terms: &mut Vec<Vec<f64>>, rows: usize) -> Vec<f64> {
    if terms.is_empty() {
        return vec![0.0; rows];
    }
    let mut len = terms.len();
    while len > 1 {
        let half = len.div_ceil(2);
        for i in 0..len / 2 {
            let (head, tail) = terms.split_at_mut(half);
            let src = &tail[i];
            for (slot, v) in head[i].iter_mut().zip(src) {
                *slot += v;
            }
        }
        len = half;
    }
    std::mem::take(&mut terms[0])
}

#[cfg(test)]
mod tests;
