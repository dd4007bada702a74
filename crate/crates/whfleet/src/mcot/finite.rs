//! Candidate source over an enumerated finite instance.
//!
//! Agents are the support points of the nominal law, weighted by their
//! probability mass. Candidate batches either enumerate the agent's whole
//! block under the sampling law (which makes the gradient estimator exact)
//! or draw from it i.i.d. like the production path does.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::oracle::FiniteInstance;
use crate::rng::substream_seed;

use super::{
    log_weights, log_weights_weighted, AgentBatch, Multipliers, SampleRecord, TrajectorySource,
    WeightedBatch,
};

/// How candidate batches are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Enumerate the agent's block with its conditional probabilities.
    Exhaustive,
    /// Draw this many i.i.d. candidates from the block-conditional law.
    Sampled(usize),
}

pub struct FiniteSource<'a> {
    inst: &'a FiniteInstance,
    mode: SampleMode,
    stream_seed: u64,
    /// Nominal support points and their masses.
    agents: Vec<usize>,
    weights: Vec<f64>,
    /// Per agent: block candidates with positive sampling mass, their
    /// conditional probabilities, and the cumulative sums for draws.
    candidates: Vec<Vec<usize>>,
    cond_probs: Vec<Vec<f64>>,
    cond_cum: Vec<Vec<f64>>,
}

impl<'a> FiniteSource<'a> {
    pub fn new(
        inst: &'a FiniteInstance,
        mode: SampleMode,
        stream_seed: u64,
    ) -> Result<FiniteSource<'a>> {
        inst.validate()?;
        if let SampleMode::Sampled(0) = mode {
            return Err(Error::config("finite source: sample count must be >= 1"));
        }
        let n = inst.points();
        let mut agents = Vec::new();
        let mut weights = Vec::new();
        let mut candidates = Vec::new();
        let mut cond_probs = Vec::new();
        let mut cond_cum = Vec::new();
        for x in 0..n {
            if inst.mu1[x] <= 0.0 {
                continue;
            }
            let block = inst.blocks[x];
            let members: Vec<usize> = (0..n)
                .filter(|&y| inst.blocks[y] == block && inst.mu2[y] > 0.0)
                .collect();
            let mass: f64 = members.iter().map(|&y| inst.mu2[y]).sum();
            let probs: Vec<f64> = members.iter().map(|&y| inst.mu2[y] / mass).collect();
            let mut cum = Vec::with_capacity(probs.len());
            let mut acc = 0.0;
            for &p in &probs {
                acc += p;
                cum.push(acc);
            }
            agents.push(x);
            weights.push(inst.mu1[x]);
            candidates.push(members);
            cond_probs.push(probs);
            cond_cum.push(cum);
        }
        Ok(FiniteSource {
            inst,
            mode,
            stream_seed,
            agents,
            weights,
            candidates,
            cond_probs,
            cond_cum,
        })
    }

    pub fn instance(&self) -> &FiniteInstance {
        self.inst
    }

    fn batch_for(
        &self,
        idx: usize,
        multipliers: &Multipliers,
        iteration: u64,
        keep_f: bool,
    ) -> AgentBatch {
        let x = self.agents[idx];
        let rows = self.inst.rows();
        let (picks, log_probs): (Vec<usize>, Vec<f64>) = match self.mode {
            SampleMode::Exhaustive => (
                self.candidates[idx].clone(),
                self.cond_probs[idx].iter().map(|p| p.ln()).collect(),
            ),
            SampleMode::Sampled(z) => {
                let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(
                    self.stream_seed,
                    idx as u64,
                    iteration,
                ));
                let ln_z = -(z as f64).ln();
                let picks = (0..z)
                    .map(|_| {
                        let u: f64 = rng.random();
                        let slot = self.cond_cum[idx].partition_point(|&c| c <= u);
                        self.candidates[idx][slot.min(self.candidates[idx].len() - 1)]
                    })
                    .collect();
                (picks, vec![ln_z; z])
            }
        };

        let ell0s: Vec<f64> = picks
            .iter()
            .map(|&y| self.inst.ell0(&multipliers.lambda, x, y))
            .collect();
        let (weights, log_b) = match self.mode {
            SampleMode::Exhaustive => {
                log_weights_weighted(&ell0s, &log_probs, multipliers.epsilon)
            }
            SampleMode::Sampled(_) => log_weights(&ell0s, multipliers.epsilon),
        };

        let mut gradient = vec![0.0; rows];
        for ((&y, &w), &lp) in picks.iter().zip(&weights).zip(&log_probs) {
            let pw = lp.exp() * w;
            for (slot, v) in gradient.iter_mut().zip(&self.inst.f[y]) {
                *slot += pw * v;
            }
        }

        let samples = picks
            .iter()
            .zip(&ell0s)
            .zip(&weights)
            .zip(&log_probs)
            .map(|(((&y, &ell0), &weight), &log_prob)| SampleRecord {
                switches: Vec::new(),
                candidate: y,
                log_prob,
                ell0,
                cost: self.inst.c[x][y],
                weight,
                f: keep_f.then(|| self.inst.f[y].clone()),
            })
            .collect();

        AgentBatch {
            agent: x,
            agent_weight: self.weights[idx],
            log_b,
            gradient,
            samples,
        }
    }
}

/// Enumerate a tiny water-heater population into a finite instance: one
/// point per (agent, switch schedule), blocks are agents, the sampling mass
/// of a point is the agent share times its schedule's proposal probability,
/// and the nominal law sits on the empty schedules. This is the bridge that
/// lets the enumeration oracle check the production estimator.
pub fn enumerate_population(
    specs: &[super::AgentSpec],
    cs: &crate::constraints::ConstraintSet,
    cost: crate::constraints::LocalCost,
    epsilon: f64,
    proposal_for: impl Fn(usize, usize) -> crate::model::SwitchProposal,
) -> Result<FiniteInstance> {
    use crate::model::simulate;

    cost.validate()?;
    let horizon = cs.horizon();
    let mut blocks = Vec::new();
    let mut mu1 = Vec::new();
    let mut mu2 = Vec::new();
    let mut f = Vec::new();
    let mut trajectories = Vec::new();
    let agent_share = 1.0 / specs.len() as f64;

    for (agent, spec) in specs.iter().enumerate() {
        if spec.drains.len() != horizon {
            return Err(Error::config("enumerate: drain row does not match horizon"));
        }
        let proposal = proposal_for(horizon, spec.budget);
        for schedule in all_schedules(horizon, spec.budget) {
            let traj = simulate(spec.initial, &spec.params, &spec.drains, &schedule);
            blocks.push(agent as u32);
            mu1.push(if schedule.is_empty() { agent_share } else { 0.0 });
            mu2.push(agent_share * proposal.log_prob(&schedule).exp());
            f.push(cs.evaluate(&traj));
            trajectories.push(traj);
        }
    }

    let n = trajectories.len();
    if n > crate::oracle::MAX_POINTS {
        return Err(Error::config(format!(
            "enumerate: {n} points exceed the oracle cap"
        )));
    }
    let mut c = vec![vec![0.0; n]; n];
    for x in 0..n {
        for y in 0..n {
            if x != y && blocks[x] == blocks[y] {
                c[x][y] = if trajectories[x].states == trajectories[y].states {
                    0.0
                } else {
                    1.0
                };
            }
        }
    }

    let inst = FiniteInstance {
        blocks,
        mu1,
        mu2,
        f,
        c,
        epsilon,
    };
    inst.validate()?;
    Ok(inst)
}

/// All switch schedules of size 0..=budget over times 1..=horizon.
pub fn all_schedules(horizon: usize, budget: usize) -> Vec<Vec<u16>> {
    let mut out = vec![Vec::new()];
    if budget >= 1 {
        for t in 1..=horizon as u16 {
            out.push(vec![t]);
        }
    }
    if budget >= 2 {
        for s in 1..=horizon as u16 {
            for t in (s + 1)..=horizon as u16 {
                out.push(vec![s, t]);
            }
        }
    }
    assert!(budget <= 2, "enumeration is implemented for budgets up to 2");
    out
}

impl TrajectorySource for FiniteSource<'_> {
    fn agent_count(&self) -> usize {
        self.agents.len()
    }

    fn constraint_count(&self) -> usize {
        self.inst.rows()
    }

    fn estimate(
        &self,
        multipliers: &Multipliers,
        iteration: u64,
        keep_f: bool,
    ) -> Result<WeightedBatch> {
        let agents = (0..self.agents.len())
            .map(|idx| self.batch_for(idx, multipliers, iteration, keep_f))
            .collect();
        Ok(WeightedBatch { agents })
    }
}
