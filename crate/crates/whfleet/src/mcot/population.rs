//! Candidate source for a water-heater population.
//!
//! Per agent and iteration, the source simulates `Z` switch-schedule
//! candidates on the agent's drain row, scores them against the agent's
//! nominal trajectory, and reduces them to the weighted moment estimate.
//! The inner loop stores each candidate as a packed mode bitset instead of a
//! full state sequence: constraint rows are affine in the modes, so weighted
//! mode averages carry all the information the gradient needs, and the 0/1
//! transport cost is a bitset comparison with the nominal (two trajectories
//! on the same drains coincide exactly when their mode sequences do).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::constraints::{ConstraintSet, LocalCost};
use crate::error::{Error, Result};
use crate::model::{Mode, SwitchProposal, WhParams, WhState};
use crate::rng::substream_seed;

use super::{
    log_weights, AgentBatch, Multipliers, SampleRecord, TrajectorySource, WeightedBatch,
};

/// Packed modes for states 0..=T, T <= 255.
pub(crate) type ModeBits = [u64; 4];

#[inline]
fn set_bit(bits: &mut ModeBits, idx: usize) {
    bits[idx >> 6] |= 1u64 << (idx & 63);
}

#[inline]
fn get_bit(bits: &ModeBits, idx: usize) -> bool {
    bits[idx >> 6] & (1u64 << (idx & 63)) != 0
}

/// One agent's fixed data for a solve.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub params: WhParams,
    pub initial: WhState,
    pub drains: Vec<f64>,
    /// Remaining switch budget for this agent.
    pub budget: usize,
}

struct AgentSim {
    spec: AgentSpec,
    nominal_bits: ModeBits,
    proposal: SwitchProposal,
}

/// Trajectory source over a concrete population.
pub struct PopulationSource {
    agents: Vec<AgentSim>,
    cs: ConstraintSet,
    cost: LocalCost,
    samples_per_agent: usize,
    stream_seed: u64,
    /// Deterministically include the empty schedule as the first candidate
    /// (used by evaluation draws so "do nothing" is always on the menu).
    include_no_switch: bool,
}

impl PopulationSource {
    /// `proposal_for` builds the schedule proposal for a given (horizon,
    /// budget); `stream_seed` is the purpose-level stream for candidate
    /// sampling.
    pub fn new(
        specs: Vec<AgentSpec>,
        cs: ConstraintSet,
        cost: LocalCost,
        samples_per_agent: usize,
        stream_seed: u64,
        proposal_for: impl Fn(usize, usize) -> SwitchProposal,
    ) -> Result<PopulationSource> {
        if specs.is_empty() {
            return Err(Error::config("population: no agents"));
        }
        cost.validate()?;
        let horizon = cs.horizon();
        if horizon + 1 > 256 {
            return Err(Error::config("population: horizon must be at most 255 steps"));
        }
        let agents = specs
            .into_iter()
            .map(|spec| {
                if spec.drains.len() != horizon {
                    return Err(Error::config(format!(
                        "population: agent drain row has {} entries, horizon is {horizon}",
                        spec.drains.len()
                    )));
                }
                let (nominal_bits, _) = simulate_bits(
                    spec.initial,
                    &spec.params,
                    &spec.drains,
                    &[],
                    None,
                );
                let proposal = proposal_for(horizon, spec.budget);
                Ok(AgentSim {
                    spec,
                    nominal_bits,
                    proposal,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PopulationSource {
            agents,
            cs,
            cost,
            samples_per_agent,
            stream_seed,
            include_no_switch: false,
        })
    }

    pub fn with_no_switch_candidate(mut self) -> PopulationSource {
        self.include_no_switch = true;
        self
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.cs
    }

    fn estimate_agent(
        &self,
        idx: usize,
        coeff: &[f64],
        offset: f64,
        epsilon: f64,
        iteration: u64,
        keep_f: bool,
    ) -> AgentBatch {
        let agent = &self.agents[idx];
        let z_count = self.samples_per_agent;
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(
            self.stream_seed,
            idx as u64,
            iteration,
        ));

        let mut schedules: Vec<Vec<u16>> = Vec::with_capacity(z_count);
        let mut bits: Vec<ModeBits> = Vec::with_capacity(z_count);
        let mut ell0s: Vec<f64> = Vec::with_capacity(z_count);
        let mut costs: Vec<f64> = Vec::with_capacity(z_count);
        for z in 0..z_count {
            let schedule = if self.include_no_switch && z == 0 {
                Vec::new()
            } else {
                agent.proposal.sample(&mut rng)
            };
            let (b, lam_dot) = simulate_bits(
                agent.spec.initial,
                &agent.spec.params,
                &agent.spec.drains,
                &schedule,
                Some(coeff),
            );
            let cost = match self.cost {
                LocalCost::ZeroOne => {
                    if b == agent.nominal_bits {
                        0.0
                    } else {
                        1.0
                    }
                }
                _ => unreachable!("validated at construction"),
            };
            ell0s.push(-(lam_dot - offset) - cost);
            costs.push(cost);
            schedules.push(schedule);
            bits.push(b);
        }

        let (weights, log_b) = log_weights(&ell0s, epsilon);

        // Weighted mode means; rows are affine in the modes.
        let horizon = self.cs.horizon();
        let mut mode_means = vec![0.0; horizon + 1];
        let inv_z = 1.0 / z_count as f64;
        for (b, &w) in bits.iter().zip(&weights) {
            let wz = w * inv_z;
            for (t, slot) in mode_means.iter_mut().enumerate() {
                if get_bit(b, t) {
                    *slot += wz;
                }
            }
        }
        let gradient = self.cs.evaluate_modes(&mode_means);

        let ln_z = -(z_count as f64).ln();
        let samples = schedules
            .into_iter()
            .zip(ell0s)
            .zip(costs)
            .zip(weights)
            .zip(bits)
            .map(|((((switches, ell0), cost), weight), b)| SampleRecord {
                switches,
                candidate: 0,
                log_prob: ln_z,
                ell0,
                cost,
                weight,
                f: keep_f.then(|| {
                    let modes: Vec<f64> = (0..=horizon)
                        .map(|t| if get_bit(&b, t) { 1.0 } else { 0.0 })
                        .collect();
                    self.cs.evaluate_modes(&modes)
                }),
            })
            .collect();

        AgentBatch {
            agent: idx,
            agent_weight: 1.0 / self.agents.len() as f64,
            log_b,
            gradient,
            samples,
        }
    }
}

impl TrajectorySource for PopulationSource {
    fn agent_count(&self) -> usize {
        self.agents.len()
    }

    fn constraint_count(&self) -> usize {
        self.cs.len()
    }

    fn estimate(
        &self,
        multipliers: &Multipliers,
        iteration: u64,
        keep_f: bool,
    ) -> Result<WeightedBatch> {
        let (coeff, offset) = self.cs.collapse_multipliers(&multipliers.lambda);
        let agents: Vec<AgentBatch> = (0..self.agents.len())
            .into_par_iter()
            .map(|idx| {
                self.estimate_agent(idx, &coeff, offset, multipliers.epsilon, iteration, keep_f)
            })
            .collect();
        Ok(WeightedBatch { agents })
    }
}

/// Roll the controlled policy, producing the packed mode sequence and, when
/// `coeff` is given, the running sum `sum_t coeff[t] * m_t`.
///
/// The temperature arithmetic mirrors `model::step_temperature` expression
/// for expression so both paths produce bit-identical trajectories.
pub(crate) fn simulate_bits(
    initial: WhState,
    params: &WhParams,
    drains: &[f64],
    switches: &[u16],
    coeff: Option<&[f64]>,
) -> (ModeBits, f64) {
    let mut bits: ModeBits = [0; 4];
    let mut lam_dot = 0.0;
    let mut theta = initial.theta;
    let mut on = initial.mode.is_on();
    if on {
        set_bit(&mut bits, 0);
        if let Some(c) = coeff {
            lam_dot += c[0];
        }
    }
    let heat = params.sigma * params.dt_min * 60.0 * params.p_max;
    let mut next_switch = 0usize;
    for (t, &drain) in drains.iter().enumerate() {
        let target = (t + 1) as u16;
        theta = theta - params.rho * params.dt_min * (theta - params.theta_amb)
            + if on { heat } else { 0.0 }
            - params.sigma * drain;
        if theta >= params.theta_max {
            on = false;
        } else if theta <= params.theta_min {
            on = true;
        } else {
            while next_switch < switches.len() && switches[next_switch] < target {
                next_switch += 1;
            }
            if next_switch < switches.len() && switches[next_switch] == target {
                on = !on;
            }
        }
        if on {
            set_bit(&mut bits, t + 1);
            if let Some(c) = coeff {
                lam_dot += c[t + 1];
            }
        }
    }
    (bits, lam_dot)
}

#[cfg(test)]
pub(crate) fn bits_of(traj: &crate::model::Trajectory) -> ModeBits {
    let mut bits: ModeBits = [0; 4];
    for (t, state) in traj.states.iter().enumerate() {
        if state.mode == Mode::On {
            set_bit(&mut bits, t);
        }
    }
    bits
}
