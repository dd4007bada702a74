//! Experiment loops: one-shot train-and-evaluate, receding-horizon control,
//! and online signal tracking.
//!
//! All three share the same inner machinery: solve (or nudge) the dual
//! multipliers on training drains, draw one candidate per agent from the
//! importance-weighted batch, and realize it on the validation (truth)
//! drains. The receding-horizon loop re-roots the problem at the current
//! population state every interval and commits only the first step; the
//! online loop degenerates the constraint set to the single next-step
//! tracking row, whose scalar multiplier is carried and updated from the
//! realized deviation.

use rand::Rng;

use crate::constraints::{aggregate_consumption, ConstraintRow, ConstraintSet, LocalCost};
use crate::error::{Error, Result};
use crate::mcot::{
    estimate_gradient, solve, AgentSpec, Multipliers, PopulationSource, SolveResult, SolverConfig,
    StepSchedule, TrajectorySource,
};
use crate::model::{
    controlled_step, simulate, DrainScenario, Mode, ProposalWeights, SwitchProposal, Trajectory,
    WhParams, WhState,
};
use crate::rng::{stream_seed, substream_rng, substream_seed, Purpose};

/// One agent of the controlled population.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub params: WhParams,
    pub state: WhState,
    /// Remaining switch budget; only ever decreases.
    pub budget: usize,
}

/// The whole fleet plus its drain scenario.
#[derive(Debug, Clone)]
pub struct PopulationState {
    pub agents: Vec<AgentState>,
    pub drains: DrainScenario,
}

impl PopulationState {
    pub fn new(agents: Vec<AgentState>, drains: DrainScenario) -> Result<PopulationState> {
        if agents.is_empty() {
            return Err(Error::config("population: no agents"));
        }
        if drains.n_agents() != agents.len() {
            return Err(Error::config(format!(
                "population: {} agents but drains carry {}",
                agents.len(),
                drains.n_agents()
            )));
        }
        Ok(PopulationState { agents, drains })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.drains.horizon()
    }

    /// Nominal (uncontrolled) trajectories on the validation drains.
    pub fn nominal_on_validation(&self) -> Vec<Trajectory> {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, a)| simulate(a.state, &a.params, self.drains.validation_row(i), &[]))
            .collect()
    }

    /// Nominal trajectories on the training drains.
    pub fn nominal_on_training(&self) -> Vec<Trajectory> {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, a)| simulate(a.state, &a.params, self.drains.training_row(i), &[]))
            .collect()
    }
}

/// Configuration of the one-shot train-and-evaluate loop.
#[derive(Debug, Clone)]
pub struct TrainEvalConfig {
    pub solver: SolverConfig,
    /// Candidates per agent in the evaluation draw.
    pub z_eval: usize,
    pub proposal: ProposalWeights,
}

/// Outcome of an evaluation pass.
#[derive(Debug, Clone)]
pub struct EvaluationResult {
    /// One realized trajectory per agent, on validation drains.
    pub chosen: Vec<Trajectory>,
    /// Fleet consumption of the chosen trajectories, per state time.
    pub aggregate: Vec<f64>,
    /// Realized constraint moments (population mean of every row).
    pub moments: Vec<f64>,
}

impl EvaluationResult {
    fn from_chosen(chosen: Vec<Trajectory>, cs: &ConstraintSet) -> EvaluationResult {
        let aggregate = aggregate_consumption(&chosen);
        let mut moments = vec![0.0; cs.len()];
        for traj in &chosen {
            for (slot, v) in moments.iter_mut().zip(cs.evaluate(traj)) {
                *slot += v / chosen.len() as f64;
            }
        }
        EvaluationResult {
            chosen,
            aggregate,
            moments,
        }
    }
}

fn agent_specs(pop: &PopulationState, range_start: usize) -> Vec<AgentSpec> {
    pop.agents
        .iter()
        .enumerate()
        .map(|(i, a)| AgentSpec {
            params: a.params,
            initial: a.state,
            drains: pop.drains.training_row(i)[range_start..].to_vec(),
            budget: a.budget,
        })
        .collect()
}

fn proposal_factory(weights: ProposalWeights) -> impl Fn(usize, usize) -> SwitchProposal + Clone {
    move |horizon, budget| {
        SwitchProposal::with_weights(horizon, budget, &weights)
            .unwrap_or_else(|_| SwitchProposal::uniform(horizon, budget))
    }
}

/// Categorical draw proportional to nonnegative weights.
fn weighted_draw<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let u: f64 = rng.random_range(0.0..total);
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Per-agent evaluation draw at fixed multipliers: sample `z_eval`
/// candidates on the training drains (the empty schedule always included),
/// weight them, and pick one schedule per agent by categorical draw.
fn draw_schedules(
    pop: &PopulationState,
    cs: &ConstraintSet,
    cost: LocalCost,
    multipliers: &Multipliers,
    z_eval: usize,
    proposal: &ProposalWeights,
    eval_stream: u64,
    range_start: usize,
) -> Result<Vec<Vec<u16>>> {
    let source = PopulationSource::new(
        agent_specs(pop, range_start),
        cs.clone(),
        cost,
        z_eval,
        eval_stream,
        proposal_factory(proposal.clone()),
    )?
    .with_no_switch_candidate();
    let batch = source.estimate(multipliers, 0, false)?;
    let mut schedules = Vec::with_capacity(pop.len());
    for agent_batch in &batch.agents {
        let weights: Vec<f64> = agent_batch.samples.iter().map(|s| s.weight).collect();
        let mut rng = substream_rng(
            eval_stream,
            Purpose::Evaluation,
            agent_batch.agent as u64,
            0x6472_6177,
        );
        let pick = weighted_draw(&weights, &mut rng);
        schedules.push(agent_batch.samples[pick].switches.clone());
    }
    Ok(schedules)
}

/// Train multipliers on the training drains, then realize one candidate per
/// agent on the validation drains with the trained weights.
pub fn train_evaluate(
    pop: &PopulationState,
    cs: &ConstraintSet,
    cost: LocalCost,
    cfg: &TrainEvalConfig,
    master_seed: u64,
    warm_start: Option<Vec<f64>>,
) -> Result<(SolveResult, EvaluationResult)> {
    if cfg.z_eval == 0 {
        return Err(Error::config("evaluation: z_eval must be >= 1"));
    }
    let solver_stream = stream_seed(master_seed, Purpose::Solver);
    let source = PopulationSource::new(
        agent_specs(pop, 0),
        cs.clone(),
        cost,
        cfg.solver.samples_per_agent,
        solver_stream,
        proposal_factory(cfg.proposal.clone()),
    )?;
    let solved = solve(&source, &cfg.solver, warm_start)?;

    let eval_stream = stream_seed(master_seed, Purpose::Evaluation);
    let schedules = draw_schedules(
        pop,
        cs,
        cost,
        &solved.multipliers,
        cfg.z_eval,
        &cfg.proposal,
        eval_stream,
        0,
    )?;
    let chosen: Vec<Trajectory> = pop
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            simulate(
                a.state,
                &a.params,
                pop.drains.validation_row(i),
                &schedules[i],
            )
        })
        .collect();
    Ok((solved, EvaluationResult::from_chosen(chosen, cs)))
}

/// A realized in-band mode flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchEvent {
    pub agent: usize,
    /// State time of the flip (the new mode first holds at this index).
    pub t: usize,
    pub new_mode: Mode,
}

/// Outcome of a receding-horizon or online run.
#[derive(Debug, Clone)]
pub struct ControlOutcome {
    /// Realized fleet consumption per state time (length T + 1).
    pub consumption: Vec<f64>,
    /// Committed trajectory of every agent, with realized switch times.
    pub committed: Vec<Trajectory>,
    pub events: Vec<SwitchEvent>,
    /// Steps whose inner solve drove some multiplier to the cap.
    pub infeasible_steps: Vec<usize>,
    /// Realized constraint moments on the committed population.
    pub moments: Vec<f64>,
    /// Online only: (loop step, signal index) access log.
    pub signal_accesses: Vec<(usize, usize)>,
    /// Online only: multiplier value per step.
    pub lambda_trace: Vec<f64>,
}

/// Receding-horizon configuration.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    /// Inner solver settings; `iterations` is the per-step budget.
    pub solver: SolverConfig,
    pub z_eval: usize,
    /// Seed each step's solve with the previous step's multipliers.
    pub warm_start: bool,
    pub proposal: ProposalWeights,
}

struct Commit {
    states: Vec<Vec<WhState>>,
    switches: Vec<Vec<u16>>,
    consumption: Vec<f64>,
    events: Vec<SwitchEvent>,
}

impl Commit {
    fn new(pop: &PopulationState) -> Commit {
        let consumption = vec![
            pop.agents.iter().map(|a| a.state.mode.as_f64()).sum::<f64>()
                / pop.agents.len() as f64,
        ];
        Commit {
            states: pop.agents.iter().map(|a| vec![a.state]).collect(),
            switches: vec![Vec::new(); pop.agents.len()],
            consumption,
            events: Vec::new(),
        }
    }

    /// Append one realized state per agent, detecting in-band flips.
    fn push_step(&mut self, t: usize, next: &[WhState], agents: &mut [AgentState]) {
        let mut on_count = 0.0;
        for (i, (&state, agent)) in next.iter().zip(agents.iter_mut()).enumerate() {
            let inside =
                state.theta > agent.params.theta_min && state.theta < agent.params.theta_max;
            if inside && state.mode != agent.state.mode {
                self.switches[i].push((t + 1) as u16);
                self.events.push(SwitchEvent {
                    agent: i,
                    t: t + 1,
                    new_mode: state.mode,
                });
                agent.budget = agent.budget.saturating_sub(1);
            }
            agent.state = state;
            self.states[i].push(state);
            on_count += state.mode.as_f64();
        }
        self.consumption.push(on_count / agents.len() as f64);
    }

    fn into_outcome(self, cs: &ConstraintSet) -> ControlOutcome {
        let committed: Vec<Trajectory> = self
            .states
            .into_iter()
            .zip(self.switches)
            .map(|(states, switches)| Trajectory { states, switches })
            .collect();
        let mut moments = vec![0.0; cs.len()];
        for traj in &committed {
            for (slot, v) in moments.iter_mut().zip(cs.evaluate(traj)) {
                *slot += v / committed.len() as f64;
            }
        }
        ControlOutcome {
            consumption: self.consumption,
            committed,
            events: self.events,
            infeasible_steps: Vec::new(),
            moments,
            signal_accesses: Vec::new(),
            lambda_trace: Vec::new(),
        }
    }
}

/// Receding-horizon control: each interval, re-solve the remaining-horizon
/// problem from the current states on the training drains, realize one
/// candidate per agent, commit only its first step under the validation
/// (truth) drains, and charge realized in-band flips against the budgets.
pub fn mpc_run(
    pop: &PopulationState,
    cs: &ConstraintSet,
    cost: LocalCost,
    cfg: &MpcConfig,
    master_seed: u64,
) -> Result<ControlOutcome> {
    let horizon = pop.horizon();
    if cs.horizon() != horizon {
        return Err(Error::config(
            "mpc: constraint horizon does not match the drain horizon",
        ));
    }
    let solver_stream = stream_seed(master_seed, Purpose::Solver);
    let eval_stream = stream_seed(master_seed, Purpose::Evaluation);

    let mut working = pop.clone();
    let mut commit = Commit::new(pop);
    let mut infeasible_steps = Vec::new();
    let mut carried_lambda: Vec<f64> = vec![0.0; cs.len()];

    for t in 0..horizon {
        let (local_cs, sources) = cs.restrict_from(t);
        let schedules: Vec<Vec<u16>> = if local_cs.is_empty() {
            vec![Vec::new(); working.len()]
        } else {
            let source = PopulationSource::new(
                agent_specs(&working, t),
                local_cs.clone(),
                cost,
                cfg.solver.samples_per_agent,
                substream_seed(solver_stream, t as u64, 0x7374_6570),
                proposal_factory(cfg.proposal.clone()),
            )?;
            let warm = cfg
                .warm_start
                .then(|| sources.iter().map(|&s| carried_lambda[s]).collect());
            let solved = solve(&source, &cfg.solver, warm)?;
            if solved.hit_cap {
                infeasible_steps.push(t);
            }
            for (local, &src) in solved.multipliers.lambda.iter().zip(&sources) {
                carried_lambda[src] = *local;
            }
            draw_schedules(
                &working,
                &local_cs,
                cost,
                &solved.multipliers,
                cfg.z_eval,
                &cfg.proposal,
                substream_seed(eval_stream, t as u64, 0x7374_6570),
                t,
            )?
        };

        // Commit exactly one step under the truth drains.
        let next: Vec<WhState> = working
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let drain = working.drains.validation_row(i)[t];
                let first_step: Vec<u16> =
                    schedules[i].iter().copied().filter(|&s| s == 1).collect();
                controlled_step(&a.state, &a.params, drain, 1, &first_step)
            })
            .collect();
        commit.push_step(t, &next, &mut working.agents);
    }

    let mut outcome = commit.into_outcome(cs);
    outcome.infeasible_steps = infeasible_steps;
    Ok(outcome)
}

/// Pull-only signal source; targets become readable one step ahead, in
/// order, exactly once.
pub trait SignalStream {
    fn reveal(&mut self, index: usize) -> Result<f64>;
}

/// In-memory stream that enforces strictly sequential access.
#[derive(Debug, Clone)]
pub struct SequentialSignal {
    values: Vec<f64>,
    next: usize,
}

impl SequentialSignal {
    pub fn new(values: Vec<f64>) -> SequentialSignal {
        SequentialSignal { values, next: 1 }
    }
}

impl SignalStream for SequentialSignal {
    fn reveal(&mut self, index: usize) -> Result<f64> {
        if index != self.next {
            return Err(Error::config(format!(
                "signal stream: index {index} requested, next readable is {}",
                self.next
            )));
        }
        let value = self
            .values
            .get(index)
            .copied()
            .ok_or_else(|| Error::config(format!("signal stream: index {index} out of range")))?;
        self.next += 1;
        Ok(value)
    }
}

/// Online tracking configuration.
#[derive(Debug, Clone)]
pub struct OnlineConfig {
    /// Candidates per agent per inner iteration.
    pub samples_per_agent: usize,
    /// Inner multiplier iterations per step.
    pub inner_iterations: usize,
    pub epsilon: f64,
    /// Step schedule of the inner iterations.
    pub step: StepSchedule,
    /// Step applied to the realized next-step deviation after committing.
    pub realized_step: f64,
    /// Candidate simulation horizon; one step suffices for the single
    /// next-step row and keeps the loop cheap.
    pub lookahead: usize,
    pub proposal: ProposalWeights,
}

/// Online tracking: the target for state `t + 1` is revealed at step `t`;
/// a single free-signed multiplier on the next-step deviation is refined by
/// a few sampled inner iterations, one candidate per agent is committed,
/// and the multiplier is corrected by the realized deviation.
pub fn online_run(
    pop: &PopulationState,
    cost: LocalCost,
    cfg: &OnlineConfig,
    signal: &mut dyn SignalStream,
    master_seed: u64,
) -> Result<ControlOutcome> {
    if cfg.lookahead == 0 || cfg.samples_per_agent == 0 {
        return Err(Error::config(
            "online: lookahead and samples_per_agent must be >= 1",
        ));
    }
    let horizon = pop.horizon();
    let solver_stream = stream_seed(master_seed, Purpose::Online);
    let eval_stream = stream_seed(master_seed, Purpose::Evaluation);

    let mut working = pop.clone();
    let mut commit = Commit::new(pop);
    let mut accesses = Vec::new();
    let mut lambda = 0.0f64;
    let mut lambda_trace = Vec::with_capacity(horizon);

    for t in 0..horizon {
        // The final interval has no revealed target; it runs uncontrolled.
        let target = if t + 1 < horizon {
            let value = signal.reveal(t + 1)?;
            accesses.push((t, t + 1));
            Some(value)
        } else {
            None
        };

        let schedules: Vec<Vec<u16>> = match target {
            None => vec![Vec::new(); working.len()],
            Some(r) => {
                let lookahead = cfg.lookahead.min(horizon - t);
                let local_cs = ConstraintSet::new(
                    lookahead,
                    working.len(),
                    vec![ConstraintRow::TrackingUpper { t: 1, target: r }],
                )?;
                let mut specs = agent_specs(&working, t);
                for spec in &mut specs {
                    spec.drains.truncate(lookahead);
                }
                let source = PopulationSource::new(
                    specs,
                    local_cs,
                    cost,
                    cfg.samples_per_agent,
                    substream_seed(solver_stream, t as u64, 0x6f6e_6c69),
                    proposal_factory(cfg.proposal.clone()),
                )?
                .with_no_switch_candidate();

                // Inner refinement of the scalar multiplier: the tracking row
                // stands in for an equality, so the multiplier is free-signed
                // and there is no projection.
                for k in 0..cfg.inner_iterations {
                    let multipliers = Multipliers {
                        lambda: vec![lambda],
                        epsilon: cfg.epsilon,
                    };
                    let (gradient, _) = estimate_gradient(&source, &multipliers, k as u64, false)?;
                    if !gradient[0].is_finite() {
                        return Err(Error::solver(format!(
                            "online: non-finite deviation estimate at step {t}"
                        )));
                    }
                    lambda += cfg.step.at(k) * gradient[0];
                }

                // Evaluation draw for the commitment.
                let multipliers = Multipliers {
                    lambda: vec![lambda],
                    epsilon: cfg.epsilon,
                };
                let batch = source.estimate(&multipliers, u64::MAX, false)?;
                batch
                    .agents
                    .iter()
                    .map(|agent_batch| {
                        let weights: Vec<f64> =
                            agent_batch.samples.iter().map(|s| s.weight).collect();
                        let mut rng = substream_rng(
                            eval_stream,
                            Purpose::Online,
                            agent_batch.agent as u64,
                            t as u64,
                        );
                        let pick = weighted_draw(&weights, &mut rng);
                        agent_batch.samples[pick].switches.clone()
                    })
                    .collect()
            }
        };

        let next: Vec<WhState> = working
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let drain = working.drains.validation_row(i)[t];
                let first_step: Vec<u16> =
                    schedules[i].iter().copied().filter(|&s| s == 1).collect();
                controlled_step(&a.state, &a.params, drain, 1, &first_step)
            })
            .collect();
        commit.push_step(t, &next, &mut working.agents);

        if let Some(r) = target {
            let realized = commit.consumption[t + 1];
            lambda += cfg.realized_step * (realized - r);
        }
        lambda_trace.push(lambda);
    }

    let full_cs = ConstraintSet::empty(horizon, pop.len());
    let mut outcome = commit.into_outcome(&full_cs);
    outcome.signal_accesses = accesses;
    outcome.lambda_trace = lambda_trace;
    Ok(outcome)
}

/// L2 distance between a consumption curve and a target over the reported
/// intervals 0..T-1.
pub fn tracking_error(consumption: &[f64], signal: &[f64]) -> f64 {
    signal
        .iter()
        .zip(consumption)
        .map(|(r, g)| (g - r) * (g - r))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests;
