//! Aggregate constraint rows and the local transport cost.
//!
//! The controller's targets are moment constraints on the population: each
//! row is a scalar functional of one trajectory whose population mean must
//! stay at or below zero. Tracking a consumption signal contributes a pair
//! of opposing rows per time (an equality split into two inequalities), a
//! consumption cap one row per time, and ramp limits a pair per transition.
//! Thresholds are stored per agent, i.e. as fractions of the fleet size.
//!
//! Rows are closed-form and affine in the trajectory's mode sequence, which
//! lets batch code evaluate them on weighted mode averages instead of on
//! every sampled trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Trajectory;

/// One moment-constraint row. Time indices refer to trajectory states
/// (1..=T); ramp rows at `t` constrain the transition from state `t` to
/// state `t + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ConstraintRow {
    /// `m_t - target <= 0`
    TrackingUpper { t: usize, target: f64 },
    /// `target - m_t <= 0`
    TrackingLower { t: usize, target: f64 },
    /// `m_t - level <= 0`
    Cap { t: usize, level: f64 },
    /// `m_{t+1} - m_t - limit <= 0`
    RampUpper { t: usize, limit: f64 },
    /// `m_t - m_{t+1} - limit <= 0`
    RampLower { t: usize, limit: f64 },
}

impl ConstraintRow {
    /// Value of the row on a mode sequence given as 0/1 (or averaged) values.
    #[inline]
    pub fn evaluate(&self, modes: &[f64]) -> f64 {
        match *self {
            ConstraintRow::TrackingUpper { t, target } => modes[t] - target,
            ConstraintRow::TrackingLower { t, target } => target - modes[t],
            ConstraintRow::Cap { t, level } => modes[t] - level,
            ConstraintRow::RampUpper { t, limit } => modes[t + 1] - modes[t] - limit,
            ConstraintRow::RampLower { t, limit } => modes[t] - modes[t + 1] - limit,
        }
    }

    /// Largest state index the row reads.
    pub fn max_time(&self) -> usize {
        match *self {
            ConstraintRow::TrackingUpper { t, .. }
            | ConstraintRow::TrackingLower { t, .. }
            | ConstraintRow::Cap { t, .. } => t,
            ConstraintRow::RampUpper { t, .. } | ConstraintRow::RampLower { t, .. } => t + 1,
        }
    }

    /// Shift all time references left by `offset` (for re-rooted horizons).
    fn shifted(&self, offset: usize) -> ConstraintRow {
        let mut row = *self;
        match &mut row {
            ConstraintRow::TrackingUpper { t, .. }
            | ConstraintRow::TrackingLower { t, .. }
            | ConstraintRow::Cap { t, .. }
            | ConstraintRow::RampUpper { t, .. }
            | ConstraintRow::RampLower { t, .. } => *t -= offset,
        }
        row
    }
}

/// Ordered list of constraint rows for a population of `n_agents` over a
/// horizon of `T` steps (states 0..=T). Row order is part of the contract:
/// multiplier vectors and serialized forms index rows by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    horizon: usize,
    n_agents: usize,
    rows: Vec<ConstraintRow>,
}

impl ConstraintSet {
    /// Build from rows. Families must appear grouped in declaration order
    /// (tracking upper, tracking lower, cap, ramp upper, ramp lower) with
    /// times increasing within each family.
    pub fn new(horizon: usize, n_agents: usize, rows: Vec<ConstraintRow>) -> Result<ConstraintSet> {
        if n_agents == 0 || horizon == 0 {
            return Err(Error::config("constraints: horizon and n_agents must be > 0"));
        }
        let rank = |row: &ConstraintRow| match row {
            ConstraintRow::TrackingUpper { .. } => 0,
            ConstraintRow::TrackingLower { .. } => 1,
            ConstraintRow::Cap { .. } => 2,
            ConstraintRow::RampUpper { .. } => 3,
            ConstraintRow::RampLower { .. } => 4,
        };
        for pair in rows.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let ordered = match rank(a).cmp(&rank(b)) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => a.max_time() < b.max_time(),
            };
            if !ordered {
                return Err(Error::config(
                    "constraints: rows must be grouped by family and ordered by time",
                ));
            }
        }
        for row in &rows {
            if row.max_time() > horizon {
                return Err(Error::config(format!(
                    "constraints: row {row:?} references time beyond horizon {horizon}"
                )));
            }
            let t_min = match row {
                ConstraintRow::RampUpper { t, .. } | ConstraintRow::RampLower { t, .. } => *t,
                ConstraintRow::TrackingUpper { t, .. }
                | ConstraintRow::TrackingLower { t, .. }
                | ConstraintRow::Cap { t, .. } => {
                    if *t == 0 {
                        return Err(Error::config(
                            "constraints: pointwise rows cannot reference the initial state",
                        ));
                    }
                    *t
                }
            };
            let _ = t_min;
        }
        Ok(ConstraintSet {
            horizon,
            n_agents,
            rows,
        })
    }

    pub fn empty(horizon: usize, n_agents: usize) -> ConstraintSet {
        ConstraintSet {
            horizon,
            n_agents,
            rows: Vec::new(),
        }
    }

    /// Number of rows (the dimension of the multiplier vector).
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[ConstraintRow] {
        &self.rows
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Evaluate every row on one trajectory.
    pub fn evaluate(&self, trajectory: &Trajectory) -> Vec<f64> {
        assert_eq!(
            trajectory.horizon(),
            self.horizon,
            "trajectory length does not match the constraint horizon"
        );
        let modes: Vec<f64> = trajectory.modes().map(|m| m.as_f64()).collect();
        self.evaluate_modes(&modes)
    }

    /// Evaluate every row on a mode sequence; entries may be weighted
    /// averages in [0, 1] since rows are affine in the modes.
    pub fn evaluate_modes(&self, modes: &[f64]) -> Vec<f64> {
        assert_eq!(
            modes.len(),
            self.horizon + 1,
            "mode sequence length does not match the constraint horizon"
        );
        self.rows.iter().map(|row| row.evaluate(modes)).collect()
    }

    /// Collapse `lambda^T f(y)` into per-time mode coefficients plus a
    /// constant: `lambda^T f(y) = sum_t coeff[t] * m_t(y) - offset`.
    pub fn collapse_multipliers(&self, lambda: &[f64]) -> (Vec<f64>, f64) {
        assert_eq!(lambda.len(), self.rows.len());
        let mut coeff = vec![0.0; self.horizon + 1];
        let mut offset = 0.0;
        for (row, &l) in self.rows.iter().zip(lambda) {
            match *row {
                ConstraintRow::TrackingUpper { t, target } => {
                    coeff[t] += l;
                    offset += l * target;
                }
                ConstraintRow::TrackingLower { t, target } => {
                    coeff[t] -= l;
                    offset -= l * target;
                }
                ConstraintRow::Cap { t, level } => {
                    coeff[t] += l;
                    offset += l * level;
                }
                ConstraintRow::RampUpper { t, limit } => {
                    coeff[t + 1] += l;
                    coeff[t] -= l;
                    offset += l * limit;
                }
                ConstraintRow::RampLower { t, limit } => {
                    coeff[t] += l;
                    coeff[t + 1] -= l;
                    offset += l * limit;
                }
            }
        }
        (coeff, offset)
    }

    /// Restriction to the horizon suffix starting at state `t0`, re-rooted so
    /// state `t0` becomes local state 0. A row survives when it reads at
    /// least one state strictly after `t0` (rows fully determined by already
    /// committed states cannot be influenced any more). Returns the local
    /// set and, per local row, the index of its source row.
    pub fn restrict_from(&self, t0: usize) -> (ConstraintSet, Vec<usize>) {
        let mut rows = Vec::new();
        let mut sources = Vec::new();
        for (idx, row) in self.rows.iter().enumerate() {
            if row.max_time() > t0 {
                rows.push(row.shifted(t0));
                sources.push(idx);
            }
        }
        (
            ConstraintSet {
                horizon: self.horizon - t0,
                n_agents: self.n_agents,
                rows,
            },
            sources,
        )
    }
}

/// Consumption target per interval, as a fraction of fleet capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSignal {
    pub values: Vec<f64>,
}

impl TargetSignal {
    pub fn new(values: Vec<f64>) -> Result<TargetSignal> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("signal: values must lie in [0, 1]"));
        }
        Ok(TargetSignal { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Flatten consumption peaks: clip at the `clip_quantile` level of the
/// nominal curve, then shift the clipped curve up uniformly so the daily
/// mean is preserved. Quantile 1.0 is the identity.
pub fn make_tracking_signal(nominal: &[f64], clip_quantile: f64) -> Result<TargetSignal> {
    if nominal.is_empty() {
        return Err(Error::config("signal: nominal curve is empty"));
    }
    if !(0.0..=1.0).contains(&clip_quantile) {
        return Err(Error::config("signal: clip_quantile must lie in [0, 1]"));
    }
    let mut sorted: Vec<f64> = nominal.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = ((sorted.len() - 1) as f64 * clip_quantile).round() as usize;
    let cap = sorted[idx];

    let clipped: Vec<f64> = nominal.iter().map(|&g| g.min(cap)).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let deficit = mean(nominal) - mean(&clipped);
    let values: Vec<f64> = clipped.iter().map(|&g| (g + deficit).clamp(0.0, 1.0)).collect();
    TargetSignal::new(values)
}

/// Fraction of the fleet heating at each state time (length T + 1).
pub fn aggregate_consumption(trajectories: &[Trajectory]) -> Vec<f64> {
    assert!(!trajectories.is_empty(), "empty population");
    let len = trajectories[0].states.len();
    assert!(
        trajectories.iter().all(|t| t.states.len() == len),
        "trajectories must share a horizon"
    );
    let mut g = vec![0.0; len];
    for traj in trajectories {
        for (slot, state) in g.iter_mut().zip(&traj.states) {
            *slot += state.mode.as_f64();
        }
    }
    for slot in &mut g {
        *slot /= trajectories.len() as f64;
    }
    g
}

/// Local transport cost between a nominal trajectory and a controlled one.
///
/// Only the 0/1 cost is implemented; the other tags are accepted by the
/// config schema for forward compatibility and rejected at validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalCost {
    /// 0 when the state sequences are identical, 1 otherwise.
    ZeroOne,
    /// Absolute difference in daily energy use (not implemented).
    DailyEnergy,
    /// Number of added switches (not implemented).
    SwitchCount,
    /// End-of-day temperature gap (not implemented).
    EndTemperature,
}

impl LocalCost {
    pub fn validate(&self) -> Result<()> {
        match self {
            LocalCost::ZeroOne => Ok(()),
            other => Err(Error::config(format!(
                "cost: {other:?} is declared but not implemented; use zero_one"
            ))),
        }
    }
}

/// Evaluate the local cost. Both trajectories must share a horizon.
pub fn local_cost(x: &Trajectory, y: &Trajectory, cost: LocalCost) -> f64 {
    assert_eq!(x.states.len(), y.states.len(), "trajectory length mismatch");
    match cost {
        LocalCost::ZeroOne => {
            if x.states == y.states {
                0.0
            } else {
                1.0
            }
        }
        _ => unreachable!("only the zero_one cost is implemented"),
    }
}

/// Standard row builders used by the harness.
pub mod build {
    use super::*;

    /// Tracking rows (upper then lower) for times 1..=T-1 against a signal
    /// indexed by interval.
    pub fn tracking(
        horizon: usize,
        n_agents: usize,
        signal: &TargetSignal,
    ) -> Result<ConstraintSet> {
        if signal.len() != horizon {
            return Err(Error::config(format!(
                "signal length {} does not match horizon {horizon}",
                signal.len()
            )));
        }
        let mut rows = Vec::with_capacity(2 * (horizon - 1));
        for t in 1..horizon {
            rows.push(ConstraintRow::TrackingUpper {
                t,
                target: signal.values[t],
            });
        }
        for t in 1..horizon {
            rows.push(ConstraintRow::TrackingLower {
                t,
                target: signal.values[t],
            });
        }
        ConstraintSet::new(horizon, n_agents, rows)
    }

    /// Cap rows for times in `window` (state indices, inclusive), or the
    /// whole reported day when `window` is `None`.
    pub fn cap(
        horizon: usize,
        n_agents: usize,
        level: f64,
        window: Option<(usize, usize)>,
    ) -> Result<ConstraintSet> {
        let (lo, hi) = window.unwrap_or((1, horizon - 1));
        if lo == 0 || hi < lo || hi > horizon {
            return Err(Error::config(format!(
                "cap window ({lo}, {hi}) out of range for horizon {horizon}"
            )));
        }
        let rows = (lo..=hi)
            .map(|t| ConstraintRow::Cap { t, level })
            .collect();
        ConstraintSet::new(horizon, n_agents, rows)
    }

    /// Ramp rows (upper then lower) for transitions 0..=T-2.
    pub fn ramp(horizon: usize, n_agents: usize, up: f64, down: f64) -> Result<ConstraintSet> {
        let mut rows = Vec::with_capacity(2 * (horizon - 1));
        for t in 0..horizon - 1 {
            rows.push(ConstraintRow::RampUpper { t, limit: up });
        }
        for t in 0..horizon - 1 {
            rows.push(ConstraintRow::RampLower { t, limit: down });
        }
        ConstraintSet::new(horizon, n_agents, rows)
    }

    /// Concatenate sets that share horizon and fleet size, preserving family
    /// grouping. Inputs must arrive in family order.
    pub fn concat(sets: Vec<ConstraintSet>) -> Result<ConstraintSet> {
        let Some(first) = sets.first() else {
            return Err(Error::config("constraints: nothing to concatenate"));
        };
        let horizon = first.horizon;
        let n_agents = first.n_agents;
        let mut rows = Vec::new();
        for set in &sets {
            if set.horizon != horizon || set.n_agents != n_agents {
                return Err(Error::config(
                    "constraints: concatenated sets must share horizon and fleet size",
                ));
            }
            rows.extend_from_slice(&set.rows);
        }
        ConstraintSet::new(horizon, n_agents, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, Mode, WhParams, WhState};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn constant_mode_traj(horizon: usize, mode: Mode) -> Trajectory {
        Trajectory {
            states: vec![WhState { theta: 55.0, mode }; horizon + 1],
            switches: vec![],
        }
    }

    #[test]
    fn cap_rows_on_all_off_population() {
        let cs = build::cap(6, 10, 0.3 / 10.0, None).unwrap();
        let traj = constant_mode_traj(6, Mode::Off);
        let f = cs.evaluate(&traj);
        assert_eq!(f.len(), 5);
        for v in f {
            assert_relative_eq!(v, -0.03, max_relative = 1e-15);
        }
    }

    #[test]
    fn tracking_rows_on_all_on_population() {
        let n = 10usize;
        let signal = TargetSignal::new(vec![1.0 / n as f64; 6]).unwrap();
        let cs = build::tracking(6, n, &signal).unwrap();
        let traj = constant_mode_traj(6, Mode::On);
        let f = cs.evaluate(&traj);
        for v in &f[..5] {
            assert_relative_eq!(*v, 1.0 - 0.1, max_relative = 1e-15);
        }
        for v in &f[5..] {
            assert_relative_eq!(*v, 0.1 - 1.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn ramp_rows_vanish_on_constant_modes() {
        let cs = build::ramp(6, 10, 0.02, 0.05).unwrap();
        let traj = constant_mode_traj(6, Mode::On);
        let f = cs.evaluate(&traj);
        for v in &f[..5] {
            assert_relative_eq!(*v, -0.02, max_relative = 1e-15);
        }
        for v in &f[5..] {
            assert_relative_eq!(*v, -0.05, max_relative = 1e-15);
        }
    }

    #[test]
    fn feasibility_bridge_matches_aggregate_statements() {
        // Mean of per-trajectory rows over a population equals the aggregate
        // statement evaluated on the consumption curve.
        let params =
            WhParams::from_coefficients(5e-4, 1.2e-6, 2200.0, 20.0, 50.0, 65.0, 10.0).unwrap();
        let horizon = 12;
        let drains = vec![0.0; horizon];
        let population: Vec<Trajectory> = (0..8)
            .map(|i| {
                let initial = WhState {
                    theta: 51.0 + i as f64,
                    mode: if i % 3 == 0 { Mode::On } else { Mode::Off },
                };
                let switches: &[u16] = if i % 2 == 0 { &[4] } else { &[] };
                simulate(initial, &params, &drains, switches)
            })
            .collect();
        let g = aggregate_consumption(&population);

        let signal = TargetSignal::new(vec![0.25; horizon]).unwrap();
        let cs = build::concat(vec![
            build::tracking(horizon, 8, &signal).unwrap(),
            build::cap(horizon, 8, 0.5, Some((3, 9))).unwrap(),
            build::ramp(horizon, 8, 0.2, 0.2).unwrap(),
        ])
        .unwrap();

        let mut mean_f = vec![0.0; cs.len()];
        for traj in &population {
            for (slot, v) in mean_f.iter_mut().zip(cs.evaluate(traj)) {
                *slot += v / population.len() as f64;
            }
        }
        for (row, &mean) in cs.rows().iter().zip(&mean_f) {
            let aggregate = row.evaluate(&g);
            assert_relative_eq!(mean, aggregate, max_relative = 1e-12, epsilon = 1e-12);
            // The componentwise mean <= 0 statement and the aggregate
            // statement agree on feasibility.
            assert_eq!(mean <= 0.0, aggregate <= 0.0);
        }
    }

    #[test]
    fn collapse_multipliers_reproduces_dot_products() {
        let signal = TargetSignal::new(vec![0.3; 10]).unwrap();
        let cs = build::concat(vec![
            build::tracking(10, 5, &signal).unwrap(),
            build::cap(10, 5, 0.4, None).unwrap(),
            build::ramp(10, 5, 0.01, 0.02).unwrap(),
        ])
        .unwrap();
        let lambda: Vec<f64> = (0..cs.len()).map(|i| (i % 7) as f64 * 0.13).collect();
        let traj = {
            let params =
                WhParams::from_coefficients(5e-4, 1.2e-6, 2200.0, 20.0, 50.0, 65.0, 10.0).unwrap();
            simulate(
                WhState {
                    theta: 52.0,
                    mode: Mode::Off,
                },
                &params,
                &vec![0.0; 10],
                &[5],
            )
        };
        let f = cs.evaluate(&traj);
        let direct: f64 = f.iter().zip(&lambda).map(|(v, l)| v * l).sum();
        let (coeff, offset) = cs.collapse_multipliers(&lambda);
        let modes: Vec<f64> = traj.modes().map(|m| m.as_f64()).collect();
        let collapsed: f64 =
            coeff.iter().zip(&modes).map(|(c, m)| c * m).sum::<f64>() - offset;
        assert_relative_eq!(direct, collapsed, max_relative = 1e-12, epsilon = 1e-12);
    }

    #[test]
    fn restrict_keeps_rows_with_future_reads() {
        let signal = TargetSignal::new(vec![0.3; 10]).unwrap();
        let cs = build::concat(vec![
            build::tracking(10, 5, &signal).unwrap(),
            build::ramp(10, 5, 0.01, 0.01).unwrap(),
        ])
        .unwrap();
        let (local, sources) = cs.restrict_from(4);
        assert_eq!(local.horizon(), 6);
        // Tracking rows survive for t in 5..=9 (10 rows), ramp rows for
        // transitions with head at 5..=9, i.e. t in 4..=8 (10 rows).
        assert_eq!(local.len(), 20);
        assert_eq!(sources.len(), 20);
        for row in local.rows() {
            assert!(row.max_time() >= 1);
            assert!(row.max_time() <= 6);
        }
        // A ramp row re-rooted at the boundary keeps reading the committed
        // state as local time 0.
        assert!(local
            .rows()
            .iter()
            .any(|r| matches!(r, ConstraintRow::RampUpper { t: 0, .. })));
    }

    #[test]
    fn local_cost_is_zero_iff_identical() {
        let params =
            WhParams::from_coefficients(5e-4, 1.2e-6, 2200.0, 20.0, 50.0, 65.0, 10.0).unwrap();
        let drains = vec![0.0; 8];
        let initial = WhState {
            theta: 55.0,
            mode: Mode::Off,
        };
        let x = simulate(initial, &params, &drains, &[]);
        let same = simulate(initial, &params, &drains, &[]);
        let differs_once = simulate(initial, &params, &drains, &[8]);
        let differs_everywhere = simulate(initial, &params, &drains, &[1]);
        assert_eq!(local_cost(&x, &same, LocalCost::ZeroOne), 0.0);
        assert_eq!(local_cost(&x, &differs_once, LocalCost::ZeroOne), 1.0);
        assert_eq!(local_cost(&x, &differs_everywhere, LocalCost::ZeroOne), 1.0);
    }

    #[test]
    fn unimplemented_costs_are_rejected() {
        assert!(LocalCost::ZeroOne.validate().is_ok());
        assert!(LocalCost::DailyEnergy.validate().is_err());
        assert!(LocalCost::SwitchCount.validate().is_err());
        assert!(LocalCost::EndTemperature.validate().is_err());
    }

    #[test]
    fn aggregate_consumption_counts_on_fraction() {
        let t_on = constant_mode_traj(4, Mode::On);
        let t_off = constant_mode_traj(4, Mode::Off);
        let g = aggregate_consumption(&[t_on.clone(), t_off.clone(), t_off.clone()]);
        for v in g {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-15);
        }
        let g = aggregate_consumption(&[t_on.clone()]);
        assert!(g.iter().all(|&v| v == 1.0));
        let g = aggregate_consumption(&[t_on, t_off]);
        assert!(g.iter().all(|&v| v == 0.5));
    }

    #[test]
    #[should_panic(expected = "empty population")]
    fn aggregate_consumption_rejects_empty() {
        aggregate_consumption(&[]);
    }

    #[test]
    fn quantile_clip_preserves_the_mean() {
        // Two-peak curve.
        let nominal: Vec<f64> = (0..48)
            .map(|t| {
                let h = t as f64 / 2.0;
                0.15 + 0.25 * (-0.5 * ((h - 7.0) / 1.0).powi(2)).exp()
                    + 0.15 * (-0.5 * ((h - 20.0) / 1.5).powi(2)).exp()
            })
            .collect();
        let signal = make_tracking_signal(&nominal, 0.7).unwrap();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean(&nominal) - mean(&signal.values)).abs() < 1e-6);
        let max_nominal = nominal.iter().cloned().fold(f64::MIN, f64::max);
        let max_signal = signal.values.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max_signal < max_nominal, "peaks must be attenuated");
    }

    #[test]
    fn quantile_one_is_identity_and_constant_is_fixed() {
        let nominal = vec![0.2, 0.5, 0.3, 0.4];
        let signal = make_tracking_signal(&nominal, 1.0).unwrap();
        assert_eq!(signal.values, nominal);
        let flat = vec![0.25; 16];
        let signal = make_tracking_signal(&flat, 0.6).unwrap();
        assert_eq!(signal.values, flat);
    }

    #[test]
    fn serialization_round_trips_row_order() {
        let signal = TargetSignal::new(vec![0.3; 10]).unwrap();
        let cs = build::concat(vec![
            build::tracking(10, 5, &signal).unwrap(),
            build::cap(10, 5, 0.4, Some((2, 6))).unwrap(),
            build::ramp(10, 5, 0.01, 0.02).unwrap(),
        ])
        .unwrap();
        let text = toml::to_string(&cs).unwrap();
        let back: ConstraintSet = toml::from_str(&text).unwrap();
        assert_eq!(cs, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// The two tracking rows at a time are exact negations.
        #[test]
        fn tracking_pair_sums_to_zero(modes in proptest::collection::vec(0.0f64..=1.0, 8)) {
            let signal = TargetSignal::new(vec![0.4; 7]).unwrap();
            let cs = build::tracking(7, 4, &signal).unwrap();
            let f = cs.evaluate_modes(&modes);
            let half = f.len() / 2;
            for i in 0..half {
                prop_assert!((f[i] + f[half + i]).abs() < 1e-15);
            }
        }
    }
}
