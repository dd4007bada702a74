//! Water-heater physics and thermostat policies.
//!
//! One unit is a lumped tank: its mean temperature decays toward ambient,
//! rises under resistive heating while the power mode is On, and drops when
//! hot water is drawn. Time is discretized in fixed intervals (10 minutes by
//! default); the uncontrolled ("nominal") policy is a plain hysteresis
//! thermostat, and the controlled policy may additionally flip the mode at a
//! budget-limited set of scheduled switch times while the temperature stays
//! strictly inside the comfort band.

mod drains;
mod proposal;

pub use drains::{DrainProfile, DrainScenario};
pub use proposal::{ProposalWeights, SwitchProposal};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Density of water, kg/m³.
pub const WATER_DENSITY: f64 = 1000.0;
/// Specific heat of water, J/(kg·K).
pub const WATER_SPECIFIC_HEAT: f64 = 4186.0;
/// Thermal conductivity of the tank insulation, W/(m·K).
pub const INSULATION_CONDUCTIVITY: f64 = 0.04;

/// Power mode of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Off,
    On,
}

impl Mode {
    #[inline]
    pub fn flipped(self) -> Mode {
        match self {
            Mode::Off => Mode::On,
            Mode::On => Mode::Off,
        }
    }

    #[inline]
    pub fn as_f64(self) -> f64 {
        match self {
            Mode::Off => 0.0,
            Mode::On => 1.0,
        }
    }

    #[inline]
    pub fn is_on(self) -> bool {
        matches!(self, Mode::On)
    }
}

/// Geometry and heating element of a physical tank, from which the lumped
/// coefficients are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalSpec {
    /// Tank volume, m³.
    pub volume: f64,
    /// Tank height, m.
    pub height: f64,
    /// Insulation thickness, m.
    pub insulation_thickness: f64,
    /// Heating element power, W.
    pub resistance_power: f64,
}

/// Lumped coefficients (heat-loss fraction per minute, temperature rise per
/// joule, heating power) for a physical tank.
///
/// The tank is a closed cylinder losing heat through its lateral surface and
/// both caps; the loss coefficient is conductivity over insulation thickness.
pub fn derive_params(spec: &PhysicalSpec) -> Result<(f64, f64, f64)> {
    if !(spec.volume > 0.0 && spec.height > 0.0)
        || !(spec.insulation_thickness > 0.0 && spec.resistance_power > 0.0)
    {
        return Err(Error::config(
            "physical spec: volume, height, insulation_thickness and resistance_power \
             must all be strictly positive",
        ));
    }
    let heat_capacity = WATER_DENSITY * WATER_SPECIFIC_HEAT * spec.volume; // J/K
    let sigma = 1.0 / heat_capacity;
    let radius = (spec.volume / (std::f64::consts::PI * spec.height)).sqrt();
    let area = 2.0 * std::f64::consts::PI * radius * (spec.height + radius);
    let u_value = INSULATION_CONDUCTIVITY / spec.insulation_thickness; // W/(m²·K)
    let rho = u_value * area / heat_capacity * 60.0; // per minute
    Ok((rho, sigma, spec.resistance_power))
}

/// Physical description of one water heater.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhParams {
    /// Heat-loss fraction per minute.
    pub rho: f64,
    /// Temperature change per joule, °C/J.
    pub sigma: f64,
    /// Heating power, W.
    pub p_max: f64,
    /// Ambient temperature, °C.
    pub theta_amb: f64,
    /// Lower comfort bound, °C.
    pub theta_min: f64,
    /// Upper comfort bound, °C.
    pub theta_max: f64,
    /// Interval length, minutes.
    pub dt_min: f64,
    /// Present when the coefficients were derived from tank geometry.
    pub physical: Option<PhysicalSpec>,
}

impl WhParams {
    /// Build from explicit lumped coefficients.
    pub fn from_coefficients(
        rho: f64,
        sigma: f64,
        p_max: f64,
        theta_amb: f64,
        theta_min: f64,
        theta_max: f64,
        dt_min: f64,
    ) -> Result<WhParams> {
        let params = WhParams {
            rho,
            sigma,
            p_max,
            theta_amb,
            theta_min,
            theta_max,
            dt_min,
            physical: None,
        };
        params.validate()?;
        Ok(params)
    }

    /// Build from tank geometry; the lumped coefficients are derived.
    pub fn from_physical(
        spec: PhysicalSpec,
        theta_amb: f64,
        theta_min: f64,
        theta_max: f64,
        dt_min: f64,
    ) -> Result<WhParams> {
        let (rho, sigma, p_max) = derive_params(&spec)?;
        let params = WhParams {
            rho,
            sigma,
            p_max,
            theta_amb,
            theta_min,
            theta_max,
            dt_min,
            physical: Some(spec),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.sigma > 0.0 && self.p_max > 0.0) {
            return Err(Error::config("params: rho, sigma, p_max must be > 0"));
        }
        if !(self.theta_min < self.theta_max) {
            return Err(Error::config("params: theta_min must be < theta_max"));
        }
        if !(self.dt_min > 0.0) {
            return Err(Error::config("params: dt_min must be > 0"));
        }
        if let Some(spec) = &self.physical {
            let (rho, sigma, p_max) = derive_params(spec)?;
            if rho != self.rho || sigma != self.sigma || p_max != self.p_max {
                return Err(Error::config(
                    "params: rho/sigma/p_max do not match the values derived from `physical`",
                ));
            }
        }
        Ok(())
    }

    /// Temperature rise over one full-power interval, °C.
    #[inline]
    pub fn heating_per_interval(&self) -> f64 {
        self.sigma * self.dt_min * 60.0 * self.p_max
    }

    /// Largest temperature change any single step can produce given a bound
    /// on per-interval drain energy. Used by the band-slack invariant.
    pub fn max_step_change(&self, max_drain: f64) -> f64 {
        let cooling = self.rho * self.dt_min * (self.theta_max - self.theta_amb).abs();
        self.heating_per_interval() + cooling + self.sigma * max_drain
    }
}

/// Instantaneous state of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhState {
    /// Mean tank temperature, °C.
    pub theta: f64,
    pub mode: Mode,
}

/// One unit's day: states at every grid time plus the scheduled switch times
/// that were applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// States at times 0..=T.
    pub states: Vec<WhState>,
    /// Scheduled switch times, sorted, each in 1..=T. A switch at time `t`
    /// flips the mode stored in `states[t]` provided the new temperature is
    /// strictly inside the comfort band.
    pub switches: Vec<u16>,
}

impl Trajectory {
    /// Number of steps (states run 0..=T).
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn modes(&self) -> impl Iterator<Item = Mode> + '_ {
        self.states.iter().map(|s| s.mode)
    }

    /// Verify the trajectory against the dynamics that produced it:
    /// every transition reproduces the temperature update to relative
    /// precision, thermostat crossings force the stored mode, in-band flips
    /// happen only at scheduled switch times, and the schedule respects the
    /// budget.
    pub fn validate(&self, params: &WhParams, drains: &[f64], budget: usize) -> Result<()> {
        if self.states.len() != drains.len() + 1 {
            return Err(Error::config(format!(
                "trajectory length {} does not match drains length {}",
                self.states.len(),
                drains.len()
            )));
        }
        if self.switches.len() > budget {
            return Err(Error::config(format!(
                "trajectory schedules {} switches, budget is {budget}",
                self.switches.len()
            )));
        }
        for t in 0..drains.len() {
            let prev = self.states[t];
            let next = self.states[t + 1];
            let theta = step_temperature(&prev, params, drains[t]);
            let scale = theta.abs().max(1.0);
            if (next.theta - theta).abs() > 1e-12 * scale {
                return Err(Error::config(format!(
                    "trajectory violates the temperature update at step {t}: \
                     stored {}, recomputed {theta}",
                    next.theta
                )));
            }
            let target = (t + 1) as u16;
            let expected = if theta >= params.theta_max {
                Mode::Off
            } else if theta <= params.theta_min {
                Mode::On
            } else if self.switches.contains(&target) {
                prev.mode.flipped()
            } else {
                prev.mode
            };
            if next.mode != expected {
                return Err(Error::config(format!(
                    "trajectory violates the mode update at step {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Initial distribution of (temperature, mode).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialDensity {
    pub temp_low: f64,
    pub temp_high: f64,
    pub on_probability: f64,
}

impl InitialDensity {
    pub fn new(temp_low: f64, temp_high: f64, on_probability: f64) -> Result<InitialDensity> {
        if !(temp_low <= temp_high) {
            return Err(Error::config("initial density: temp_low must be <= temp_high"));
        }
        if !(0.0..=1.0).contains(&on_probability) {
            return Err(Error::config(
                "initial density: on_probability must lie in [0, 1]",
            ));
        }
        Ok(InitialDensity {
            temp_low,
            temp_high,
            on_probability,
        })
    }

    /// Default density over a comfort band: temperature uniform on the band,
    /// one unit in four heating.
    pub fn for_band(theta_min: f64, theta_max: f64) -> InitialDensity {
        InitialDensity {
            temp_low: theta_min,
            temp_high: theta_max,
            on_probability: 0.25,
        }
    }

    /// Check the density against a comfort band.
    pub fn validate_for(&self, params: &WhParams) -> Result<()> {
        if self.temp_low < params.theta_min || self.temp_high > params.theta_max {
            return Err(Error::config(
                "initial density: temperature range must lie inside [theta_min, theta_max]",
            ));
        }
        Ok(())
    }
}

/// New temperature after one interval.
///
/// `drain` is the water-drain heat draw over the interval, in joules
/// (`sigma * drain` is the temperature drop it causes).
#[inline]
pub fn step_temperature(state: &WhState, params: &WhParams, drain: f64) -> f64 {
    debug_assert!(drain >= 0.0);
    state.theta - params.rho * params.dt_min * (state.theta - params.theta_amb)
        + params.sigma * params.dt_min * 60.0 * state.mode.as_f64() * params.p_max
        - params.sigma * drain
}

/// One step of the hysteresis thermostat: Off at or above the upper bound,
/// On at or below the lower bound, otherwise the mode is kept.
#[inline]
pub fn nominal_step(state: &WhState, params: &WhParams, drain: f64) -> WhState {
    let theta = step_temperature(state, params, drain);
    let mode = if theta >= params.theta_max {
        Mode::Off
    } else if theta <= params.theta_min {
        Mode::On
    } else {
        state.mode
    };
    WhState { theta, mode }
}

/// One step of the controlled policy. `target` is the time index of the
/// state being produced (1..=T); when it is a scheduled switch time and the
/// new temperature stays strictly inside the comfort band, the mode flips.
/// Thermostat crossings take priority.
#[inline]
pub fn controlled_step(
    state: &WhState,
    params: &WhParams,
    drain: f64,
    target: u16,
    switches: &[u16],
) -> WhState {
    let theta = step_temperature(state, params, drain);
    let mode = if theta >= params.theta_max {
        Mode::Off
    } else if theta <= params.theta_min {
        Mode::On
    } else if switches.contains(&target) {
        state.mode.flipped()
    } else {
        state.mode
    };
    WhState { theta, mode }
}

/// Roll the controlled policy over a drain row. `switches` must be sorted;
/// an empty schedule reproduces the nominal policy.
pub fn simulate(
    initial: WhState,
    params: &WhParams,
    drains: &[f64],
    switches: &[u16],
) -> Trajectory {
    let mut states = Vec::with_capacity(drains.len() + 1);
    states.push(initial);
    let mut state = initial;
    for (t, &drain) in drains.iter().enumerate() {
        state = controlled_step(&state, params, drain, (t + 1) as u16, switches);
        states.push(state);
    }
    Trajectory {
        states,
        switches: switches.to_vec(),
    }
}

/// Draw an initial state.
pub fn sample_initial<R: Rng>(density: &InitialDensity, rng: &mut R) -> WhState {
    let theta = if density.temp_low == density.temp_high {
        density.temp_low
    } else {
        rng.random_range(density.temp_low..density.temp_high)
    };
    let mode = if rng.random_bool(density.on_probability) {
        Mode::On
    } else {
        Mode::Off
    };
    WhState { theta, mode }
}

/// A trajectory drawn from the controlled sampling law, together with the
/// log-probability of its switch schedule under the proposal.
#[derive(Debug, Clone)]
pub struct SampledTrajectory {
    pub trajectory: Trajectory,
    pub proposal_log_prob: f64,
}

/// Draw a switch schedule from the proposal and roll it out.
pub fn sample_controlled<R: Rng>(
    initial: WhState,
    params: &WhParams,
    drains: &[f64],
    proposal: &SwitchProposal,
    rng: &mut R,
) -> SampledTrajectory {
    let switches = proposal.sample(rng);
    let proposal_log_prob = proposal.log_prob(&switches);
    SampledTrajectory {
        trajectory: simulate(initial, params, drains, &switches),
        proposal_log_prob,
    }
}
