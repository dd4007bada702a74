//! Synthetic water-drain scenarios.
//!
//! Hot-water usage is modeled as sparse draw events: per agent and interval,
//! the event count is Poisson with a time-of-day intensity following a
//! stored daily profile, and each event removes an exponentially distributed
//! amount of heat. The population mean therefore reproduces the profile
//! shape (morning peak, evening rise) while individual rows stay sparse and
//! irregular. Training and validation are independent draws from the same
//! law.

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream_rng, Purpose};

/// Generator configuration for one day of drains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrainProfile {
    /// Relative draw intensity per interval; length must equal the horizon.
    /// Only the shape matters, the vector is normalized internally.
    pub points: Vec<f64>,
    /// Mean number of draw events per agent per day.
    pub events_per_day: f64,
    /// Mean total drain energy per agent per day, joules.
    pub mean_daily_energy: f64,
}

impl DrainProfile {
    /// Built-in daily shape on the 10-minute grid: quiet overnight, a sharp
    /// morning peak at 7:00, a small midday bump, and an evening rise.
    pub fn default_day() -> DrainProfile {
        let mut points = Vec::with_capacity(144);
        for t in 0..144 {
            let h = t as f64 / 6.0;
            let bump = |center: f64, width: f64, height: f64| {
                height * (-0.5 * ((h - center) / width).powi(2)).exp()
            };
            let v = 0.10
                + bump(7.0, 0.8, 1.0)
                + bump(12.7, 1.3, 0.28)
                + bump(20.5, 1.8, 0.55);
            points.push(v);
        }
        DrainProfile {
            points,
            events_per_day: 10.0,
            // Roughly 35 degC per day on the reference 200-liter tank.
            mean_daily_energy: 35.0 * 837_200.0,
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.points.len() != horizon {
            return Err(Error::config(format!(
                "drains.profile: need {horizon} points, got {}",
                self.points.len()
            )));
        }
        if self.points.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::config("drains.profile: points must be >= 0"));
        }
        if !(self.events_per_day >= 0.0) || !(self.mean_daily_energy >= 0.0) {
            return Err(Error::config(
                "drains: events_per_day and mean_daily_energy must be >= 0",
            ));
        }
        Ok(())
    }
}

/// Per-agent, per-interval drain energies (joules) for a whole population,
/// in a training and a validation variant of the same law.
#[derive(Debug, Clone, PartialEq)]
pub struct DrainScenario {
    n_agents: usize,
    horizon: usize,
    training: Vec<f64>,
    validation: Vec<f64>,
}

impl DrainScenario {
    /// Generate both splits from a profile. Determined by
    /// (profile, n_agents, horizon, master_seed).
    pub fn generate(
        profile: &DrainProfile,
        n_agents: usize,
        horizon: usize,
        master_seed: u64,
    ) -> Result<DrainScenario> {
        if n_agents == 0 || horizon == 0 {
            return Err(Error::config("drains: n_agents and horizon must be > 0"));
        }
        profile.validate(horizon)?;

        let total: f64 = profile.points.iter().sum();
        let intensity: Vec<f64> = if total > 0.0 {
            profile
                .points
                .iter()
                .map(|p| p / total * profile.events_per_day)
                .collect()
        } else {
            vec![0.0; horizon]
        };
        let mean_event_energy = if profile.events_per_day > 0.0 {
            profile.mean_daily_energy / profile.events_per_day
        } else {
            0.0
        };

        let draw_split = |purpose: Purpose| -> Vec<f64> {
            let mut data = vec![0.0; n_agents * horizon];
            for agent in 0..n_agents {
                let mut rng = substream_rng(master_seed, purpose, agent as u64, 0);
                let row = &mut data[agent * horizon..(agent + 1) * horizon];
                fill_row(row, &intensity, mean_event_energy, &mut rng);
            }
            data
        };

        Ok(DrainScenario {
            n_agents,
            horizon,
            training: draw_split(Purpose::DrainsTrain),
            validation: draw_split(Purpose::DrainsVal),
        })
    }

    /// Build from explicit rows (e.g. loaded from CSV).
    pub fn from_rows(
        training: Vec<f64>,
        validation: Vec<f64>,
        n_agents: usize,
        horizon: usize,
    ) -> Result<DrainScenario> {
        if training.len() != n_agents * horizon || validation.len() != n_agents * horizon {
            return Err(Error::config(format!(
                "drains: expected {} values per split ({n_agents} agents x {horizon} intervals), \
                 got training {} / validation {}",
                n_agents * horizon,
                training.len(),
                validation.len()
            )));
        }
        if training.iter().chain(validation.iter()).any(|&e| !(e >= 0.0)) {
            return Err(Error::config("drains: entries must be >= 0"));
        }
        Ok(DrainScenario {
            n_agents,
            horizon,
            training,
            validation,
        })
    }

    pub fn zeros(n_agents: usize, horizon: usize) -> DrainScenario {
        DrainScenario {
            n_agents,
            horizon,
            training: vec![0.0; n_agents * horizon],
            validation: vec![0.0; n_agents * horizon],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn training_row(&self, agent: usize) -> &[f64] {
        &self.training[agent * self.horizon..(agent + 1) * self.horizon]
    }

    pub fn validation_row(&self, agent: usize) -> &[f64] {
        &self.validation[agent * self.horizon..(agent + 1) * self.horizon]
    }

    /// Population mean of the training split per interval.
    pub fn mean_training(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.horizon];
        for agent in 0..self.n_agents {
            for (m, &e) in mean.iter_mut().zip(self.training_row(agent)) {
                *m += e;
            }
        }
        for m in &mut mean {
            *m /= self.n_agents as f64;
        }
        mean
    }
}

fn fill_row<R: Rng>(row: &mut [f64], intensity: &[f64], mean_event_energy: f64, rng: &mut R) {
    for (slot, &rate) in row.iter_mut().zip(intensity) {
        if rate <= 0.0 {
            continue;
        }
        let count = Poisson::new(rate).expect("positive rate").sample(rng) as usize;
        if count == 0 || mean_event_energy <= 0.0 {
            continue;
        }
        let event = Exp::new(1.0 / mean_event_energy).expect("positive mean");
        let mut energy = 0.0;
        for _ in 0..count {
            energy += event.sample(rng);
        }
        *slot = energy;
    }
}
