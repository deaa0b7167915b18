use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{validate_domain, DataError, Dataset, FieldBounds, Role, SceneSequence, Team};
use crate::seed;

/// Motion model of one synthetic sport.
///
/// Players follow a damped random walk (velocity `v ← inertia·v + noise +
/// home_pull·(home − p)`) whose stationary mean speed is `player_step`. The
/// ball moves in straight segments between random waypoints at roughly
/// `ball_step` per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainProfile {
    pub domain: String,
    pub bounds: FieldBounds,
    pub units: String,
    pub player_step: f64,
    pub ball_step: f64,
    pub inertia: f64,
    pub home_pull: f64,
    /// Players start within this fraction of the field around its center.
    pub spread: f64,
}

impl DomainProfile {
    pub fn basketball() -> Self {
        Self {
            domain: "basketball".into(),
            bounds: FieldBounds { x_min: 0.0, x_max: 94.0, y_min: 0.0, y_max: 50.0 },
            units: "feet".into(),
            player_step: 0.6,
            ball_step: 3.0,
            inertia: 0.85,
            home_pull: 0.02,
            spread: 0.8,
        }
    }

    pub fn football() -> Self {
        Self {
            domain: "football".into(),
            bounds: FieldBounds { x_min: 0.0, x_max: 120.0, y_min: 0.0, y_max: 53.3 },
            units: "yards".into(),
            player_step: 0.25,
            ball_step: 1.0,
            inertia: 0.95,
            home_pull: 0.005,
            spread: 0.5,
        }
    }

    pub fn soccer() -> Self {
        Self {
            domain: "soccer".into(),
            bounds: FieldBounds { x_min: 0.0, x_max: 1050.0, y_min: 0.0, y_max: 680.0 },
            units: "pixels".into(),
            player_step: 4.5,
            ball_step: 23.0,
            inertia: 0.92,
            home_pull: 0.01,
            spread: 0.9,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "basketball" => Some(Self::basketball()),
            "football" => Some(Self::football()),
            "soccer" => Some(Self::soccer()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        validate_domain(&self.domain)?;
        self.bounds.validate()?;
        let ok = self.player_step >= 0.0
            && self.ball_step >= 0.0
            && (0.0..1.0).contains(&self.inertia)
            && (0.0..1.0).contains(&self.home_pull)
            && (0.0..=1.0).contains(&self.spread);
        if !ok {
            return Err(DataError::Invalid(format!("invalid motion parameters in profile `{}`", self.domain)));
        }
        if self.ball_step <= self.player_step && self.ball_step > 0.0 {
            log::warn!("profile `{}`: ball_step {} ≤ player_step {}", self.domain, self.ball_step, self.player_step);
        }
        Ok(())
    }
}

/// Generates `n_sequences` scenes of one ball plus `n_agents − 1` players.
/// Each scene draws from its own seeded stream, so output is a pure function
/// of `(profile, seed)`.
pub fn generate_synthetic(
    profile: &DomainProfile,
    n_sequences: usize,
    n_agents: usize,
    steps: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    profile.validate()?;
    if n_agents < 2 {
        return Err(DataError::Invalid(format!("need a ball and at least one player, got {n_agents} agents")));
    }
    if steps < 4 {
        return Err(DataError::Invalid(format!("need at least 4 steps, got {steps}")));
    }
    let sequences = (0..n_sequences)
        .map(|idx| {
            let mut rng = seed::rng_for(seed, &[seed::stream::GENERATE, idx as u64]);
            generate_scene(profile, n_agents, steps, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    Ok(Dataset::new(sequences, profile.bounds, profile.units.clone()))
}

/// Train and test sets for every builtin profile, in the order of
/// [`KNOWN_DOMAINS`](super::KNOWN_DOMAINS). Each split of each domain gets
/// its own seed derived from `seed`.
pub fn builtin_splits(n_train: usize, n_test: usize, n_agents: usize, steps: usize, seed: u64) -> Result<(Vec<Dataset>, Vec<Dataset>), DataError> {
    let mut trains = Vec::new();
    let mut tests = Vec::new();
    for (d, name) in super::KNOWN_DOMAINS.iter().enumerate() {
        let profile = DomainProfile::builtin(name).expect("builtin profile");
        trains.push(generate_synthetic(&profile, n_train, n_agents, steps, seed::derive_seed(seed, &[d as u64, 0]))?);
        tests.push(generate_synthetic(&profile, n_test, n_agents, steps, seed::derive_seed(seed, &[d as u64, 1]))?);
    }
    Ok((trains, tests))
}

fn generate_scene(profile: &DomainProfile, n_agents: usize, steps: usize, rng: &mut impl Rng) -> Result<SceneSequence, DataError> {
    let b = profile.bounds;
    let mut positions = vec![0.0; n_agents * steps * 2];
    let mut roles = Vec::with_capacity(n_agents);
    let mut teams = Vec::with_capacity(n_agents);

    roles.push(Role::Ball);
    teams.push(Team::None);
    ball_path(profile, steps, rng, &mut positions[..steps * 2]);

    // Per-coordinate noise std giving a stationary mean speed of player_step:
    // E|v| = s·√(π/2) for an isotropic 2-D Gaussian with per-axis std s, and
    // the AR(1) velocity has stationary std σ/√(1 − ρ²).
    let rho = profile.inertia;
    let stationary = profile.player_step / (std::f64::consts::PI / 2.0).sqrt();
    let sigma = stationary * (1.0 - rho * rho).sqrt();
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("non-negative std");
    let start = Normal::new(0.0, stationary.max(f64::MIN_POSITIVE)).expect("non-negative std");
    let still = profile.player_step == 0.0;

    for agent in 1..n_agents {
        roles.push(Role::Player);
        teams.push(if agent % 2 == 1 { Team::Offense } else { Team::Defense });
        let (cx, cy) = (b.x_min + 0.5 * b.width(), b.y_min + 0.5 * b.height());
        let home_x = cx + (rng.random::<f64>() - 0.5) * profile.spread * b.width();
        let home_y = cy + (rng.random::<f64>() - 0.5) * profile.spread * b.height();
        let (mut px, mut py) = (home_x, home_y);
        let (mut vx, mut vy) = if still { (0.0, 0.0) } else { (start.sample(rng), start.sample(rng)) };
        let traj = &mut positions[agent * steps * 2..(agent + 1) * steps * 2];
        for t in 0..steps {
            traj[2 * t] = px;
            traj[2 * t + 1] = py;
            if !still {
                vx = rho * vx + noise.sample(rng) + profile.home_pull * (home_x - px);
                vy = rho * vy + noise.sample(rng) + profile.home_pull * (home_y - py);
            }
            let (nx, ny) = b.clamp(px + vx, py + vy);
            px = nx;
            py = ny;
        }
    }
    SceneSequence::new(profile.domain.clone(), roles, teams, positions, vec![1; n_agents * steps], steps)
}

fn ball_path(profile: &DomainProfile, steps: usize, rng: &mut impl Rng, out: &mut [f64]) {
    let b = profile.bounds;
    let waypoint = |rng: &mut dyn rand::RngCore| {
        (b.x_min + rng.random::<f64>() * b.width(), b.y_min + rng.random::<f64>() * b.height())
    };
    let segment_speed = |rng: &mut dyn rand::RngCore| profile.ball_step * (0.8 + 0.4 * rng.random::<f64>());

    let (mut px, mut py) = waypoint(rng);
    let mut target = waypoint(rng);
    let mut speed = segment_speed(rng);
    for t in 0..steps {
        out[2 * t] = px;
        out[2 * t + 1] = py;
        if profile.ball_step == 0.0 {
            continue;
        }
        // Walk along the polyline; reaching a waypoint mid-step starts the
        // next segment with the remaining budget.
        let mut budget = speed;
        loop {
            let (dx, dy) = (target.0 - px, target.1 - py);
            let dist = (dx * dx + dy * dy).sqrt();
            if dist > budget {
                px += dx / dist * budget;
                py += dy / dist * budget;
                break;
            }
            px = target.0;
            py = target.1;
            budget -= dist;
            target = waypoint(rng);
            speed = segment_speed(rng);
            if budget <= 0.0 {
                break;
            }
        }
    }
}
