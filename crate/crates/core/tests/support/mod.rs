#![allow(dead_code)]

pub mod gradients;
pub mod plain;

use multitraj::data::{builtin_splits, Dataset, FieldBounds, Role, SceneSequence, Team};
use multitraj::numerics::Array;
use multitraj::seed;
use rand::Rng;

pub fn random_array(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A fully observed scene with a ball and `n − 1` alternating-team players.
pub fn scene(domain: &str, positions: Vec<f64>, n: usize, t: usize) -> SceneSequence {
    let roles = (0..n).map(|i| if i == 0 { Role::Ball } else { Role::Player }).collect();
    let teams = (0..n).map(|i| if i == 0 { Team::None } else if i % 2 == 1 { Team::Offense } else { Team::Defense }).collect();
    SceneSequence::new(domain, roles, teams, positions, vec![1; n * t], t).unwrap()
}

pub fn random_scene(domain: &str, n: usize, t: usize, rng: &mut impl Rng) -> SceneSequence {
    let positions = (0..n * t * 2).map(|_| rng.random_range(0.0..1.0)).collect();
    scene(domain, positions, n, t)
}

pub fn unit_dataset(scenes: Vec<SceneSequence>) -> Dataset {
    Dataset::new(scenes, FieldBounds::UNIT, multitraj::data::NORMALIZED_UNITS)
}

/// The default three-domain task: 200 train and 50 test scenes per domain,
/// 5 agents, 24 steps.
pub fn default_task(data_seed: u64) -> (Vec<Dataset>, Vec<Dataset>) {
    builtin_splits(200, 50, 5, 24, data_seed).unwrap()
}

pub fn rng(seed: u64) -> seed::Rng {
    seed::rng_for(seed, &[0xface])
}
