#![allow(dead_code)]

use std::sync::OnceLock;

use dpme_core::instances::{generate_power_instance, Instance, PowerConfig};
use dpme_core::model::FirstStage;
use dpme_core::qp;
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = qp::DEFAULT_TOL;

pub fn power(seed: u64, scenarios: usize) -> Instance {
    generate_power_instance(&PowerConfig { seed, ..PowerConfig::default() }, scenarios).unwrap()
}

/// Small seeded power instances shared by the property tests.
pub fn small_powers() -> &'static [Instance] {
    static CELL: OnceLock<Vec<Instance>> = OnceLock::new();
    CELL.get_or_init(|| (0..4).map(|seed| power(seed, 8)).collect())
}

pub fn random_in_xbar(fs: &FirstStage, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let (lo, hi) = (fs.xbar_lower(), fs.xbar_upper());
    DVector::from_iterator(fs.n(), (0..fs.n()).map(|i| rng.random_range(lo[i]..=hi[i])))
}

pub fn random_in_x(fs: &FirstStage, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let u = DVector::from_iterator(fs.n(), (0..fs.n()).map(|i| rng.random_range(fs.lower[i]..=fs.upper[i])));
    fs.project(&u, TOL).unwrap()
}

pub fn pt(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}
