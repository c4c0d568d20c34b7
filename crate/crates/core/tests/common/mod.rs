#![allow(dead_code)]

use bidomain_core::assembly::State;
use bidomain_core::geometry::{build_conductivity, build_fibers, Conductivities, ConductivityTensors, Mesh};
use bidomain_core::partition::{Decomposition, PrimalConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn slab(n: [usize; 3], h: f64) -> (Mesh, ConductivityTensors) {
    let mesh = Mesh::slab(n[0], n[1], n[2], [h * n[0] as f64, h * n[1] as f64, h * n[2] as f64]).unwrap();
    let t = build_conductivity(&build_fibers(&mesh), Conductivities::default(), None).unwrap();
    (mesh, t)
}

pub fn decompose(mesh: &Mesh, grid: [usize; 3], primal: PrimalConfig) -> Decomposition {
    Decomposition::new(mesh, grid, primal).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth-ish random state with potentials in a physiological range.
pub fn random_state(n: usize, seed: u64) -> State {
    let mut r = rng(seed);
    let ue: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(0.0..100.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    State {
        ui: v.iter().zip(&ue).map(|(a, b)| a + b).collect(),
        ue,
        w,
    }
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
