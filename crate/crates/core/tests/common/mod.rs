#![allow(dead_code)]

use dwmark::attack::AttackMatrix;
use dwmark::linalg::RowMatrix;
use dwmark::mdp::{CostFunction, Policy, TransitionKernel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-stochastic matrix with entries bounded away from zero.
pub fn stochastic(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> RowMatrix {
    let mut m = RowMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0.05..1.0));
    for r in 0..rows {
        let row = m.row_mut(r);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
        let rest: f64 = row[1..].iter().sum();
        row[0] = 1.0 - rest;
    }
    m
}

pub fn kernel(n: usize, m: usize, rng: &mut ChaCha8Rng) -> TransitionKernel {
    TransitionKernel::new(n, m, stochastic(n * m, n, rng)).unwrap()
}

pub fn policy(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Policy {
    Policy::new(stochastic(n, m, rng)).unwrap()
}

pub fn cost(n: usize, m: usize, rng: &mut ChaCha8Rng) -> CostFunction {
    CostFunction::new(RowMatrix::from_fn(n, m, |_, _| rng.gen_range(-5.0..5.0))).unwrap()
}

/// Two-state, two-action model with a stealthy matrix attack.
pub fn synthetic() -> (TransitionKernel, Policy, AttackMatrix) {
    let k =
        TransitionKernel::from_rows(2, 2, &[vec![0.7, 0.3], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
    let g = Policy::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
    let phi = AttackMatrix::from_rows(2, &[vec![0.3, 0.7], vec![0.8, 0.2], vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
    (k, g, phi)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
