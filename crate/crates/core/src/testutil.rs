//! Random instance generators and oracles shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::RowMatrix;
use crate::mdp::{CostFunction, Policy, TransitionKernel};

pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Strictly positive row-stochastic matrix.
pub fn random_stochastic(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> RowMatrix {
    let mut m = RowMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0.05..1.0));
    for r in 0..rows {
        let s: f64 = m.row(r).iter().sum();
        m.row_mut(r).iter_mut().for_each(|x| *x /= s);
        fix_row_sum(m.row_mut(r));
    }
    m
}

/// Forces the row to sum to 1 to within a couple of ulps.
pub fn fix_row_sum(row: &mut [f64]) {
    let rest: f64 = row[1..].iter().sum();
    row[0] = 1.0 - rest;
}

pub fn random_kernel(n: usize, m: usize, rng: &mut ChaCha8Rng) -> TransitionKernel {
    TransitionKernel::new(n, m, random_stochastic(n * m, n, rng)).unwrap()
}

pub fn random_policy(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Policy {
    Policy::new(random_stochastic(n, m, rng)).unwrap()
}

pub fn random_cost(n: usize, m: usize, rng: &mut ChaCha8Rng) -> CostFunction {
    CostFunction::new(RowMatrix::from_fn(n, m, |_, _| rng.gen_range(-5.0..5.0))).unwrap()
}

/// Left null vector of `P - I` from an SVD, normalized to a distribution.
pub fn svd_stationary_oracle(p: &RowMatrix) -> Vec<f64> {
    let d = p.rows();
    let mut a = p.to_dmatrix().transpose();
    for i in 0..d {
        a[(i, i)] -= 1.0;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let v: Vec<f64> = v_t.row(k).iter().copied().collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}
