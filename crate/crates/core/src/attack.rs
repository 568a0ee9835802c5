//! Feedback-channel attacks.
//!
//! An attack replaces the observation `Y_t` the controller receives. Two
//! families coexist behind [`AttackStrategy`]:
//!
//! - memory-two attacks, `Y_{t+1} ~ phi(.|X_t, X_{t+1})`, either as an explicit
//!   [`AttackMatrix`] or as the predictive resampler that infers the hidden
//!   action from the observed state pair;
//! - the virtual-system attack, which runs its own copy of the closed loop
//!   and reports that copy's state. It has unbounded memory, so it has no
//!   matrix form and none of the chain constructions below apply to it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_stochastic, RowMatrix, SparseKernel};
use crate::mdp::{pair_index, JointChain, Policy, TransitionKernel};
use crate::rng::sample_row;

/// `phi[(i, i'), l'] = P(Y_{t+1} = l' | X_t = i, X_{t+1} = i')`, an `n^2 x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackMatrix {
    n: usize,
    probs: RowMatrix,
}

impl AttackMatrix {
    pub fn new(n: usize, probs: RowMatrix) -> Result<Self> {
        if probs.rows() != n * n || probs.cols() != n {
            return Err(Error::Dimension(format!(
                "attack matrix for n={n} must be {}x{n}, got {}x{}",
                n * n,
                probs.rows(),
                probs.cols()
            )));
        }
        ensure_stochastic("attack matrix", &probs)?;
        Ok(Self { n, probs })
    }

    pub fn from_rows(n: usize, rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(n, RowMatrix::from_rows(rows)?)
    }

    /// Truthful reporting: `phi[(i, i'), l'] = 1` iff `l' = i'`.
    pub fn null(n: usize) -> Self {
        let probs = RowMatrix::from_fn(n * n, n, |r, c| if r % n == c { 1.0 } else { 0.0 });
        Self { n, probs }
    }

    /// Reports `perm[X_{t+1}]` deterministically.
    pub fn relabel(perm: &[usize]) -> Result<Self> {
        let n = perm.len();
        let probs = RowMatrix::from_fn(n * n, n, |r, c| if perm[r % n] == c { 1.0 } else { 0.0 });
        Self::new(n, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn row(&self, prev: usize, next: usize) -> &[f64] {
        self.probs.row(prev * self.n + next)
    }

    #[inline]
    pub fn prob(&self, prev: usize, next: usize, reported: usize) -> f64 {
        self.probs.get(prev * self.n + next, reported)
    }

    pub fn matrix(&self) -> &RowMatrix {
        &self.probs
    }
}

/// How the predictive attacker turns the action posterior into `A_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    /// Draw `A_hat` from the posterior.
    #[default]
    Sample,
    /// Take the most probable action (lowest index on ties).
    Map,
}

#[derive(Debug, Clone)]
pub enum AttackStrategy {
    Null,
    Matrix(AttackMatrix),
    PredictiveResampling {
        kernel: TransitionKernel,
        policy: Policy,
        mode: PosteriorMode,
    },
    VirtualSystem {
        kernel: TransitionKernel,
        policy: Policy,
        hidden: Option<usize>,
    },
}

pub fn null_attack() -> AttackStrategy {
    AttackStrategy::Null
}

pub fn matrix_attack(phi: AttackMatrix) -> AttackStrategy {
    AttackStrategy::Matrix(phi)
}

pub fn predictive_resampling_attack(
    kernel: &TransitionKernel,
    policy: &Policy,
    mode: PosteriorMode,
) -> Result<AttackStrategy> {
    policy.check_against(kernel)?;
    Ok(AttackStrategy::PredictiveResampling {
        kernel: kernel.clone(),
        policy: policy.clone(),
        mode,
    })
}

/// The attacker's randomness comes from the attacker stream of the closed
/// loop, which is independent of the plant and controller streams.
pub fn virtual_system_attack(kernel: &TransitionKernel, policy: &Policy) -> Result<AttackStrategy> {
    policy.check_against(kernel)?;
    Ok(AttackStrategy::VirtualSystem {
        kernel: kernel.clone(),
        policy: policy.clone(),
        hidden: None,
    })
}

impl AttackStrategy {
    pub fn kind(&self) -> &'static str {
        match self {
            AttackStrategy::Null => "null",
            AttackStrategy::Matrix(_) => "matrix",
            AttackStrategy::PredictiveResampling { .. } => "predictive_resampling",
            AttackStrategy::VirtualSystem { .. } => "virtual_system",
        }
    }

    /// Matrix form, when the attack has one.
    pub fn as_matrix(&self, n: usize) -> Option<AttackMatrix> {
        match self {
            AttackStrategy::Null => Some(AttackMatrix::null(n)),
            AttackStrategy::Matrix(phi) => Some(phi.clone()),
            AttackStrategy::PredictiveResampling { kernel, policy, mode } => {
                Some(predictive_matrix(kernel, policy, *mode))
            }
            AttackStrategy::VirtualSystem { .. } => None,
        }
    }

    pub(crate) fn check_against(&self, n: usize) -> Result<()> {
        let got = match self {
            AttackStrategy::Null => return Ok(()),
            AttackStrategy::Matrix(phi) => phi.n_states(),
            AttackStrategy::PredictiveResampling { kernel, .. } | AttackStrategy::VirtualSystem { kernel, .. } => {
                kernel.n_states()
            }
        };
        if got != n {
            return Err(Error::Dimension(format!(
                "attack built for {got} states, plant has {n}"
            )));
        }
        Ok(())
    }

    /// Produces `Y_t` from the true current state and, when available, the
    /// true previous state.
    pub fn report(&mut self, prev: Option<usize>, x: usize, rng: &mut ChaCha8Rng) -> usize {
        match self {
            AttackStrategy::Null => x,
            AttackStrategy::Matrix(phi) => match prev {
                Some(p) => sample_row(phi.row(p, x), rng),
                None => x,
            },
            AttackStrategy::PredictiveResampling { kernel, policy, mode } => match prev {
                Some(p) => {
                    let post = action_posterior(kernel, policy, p, x);
                    let a_hat = match mode {
                        PosteriorMode::Sample => sample_row(&post, rng),
                        PosteriorMode::Map => argmax(&post),
                    };
                    sample_row(kernel.row(p, a_hat), rng)
                }
                None => x,
            },
            AttackStrategy::VirtualSystem { kernel, policy, hidden } => {
                let next = match *hidden {
                    // The copy starts from the true state at onset.
                    None => x,
                    Some(h) => {
                        let a_hat = sample_row(policy.row(h), rng);
                        sample_row(kernel.row(h, a_hat), rng)
                    }
                };
                *hidden = Some(next);
                next
            }
        }
    }
}

/// `P(A_t = j | X_t = prev, X_{t+1} = next)` proportional to
/// `gamma[prev, j] R[(prev, j), next]`.
///
/// Off-model pairs (zero posterior mass, which happens once the controller
/// acts on falsified observations) fall back to a flat prior over actions.
pub fn action_posterior(kernel: &TransitionKernel, policy: &Policy, prev: usize, next: usize) -> Vec<f64> {
    let m = kernel.n_actions();
    let mut w: Vec<f64> = (0..m)
        .map(|j| policy.prob(prev, j) * kernel.prob(prev, j, next))
        .collect();
    let mut total: f64 = w.iter().sum();
    if total <= 0.0 {
        w = (0..m).map(|j| kernel.prob(prev, j, next)).collect();
        total = w.iter().sum();
    }
    if total <= 0.0 {
        // Transition impossible under every action: nothing to infer.
        return policy.row(prev).to_vec();
    }
    w.iter().map(|x| x / total).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Equivalent memory-two matrix of the predictive resampler:
/// `phi[(i, i'), .] = sum_j post(j | i, i') R[(i, j), .]`.
pub fn predictive_matrix(kernel: &TransitionKernel, policy: &Policy, mode: PosteriorMode) -> AttackMatrix {
    let n = kernel.n_states();
    let mut probs = RowMatrix::zeros(n * n, n);
    for i in 0..n {
        for ii in 0..n {
            let mut post = action_posterior(kernel, policy, i, ii);
            if mode == PosteriorMode::Map {
                let k = argmax(&post);
                post.iter_mut()
                    .enumerate()
                    .for_each(|(j, p)| *p = if j == k { 1.0 } else { 0.0 });
            }
            let row = probs.row_mut(i * n + ii);
            for (j, &w) in post.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (dst, &p) in row.iter_mut().zip(kernel.row(i, j)) {
                    *dst += w * p;
                }
            }
        }
    }
    AttackMatrix { n, probs }
}

/// Post-attack pair chain:
/// `P[(i, j), (i', j')] = R[(i, j), i'] sum_l' phi[(i, i'), l'] gamma[l', j']`.
pub fn joint_chain_postattack(kernel: &TransitionKernel, policy: &Policy, phi: &AttackMatrix) -> Result<JointChain> {
    policy.check_against(kernel)?;
    let (n, m) = (kernel.n_states(), kernel.n_actions());
    if phi.n_states() != n {
        return Err(Error::Dimension(format!(
            "attack has {} states, kernel {n}",
            phi.n_states()
        )));
    }
    let mut p = RowMatrix::zeros(n * m, n * m);
    for i in 0..n {
        for j in 0..m {
            let row = pair_index(i, j, m);
            for ii in 0..n {
                let r = kernel.prob(i, j, ii);
                if r == 0.0 {
                    continue;
                }
                for jj in 0..m {
                    let mix: f64 = (0..n).map(|l| phi.prob(i, ii, l) * policy.prob(l, jj)).sum();
                    p.set(row, pair_index(ii, jj, m), r * mix);
                }
            }
        }
    }
    Ok(JointChain(p))
}

/// Chain over `Z_t = (X_t, A_t, Y_t)`, flattened as `(x * m + a) * n + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedChain {
    n: usize,
    m: usize,
    kernel: SparseKernel,
}

impl ExtendedChain {
    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn n_actions(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    #[inline]
    pub fn index(&self, x: usize, a: usize, y: usize) -> usize {
        (x * self.m + a) * self.n + y
    }

    #[inline]
    pub fn decode(&self, z: usize) -> (usize, usize, usize) {
        let y = z % self.n;
        let xa = z / self.n;
        (xa / self.m, xa % self.m, y)
    }

    /// The sparse kernel; its nonzero pattern is the support set of one-step
    /// transitions.
    pub fn kernel(&self) -> &SparseKernel {
        &self.kernel
    }

    pub fn support_size(&self) -> usize {
        self.kernel.nnz()
    }
}

/// `P(z -> z') = R[(x, a), x'] phi[(x, x'), y'] gamma[y', a']`.
pub fn extended_chain(kernel: &TransitionKernel, policy: &Policy, phi: &AttackMatrix) -> Result<ExtendedChain> {
    policy.check_against(kernel)?;
    let (n, m) = (kernel.n_states(), kernel.n_actions());
    if phi.n_states() != n {
        return Err(Error::Dimension(format!(
            "attack has {} states, kernel {n}",
            phi.n_states()
        )));
    }
    let dim = n * m * n;
    let mut rows = Vec::with_capacity(dim);
    for x in 0..n {
        for a in 0..m {
            // Rows for every y share the same successor law.
            let mut succ = Vec::new();
            for xx in 0..n {
                let r = kernel.prob(x, a, xx);
                if r == 0.0 {
                    continue;
                }
                for yy in 0..n {
                    let f = phi.prob(x, xx, yy);
                    if f == 0.0 {
                        continue;
                    }
                    for aa in 0..m {
                        let g = policy.prob(yy, aa);
                        if g > 0.0 {
                            succ.push(((xx * m + aa) * n + yy, r * f * g));
                        }
                    }
                }
            }
            for _ in 0..n {
                rows.push(succ.clone());
            }
        }
    }
    let kernel = SparseKernel::from_rows(dim, rows)?;
    for r in 0..dim {
        let s = kernel.row_sum(r);
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::invalid("extended chain", format!("row {r} sums to {s}")));
        }
    }
    Ok(ExtendedChain { n, m, kernel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{joint_chain_preattack, simulate, stationary_distribution, validate_kernel};
    use crate::rng::{stream, StreamSeed, StreamTag};
    use crate::testutil::*;

    fn two_state() -> (TransitionKernel, Policy) {
        let k = TransitionKernel::from_rows(2, 2, &[vec![0.7, 0.3], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7]])
            .unwrap();
        let g = Policy::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        (k, g)
    }

    #[test]
    fn null_matrix_behaves_like_null_attack() {
        let (k, g) = two_state();
        let seed = StreamSeed::new(3, 0);
        let a = simulate(&k, &g, null_attack(), 2000, Some(0), 0, seed).unwrap();
        let b = simulate(&k, &g, matrix_attack(AttackMatrix::null(2)), 2000, Some(0), 0, seed).unwrap();
        assert_eq!(a.observations, a.states);
        assert_eq!(b.observations, b.states);
    }

    #[test]
    fn swap_attack_relabels() {
        let (k, g) = two_state();
        let swap = AttackMatrix::relabel(&[1, 0]).unwrap();
        let t = simulate(&k, &g, matrix_attack(swap), 50_000, Some(0), 0, StreamSeed::new(4, 0)).unwrap();
        let x0 = t.states[1..].iter().filter(|&&x| x == 0).count();
        let y1 = t.observations[1..].iter().filter(|&&y| y == 1).count();
        assert_eq!(x0, y1);
        assert!(t.states[1..]
            .iter()
            .zip(&t.observations[1..])
            .all(|(x, y)| *y == 1 - *x));
    }

    #[test]
    fn postattack_with_null_equals_preattack() {
        let mut rng = test_rng(31);
        let k = random_kernel(3, 2, &mut rng);
        let g = random_policy(3, 2, &mut rng);
        let pre = joint_chain_preattack(&k, &g).unwrap();
        let post = joint_chain_postattack(&k, &g, &AttackMatrix::null(3)).unwrap();
        assert!(pre.0.max_abs_diff(&post.0) < 1e-15);
    }

    #[test]
    fn postattack_rows_sum_to_one() {
        let mut rng = test_rng(32);
        let k = random_kernel(3, 2, &mut rng);
        let g = random_policy(3, 2, &mut rng);
        let phi = AttackMatrix::new(3, random_stochastic(9, 3, &mut rng)).unwrap();
        let p = joint_chain_postattack(&k, &g, &phi).unwrap();
        assert!(validate_kernel(&p.0).passes());
    }

    #[test]
    fn extended_chain_structure() {
        let (k, g) = two_state();
        let mut rng = test_rng(33);
        let phi = AttackMatrix::new(2, random_stochastic(4, 2, &mut rng)).unwrap();
        let ext = extended_chain(&k, &g, &phi).unwrap();
        assert_eq!(ext.dim(), 8);
        for z in 0..8 {
            let (x, a, y) = ext.decode(z);
            assert_eq!(ext.index(x, a, y), z);
            assert!((ext.kernel().row_sum(z) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extended_chain_null_support_on_diagonal_slice() {
        let mut rng = test_rng(34);
        let k = random_kernel(3, 2, &mut rng);
        let g = random_policy(3, 2, &mut rng);
        let ext = extended_chain(&k, &g, &AttackMatrix::null(3)).unwrap();
        for z in 0..ext.dim() {
            for (zz, _) in ext.kernel().row(z) {
                let (x, _, y) = ext.decode(zz);
                assert_eq!(x, y);
            }
        }
        // Projected (x, a) dynamics equal the pre-attack pair chain.
        let pre = joint_chain_preattack(&k, &g).unwrap();
        for x in 0..3 {
            for a in 0..2 {
                let z = ext.index(x, a, x);
                let mut proj = vec![0.0; 6];
                for (zz, p) in ext.kernel().row(z) {
                    let (xx, aa, _) = ext.decode(zz);
                    proj[xx * 2 + aa] += p;
                }
                for c in 0..6 {
                    assert!((proj[c] - pre.0.get(x * 2 + a, c)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn extended_marginal_matches_postattack_state_chain() {
        let mut rng = test_rng(35);
        let k = random_kernel(3, 2, &mut rng);
        let g = random_policy(3, 2, &mut rng);
        let phi = AttackMatrix::new(3, random_stochastic(9, 3, &mut rng)).unwrap();
        let ext = extended_chain(&k, &g, &phi).unwrap();
        let pi_z = stationary_distribution(&ext.kernel().to_dense()).unwrap();
        let joint = joint_chain_postattack(&k, &g, &phi).unwrap();
        let pi_xa = stationary_distribution(&joint.0).unwrap();
        let mut marg = vec![0.0; 3];
        for (z, p) in pi_z.pi.iter().enumerate() {
            marg[ext.decode(z).0] += p;
        }
        for x in 0..3 {
            let want: f64 = (0..2).map(|a| pi_xa.pi[x * 2 + a]).sum();
            assert!((marg[x] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic_policy_posterior_is_point_mass() {
        let (k, _) = two_state();
        let g = Policy::deterministic(&[1, 0], 2).unwrap();
        for prev in 0..2 {
            for next in 0..2 {
                let post = action_posterior(&k, &g, prev, next);
                let want = if prev == 0 { [0.0, 1.0] } else { [1.0, 0.0] };
                assert_eq!(post, want);
            }
        }
    }

    #[test]
    fn predictive_matrix_reproduces_simulated_reports() {
        let (k, g) = two_state();
        let mut att = predictive_resampling_attack(&k, &g, PosteriorMode::Sample).unwrap();
        let phi = predictive_matrix(&k, &g, PosteriorMode::Sample);
        let mut rng = stream(8, 0, StreamTag::Attacker);
        let mut hits = [[0usize; 2]; 4];
        let n = 400_000;
        for t in 0..n {
            let (p, x) = ((t / 2) % 2, t % 2);
            let y = att.report(Some(p), x, &mut rng);
            hits[p * 2 + x][y] += 1;
        }
        for r in 0..4 {
            let tot = (hits[r][0] + hits[r][1]) as f64;
            assert!((hits[r][1] as f64 / tot - phi.matrix().get(r, 1)).abs() < 0.01);
        }
    }

    #[test]
    fn virtual_system_starts_at_truth() {
        let (k, g) = two_state();
        let mut att = virtual_system_attack(&k, &g).unwrap();
        let mut rng = stream(9, 0, StreamTag::Attacker);
        assert_eq!(att.report(None, 1, &mut rng), 1);
        assert!(att.as_matrix(2).is_none());
    }

    #[test]
    fn dimension_mismatch() {
        let (k, g) = two_state();
        assert!(joint_chain_postattack(&k, &g, &AttackMatrix::null(3)).is_err());
        assert!(extended_chain(&k, &g, &AttackMatrix::null(3)).is_err());
        assert!(AttackMatrix::from_rows(2, &[vec![1.0, 0.0]]).is_err());
    }
}
