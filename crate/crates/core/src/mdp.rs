//! Finite MDP data model.
//!
//! States are `0..n`, actions `0..m`. A (state, action) pair `(i, j)` is
//! flattened to row `i * m + j` of the transition kernel, the 0-based form of
//! the usual `(i - 1) m + j` numbering.

use serde::{Deserialize, Serialize};

use crate::attack::AttackStrategy;
use crate::error::{Error, Result};
use crate::linalg::{self, ensure_stochastic, RowMatrix, SparseKernel, ValidationReport};
use crate::rng::{sample_row, StreamSeed, StreamTag};

#[inline]
pub fn pair_index(state: usize, action: usize, n_actions: usize) -> usize {
    state * n_actions + action
}

#[inline]
pub fn pair_of(index: usize, n_actions: usize) -> (usize, usize) {
    (index / n_actions, index % n_actions)
}

// ---------------------------------------------------------------------------
// Model types
// ---------------------------------------------------------------------------

/// `R[(i, j), i'] = P(X_{t+1} = i' | X_t = i, A_t = j)`, an `(n m) x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    n: usize,
    m: usize,
    probs: RowMatrix,
}

impl TransitionKernel {
    pub fn new(n: usize, m: usize, probs: RowMatrix) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::invalid("kernel", "n and m must be at least 1"));
        }
        if probs.rows() != n * m || probs.cols() != n {
            return Err(Error::Dimension(format!(
                "kernel for n={n}, m={m} must be {}x{n}, got {}x{}",
                n * m,
                probs.rows(),
                probs.cols()
            )));
        }
        ensure_stochastic("kernel", &probs)?;
        Ok(Self { n, m, probs })
    }

    pub fn from_rows(n: usize, m: usize, rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(n, m, RowMatrix::from_rows(rows)?)
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn n_actions(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn prob(&self, state: usize, action: usize, next: usize) -> f64 {
        self.probs.get(pair_index(state, action, self.m), next)
    }

    #[inline]
    pub fn row(&self, state: usize, action: usize) -> &[f64] {
        self.probs.row(pair_index(state, action, self.m))
    }

    pub fn matrix(&self) -> &RowMatrix {
        &self.probs
    }
}

/// Stationary Markov policy, `gamma[i, j] = P(A_t = j | Y_t = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: RowMatrix,
}

impl Policy {
    pub fn new(probs: RowMatrix) -> Result<Self> {
        ensure_stochastic("policy", &probs)?;
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(RowMatrix::from_rows(rows)?)
    }

    /// Policy that plays `actions[i]` in state `i`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        if let Some(&a) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::invalid("policy", format!("action {a} out of range {n_actions}")));
        }
        Ok(Self {
            probs: RowMatrix::from_fn(actions.len(), n_actions, |i, j| if actions[i] == j { 1.0 } else { 0.0 }),
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: RowMatrix::from_fn(n_states, n_actions, |_, _| 1.0 / n_actions as f64),
        }
    }

    pub fn n_states(&self) -> usize {
        self.probs.rows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.cols()
    }

    #[inline]
    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs.get(state, action)
    }

    #[inline]
    pub fn row(&self, state: usize) -> &[f64] {
        self.probs.row(state)
    }

    pub fn matrix(&self) -> &RowMatrix {
        &self.probs
    }

    pub(crate) fn check_against(&self, kernel: &TransitionKernel) -> Result<()> {
        if self.n_states() != kernel.n_states() || self.n_actions() != kernel.n_actions() {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, kernel has n={}, m={}",
                self.n_states(),
                self.n_actions(),
                kernel.n_states(),
                kernel.n_actions()
            )));
        }
        Ok(())
    }
}

/// Step cost `h(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostFunction {
    h: RowMatrix,
}

impl CostFunction {
    pub fn new(h: RowMatrix) -> Result<Self> {
        if let Some(x) = h.as_slice().iter().find(|x| !x.is_finite()) {
            return Err(Error::invalid("cost", format!("non-finite entry {x}")));
        }
        Ok(Self { h })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(RowMatrix::from_rows(rows)?)
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.h.get(state, action)
    }

    pub fn matrix(&self) -> &RowMatrix {
        &self.h
    }

    /// `h_gamma(i) = sum_j h(i, j) gamma[i, j]`.
    pub fn policy_average(&self, policy: &Policy) -> Result<Vec<f64>> {
        if self.h.rows() != policy.n_states() || self.h.cols() != policy.n_actions() {
            return Err(Error::Dimension("cost and policy shapes differ".into()));
        }
        Ok((0..self.h.rows())
            .map(|i| self.h.row(i).iter().zip(policy.row(i)).map(|(h, g)| h * g).sum())
            .collect())
    }
}

/// Discount factor in the open interval `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DiscountFactor(f64);

impl DiscountFactor {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::invalid("discount factor", format!("{alpha} not in (0,1)")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for DiscountFactor {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DiscountFactor> for f64 {
    fn from(d: DiscountFactor) -> f64 {
        d.0
    }
}

/// State chain `L^gamma` induced by a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedChain(pub RowMatrix);

/// Chain over flattened (state, action) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct JointChain(pub RowMatrix);

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDist {
    pub pi: Vec<f64>,
}

impl StationaryDist {
    pub fn dot(&self, v: &[f64]) -> f64 {
        self.pi.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    /// `max_c |(pi P)_c - pi_c|`.
    pub fn residual(&self, p: &RowMatrix) -> f64 {
        p.left_mul(&self.pi)
            .iter()
            .zip(&self.pi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialVariant {
    /// `(I - alpha L + alpha e pi)^{-1} h`.
    MatrixForm,
    /// `(I - alpha L)^{-1} (h - avg e)`, the discounted deviation from the average cost.
    Definitional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaPotential {
    pub g: Vec<f64>,
    pub variant: PotentialVariant,
}

/// Entrywise `m`-step minorization `P^m(r, .) >= lambda * psi(.)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DoeblinCertificate {
    pub lag: usize,
    pub lambda: f64,
    pub psi: Vec<f64>,
    pub found: bool,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

pub fn validate_kernel(probs: &RowMatrix) -> ValidationReport {
    linalg::validate_stochastic(probs)
}

/// `L[i, i'] = sum_j R[(i, j), i'] gamma[i, j]`.
pub fn induced_state_chain(kernel: &TransitionKernel, policy: &Policy) -> Result<InducedChain> {
    policy.check_against(kernel)?;
    let n = kernel.n_states();
    let mut l = RowMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..kernel.n_actions() {
            let w = policy.prob(i, j);
            if w == 0.0 {
                continue;
            }
            for (dst, &p) in l.row_mut(i).iter_mut().zip(kernel.row(i, j)) {
                *dst += w * p;
            }
        }
    }
    Ok(InducedChain(l))
}

/// Pre-attack pair chain: `P[(i, j), (i', j')] = gamma[i', j'] R[(i, j), i']`.
pub fn joint_chain_preattack(kernel: &TransitionKernel, policy: &Policy) -> Result<JointChain> {
    policy.check_against(kernel)?;
    let (n, m) = (kernel.n_states(), kernel.n_actions());
    let p = RowMatrix::from_fn(n * m, n * m, |row, col| {
        let (i, j) = pair_of(row, m);
        let (ii, jj) = pair_of(col, m);
        policy.prob(ii, jj) * kernel.prob(i, j, ii)
    });
    Ok(JointChain(p))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryOptions {
    /// Dense linear solve up to this dimension, power iteration above.
    pub dense_limit: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        Self {
            dense_limit: 1024,
            max_iterations: 500_000,
            tolerance: 1e-12,
        }
    }
}

pub fn stationary_distribution(p: &RowMatrix) -> Result<StationaryDist> {
    stationary_distribution_with(p, &StationaryOptions::default())
}

pub fn stationary_distribution_with(p: &RowMatrix, opts: &StationaryOptions) -> Result<StationaryDist> {
    if p.rows() != p.cols() || p.rows() == 0 {
        return Err(Error::Dimension(format!(
            "{}x{} is not a square chain",
            p.rows(),
            p.cols()
        )));
    }
    if p.rows() <= opts.dense_limit {
        dense_stationary(p)
    } else {
        power_stationary(&SparseKernel::from_dense(p), opts)
    }
}

/// Sparse entry point; densifies small kernels.
pub fn stationary_sparse(k: &SparseKernel, opts: &StationaryOptions) -> Result<StationaryDist> {
    if k.dim() <= opts.dense_limit {
        dense_stationary(&k.to_dense())
    } else {
        power_stationary(k, opts)
    }
}

fn dense_stationary(p: &RowMatrix) -> Result<StationaryDist> {
    if !linalg::has_ergodic_pattern(p) {
        return Err(Error::NoStationary(
            "no m-step minorization exists; chain may be periodic/reducible".into(),
        ));
    }
    let d = p.rows();
    // pi (P - I) = 0 with the last balance equation replaced by sum(pi) = 1.
    let mut a = nalgebra::DMatrix::<f64>::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            a[(c, r)] = p.get(r, c);
        }
        a[(r, r)] -= 1.0;
    }
    for c in 0..d {
        a[(d - 1, c)] = 1.0;
    }
    let mut b = vec![0.0; d];
    b[d - 1] = 1.0;
    let mut pi = linalg::solve(a, &b)?;
    for x in pi.iter_mut() {
        if *x < 0.0 {
            if *x < -1e-9 {
                return Err(Error::NoStationary(format!("negative mass {x}")));
            }
            *x = 0.0;
        }
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|x| *x /= total);
    let dist = StationaryDist { pi };
    let res = dist.residual(p);
    if res > 1e-8 {
        return Err(Error::NoStationary(format!("balance residual {res:e}")));
    }
    Ok(dist)
}

fn power_stationary(k: &SparseKernel, opts: &StationaryOptions) -> Result<StationaryDist> {
    let d = k.dim();
    // A point-mass start keeps periodic chains from looking converged.
    let mut pi = vec![0.0; d];
    pi[0] = 1.0;
    let mut next = vec![0.0; d];
    for _ in 0..opts.max_iterations {
        k.left_mul(&pi, &mut next);
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if diff < opts.tolerance {
            return Ok(StationaryDist { pi });
        }
    }
    Err(Error::NoStationary(format!(
        "power iteration did not converge in {} steps; chain may be periodic/reducible",
        opts.max_iterations
    )))
}

/// `eta(gamma) = (I - alpha L)^{-1} h_gamma`.
pub fn discounted_cost(
    kernel: &TransitionKernel,
    policy: &Policy,
    cost: &CostFunction,
    alpha: DiscountFactor,
) -> Result<Vec<f64>> {
    let l = induced_state_chain(kernel, policy)?;
    let h = cost.policy_average(policy)?;
    discounted_cost_of_chain(&l, &h, alpha)
}

pub fn discounted_cost_of_chain(l: &InducedChain, h: &[f64], alpha: DiscountFactor) -> Result<Vec<f64>> {
    if l.0.rows() != h.len() {
        return Err(Error::Dimension("chain and cost vector sizes differ".into()));
    }
    linalg::solve_shifted(&l.0, alpha.get(), h)
}

pub fn alpha_potential(
    l: &InducedChain,
    h: &[f64],
    alpha: DiscountFactor,
    pi: &StationaryDist,
    variant: PotentialVariant,
) -> Result<AlphaPotential> {
    let n = l.0.rows();
    if h.len() != n || pi.pi.len() != n {
        return Err(Error::Dimension("chain, cost and stationary sizes differ".into()));
    }
    let res = pi.residual(&l.0);
    if res > 1e-8 {
        return Err(Error::Precondition(format!(
            "pi is not stationary for the chain (residual {res:e})"
        )));
    }
    let a = alpha.get();
    let g = match variant {
        PotentialVariant::MatrixForm => {
            let mut lhs = l.0.to_dmatrix() * (-a);
            for i in 0..n {
                lhs[(i, i)] += 1.0;
                for c in 0..n {
                    lhs[(i, c)] += a * pi.pi[c];
                }
            }
            linalg::solve(lhs, h)?
        }
        PotentialVariant::Definitional => {
            let avg = pi.dot(h);
            let centered: Vec<f64> = h.iter().map(|x| x - avg).collect();
            linalg::solve_shifted(&l.0, a, &centered)?
        }
    };
    Ok(AlphaPotential { g, variant })
}

/// Smallest `m <= m_max` with `lambda = sum_c min_r P^m(r, c) > 0`.
pub fn doeblin_certificate(p: &RowMatrix, m_max: usize) -> DoeblinCertificate {
    let d = p.rows();
    let mut power = p.clone();
    for lag in 1..=m_max.max(1) {
        if lag > 1 {
            power = power.matmul(p).expect("square");
        }
        let mins: Vec<f64> = (0..d)
            .map(|c| (0..d).map(|r| power.get(r, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let lambda: f64 = mins.iter().sum();
        if lambda > 0.0 {
            return DoeblinCertificate {
                lag,
                lambda: lambda.min(1.0),
                psi: mins.iter().map(|x| x / lambda).collect(),
                found: true,
            };
        }
    }
    DoeblinCertificate {
        lag: 0,
        lambda: 0.0,
        psi: vec![0.0; d],
        found: false,
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// One closed-loop step: true state, reported observation and action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub a: usize,
}

/// Closed loop `A_t ~ gamma(.|Y_t)`, `X_{t+1} ~ R(.|X_t, A_t)`, with `Y_t`
/// produced by the attack for `t >= onset` and equal to `X_t` before.
///
/// Time is 0-based; `onset = Some(0)` attacks from the first step and `None`
/// never attacks.
pub struct ClosedLoop<'a> {
    kernel: &'a TransitionKernel,
    policy: &'a Policy,
    attack: AttackStrategy,
    onset: Option<usize>,
    t: usize,
    x: usize,
    prev_x: Option<usize>,
    plant: rand_chacha::ChaCha8Rng,
    controller: rand_chacha::ChaCha8Rng,
    attacker: rand_chacha::ChaCha8Rng,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        kernel: &'a TransitionKernel,
        policy: &'a Policy,
        attack: AttackStrategy,
        onset: Option<usize>,
        initial_state: usize,
        seed: StreamSeed,
    ) -> Result<Self> {
        policy.check_against(kernel)?;
        attack.check_against(kernel.n_states())?;
        if initial_state >= kernel.n_states() {
            return Err(Error::invalid("initial state", format!("{initial_state} out of range")));
        }
        Ok(Self {
            kernel,
            policy,
            attack,
            onset,
            t: 0,
            x: initial_state,
            prev_x: None,
            plant: seed.rng(StreamTag::Plant),
            controller: seed.rng(StreamTag::Controller),
            attacker: seed.rng(StreamTag::Attacker),
        })
    }

    pub fn attacked(&self, t: usize) -> bool {
        self.onset.is_some_and(|tau| t >= tau)
    }

    pub fn step(&mut self) -> Step {
        let t = self.t;
        let x = self.x;
        let y = if self.attacked(t) {
            self.attack.report(self.prev_x, x, &mut self.attacker)
        } else {
            x
        };
        let a = sample_row(self.policy.row(y), &mut self.controller);
        let next = sample_row(self.kernel.row(x, a), &mut self.plant);
        self.prev_x = Some(x);
        self.x = next;
        self.t += 1;
        Step { t, x, y, a }
    }

    pub fn current_state(&self) -> usize {
        self.x
    }
}

impl Iterator for ClosedLoop<'_> {
    type Item = Step;

    fn next(&mut self) -> Option<Step> {
        Some(self.step())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub observations: Vec<usize>,
    pub actions: Vec<usize>,
    pub onset: Option<usize>,
    pub seed: StreamSeed,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

pub fn simulate(
    kernel: &TransitionKernel,
    policy: &Policy,
    attack: AttackStrategy,
    horizon: usize,
    onset: Option<usize>,
    initial_state: usize,
    seed: StreamSeed,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    let mut lp = ClosedLoop::new(kernel, policy, attack, onset, initial_state, seed)?;
    let mut traj = Trajectory {
        states: Vec::with_capacity(horizon),
        observations: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        onset,
        seed,
    };
    for _ in 0..horizon {
        let s = lp.step();
        traj.states.push(s.x);
        traj.observations.push(s.y);
        traj.actions.push(s.a);
    }
    Ok(traj)
}
