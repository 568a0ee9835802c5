//! Power management of a sensing node with a packet queue.
//!
//! The state is `(s, q)`: node mode `s` (0 sleep, 1 active) and queue
//! length `q`. Action `a` selects the activation probability `p_a` for the
//! next step (0 eco, 1 performance). Each step one packet departs with
//! probability `r_trans` when the queue is nonempty, then one packet arrives
//! if the node is currently active; packets beyond `n_queue` are dropped.
//! The per-step cost trades queue length against expected activity:
//! `h(s, q, a) = q - rho * p_a`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RowMatrix;
use crate::mdp::{discounted_cost, CostFunction, DiscountFactor, Policy, Trajectory, TransitionKernel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerModelParams {
    pub n_queue: usize,
    pub p0: f64,
    pub p1: f64,
    /// Scene-change probability; descriptive only, the dynamics do not use it.
    pub p_scene: f64,
    pub r_trans: f64,
    pub rho: f64,
    pub alpha: f64,
}

impl Default for PowerModelParams {
    fn default() -> Self {
        Self {
            n_queue: 20,
            p0: 0.2,
            p1: 0.8,
            p_scene: 0.5,
            r_trans: 0.8,
            rho: 20.0,
            alpha: 0.5,
        }
    }
}

impl PowerModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.p0 && self.p0 < self.p1 && self.p1 < 1.0) {
            return Err(Error::invalid(
                "activation probabilities",
                format!("need 0 < p0 < p1 < 1, got p0 = {}, p1 = {}", self.p0, self.p1),
            ));
        }
        for (name, v) in [("p_scene", self.p_scene), ("r_trans", self.r_trans)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid {
                    what: "probability",
                    detail: format!("{name} = {v} not in [0, 1]"),
                });
            }
        }
        if self.n_queue == 0 {
            return Err(Error::invalid("n_queue", "must be >= 1"));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("rho", format!("{} must be >= 0", self.rho)));
        }
        DiscountFactor::new(self.alpha)?;
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        2 * (self.n_queue + 1)
    }

    pub fn discount(&self) -> Result<DiscountFactor> {
        DiscountFactor::new(self.alpha)
    }

    pub fn activation(&self, action: usize) -> f64 {
        if action == 0 {
            self.p0
        } else {
            self.p1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompositeState {
    pub node: usize,
    pub queue: usize,
}

impl CompositeState {
    pub fn encode(self, n_queue: usize) -> usize {
        self.node * (n_queue + 1) + self.queue
    }

    pub fn decode(index: usize, n_queue: usize) -> Self {
        Self {
            node: index / (n_queue + 1),
            queue: index % (n_queue + 1),
        }
    }
}

/// Policies are evaluated from an idle node with an empty queue.
pub const INITIAL_STATE: usize = 0;

/// Law of the next queue length; departure first, then arrival.
fn queue_law(q: usize, arrival: bool, params: &PowerModelParams) -> Vec<(usize, f64)> {
    let after_departure: Vec<(usize, f64)> = if q > 0 {
        vec![(q - 1, params.r_trans), (q, 1.0 - params.r_trans)]
    } else {
        vec![(0, 1.0)]
    };
    after_departure
        .into_iter()
        .map(|(q, p)| ((q + usize::from(arrival)).min(params.n_queue), p))
        .collect()
}

pub fn build_model(params: &PowerModelParams) -> Result<(TransitionKernel, CostFunction)> {
    params.validate()?;
    let n = params.n_states();
    let nq = params.n_queue;
    let mut probs = RowMatrix::zeros(n * 2, n);
    let mut cost = RowMatrix::zeros(n, 2);
    for x in 0..n {
        let st = CompositeState::decode(x, nq);
        let queue = queue_law(st.queue, st.node == 1, params);
        for a in 0..2 {
            let p_on = params.activation(a);
            let row = probs.row_mut(x * 2 + a);
            for &(qq, pq) in &queue {
                row[CompositeState { node: 0, queue: qq }.encode(nq)] += (1.0 - p_on) * pq;
                row[CompositeState { node: 1, queue: qq }.encode(nq)] += p_on * pq;
            }
            cost.set(x, a, st.queue as f64 - params.rho * p_on);
        }
    }
    Ok((TransitionKernel::new(n, 2, probs)?, CostFunction::new(cost)?))
}

/// Two-state node kernel: `sigma(s' | s, a)`, independent of `s`.
pub fn node_kernel(params: &PowerModelParams) -> Result<TransitionKernel> {
    params.validate()?;
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|k| {
            let p = params.activation(k % 2);
            vec![1.0 - p, p]
        })
        .collect();
    TransitionKernel::from_rows(2, 2, &rows)
}

/// Performance mode while `q <= threshold`, eco mode above, with the other
/// action played with probability `beta`.
pub fn threshold_policy(params: &PowerModelParams, threshold: usize, beta: f64) -> Result<Policy> {
    if threshold > params.n_queue {
        return Err(Error::invalid(
            "threshold",
            format!("{threshold} exceeds n_queue = {}", params.n_queue),
        ));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid("beta", format!("{beta} not in [0, 1]")));
    }
    let rows: Vec<Vec<f64>> = (0..params.n_states())
        .map(|x| {
            let q = CompositeState::decode(x, params.n_queue).queue;
            if q <= threshold {
                vec![beta, 1.0 - beta]
            } else {
                vec![1.0 - beta, beta]
            }
        })
        .collect();
    Policy::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdSearch {
    pub best: usize,
    /// `(threshold, discounted cost from the initial state)`.
    pub table: Vec<(usize, f64)>,
}

pub fn find_optimal_threshold(
    params: &PowerModelParams,
    thresholds: impl IntoIterator<Item = usize>,
) -> Result<ThresholdSearch> {
    let (kernel, cost) = build_model(params)?;
    let alpha = params.discount()?;
    let mut table = Vec::new();
    for l in thresholds {
        let policy = threshold_policy(params, l, 0.0)?;
        let eta = discounted_cost(&kernel, &policy, &cost, alpha)?;
        table.push((l, eta[INITIAL_STATE]));
    }
    let best = table
        .iter()
        .fold(None::<(usize, f64)>, |acc, &(l, v)| match acc {
            Some((bl, bv)) if bv < v || (bv == v && bl < l) => Some((bl, bv)),
            _ => Some((l, v)),
        })
        .map(|(l, _)| l)
        .ok_or_else(|| Error::invalid("threshold range", "empty"))?;
    Ok(ThresholdSearch { best, table })
}

/// Node-mode component of the observations, paired with the actions.
pub fn node_projection(traj: &Trajectory, n_queue: usize) -> (Vec<usize>, Vec<usize>) {
    let ys = traj.observations.iter().map(|&y| y / (n_queue + 1)).collect();
    (ys, traj.actions.clone())
}
