//! Watermarked control and its cost.
//!
//! The controller plays `gamma~ = (1 - beta) gamma* + beta nu`: with
//! probability `beta` the action is drawn from the watermark law `nu`
//! instead of the nominal policy. Mixing is affine in both the induced chain
//! and the policy-averaged cost, which gives closed forms for the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, RowMatrix};
use crate::mdp::{
    alpha_potential, discounted_cost_of_chain, doeblin_certificate, induced_state_chain, stationary_distribution,
    CostFunction, DiscountFactor, InducedChain, Policy, PotentialVariant, TransitionKernel,
};

/// Lag cap used when certifying that an induced chain is ergodic.
const CERTIFICATE_LAG: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkSpec {
    nu: Policy,
    beta: f64,
}

impl WatermarkSpec {
    pub fn new(nu: Policy, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid("beta", format!("{beta} not in [0, 1]")));
        }
        Ok(Self { nu, beta })
    }

    pub fn nu(&self) -> &Policy {
        &self.nu
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

pub fn mix_policy(base: &Policy, spec: &WatermarkSpec) -> Result<Policy> {
    if base.n_states() != spec.nu.n_states() || base.n_actions() != spec.nu.n_actions() {
        return Err(Error::Dimension(format!(
            "policy is {}x{}, watermark is {}x{}",
            base.n_states(),
            base.n_actions(),
            spec.nu.n_states(),
            spec.nu.n_actions()
        )));
    }
    Policy::new(base.matrix().convex(spec.nu.matrix(), spec.beta)?)
}

/// Induced chain and averaged cost at mixing weight `beta`, evaluated
/// affinely so that `beta` slightly outside `[0, 1]` is allowed.
pub fn affine_mixture(
    kernel: &TransitionKernel,
    base: &Policy,
    nu: &Policy,
    cost: &CostFunction,
    beta: f64,
) -> Result<(InducedChain, Vec<f64>)> {
    let l0 = induced_state_chain(kernel, base)?;
    let l1 = induced_state_chain(kernel, nu)?;
    let h0 = cost.policy_average(base)?;
    let h1 = cost.policy_average(nu)?;
    let l = l0.0.convex(&l1.0, beta)?;
    let h = h0.iter().zip(&h1).map(|(a, b)| (1.0 - beta) * a + beta * b).collect();
    Ok((InducedChain(l), h))
}

fn require_ergodic(l: &InducedChain, what: &str) -> Result<()> {
    if doeblin_certificate(&l.0, CERTIFICATE_LAG).found {
        Ok(())
    } else {
        Err(Error::NotErgodic(format!(
            "{what} induced chain has no minorization within {CERTIFICATE_LAG} steps"
        )))
    }
}

fn potential(l: &InducedChain, h: &[f64], alpha: DiscountFactor) -> Result<Vec<f64>> {
    let pi = stationary_distribution(&l.0)?;
    Ok(alpha_potential(l, h, alpha, &pi, PotentialVariant::MatrixForm)?.g)
}

/// Loss of switching from `gamma` to `gamma'`, under both readings of the
/// cost vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactLoss {
    /// `eta(gamma') - eta(gamma)` with each policy's own averaged cost.
    pub direct: Vec<f64>,
    /// `eta(gamma') - eta(gamma)` with `h_gamma` used for both policies.
    pub common_cost_direct: Vec<f64>,
    /// `alpha (I - alpha L')^{-1} (L' - L) g_alpha(gamma)`.
    pub identity_rhs: Vec<f64>,
}

pub fn control_loss_exact(
    kernel: &TransitionKernel,
    gamma: &Policy,
    gamma_prime: &Policy,
    cost: &CostFunction,
    alpha: DiscountFactor,
) -> Result<ExactLoss> {
    let l = induced_state_chain(kernel, gamma)?;
    let lp = induced_state_chain(kernel, gamma_prime)?;
    require_ergodic(&l, "base")?;
    require_ergodic(&lp, "perturbed")?;
    let h = cost.policy_average(gamma)?;
    let hp = cost.policy_average(gamma_prime)?;
    let eta = discounted_cost_of_chain(&l, &h, alpha)?;
    let eta_own = discounted_cost_of_chain(&lp, &hp, alpha)?;
    let eta_common = discounted_cost_of_chain(&lp, &h, alpha)?;

    let g = potential(&l, &h, alpha)?;
    let dg = lp.0.sub(&l.0)?.mul_vec(&g);
    let a = alpha.get();
    let rhs = linalg::solve_shifted(&lp.0, a, &dg)?;

    Ok(ExactLoss {
        direct: eta_own.iter().zip(&eta).map(|(x, y)| x - y).collect(),
        common_cost_direct: eta_common.iter().zip(&eta).map(|(x, y)| x - y).collect(),
        identity_rhs: rhs.iter().map(|x| a * x).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// `alpha B g_alpha(gamma*)`: the kernel term only.
    KernelOnly,
    /// Adds `(I - alpha L*)^{-1} (h_nu - h*)` for action-dependent costs.
    #[default]
    Full,
}

/// `B(nu, gamma*) = (I - alpha L*)^{-1} (L^nu - L*)`.
pub fn sensitivity_matrix(
    kernel: &TransitionKernel,
    nu: &Policy,
    base: &Policy,
    alpha: DiscountFactor,
) -> Result<RowMatrix> {
    let l = induced_state_chain(kernel, base)?;
    let ln = induced_state_chain(kernel, nu)?;
    let inv = linalg::inverse_shifted(&l.0, alpha.get())?;
    inv.matmul(&ln.0.sub(&l.0)?)
}

/// `d eta(gamma~) / d beta` at `beta = 0`.
pub fn control_loss_derivative(
    kernel: &TransitionKernel,
    nu: &Policy,
    base: &Policy,
    cost: &CostFunction,
    alpha: DiscountFactor,
    mode: DerivativeMode,
) -> Result<Vec<f64>> {
    Ok(derivatives(kernel, nu, base, cost, alpha)?.pick(mode))
}

struct Derivatives {
    b: RowMatrix,
    kernel_only: Vec<f64>,
    full: Vec<f64>,
}

impl Derivatives {
    fn pick(self, mode: DerivativeMode) -> Vec<f64> {
        match mode {
            DerivativeMode::KernelOnly => self.kernel_only,
            DerivativeMode::Full => self.full,
        }
    }
}

fn derivatives(
    kernel: &TransitionKernel,
    nu: &Policy,
    base: &Policy,
    cost: &CostFunction,
    alpha: DiscountFactor,
) -> Result<Derivatives> {
    let l = induced_state_chain(kernel, base)?;
    require_ergodic(&l, "base")?;
    let h = cost.policy_average(base)?;
    let hn = cost.policy_average(nu)?;
    let g = potential(&l, &h, alpha)?;
    let b = sensitivity_matrix(kernel, nu, base, alpha)?;
    let a = alpha.get();
    let kernel_only: Vec<f64> = b.mul_vec(&g).iter().map(|x| a * x).collect();
    let dh: Vec<f64> = hn.iter().zip(&h).map(|(x, y)| x - y).collect();
    let cost_term = linalg::solve_shifted(&l.0, a, &dh)?;
    let full = kernel_only.iter().zip(&cost_term).map(|(x, y)| x + y).collect();
    Ok(Derivatives { b, kernel_only, full })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub beta: f64,
    /// `eta(gamma~) - eta(gamma*)` with policy-dependent costs.
    pub exact_gap: Vec<f64>,
    pub derivative_kernel_only: Vec<f64>,
    pub derivative_full: Vec<f64>,
    pub b: Vec<Vec<f64>>,
}

pub fn loss_report(
    kernel: &TransitionKernel,
    base: &Policy,
    spec: &WatermarkSpec,
    cost: &CostFunction,
    alpha: DiscountFactor,
) -> Result<LossReport> {
    let mixed = mix_policy(base, spec)?;
    let exact = control_loss_exact(kernel, base, &mixed, cost, alpha)?;
    let d = derivatives(kernel, spec.nu(), base, cost, alpha)?;
    Ok(LossReport {
        beta: spec.beta(),
        exact_gap: exact.direct,
        derivative_kernel_only: d.kernel_only,
        derivative_full: d.full,
        b: d.b.to_rows(),
    })
}

impl LossReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header(n_states: usize) -> Vec<String> {
        let mut h = vec!["beta".to_string()];
        for prefix in ["gap", "dkernel", "dfull"] {
            h.extend((0..n_states).map(|i| format!("{prefix}_{i}")));
        }
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut row = vec![self.beta.to_string()];
        for v in [&self.exact_gap, &self.derivative_kernel_only, &self.derivative_full] {
            row.extend(v.iter().map(|x| x.to_string()));
        }
        row
    }
}
