//! Asymptotic detection-performance bounds.
//!
//! All bounds drop their `(1 + o(1))` factors and are reported as
//! asymptotic values.

use serde::{Deserialize, Serialize};

use crate::attack::{extended_chain, joint_chain_postattack, AttackMatrix, AttackStrategy};
use crate::error::{Error, Result};
use crate::linalg::RowMatrix;
use crate::mdp::{
    doeblin_certificate, induced_state_chain, stationary_sparse, DoeblinCertificate, Policy, StationaryOptions,
    TransitionKernel,
};

/// Default lag cap for Doeblin searches.
pub const DEFAULT_MAX_LAG: usize = 256;

/// Entries at or below this are treated as zero in support comparisons.
pub const SUPPORT_TOL: f64 = 1e-12;

pub fn min_nonzero(m: &RowMatrix) -> Result<f64> {
    m.as_slice()
        .iter()
        .copied()
        .filter(|&x| x > 0.0)
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::invalid("matrix", "no positive entry"))
}

/// `lambda * R_min * gamma_min^2 * phi_min^2`.
pub fn lambda1(lambda: f64, r_min: f64, gamma_min: f64, phi_min: f64) -> Result<f64> {
    for (name, v) in [
        ("lambda", lambda),
        ("R_min", r_min),
        ("gamma_min", gamma_min),
        ("phi_min", phi_min),
    ] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Invalid {
                what: "bound input",
                detail: format!("{name} = {v} not in (0, 1]"),
            });
        }
    }
    Ok(lambda * r_min * gamma_min.powi(2) * phi_min.powi(2))
}

/// Reading of the `2k!!` denominator in the false-alarm series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesVariant {
    /// `(2k)!! = 2^k k!`.
    #[default]
    DoubleFactorialOfTwoK,
    /// `2 (k!!)`.
    TwiceDoubleFactorial,
}

fn double_factorial(k: u32) -> f64 {
    let mut acc = 1.0;
    let mut i = k;
    while i > 1 {
        acc *= i as f64;
        i -= 2;
    }
    acc
}

fn series_denominator(k: u32, variant: SeriesVariant) -> f64 {
    match variant {
        SeriesVariant::DoubleFactorialOfTwoK => double_factorial(2 * k),
        SeriesVariant::TwiceDoubleFactorial => 2.0 * double_factorial(k),
    }
}

/// `u(c) = sum_{k=0}^{floor(v/2)-1} c^k / denom(k)`.
pub fn series_u(c: f64, v: usize, variant: SeriesVariant) -> Result<f64> {
    if v < 2 {
        return Err(Error::invalid("v", format!("{v} < 2")));
    }
    let terms = (v / 2) as u32;
    Ok((0..terms)
        .map(|k| c.powi(k as i32) / series_denominator(k, variant))
        .sum())
}

/// `M - 1 + 2 sqrt(2) / (3 sqrt(u(c))) e^{c/4}`.
pub fn mtbfa_lower_bound(c: f64, min_segment: usize, v: usize, variant: SeriesVariant) -> Result<f64> {
    if c.is_nan() || c <= 0.0 {
        return Err(Error::invalid("c", format!("{c} must be > 0")));
    }
    let u = series_u(c, v, variant)?;
    Ok(min_segment as f64 - 1.0 + 2.0 * 2f64.sqrt() / (3.0 * u.sqrt()) * (c / 4.0).exp())
}

/// Limiting conditional law of `Y_{t+1}` given `(Y_t, A_t)` under a matrix
/// attack.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitingLaw {
    /// `(n m) x n`, row `(l, j)`.
    pub q: RowMatrix,
    /// Same quantity computed as a conditional of the extended chain.
    pub q_direct: RowMatrix,
    /// Stationary law of `(X, A, Y)`, flat index `(x m + a) n + y`.
    pub pi_ext: Vec<f64>,
    pub pi_y: Vec<f64>,
    /// Flat index `l m + j`.
    pub pi_ya: Vec<f64>,
    /// Rows with zero stationary mass, filled with the nominal kernel.
    pub unreachable: Vec<usize>,
}

pub fn limiting_q(kernel: &TransitionKernel, policy: &Policy, phi: &AttackMatrix) -> Result<LimitingLaw> {
    let (n, m) = (kernel.n_states(), kernel.n_actions());
    let ext = extended_chain(kernel, policy, phi)?;
    let pi = stationary_sparse(ext.kernel(), &StationaryOptions::default())?.pi;

    let mut pi_y = vec![0.0; n];
    let mut pi_ya = vec![0.0; n * m];
    for (z, &p) in pi.iter().enumerate() {
        let (_, a, y) = ext.decode(z);
        pi_y[y] += p;
        pi_ya[y * m + a] += p;
    }

    let mut q = RowMatrix::zeros(n * m, n);
    let mut q_direct = RowMatrix::zeros(n * m, n);
    let mut unreachable = Vec::new();
    for l in 0..n {
        for j in 0..m {
            let row = l * m + j;
            if pi_ya[row] <= SUPPORT_TOL {
                unreachable.push(row);
                q.row_mut(row).copy_from_slice(kernel.row(l, j));
                q_direct.row_mut(row).copy_from_slice(kernel.row(l, j));
                continue;
            }
            let gamma = policy.prob(l, j);
            if gamma == 0.0 {
                return Err(Error::Precondition(format!(
                    "policy gives zero mass to reachable pair ({l}, {j})"
                )));
            }
            let denom = pi_y[l] * gamma;
            for i in 0..n {
                let w = pi[ext.index(i, j, l)];
                if w == 0.0 {
                    continue;
                }
                for ii in 0..n {
                    let r = kernel.prob(i, j, ii);
                    if r == 0.0 {
                        continue;
                    }
                    for (next, &f) in phi.row(i, ii).iter().enumerate() {
                        let cell = q.get(row, next);
                        q.set(row, next, cell + f * r * w / denom);
                    }
                }
                for (zz, p) in ext.kernel().row(ext.index(i, j, l)) {
                    let (_, _, yy) = ext.decode(zz);
                    let cell = q_direct.get(row, yy);
                    q_direct.set(row, yy, cell + w * p / pi_ya[row]);
                }
            }
        }
    }
    Ok(LimitingLaw {
        q,
        q_direct,
        pi_ext: pi,
        pi_y,
        pi_ya,
        unreachable,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportViolation {
    pub state: usize,
    pub action: usize,
    pub next: usize,
    pub q: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StealthReport {
    pub stealthy: bool,
    pub violations: Vec<SupportViolation>,
}

/// Checks that `Q` and `R` have the same zero pattern.
pub fn stealthiness_check(q: &RowMatrix, kernel: &TransitionKernel) -> Result<StealthReport> {
    let r = kernel.matrix();
    if q.rows() != r.rows() || q.cols() != r.cols() {
        return Err(Error::Dimension("Q and R shapes differ".into()));
    }
    let m = kernel.n_actions();
    let mut violations = Vec::new();
    for row in 0..r.rows() {
        for next in 0..r.cols() {
            let (qv, rv) = (q.get(row, next), r.get(row, next));
            if (qv > SUPPORT_TOL) != (rv > SUPPORT_TOL) {
                violations.push(SupportViolation {
                    state: row / m,
                    action: row % m,
                    next,
                    q: qv,
                    r: rv,
                });
            }
        }
    }
    Ok(StealthReport {
        stealthy: violations.is_empty(),
        violations,
    })
}

/// `I(Q, R) = sum pi^{Y,A}(l, j) Q(l'|l,j) ln(Q(l'|l,j) / R(l'|l,j))` over the
/// support of `R`.
pub fn kl_rate(q: &RowMatrix, kernel: &TransitionKernel, pi_ya: &[f64]) -> Result<f64> {
    let check = stealthiness_check(q, kernel)?;
    if !check.stealthy {
        return Err(Error::Precondition(format!(
            "Q and R supports differ at {} entries",
            check.violations.len()
        )));
    }
    let r = kernel.matrix();
    let mut total = 0.0;
    for (row, weight) in pi_ya.iter().enumerate().take(r.rows()) {
        let mut kl = 0.0;
        for next in 0..r.cols() {
            let (qv, rv) = (q.get(row, next), r.get(row, next));
            if qv > SUPPORT_TOL && rv > SUPPORT_TOL {
                kl += qv * (qv / rv).ln();
            }
        }
        total += weight * kl;
    }
    Ok(total.max(0.0))
}

/// `max |ln(Q / R)|` over the common support.
pub fn max_log_ratio(q: &RowMatrix, kernel: &TransitionKernel) -> f64 {
    let r = kernel.matrix();
    q.as_slice()
        .iter()
        .zip(r.as_slice())
        .filter(|(&qv, &rv)| qv > SUPPORT_TOL && rv > SUPPORT_TOL)
        .map(|(qv, rv)| (qv / rv).ln().abs())
        .fold(0.0, f64::max)
}

/// `2 (m + 2) max|ln(Q/R)| / lambda_1`.
pub fn slack(lag: usize, max_log_ratio: f64, lambda1: f64) -> f64 {
    2.0 * (lag as f64 + 2.0) * max_log_ratio / lambda1
}

/// `max{M, (c + slack) / I}`; infinite when `I = 0`.
pub fn md_upper_bound(c: f64, min_segment: usize, rate: f64, slack: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    (min_segment as f64).max((c + slack) / rate)
}

/// `2 exp(-2 (n eps - mu)^2 / (n mu^2))` with `mu = 2 (m + 2) |f| / lambda_1`;
/// 1 when `n <= mu / eps`.
pub fn hoeffding_tail(n: usize, eps: f64, f_norm: f64, lag: usize, lambda1: f64) -> Result<f64> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("epsilon", format!("{eps} must be > 0")));
    }
    let mu = 2.0 * (lag as f64 + 2.0) * f_norm / lambda1;
    let nf = n as f64;
    if nf <= mu / eps {
        return Ok(1.0);
    }
    Ok(2.0 * (-2.0 * (nf * eps - mu).powi(2) / (nf * mu * mu)).exp())
}

/// Count of nonzero entries of the induced chain.
pub fn nonzero_count(kernel: &TransitionKernel, policy: &Policy) -> Result<usize> {
    Ok(induced_state_chain(kernel, policy)?.0.count_nonzero())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub asymptotic: bool,
    pub attack: String,
    pub attack_supported: bool,
    pub c: f64,
    pub min_segment: usize,
    pub v: usize,
    pub series_variant: SeriesVariant,
    pub u_c: f64,
    pub mtbfa_lb: f64,
    pub doeblin: DoeblinCertificate,
    pub lambda1: Option<f64>,
    pub q: Option<Vec<Vec<f64>>>,
    pub stealthy: Option<bool>,
    pub i_qr: Option<f64>,
    pub slack: Option<f64>,
    pub md_ub: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsOptions {
    pub c: f64,
    pub min_segment: usize,
    pub series: SeriesVariant,
    pub max_lag: usize,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        Self {
            c: 15.0,
            min_segment: 10,
            series: SeriesVariant::default(),
            max_lag: DEFAULT_MAX_LAG,
        }
    }
}

/// All bounds for the deployed policy under the given attack. Attacks
/// without a matrix form get only the false-alarm side.
pub fn bounds_report(
    kernel: &TransitionKernel,
    policy: &Policy,
    attack: &AttackStrategy,
    opts: &BoundsOptions,
) -> Result<BoundsReport> {
    let n = kernel.n_states();
    let v = nonzero_count(kernel, policy)?;
    let u_c = series_u(opts.c, v, opts.series)?;
    let mtbfa_lb = mtbfa_lower_bound(opts.c, opts.min_segment, v, opts.series)?;
    let mut report = BoundsReport {
        asymptotic: true,
        attack: attack.kind().to_string(),
        attack_supported: false,
        c: opts.c,
        min_segment: opts.min_segment,
        v,
        series_variant: opts.series,
        u_c,
        mtbfa_lb,
        doeblin: DoeblinCertificate {
            lag: 0,
            lambda: 0.0,
            psi: Vec::new(),
            found: false,
        },
        lambda1: None,
        q: None,
        stealthy: None,
        i_qr: None,
        slack: None,
        md_ub: None,
    };
    let Some(phi) = attack.as_matrix(n) else {
        return Ok(report);
    };
    report.attack_supported = true;
    let joint = joint_chain_postattack(kernel, policy, &phi)?;
    report.doeblin = doeblin_certificate(&joint.0, opts.max_lag);
    let law = limiting_q(kernel, policy, &phi)?;
    let stealth = stealthiness_check(&law.q, kernel)?;
    report.stealthy = Some(stealth.stealthy);
    report.q = Some(law.q.to_rows());
    if report.doeblin.found {
        let l1 = lambda1(
            report.doeblin.lambda,
            min_nonzero(kernel.matrix())?,
            min_nonzero(policy.matrix())?,
            min_nonzero(phi.matrix())?,
        )?;
        report.lambda1 = Some(l1);
        if stealth.stealthy {
            let rate = kl_rate(&law.q, kernel, &law.pi_ya)?;
            let s = slack(report.doeblin.lag, max_log_ratio(&law.q, kernel), l1);
            report.i_qr = Some(rate);
            report.slack = Some(s);
            report.md_ub = Some(md_upper_bound(opts.c, opts.min_segment, rate, s));
        }
    }
    Ok(report)
}

impl BoundsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header() -> [&'static str; 15] {
        [
            "attack",
            "attack_supported",
            "c",
            "M",
            "v",
            "series_variant",
            "u_c",
            "mtbfa_lb",
            "doeblin_lag",
            "doeblin_lambda",
            "lambda1",
            "stealthy",
            "i_qr",
            "slack",
            "md_ub",
        ]
    }

    pub fn csv_row(&self) -> Vec<String> {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map(ToString::to_string).unwrap_or_default()
        }
        let series = match self.series_variant {
            SeriesVariant::DoubleFactorialOfTwoK => "double_factorial_of_two_k",
            SeriesVariant::TwiceDoubleFactorial => "twice_double_factorial",
        };
        vec![
            self.attack.clone(),
            self.attack_supported.to_string(),
            self.c.to_string(),
            self.min_segment.to_string(),
            self.v.to_string(),
            series.to_string(),
            self.u_c.to_string(),
            self.mtbfa_lb.to_string(),
            self.doeblin.lag.to_string(),
            self.doeblin.lambda.to_string(),
            opt(&self.lambda1),
            opt(&self.stealthy),
            opt(&self.i_qr),
            opt(&self.slack),
            opt(&self.md_ub),
        ]
    }
}
