//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any hard criterion fails.

mod common;

use std::time::Instant;

use dwmark::attack::{joint_chain_postattack, matrix_attack, null_attack};
use dwmark::bounds::{hoeffding_tail, limiting_q};
use dwmark::config::{AttackKind, Experiment, ExperimentConfig, ModelSection, PolicySection, Projection};
use dwmark::detector::{segment_score, Detector, DetectorConfig, OffSupportPolicy, ReferenceModel, TransitionCounts};
use dwmark::harness::{self, MetricsRow};
use dwmark::linalg::RowMatrix;
use dwmark::mdp::{
    discounted_cost_of_chain, doeblin_certificate, induced_state_chain, pair_index, simulate, ClosedLoop, CostFunction,
    DiscountFactor, Policy, TransitionKernel,
};
use dwmark::rng::StreamSeed;
use dwmark::sensornet::{find_optimal_threshold, PowerModelParams};
use dwmark::watermark::{affine_mixture, control_loss_derivative, control_loss_exact, DerivativeMode};
use rand::Rng;

const IDENTITY_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-3;
/// Rounding only: the cost term vanishes identically for action-independent costs.
const KERNEL_ONLY_TOL: f64 = 1e-12;
const FREQ_TOL: f64 = 0.01;
const LIMIT_LAW_TOL: f64 = 1e-10;
const MC_STEPS: usize = 1_000_000;
const ALARM_FRAC_MIN: f64 = 0.95;
const SILENT_FRAC_MIN: f64 = 0.95;
const MTBFA_MIN: f64 = 5000.0;
const LINEAR_R2_MIN: f64 = 0.98;
const DELAY_CONVERGENCE: f64 = 0.10;
const BOUND_THRESHOLDS: [f64; 3] = [10.0, 15.0, 20.0];

struct Verdict {
    pass: bool,
    soft: bool,
    detail: String,
}

impl Verdict {
    fn hard(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            soft: false,
            detail: detail.into(),
        }
    }
}

fn report(id: &str, name: &str, started: Instant, v: &Verdict) {
    let tag = match (v.pass, v.soft) {
        (true, _) => "PASS",
        (false, true) => "SOFT-FAIL",
        (false, false) => "FAIL",
    };
    println!(
        "criterion {id:<3} {tag:<9} {name} [{:.1}s] {}",
        started.elapsed().as_secs_f64(),
        v.detail
    );
}

fn inverse_solve(l: &RowMatrix, alpha: f64, h: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let a = RowMatrix::identity(n).to_dmatrix() - l.to_dmatrix() * alpha;
    let inv = a.try_inverse().expect("I - alpha L is invertible");
    (0..n).map(|r| (0..n).map(|c| inv[(r, c)] * h[c]).sum()).collect()
}

fn perturbation_identity() -> Verdict {
    let mut rng = common::rng(1);
    let alpha = DiscountFactor::new(0.9).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let kernel = common::kernel(4, 3, &mut rng);
        let g0 = common::policy(4, 3, &mut rng);
        let g1 = common::policy(4, 3, &mut rng);
        // Action-independent cost: both policies share one cost vector.
        let per_state: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let cost = CostFunction::from_rows(&per_state.iter().map(|&c| vec![c; 3]).collect::<Vec<_>>()).unwrap();
        let loss = control_loss_exact(&kernel, &g0, &g1, &cost, alpha).unwrap();
        let l0 = induced_state_chain(&kernel, &g0).unwrap().0;
        let l1 = induced_state_chain(&kernel, &g1).unwrap().0;
        let oracle: Vec<f64> = inverse_solve(&l1, alpha.get(), &per_state)
            .iter()
            .zip(inverse_solve(&l0, alpha.get(), &per_state))
            .map(|(a, b)| a - b)
            .collect();
        worst = worst
            .max(common::max_abs_diff(&oracle, &loss.identity_rhs))
            .max(common::max_abs_diff(&loss.direct, &loss.identity_rhs));
    }
    Verdict::hard(
        worst < IDENTITY_TOL,
        format!("max |gap - rhs| = {worst:.2e} (tol {IDENTITY_TOL:e})"),
    )
}

fn derivative_vs_finite_differences() -> Verdict {
    let mut rng = common::rng(2);
    let alpha = DiscountFactor::new(0.9).unwrap();
    let mut worst_rel = 0.0f64;
    let mut kernel_only_exact = true;
    for _ in 0..100 {
        let kernel = common::kernel(4, 3, &mut rng);
        let base = common::policy(4, 3, &mut rng);
        let nu = common::policy(4, 3, &mut rng);
        let cost = common::cost(4, 3, &mut rng);
        let full = control_loss_derivative(&kernel, &nu, &base, &cost, alpha, DerivativeMode::Full).unwrap();
        let eta_at = |b: f64| {
            let (l, h) = affine_mixture(&kernel, &base, &nu, &cost, b).unwrap();
            discounted_cost_of_chain(&l, &h, alpha).unwrap()
        };
        let fd: Vec<f64> = eta_at(FD_STEP)
            .iter()
            .zip(eta_at(-FD_STEP))
            .map(|(p, m)| (p - m) / (2.0 * FD_STEP))
            .collect();
        let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        worst_rel = worst_rel.max(common::max_abs_diff(&full, &fd) / scale);

        let flat = CostFunction::from_rows(&(0..4).map(|s| vec![cost.get(s, 0); 3]).collect::<Vec<_>>()).unwrap();
        let f = control_loss_derivative(&kernel, &nu, &base, &flat, alpha, DerivativeMode::Full).unwrap();
        let k = control_loss_derivative(&kernel, &nu, &base, &flat, alpha, DerivativeMode::KernelOnly).unwrap();
        let size = f.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        kernel_only_exact &= common::max_abs_diff(&f, &k) <= KERNEL_ONLY_TOL * size;
    }
    Verdict::hard(
        worst_rel <= FD_REL_TOL && kernel_only_exact,
        format!("max relative error {worst_rel:.2e} (tol {FD_REL_TOL:e}); kernel-only == full for action-independent cost: {kernel_only_exact}"),
    )
}

fn limiting_law_oracles() -> Verdict {
    let (kernel, policy, phi) = common::synthetic();
    let traj = simulate(
        &kernel,
        &policy,
        matrix_attack(phi.clone()),
        MC_STEPS + 1,
        Some(0),
        0,
        StreamSeed::new(3, 0),
    )
    .unwrap();

    let joint = joint_chain_postattack(&kernel, &policy, &phi).unwrap().0;
    let mut counts = vec![vec![0.0; 4]; 4];
    for t in 0..MC_STEPS {
        counts[pair_index(traj.states[t], traj.actions[t], 2)]
            [pair_index(traj.states[t + 1], traj.actions[t + 1], 2)] += 1.0;
    }
    let joint_err = counts
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let s: f64 = row.iter().sum();
            common::max_abs_diff(&row.iter().map(|x| x / s).collect::<Vec<_>>(), joint.row(r))
        })
        .fold(0.0, f64::max);

    let law = limiting_q(&kernel, &policy, &phi).unwrap();
    let observed = TransitionCounts::from_stream(2, 2, &traj.observations, &traj.actions);
    let q_err = (0..2)
        .flat_map(|l| (0..2).map(move |j| (l, j)))
        .map(|(l, j)| common::max_abs_diff(&observed.qhat(0, observed.len(), l, j), law.q.row(pair_index(l, j, 2))))
        .fold(0.0, f64::max);
    let formula_err = law.q.max_abs_diff(&law.q_direct);

    Verdict::hard(
        joint_err < FREQ_TOL && q_err < FREQ_TOL && formula_err <= LIMIT_LAW_TOL,
        format!("(a) joint L_inf {joint_err:.4} (b) qhat L_inf {q_err:.4} (tol {FREQ_TOL}) (c) formula vs conditional {formula_err:.1e} (tol {LIMIT_LAW_TOL:e})"),
    )
}

fn detector_sanity() -> Verdict {
    let mut rng = common::rng(4);
    let mut min_score = f64::INFINITY;
    for _ in 0..200 {
        let kernel = common::kernel(3, 2, &mut rng);
        let model = ReferenceModel::from_kernel(&kernel);
        let len = rng.gen_range(2..500);
        let ys: Vec<usize> = (0..len).map(|_| rng.gen_range(0..3)).collect();
        let acts: Vec<usize> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        let counts = TransitionCounts::from_stream(3, 2, &ys, &acts);
        for _ in 0..20 {
            let n = rng.gen_range(1..=counts.len());
            let k = rng.gen_range(0..n);
            min_score = min_score.min(segment_score(&counts.segment(k, n), &model));
        }
    }

    let mut exact = true;
    for seed in 0..3 {
        let mut rng = common::rng(40 + seed);
        let kernel = common::kernel(3, 2, &mut rng);
        let drift = common::kernel(3, 2, &mut rng);
        let model = ReferenceModel::from_kernel(&kernel);
        let mut y = 0;
        let (mut ys, mut acts) = (vec![], vec![]);
        for _ in 0..=1000 {
            let a = rng.gen_range(0..2);
            ys.push(y);
            acts.push(a);
            y = dwmark::rng::sample_row(drift.row(y, a), &mut rng);
        }
        let counts = TransitionCounts::from_stream(3, 2, &ys, &acts);
        let config = DetectorConfig {
            threshold: f64::INFINITY,
            min_segment: 10,
            window: None,
            off_support: OffSupportPolicy::ImmediateAlarm,
        };
        let mut det = Detector::new(model.clone(), config).unwrap();
        det.push(ys[0], acts[0]).unwrap();
        for n in 1..ys.len() {
            let got = det.push(ys[n], acts[n]).unwrap();
            let want = (n > 10).then(|| {
                (0..=n - 10)
                    .map(|k| segment_score(&counts.segment(k, n), &model))
                    .fold(f64::NEG_INFINITY, f64::max)
            });
            exact &= got.map(f64::to_bits) == want.map(f64::to_bits);
        }
    }

    // Empirical law equal to the reference: every block sees each successor once per period.
    let kernel = TransitionKernel::from_rows(2, 1, &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    let ys: Vec<usize> = (0..401).map(|t| (t / 2) % 2).collect();
    let counts = TransitionCounts::from_stream(2, 1, &ys, &vec![0; ys.len()]);
    let matched = segment_score(&counts.segment(0, 400), &ReferenceModel::from_kernel(&kernel));

    Verdict::hard(
        min_score >= 0.0 && exact && matched.abs() <= 1e-12,
        format!(
            "min fuzzed score {min_score:.3e}; exact window == from scratch: {exact}; matched-law score {matched:.1e}"
        ),
    )
}

fn sensornet_config(kind: AttackKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.attack.kind = kind;
    cfg
}

fn threshold_search() -> Verdict {
    let search = find_optimal_threshold(&PowerModelParams::default(), 1..=10).unwrap();
    let table: Vec<String> = search.table.iter().map(|(l, v)| format!("{l}:{v:.4}")).collect();
    Verdict {
        pass: search.best == 3,
        soft: true,
        detail: format!("l* = {} (reference 3); costs {}", search.best, table.join(" ")),
    }
}

fn row_for(rows: &[MetricsRow], beta: f64) -> &MetricsRow {
    rows.iter().find(|r| r.beta == beta).expect("beta on grid")
}

fn attacked_alarm_rate(rows: &[MetricsRow]) -> Verdict {
    let r = row_for(rows, 0.05);
    let alarmed = 1.0 - r.censored_frac;
    Verdict::hard(
        alarmed >= ALARM_FRAC_MIN && r.mean_delay.is_some_and(f64::is_finite),
        format!(
            "alarmed {alarmed:.3} (min {ALARM_FRAC_MIN}), mean delay {:?}",
            r.mean_delay
        ),
    )
}

fn unwatermarked_silence(rows: &[MetricsRow]) -> Verdict {
    let r = row_for(rows, 0.0);
    Verdict::hard(
        r.censored_frac >= SILENT_FRAC_MIN,
        format!("never alarmed {:.3} (min {SILENT_FRAC_MIN})", r.censored_frac),
    )
}

fn null_mtbfa() -> Verdict {
    let exp = sensornet_config(AttackKind::Null).resolve().unwrap();
    let outcomes = harness::run_replicates(&exp, 0.05).unwrap();
    let row = harness::aggregate(&exp, 0.05, &outcomes);
    let est = row.mtbfa_est.unwrap_or(0.0);
    Verdict::hard(
        est >= MTBFA_MIN,
        format!(
            "MTBFA estimate {est:.1} (min {MTBFA_MIN}), false alarms {:.3}",
            row.false_alarm_rate
        ),
    )
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

fn trade_off(rows: &[MetricsRow]) -> Verdict {
    let losses: Vec<f64> = rows.iter().map(|r| r.loss_exact.unwrap_or(f64::NAN)).collect();
    let nondecreasing = losses.windows(2).all(|w| w[1] >= w[0]);
    let (small_b, small_l): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.beta <= 0.05)
        .map(|r| (r.beta, r.loss_exact.unwrap_or(f64::NAN)))
        .unzip();
    let r2 = r_squared(&small_b, &small_l);

    let delays: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.mean_delay.map(|d| (r.beta, d))).collect();
    let non_increasing = delays.windows(2).all(|w| w[1].1 <= w[0].1);
    let reference = row_for(rows, 0.2).mean_delay.unwrap_or(f64::NAN);
    let converged = rows.iter().filter(|r| r.beta >= 0.05).all(|r| {
        r.mean_delay
            .is_some_and(|d| (d - reference).abs() <= DELAY_CONVERGENCE * reference)
    });
    let delay_text: Vec<String> = delays.iter().map(|(b, d)| format!("{b}:{d:.1}")).collect();
    Verdict::hard(
        nondecreasing && r2 >= LINEAR_R2_MIN && non_increasing && converged,
        format!(
            "loss nondecreasing {nondecreasing}, R2 {r2:.4} (min {LINEAR_R2_MIN}); delay non-increasing {non_increasing}, within {:.0}% of beta=0.2 for beta>=0.05 {converged}; delays {}",
            DELAY_CONVERGENCE * 100.0,
            delay_text.join(" ")
        ),
    )
}

fn synthetic_config(kind: AttackKind, c: f64) -> Experiment {
    let (kernel, policy, phi) = common::synthetic();
    let mut cfg = ExperimentConfig {
        model: ModelSection::Explicit {
            n_states: 2,
            n_actions: 2,
            kernel: kernel.matrix().to_rows(),
            cost: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            alpha: 0.5,
            initial_state: 0,
        },
        policy: PolicySection::Explicit {
            rows: policy.matrix().to_rows(),
        },
        ..Default::default()
    };
    cfg.watermark.beta = 0.0;
    cfg.attack.kind = kind;
    cfg.attack.phi = Some(phi.matrix().to_rows());
    cfg.detector.c = Some(c);
    cfg.detector.projection = Some(Projection::Full);
    cfg.resolve().unwrap()
}

fn bounds_dominance() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for c in BOUND_THRESHOLDS {
        let attacked = synthetic_config(AttackKind::Matrix, c);
        let (bounds, _) = harness::bounds_report(&attacked, None).unwrap();
        let outcomes = harness::run_replicates(&attacked, 0.0).unwrap();
        let delay = harness::aggregate(&attacked, 0.0, &outcomes)
            .mean_delay
            .unwrap_or(f64::INFINITY);
        let md_ub = bounds.md_ub.unwrap_or(f64::NAN);

        let null = synthetic_config(AttackKind::Null, c);
        let outcomes = harness::run_replicates(&null, 0.0).unwrap();
        let mtbfa = harness::aggregate(&null, 0.0, &outcomes).mtbfa_est.unwrap_or(0.0);

        pass &= md_ub >= delay && bounds.mtbfa_lb <= mtbfa;
        parts.push(format!(
            "c={c}: delay {delay:.1} <= ub {md_ub:.1}, lb {:.1} <= MTBFA {mtbfa:.1}",
            bounds.mtbfa_lb
        ));
    }

    // Hoeffding tail on a two-state chain with an indicator function.
    let kernel = TransitionKernel::from_rows(2, 1, &[vec![0.5, 0.5], vec![0.4, 0.6]]).unwrap();
    let policy = Policy::uniform(2, 1);
    let p = induced_state_chain(&kernel, &policy).unwrap().0;
    let cert = doeblin_certificate(&p, 16);
    let (n, eps, reps) = (1000usize, 0.1, 10_000u64);
    let bound = hoeffding_tail(n, eps, 1.0, cert.lag, cert.lambda).unwrap();
    let mean_f = 0.4 / 0.9;
    let deviations = (0..reps)
        .filter(|&r| {
            let lp = ClosedLoop::new(&kernel, &policy, null_attack(), None, 0, StreamSeed::new(8, r)).unwrap();
            let hits = lp.take(n).filter(|s| s.x == 0).count();
            (hits as f64 / n as f64 - mean_f).abs() >= eps
        })
        .count();
    let freq = deviations as f64 / reps as f64;
    pass &= freq <= bound;
    parts.push(format!("hoeffding freq {freq:.4} <= bound {bound:.4}"));
    Verdict::hard(pass, parts.join("; "))
}

fn determinism() -> Verdict {
    let mut cfg = sensornet_config(AttackKind::VirtualSystem);
    cfg.run.replicates = 40;
    cfg.run.horizon = 2000;
    let exp = cfg.resolve().unwrap();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        harness::run_experiment(&exp, Some(dir.path())).unwrap();
        harness::sweep_beta(&exp, &[0.0, 0.05], Some(dir.path())).unwrap();
        harness::emit_trace(&exp, 0, Some(dir.path())).unwrap();
        ["replicates.csv", "metrics.csv", "sweep.csv", "trace.csv"].map(|f| std::fs::read(dir.path().join(f)).unwrap())
    };
    let same = run() == run();
    Verdict::hard(
        same,
        format!("replicates, metrics, sweep and trace CSV identical across runs: {same}"),
    )
}

fn main() {
    let mut failed = Vec::new();
    let mut check = |id: &str, name: &str, f: &dyn Fn() -> Verdict| {
        let started = Instant::now();
        let v = f();
        report(id, name, started, &v);
        if !v.pass && !v.soft {
            failed.push(id.to_string());
        }
    };

    check("1", "perturbation identity", &perturbation_identity);
    check(
        "2",
        "derivative vs finite differences",
        &derivative_vs_finite_differences,
    );
    check("3", "limiting law oracles", &limiting_law_oracles);
    check("4", "detector sanity", &detector_sanity);
    check("5a", "optimal threshold", &threshold_search);

    let started = Instant::now();
    let sweep_exp = sensornet_config(AttackKind::VirtualSystem).resolve().unwrap();
    let rows = harness::sweep_beta(&sweep_exp, &sweep_exp.beta_grid, None).unwrap();
    println!(
        "(virtual-system sweep over {:?}: {:.1}s)",
        sweep_exp.beta_grid,
        started.elapsed().as_secs_f64()
    );
    check("5b", "watermarked attack is detected", &|| attacked_alarm_rate(&rows));
    check("5c", "unwatermarked virtual system is silent", &|| {
        unwatermarked_silence(&rows)
    });
    check("5d", "null MTBFA", &null_mtbfa);
    check("6", "control loss / delay trade-off", &|| trade_off(&rows));
    check("7", "bounds dominance", &bounds_dominance);
    check("8", "determinism", &determinism);

    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
