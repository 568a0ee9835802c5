//! Monte Carlo experiments: replicate runs, metric aggregation and CSV
//! output.
//!
//! Replicates run in parallel, each on its own random streams, and are
//! aggregated in replicate order, so results do not depend on scheduling.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{bounds_report as compute_bounds, mtbfa_lower_bound, series_u, BoundsOptions, BoundsReport};
use crate::config::Experiment;
use crate::detector::{run_detector, Alarm, DetectionOutcome, Detector, TracePoint};
use crate::error::Result;
use crate::mdp::{discounted_cost, ClosedLoop, Policy};
use crate::rng::StreamSeed;
use crate::watermark::control_loss_exact;

/// Discount weights below this are treated as zero.
const NEGLIGIBLE_WEIGHT: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub replicate: u64,
    pub alarm: Option<Alarm>,
    /// Discounted cost of the true trajectory from the initial state.
    pub cost: f64,
}

/// Runs one replicate until an alarm (or the horizon) and until the
/// discounted cost has converged.
pub fn run_replicate(exp: &Experiment, policy: &Policy, replicate: u64) -> Result<ReplicateOutcome> {
    let attack = exp.attack(policy)?;
    let seed = StreamSeed::new(exp.seed, replicate);
    let mut lp = ClosedLoop::new(&exp.kernel, policy, attack, exp.onset, exp.initial_state, seed)?;
    let mut det = Detector::new(exp.reference.clone(), exp.detector)?;
    let alpha = exp.alpha.get();
    let mut weight = 1.0;
    let mut cost = 0.0;
    for t in 0..=exp.horizon {
        let step = lp.step();
        let cost_live = weight > NEGLIGIBLE_WEIGHT && t < exp.horizon;
        if cost_live {
            cost += weight * exp.cost.get(step.x, step.a);
            weight *= alpha;
        }
        if det.alarm().is_none() {
            det.push(exp.project(step.y), step.a)?;
        } else if !cost_live {
            break;
        }
    }
    Ok(ReplicateOutcome {
        replicate,
        alarm: det.alarm(),
        cost,
    })
}

pub fn run_replicates(exp: &Experiment, beta: f64) -> Result<Vec<ReplicateOutcome>> {
    let policy = exp.deployed_policy(beta)?;
    (0..exp.replicates as u64)
        .into_par_iter()
        .map(|r| run_replicate(exp, &policy, r))
        .collect()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub beta: f64,
    /// Over replicates alarmed after the onset.
    pub mean_delay: Option<f64>,
    pub delay_q25: Option<f64>,
    pub delay_q75: Option<f64>,
    /// Replicates without an alarm by the horizon.
    pub censored_frac: f64,
    /// Replicates alarmed at or before the onset (any alarm without attack).
    pub false_alarm_rate: f64,
    /// Censored mean of `min(T, horizon)`; a lower estimate of the MTBFA.
    /// Only defined without an attack.
    pub mtbfa_est: Option<f64>,
    pub mean_cost: f64,
    pub cost_se: f64,
    pub replicates: usize,
    pub seed: u64,
    /// `eta(gamma~) - eta(gamma*)` at the initial state.
    pub loss_exact: Option<f64>,
    /// `mean_cost - eta(gamma*)` at the initial state.
    pub loss_empirical: Option<f64>,
}

pub const METRICS_HEADER: [&str; 13] = [
    "beta",
    "mean_delay",
    "delay_q25",
    "delay_q75",
    "censored_frac",
    "false_alarm_rate",
    "mtbfa_est",
    "mean_cost",
    "cost_se",
    "replicates",
    "seed",
    "loss_exact",
    "loss_empirical",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.beta.to_string(),
            opt(self.mean_delay),
            opt(self.delay_q25),
            opt(self.delay_q75),
            self.censored_frac.to_string(),
            self.false_alarm_rate.to_string(),
            opt(self.mtbfa_est),
            self.mean_cost.to_string(),
            self.cost_se.to_string(),
            self.replicates.to_string(),
            self.seed.to_string(),
            opt(self.loss_exact),
            opt(self.loss_empirical),
        ]
    }
}

pub fn aggregate(exp: &Experiment, beta: f64, outcomes: &[ReplicateOutcome]) -> MetricsRow {
    let n = outcomes.len() as f64;
    let mut delays: Vec<f64> = Vec::new();
    let (mut censored, mut false_alarms) = (0usize, 0usize);
    let mut run_lengths = 0.0;
    for o in outcomes {
        match o.alarm {
            None => censored += 1,
            Some(a) => match exp.onset {
                Some(tau) if a.time > tau => delays.push((a.time - tau) as f64),
                _ => false_alarms += 1,
            },
        }
        run_lengths += o.alarm.map_or(exp.horizon, |a| a.time.min(exp.horizon)) as f64;
    }
    delays.sort_by(f64::total_cmp);
    let mean_delay = (!delays.is_empty()).then(|| delays.iter().sum::<f64>() / delays.len() as f64);

    let mean_cost = outcomes.iter().map(|o| o.cost).sum::<f64>() / n;
    let var = if outcomes.len() > 1 {
        outcomes.iter().map(|o| (o.cost - mean_cost).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };

    let base_eta = discounted_cost(&exp.kernel, &exp.base, &exp.cost, exp.alpha)
        .ok()
        .map(|e| e[exp.initial_state]);
    let loss_exact = exp
        .deployed_policy(beta)
        .and_then(|p| control_loss_exact(&exp.kernel, &exp.base, &p, &exp.cost, exp.alpha))
        .ok()
        .map(|l| l.direct[exp.initial_state]);

    MetricsRow {
        beta,
        mean_delay,
        delay_q25: quantile(&delays, 0.25),
        delay_q75: quantile(&delays, 0.75),
        censored_frac: censored as f64 / n,
        false_alarm_rate: false_alarms as f64 / n,
        mtbfa_est: exp.onset.is_none().then(|| run_lengths / n),
        mean_cost,
        cost_se: (var / n).sqrt(),
        replicates: outcomes.len(),
        seed: exp.seed,
        loss_exact,
        loss_empirical: base_eta.map(|e| mean_cost - e),
    }
}

fn create_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(csv::Writer::from_path(path)?)
}

fn fmt_threshold(c: f64) -> String {
    if c.is_infinite() {
        "inf".to_string()
    } else {
        c.to_string()
    }
}

pub fn write_replicates(path: &Path, exp: &Experiment, beta: f64, outcomes: &[ReplicateOutcome]) -> Result<()> {
    let mut w = create_writer(path)?;
    w.write_record(["replicate", "alarm_time", "censored", "tau", "beta", "c", "M"])?;
    for o in outcomes {
        w.write_record([
            o.replicate.to_string(),
            o.alarm.map(|a| a.time.to_string()).unwrap_or_default(),
            o.alarm.is_none().to_string(),
            exp.onset.map(|t| t.to_string()).unwrap_or_default(),
            beta.to_string(),
            fmt_threshold(exp.detector.threshold),
            exp.detector.min_segment.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = create_writer(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub metrics: MetricsRow,
    pub outcomes: Vec<ReplicateOutcome>,
}

/// Runs all replicates at the configured `beta`; writes `replicates.csv`
/// and `metrics.csv` when `out` is given.
pub fn run_experiment(exp: &Experiment, out: Option<&Path>) -> Result<ExperimentResult> {
    let outcomes = run_replicates(exp, exp.beta)?;
    let metrics = aggregate(exp, exp.beta, &outcomes);
    if let Some(dir) = out {
        write_replicates(&dir.join("replicates.csv"), exp, exp.beta, &outcomes)?;
        write_metrics(&dir.join("metrics.csv"), std::slice::from_ref(&metrics))?;
    }
    Ok(ExperimentResult { metrics, outcomes })
}

/// One metrics row per `beta` in the grid; writes `sweep.csv`.
pub fn sweep_beta(exp: &Experiment, grid: &[f64], out: Option<&Path>) -> Result<Vec<MetricsRow>> {
    if grid.is_empty() {
        return Err(crate::Error::Config("watermark.beta_grid: empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &beta in grid {
        let outcomes = run_replicates(exp, beta)?;
        rows.push(aggregate(exp, beta, &outcomes));
    }
    if let Some(dir) = out {
        write_metrics(&dir.join("sweep.csv"), &rows)?;
    }
    Ok(rows)
}

/// Score trace of a single replicate over the full horizon; never stops at
/// the alarm.
pub fn emit_trace(exp: &Experiment, replicate: u64, out: Option<&Path>) -> Result<Vec<TracePoint>> {
    let policy = exp.deployed_policy(exp.beta)?;
    let attack = exp.attack(&policy)?;
    let seed = StreamSeed::new(exp.seed, replicate);
    let lp = ClosedLoop::new(&exp.kernel, &policy, attack, exp.onset, exp.initial_state, seed)?;
    let mut det = Detector::new(exp.reference.clone(), exp.detector)?;
    let mut trace = Vec::new();
    for step in lp.take(exp.horizon + 1) {
        if let Some(score) = det.push(exp.project(step.y), step.a)? {
            trace.push(TracePoint {
                t: det.time(),
                score,
                alarmed: det.alarm().is_some(),
            });
        }
    }
    if let Some(dir) = out {
        write_trace(&dir.join("trace.csv"), &trace)?;
    }
    Ok(trace)
}

pub fn write_trace(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let mut w = create_writer(path)?;
    w.write_record(["t", "score", "alarmed"])?;
    for p in trace {
        w.write_record([p.t.to_string(), p.score.to_string(), p.alarmed.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One closed-loop trajectory; writes `trajectory.csv` with columns
/// `t, x, y, a`.
pub fn simulate_trajectory(exp: &Experiment, replicate: u64, out: Option<&Path>) -> Result<crate::mdp::Trajectory> {
    let policy = exp.deployed_policy(exp.beta)?;
    let traj = crate::mdp::simulate(
        &exp.kernel,
        &policy,
        exp.attack(&policy)?,
        exp.horizon + 1,
        exp.onset,
        exp.initial_state,
        StreamSeed::new(exp.seed, replicate),
    )?;
    if let Some(dir) = out {
        let mut w = create_writer(&dir.join("trajectory.csv"))?;
        w.write_record(["t", "x", "y", "a"])?;
        for t in 0..traj.len() {
            w.write_record([
                t.to_string(),
                traj.states[t].to_string(),
                traj.observations[t].to_string(),
                traj.actions[t].to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(traj)
}

/// Runs the detector over the `y`, `a` columns of a trajectory CSV (as
/// written by [`simulate_trajectory`]); writes `trace.csv`.
pub fn detect_file(exp: &Experiment, input: &Path, out: Option<&Path>) -> Result<DetectionOutcome> {
    let mut rdr = csv::Reader::from_path(input)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| crate::Error::Config(format!("{}: missing column {name}", input.display())))
    };
    let (yc, ac) = (col("y")?, col("a")?);
    let mut stream = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| {
            rec[i]
                .trim()
                .parse::<usize>()
                .map_err(|e| crate::Error::Config(format!("{}: {e}", input.display())))
        };
        stream.push((exp.project(parse(yc)?), parse(ac)?));
    }
    let outcome = run_detector(stream, &exp.reference, &exp.detector, true)?;
    if let (Some(dir), Some(trace)) = (out, outcome.trace.as_ref()) {
        write_trace(&dir.join("trace.csv"), trace)?;
    }
    Ok(outcome)
}

/// Bounds for the deployed policy at the configured `beta`, computed on
/// the model the detector monitors.
pub fn bounds_report(exp: &Experiment, out: Option<&Path>) -> Result<(BoundsReport, String)> {
    let policy = exp.deployed_policy(exp.beta)?;
    let attack = exp.attack(&policy)?;
    let opts = BoundsOptions {
        c: exp.detector.threshold,
        min_segment: exp.detector.min_segment,
        ..Default::default()
    };
    let mut report = compute_bounds(&exp.kernel, &policy, &attack, &opts)?;
    if exp.node_block.is_some() {
        // The detector sees node transitions only: count the node pairs
        // `(l, l')` reachable under some action.
        let node = exp.reference.clone();
        let (n, m) = (node.n_states(), node.n_actions());
        report.v = (0..n)
            .flat_map(|l| (0..n).map(move |next| (l, next)))
            .filter(|&(l, next)| (0..m).any(|j| node.prob(l, j, next) > 0.0))
            .count();
        report.u_c = series_u(opts.c, report.v, opts.series)?;
        report.mtbfa_lb = mtbfa_lower_bound(opts.c, opts.min_segment, report.v, opts.series)?;
    }
    let summary = summarize(&report);
    if let Some(dir) = out {
        let mut w = create_writer(&dir.join("bounds.csv"))?;
        w.write_record(BoundsReport::csv_header())?;
        w.write_record(report.csv_row())?;
        w.flush()?;
        let mut f = fs::File::create(dir.join("bounds.json"))?;
        f.write_all(report.to_json()?.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok((report, summary))
}

fn summarize(r: &BoundsReport) -> String {
    let mut s = format!(
        "asymptotic bounds (c = {}, M = {})\n  v = {}\n  u(c) = {}\n  MTBFA lower bound = {}\n",
        fmt_threshold(r.c),
        r.min_segment,
        r.v,
        r.u_c,
        r.mtbfa_lb
    );
    if !r.attack_supported {
        s.push_str(&format!("  attack {}: unsupported: Q undefined\n", r.attack));
        return s;
    }
    s.push_str(&format!(
        "  attack {}: doeblin lag {} lambda {}\n",
        r.attack, r.doeblin.lag, r.doeblin.lambda
    ));
    match (r.stealthy, r.i_qr, r.md_ub) {
        (Some(false), _, _) => s.push_str("  precondition violated: Q and R supports differ\n"),
        (_, Some(i), Some(md)) => {
            s.push_str(&format!("  I(Q,R) = {i}\n  slack = {}\n", r.slack.unwrap_or(f64::NAN)));
            s.push_str(&format!(
                "  MD upper bound = {}\n",
                if md.is_infinite() { "inf".into() } else { md.to_string() }
            ));
        }
        _ => s.push_str("  precondition violated: no Doeblin certificate\n"),
    }
    s
}

/// Exact discounted cost of the deployed policy from every state, and the
/// threshold table for the sensornet model.
pub fn policy_eval(exp: &Experiment, out: Option<&Path>) -> Result<Vec<(String, f64)>> {
    let mut rows = Vec::new();
    let policy = exp.deployed_policy(exp.beta)?;
    let eta = discounted_cost(&exp.kernel, &policy, &exp.cost, exp.alpha)?;
    for (i, v) in eta.iter().enumerate() {
        rows.push((format!("eta_{i}"), *v));
    }
    if let Some(p) = &exp.sensor {
        let search = crate::sensornet::find_optimal_threshold(p, 0..=p.n_queue)?;
        for (l, v) in &search.table {
            rows.push((format!("threshold_{l}"), *v));
        }
        rows.push(("best_threshold".into(), search.best as f64));
    }
    if let Some(dir) = out {
        let mut w = create_writer(&dir.join("policy_eval.csv"))?;
        w.write_record(["quantity", "value"])?;
        for (k, v) in &rows {
            w.write_record([k.as_str(), &v.to_string()])?;
        }
        w.flush()?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn small(json: &str) -> Experiment {
        ExperimentConfig::from_json(json).unwrap().resolve().unwrap()
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.25), Some(1.75));
        assert_eq!(quantile(&v, 0.75), Some(3.25));
        assert_eq!(quantile(&[], 0.5), None);
        assert_eq!(quantile(&[7.0], 0.9), Some(7.0));
    }

    #[test]
    fn aggregation_conventions() {
        let exp =
            small(r#"{"attack": {"kind": "virtual_system", "onset": 20}, "run": {"replicates": 4, "horizon": 100}}"#);
        let mk = |r, t: Option<usize>| ReplicateOutcome {
            replicate: r,
            alarm: t.map(|time| Alarm {
                time,
                reason: crate::detector::AlarmReason::Threshold,
            }),
            cost: r as f64,
        };
        let outs = [mk(0, Some(15)), mk(1, Some(30)), mk(2, Some(50)), mk(3, None)];
        let m = aggregate(&exp, 0.0, &outs);
        assert_eq!(m.mean_delay, Some(20.0));
        assert_eq!(m.censored_frac, 0.25);
        assert_eq!(m.false_alarm_rate, 0.25);
        assert_eq!(m.mtbfa_est, None);
        assert_eq!(m.mean_cost, 1.5);
        assert_eq!(m.loss_exact, Some(0.0));
    }

    #[test]
    fn replicate_is_reproducible_and_order_free() {
        let exp = small(r#"{"attack": {"kind": "virtual_system"}, "run": {"replicates": 6, "horizon": 2000}}"#);
        let a = run_replicates(&exp, 0.1).unwrap();
        let policy = exp.deployed_policy(0.1).unwrap();
        for o in a.iter().rev() {
            assert_eq!(run_replicate(&exp, &policy, o.replicate).unwrap(), *o);
        }
    }

    #[test]
    fn trace_starts_after_min_segment() {
        let exp = small(r#"{"detector": {"c": null}, "run": {"horizon": 200}}"#);
        let tr = emit_trace(&exp, 0, None).unwrap();
        assert_eq!(tr.first().unwrap().t, 11);
        assert_eq!(tr.last().unwrap().t, 200);
        assert!(tr.iter().all(|p| !p.alarmed));
    }
}
