mod common;

use dwmark::attack::{null_attack, virtual_system_attack};
use dwmark::config::ExperimentConfig;
use dwmark::harness;
use dwmark::mdp::{
    discounted_cost, induced_state_chain, joint_chain_preattack, pair_index, simulate, stationary_distribution,
    ClosedLoop, DiscountFactor, Policy, TransitionKernel,
};
use dwmark::rng::StreamSeed;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Row-normalized transition counts over flattened `(state, action)` pairs.
fn pair_transition_frequencies(states: &[usize], actions: &[usize], m: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0.0; dim]; dim];
    for t in 0..states.len() - 1 {
        counts[pair_index(states[t], actions[t], m)][pair_index(states[t + 1], actions[t + 1], m)] += 1.0;
    }
    for row in &mut counts {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    counts
}

#[test]
fn null_attack_frequencies_match_nominal_chains() {
    let (kernel, policy, _) = common::synthetic();
    let traj = simulate(
        &kernel,
        &policy,
        null_attack(),
        1_000_000,
        None,
        0,
        StreamSeed::new(3, 0),
    )
    .unwrap();
    let joint = joint_chain_preattack(&kernel, &policy).unwrap().0;
    let freq = pair_transition_frequencies(&traj.states, &traj.actions, 2, 4);
    for (r, row) in freq.iter().enumerate() {
        assert!(common::max_abs_diff(row, joint.row(r)) < 0.01, "row {r}");
    }
    // Next-state law given (state, action) is the kernel row.
    let mut counts = vec![vec![0.0; 2]; 4];
    for t in 0..traj.len() - 1 {
        counts[pair_index(traj.states[t], traj.actions[t], 2)][traj.states[t + 1]] += 1.0;
    }
    for (r, row) in counts.iter().enumerate() {
        let s: f64 = row.iter().sum();
        let est: Vec<f64> = row.iter().map(|x| x / s).collect();
        assert!(common::max_abs_diff(&est, kernel.matrix().row(r)) < 0.01);
    }
}

#[test]
fn discounted_cost_matches_truncated_monte_carlo() {
    let mut rng = common::rng(21);
    let kernel = common::kernel(3, 2, &mut rng);
    let policy = common::policy(3, 2, &mut rng);
    let cost = common::cost(3, 2, &mut rng);
    let alpha = DiscountFactor::new(0.7).unwrap();
    let eta = discounted_cost(&kernel, &policy, &cost, alpha).unwrap();
    let paths = 100_000u64;
    for (start, &exact) in eta.iter().enumerate() {
        let totals: Vec<f64> = (0..paths)
            .map(|r| {
                let lp = ClosedLoop::new(
                    &kernel,
                    &policy,
                    null_attack(),
                    None,
                    start,
                    StreamSeed::new(start as u64, r),
                )
                .unwrap();
                lp.take(60)
                    .scan(1.0, |w, s| {
                        let term = *w * cost.get(s.x, s.a);
                        *w *= alpha.get();
                        Some(term)
                    })
                    .sum()
            })
            .collect();
        let mean = totals.iter().sum::<f64>() / paths as f64;
        let var = totals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
        let se = (var / paths as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "state {start}: {mean} vs {exact} (se {se})"
        );
    }
}

#[test]
fn virtual_copy_has_closed_loop_stationary_marginal() {
    let (kernel, policy, _) = common::synthetic();
    let attack = virtual_system_attack(&kernel, &policy).unwrap();
    let traj = simulate(&kernel, &policy, attack, 1_000_000, Some(0), 0, StreamSeed::new(5, 0)).unwrap();
    let pi = stationary_distribution(&induced_state_chain(&kernel, &policy).unwrap().0).unwrap();
    let mut freq = [0.0; 2];
    traj.observations
        .iter()
        .for_each(|&y| freq[y] += 1.0 / traj.len() as f64);
    assert!(common::max_abs_diff(&freq, &pi.pi) < 0.01, "{freq:?} vs {:?}", pi.pi);
}

/// Pearson homogeneity statistic and degrees of freedom over the blocks of two
/// `(state, action) -> next` count tables.
fn homogeneity(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, usize) {
    let mut stat = 0.0;
    let mut dof = 0;
    for (ra, rb) in a.iter().zip(b) {
        let (na, nb): (f64, f64) = (ra.iter().sum(), rb.iter().sum());
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let mut cells = 0;
        for (&x, &y) in ra.iter().zip(rb) {
            let col = x + y;
            if col == 0.0 {
                continue;
            }
            cells += 1;
            let (ea, eb) = (na * col / (na + nb), nb * col / (na + nb));
            stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
        }
        dof += cells.max(1) - 1;
    }
    (stat, dof)
}

fn observed_counts(ys: &[usize], acts: &[usize], n: usize, m: usize) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; n]; n * m];
    for t in 0..ys.len() - 1 {
        c[pair_index(ys[t], acts[t], m)][ys[t + 1]] += 1.0;
    }
    c
}

#[test]
fn unwatermarked_virtual_copy_is_indistinguishable() {
    let mut rng = common::rng(31);
    let kernel: TransitionKernel = common::kernel(3, 2, &mut rng);
    let policy = Policy::deterministic(&[0, 1, 1], 2).unwrap();
    for seed in 0..5 {
        let attack = virtual_system_attack(&kernel, &policy).unwrap();
        let attacked = simulate(&kernel, &policy, attack, 100_000, Some(0), 0, StreamSeed::new(seed, 0)).unwrap();
        let nominal = simulate(
            &kernel,
            &policy,
            null_attack(),
            100_000,
            None,
            0,
            StreamSeed::new(seed, 1),
        )
        .unwrap();
        let (stat, dof) = homogeneity(
            &observed_counts(&attacked.observations, &attacked.actions, 3, 2),
            &observed_counts(&nominal.observations, &nominal.actions, 3, 2),
        );
        let p = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "seed {seed}: chi2 {stat} on {dof} dof, p {p}");
    }
}

#[test]
fn harness_cost_matches_exact_value_under_null() {
    let mut cfg = ExperimentConfig::default();
    cfg.run.replicates = 300;
    let exp = cfg.resolve().unwrap();
    let beta = exp.beta;
    let outcomes = harness::run_replicates(&exp, beta).unwrap();
    let row = harness::aggregate(&exp, beta, &outcomes);
    let policy = exp.deployed_policy(beta).unwrap();
    let eta = discounted_cost(&exp.kernel, &policy, &exp.cost, exp.alpha).unwrap()[exp.initial_state];
    assert!(
        (row.mean_cost - eta).abs() < 3.0 * row.cost_se,
        "{} vs {eta} (se {})",
        row.mean_cost,
        row.cost_se
    );
}
