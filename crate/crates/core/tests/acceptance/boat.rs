//! Boat criteria 6 to 10 at reduced scale, sharing one dataset and one set of trained runs.

use std::time::Instant;

use epiflow_core::eval::{
    n_sweep, perturbation_sweep, rollout, state_mesh, z_sensitivity_report, EvalConfig, EvalReport, FlowController,
    N_GRID,
};
use epiflow_core::flow::{train_policy, AdvantageEvaluator, FlowConfig};
use epiflow_core::threshold::ThresholdConfig;
use epiflow_core::values::{self, ValueTrainConfig};
use epiflow_core::{EnvConfig, OfflineDataset, ValueBundle};

use super::Outcome;

const N_TRAJ: usize = 500;
const HORIZON: usize = 400;
const EPISODES: usize = 200;
const EVAL_SEEDS: [u64; 3] = [0, 1, 2];
const VALUE_STEPS: usize = 40_000;
const FLOW_STEPS: usize = 10_000;
const HIDDEN: usize = 64;

struct Fixture {
    env: EnvConfig,
    ds: OfflineDataset,
    eval: EvalConfig,
    threshold: ThresholdConfig,
    flow: FlowConfig,
    started: Instant,
}

impl Fixture {
    fn new() -> Self {
        let env = EnvConfig::default();
        let ds = OfflineDataset::generate(&env, N_TRAJ, HORIZON, 0).unwrap();
        Self {
            eval: EvalConfig {
                n_episodes: EPISODES,
                seeds: EVAL_SEEDS.to_vec(),
                horizon: HORIZON,
                ..EvalConfig::default()
            },
            threshold: ThresholdConfig::default(),
            flow: FlowConfig {
                hidden: vec![HIDDEN, HIDDEN],
                steps: FLOW_STEPS,
                ..FlowConfig::default()
            },
            env,
            ds,
            started: Instant::now(),
        }
    }

    fn log(&self, what: &str) {
        eprintln!("[boat {:>7.1}s] {what}", self.started.elapsed().as_secs_f64());
    }

    fn values(&self, tau: f64, lambda: f64) -> ValueBundle {
        let cfg = ValueTrainConfig {
            tau,
            lambda,
            steps: VALUE_STEPS,
            hidden: vec![HIDDEN, HIDDEN],
            log_every: VALUE_STEPS,
            ..ValueTrainConfig::default()
        };
        let b = values::train(&self.ds, &cfg).unwrap().bundle;
        self.log(&format!("values tau={tau} lambda={lambda} trained"));
        b
    }

    /// Trains a policy on `bundle` and evaluates it with the default N.
    fn evaluate(&self, bundle: &ValueBundle, label: &str) -> EvalReport {
        let p = train_policy(&self.ds, bundle, &self.flow, &self.threshold).unwrap();
        let adv = AdvantageEvaluator::new(bundle, &self.threshold).unwrap();
        let r = rollout(&FlowController::new(&p.policy, adv), &self.env, &self.eval).unwrap();
        self.log(&format!("{label}: {:?}", r.aggregate));
        r
    }
}

fn fmt(r: &EvalReport) -> String {
    format!(
        "safety {:.2}%, cost {:.3}, reward {:.2}",
        r.aggregate.safety_rate, r.aggregate.mean_cost, r.aggregate.mean_reward
    )
}

pub fn run(wanted: &[usize]) -> Vec<(usize, Outcome, f64)> {
    let fx = Fixture::new();
    fx.log(&format!(
        "dataset {} transitions, z in [{:.3}, {:.3}]",
        fx.ds.len(),
        fx.ds.z_min,
        fx.ds.z_max
    ));
    let mut out = Vec::new();
    let need = |k: usize| wanted.contains(&k);

    let t = Instant::now();
    let base_values = fx.values(0.9, 0.25);
    let base_policy = train_policy(&fx.ds, &base_values, &fx.flow, &fx.threshold).unwrap();
    let adv = AdvantageEvaluator::new(&base_values, &fx.threshold).unwrap();
    let controller = FlowController::new(&base_policy.policy, adv);
    let base = rollout(&controller, &fx.env, &fx.eval).unwrap();
    fx.log(&format!("base tau=0.9 lambda=0.25 N=8: {:?}", base.aggregate));
    let shared = t.elapsed().as_secs_f64();

    if need(6) {
        let t = Instant::now();
        let low_tau = fx.evaluate(&fx.values(0.5, 0.25), "tau=0.5");
        let (s9, c9) = (base.aggregate.safety_rate, base.aggregate.mean_cost);
        let (s5, c5) = (low_tau.aggregate.safety_rate, low_tau.aggregate.mean_cost);
        let absolute = s9 >= 99.0 && c9 <= 0.1;
        let ordering = s5 < s9 && c5 > c9;
        out.push((
            6,
            Outcome::new(
                absolute && ordering,
                format!(
                    "tau=0.9: {} (need safety >= 99, cost <= 0.1: {}); tau=0.5: {}; safety and cost orderings hold: {}",
                    fmt(&base),
                    if absolute { "met" } else { "not met" },
                    fmt(&low_tau),
                    ordering
                ),
            ),
            shared + t.elapsed().as_secs_f64(),
        ));
    }

    if need(7) {
        let t = Instant::now();
        let l01 = fx.evaluate(&fx.values(0.9, 0.1), "lambda=0.1");
        let l10 = fx.evaluate(&fx.values(0.9, 1.0), "lambda=1.0");
        let safety = l01.aggregate.safety_rate < base.aggregate.safety_rate;
        let reward = l10.aggregate.mean_reward < base.aggregate.mean_reward;
        out.push((
            7,
            Outcome::new(
                safety && reward,
                format!(
                    "lambda=0.1: {}; lambda=0.25: {}; lambda=1.0: {}; safety(0.1) < safety(0.25): {safety}; reward(1.0) < reward(0.25): {reward}",
                    fmt(&l01),
                    fmt(&base),
                    fmt(&l10)
                ),
            ),
            t.elapsed().as_secs_f64(),
        ));
    }

    if need(8) {
        let t = Instant::now();
        let no_reg = fx.values(0.9, 0.0);
        let mesh = state_mesh(&fx.env, 51, 41);
        let z_grid: Vec<f64> = (0..5)
            .map(|k| fx.ds.z_min + (fx.ds.z_max - fx.ds.z_min) * k as f64 / 4.0)
            .collect();
        let with = z_sensitivity_report(&base_values, &mesh, &z_grid).unwrap().variation;
        let without = z_sensitivity_report(&no_reg, &mesh, &z_grid).unwrap().variation;
        let pass = with >= 5.0 * without.abs() && with > 0.0;
        out.push((
            8,
            Outcome::new(
                pass,
                format!(
                    "mean V̂(z_min) - V̂(z_max) over a 51x41 mesh: lambda=0.25 {with:.4}, lambda=0 {without:.4}, ratio {:.1} (need >= 5)",
                    with / without.abs().max(1e-12)
                ),
            ),
            t.elapsed().as_secs_f64(),
        ));
    }

    if need(9) {
        let t = Instant::now();
        let timing_states = state_mesh(&fx.env, 16, 16);
        let rows = n_sweep(
            &base_policy.policy,
            adv,
            &fx.env,
            &fx.eval,
            &N_GRID,
            &[1],
            &timing_states,
            7,
        )
        .unwrap();
        let times: Vec<f64> = rows.iter().map(|r| r.time_per_action).collect();
        let monotone = times.windows(2).all(|w| w[1] >= w[0]);
        let one = rows[0].report.as_ref().unwrap();
        let reward = base.aggregate.mean_reward >= one.aggregate.mean_reward;
        let shown: Vec<String> = rows
            .iter()
            .map(|r| format!("N={} {:.1}us", r.candidates, r.time_per_action * 1e6))
            .collect();
        out.push((
            9,
            Outcome::new(
                monotone && reward,
                format!(
                    "time per action {} (non-decreasing: {monotone}); N=8 {} vs N=1 {} (reward(8) >= reward(1): {reward})",
                    shown.join(", "),
                    fmt(&base),
                    fmt(one)
                ),
            ),
            t.elapsed().as_secs_f64(),
        ));
    }

    if need(10) {
        let t = Instant::now();
        let (_, rows) = perturbation_sweep(&controller, &fx.env, &fx.eval, &[0.05, 0.1, 0.2]).unwrap();
        let costs: Vec<f64> = rows.iter().map(|r| r.report.aggregate.mean_cost).collect();
        let ordered = costs.windows(2).all(|w| w[0] <= w[1]);
        let small = costs[0] <= 0.5;
        let shown: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.0}%: cost {:.3}", r.level * 100.0, r.report.aggregate.mean_cost))
            .collect();
        out.push((
            10,
            Outcome::new(
                ordered && small,
                format!(
                    "{} (ordered: {ordered}; cost(5%) <= 0.5: {small})",
                    shown.join(", ")
                ),
            ),
            t.elapsed().as_secs_f64(),
        ));
    }
    out
}
