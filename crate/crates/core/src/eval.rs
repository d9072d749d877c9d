//! Rollouts, ablation sweeps and the budget-sensitivity report.
//!
//! Episodes run in lockstep so that a controller sees a whole batch of states
//! per call. Every episode owns three RNG substreams (initial state, policy,
//! action noise), so results do not depend on how episodes are batched.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_box_state, substream, OfflineDataset};
use crate::env::{self, Action, EnvConfig, State};
use crate::error::{Error, Result};
use crate::flow::{sample_actions_n, train_policy, AdvantageEvaluator, FlowConfig, FlowPolicy};
use crate::threshold::{BudgetValue, ThresholdConfig};
use crate::values::{self, ValueTrainConfig};

/// Anything that maps a batch of states to actions.
pub trait Controller: Sync {
    fn act(&self, states: &[State], rngs: &mut [ChaCha8Rng]) -> Result<Vec<Action>>;
}

/// Closure controller, for hand-written policies.
pub struct FnController<F>(pub F);

impl<F: Fn(&State) -> Action + Sync> Controller for FnController<F> {
    fn act(&self, states: &[State], _rngs: &mut [ChaCha8Rng]) -> Result<Vec<Action>> {
        Ok(states.iter().map(&self.0).collect())
    }
}

/// Flow policy with value-guided candidate selection.
pub struct FlowController<'a> {
    pub policy: &'a FlowPolicy,
    pub adv: AdvantageEvaluator<'a>,
    pub candidates: usize,
}

impl<'a> FlowController<'a> {
    pub fn new(policy: &'a FlowPolicy, adv: AdvantageEvaluator<'a>) -> Self {
        Self {
            policy,
            adv,
            candidates: policy.candidates,
        }
    }
}

impl Controller for FlowController<'_> {
    fn act(&self, states: &[State], rngs: &mut [ChaCha8Rng]) -> Result<Vec<Action>> {
        sample_actions_n(self.policy, &self.adv, states, rngs, self.candidates)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub seeds: Vec<u64>,
    pub horizon: usize,
    pub perturbation_levels: Vec<f64>,
    /// Episodes advanced together per controller call.
    pub lockstep: usize,
    /// Start every episode from these states in turn instead of sampling.
    #[serde(skip)]
    pub fixed_initial: Option<Vec<State>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 500,
            seeds: (0..5).collect(),
            horizon: 400,
            perturbation_levels: vec![0.05, 0.10, 0.20],
            lockstep: 256,
            fixed_initial: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 {
            return Err(Error::InvalidConfig("n_episodes must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one evaluation seed is required".into()));
        }
        if self.lockstep == 0 {
            return Err(Error::InvalidConfig("lockstep must be at least 1".into()));
        }
        if let Some(f) = self.perturbation_levels.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return Err(Error::InvalidConfig(format!("perturbation level {f} is outside [0, 1)")));
        }
        if matches!(&self.fixed_initial, Some(v) if v.is_empty()) {
            return Err(Error::InvalidConfig("fixed initial state list is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub episode: usize,
    pub reward: f64,
    /// Steps with `ℓ(x) < 0`.
    pub cost: usize,
}

impl EpisodeResult {
    pub fn safe(&self) -> bool {
        self.cost == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub episodes: usize,
    pub mean_reward: f64,
    pub sd_reward: f64,
    /// Percentage of episodes without a violation.
    pub safety_rate: f64,
    pub mean_cost: f64,
}

impl Summary {
    pub fn of(eps: &[EpisodeResult]) -> Self {
        let n = eps.len().max(1) as f64;
        let mean = eps.iter().map(|e| e.reward).sum::<f64>() / n;
        let var = eps.iter().map(|e| (e.reward - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            episodes: eps.len(),
            mean_reward: mean,
            sd_reward: var.sqrt(),
            safety_rate: 100.0 * eps.iter().filter(|e| e.safe()).count() as f64 / n,
            mean_cost: eps.iter().map(|e| e.cost as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub perturbation: f64,
    pub per_seed: Vec<SeedReport>,
    pub aggregate: Summary,
    /// Wall-clock seconds per action, averaged over every controller call.
    pub time_per_action: f64,
    #[serde(skip)]
    pub episodes: Vec<EpisodeResult>,
}

/// Safe initial state by rejection sampling over the box.
pub fn safe_initial_state<R: Rng + ?Sized>(rng: &mut R, env: &EnvConfig) -> State {
    loop {
        let s = sample_box_state(rng, env);
        if env::safety(&s, env) >= 0.0 {
            return s;
        }
    }
}

fn episode_streams(seed: u64, episode: usize) -> [ChaCha8Rng; 3] {
    let base = 3 * episode as u64;
    [substream(seed, base), substream(seed, base + 1), substream(seed, base + 2)]
}

/// Runs one block of episodes in lockstep. Returns results and controller time.
fn run_block<C: Controller + ?Sized>(
    controller: &C,
    env_cfg: &EnvConfig,
    cfg: &EvalConfig,
    seed: u64,
    episodes: std::ops::Range<usize>,
    noise: f64,
) -> Result<(Vec<EpisodeResult>, f64, usize)> {
    let n = episodes.len();
    let mut policy_rngs = Vec::with_capacity(n);
    let mut noise_rngs = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for ep in episodes.clone() {
        let [mut init, pol, noi] = episode_streams(seed, ep);
        states.push(match &cfg.fixed_initial {
            Some(list) => list[ep % list.len()],
            None => safe_initial_state(&mut init, env_cfg),
        });
        policy_rngs.push(pol);
        noise_rngs.push(noi);
    }
    let mut reward = vec![0.0; n];
    let mut cost = vec![0usize; n];
    let mut elapsed = 0.0;
    let mut calls = 0;
    for t in 0..cfg.horizon {
        let start = Instant::now();
        let mut actions = controller.act(&states, &mut policy_rngs)?;
        elapsed += start.elapsed().as_secs_f64();
        calls += n;
        if actions.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: actions.len(),
            });
        }
        for i in 0..n {
            if noise > 0.0 {
                let d1: f64 = noise_rngs[i].sample(StandardNormal);
                let d2: f64 = noise_rngs[i].sample(StandardNormal);
                actions[i] = Action::new(actions[i].a1 + noise * d1, actions[i].a2 + noise * d2);
            }
            let a = actions[i].project_to_disc();
            let out = env::step(&states[i], &a, t, env_cfg)?;
            reward[i] += out.reward;
            if out.ell < 0.0 {
                cost[i] += 1;
            }
            states[i] = out.next;
        }
    }
    let results = episodes
        .enumerate()
        .map(|(i, ep)| EpisodeResult {
            seed,
            episode: ep,
            reward: reward[i],
            cost: cost[i],
        })
        .collect();
    Ok((results, elapsed, calls))
}

/// Evaluates `controller` with additive Gaussian action noise of standard deviation
/// `level` times the action bound (1), re-projected onto the disc.
pub fn rollout_perturbed<C: Controller + ?Sized>(
    controller: &C,
    env_cfg: &EnvConfig,
    cfg: &EvalConfig,
    level: f64,
) -> Result<EvalReport> {
    cfg.validate()?;
    env_cfg.validate()?;
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidConfig(format!("perturbation level {level} is outside [0, 1)")));
    }
    let mut blocks = Vec::new();
    for &seed in &cfg.seeds {
        let mut start = 0;
        while start < cfg.n_episodes {
            let end = (start + cfg.lockstep).min(cfg.n_episodes);
            blocks.push((seed, start..end));
            start = end;
        }
    }
    let results: Vec<Result<(Vec<EpisodeResult>, f64, usize)>> = blocks
        .into_par_iter()
        .map(|(seed, range)| run_block(controller, env_cfg, cfg, seed, range, level))
        .collect();
    let mut episodes = Vec::with_capacity(cfg.n_episodes * cfg.seeds.len());
    let (mut elapsed, mut calls) = (0.0, 0usize);
    for r in results {
        let (eps, e, c) = r?;
        episodes.extend(eps);
        elapsed += e;
        calls += c;
    }
    let per_seed = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let eps: Vec<EpisodeResult> = episodes.iter().filter(|e| e.seed == seed).copied().collect();
            SeedReport {
                seed,
                summary: Summary::of(&eps),
            }
        })
        .collect();
    Ok(EvalReport {
        perturbation: level,
        per_seed,
        aggregate: Summary::of(&episodes),
        time_per_action: elapsed / calls.max(1) as f64,
        episodes,
    })
}

pub fn rollout<C: Controller + ?Sized>(controller: &C, env_cfg: &EnvConfig, cfg: &EvalConfig) -> Result<EvalReport> {
    rollout_perturbed(controller, env_cfg, cfg, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationRow {
    pub level: f64,
    /// Mean reward as a percentage of the unperturbed mean reward.
    pub relative_reward: f64,
    pub report: EvalReport,
}

/// The unperturbed run followed by one run per level.
pub fn perturbation_sweep<C: Controller + ?Sized>(
    controller: &C,
    env_cfg: &EnvConfig,
    cfg: &EvalConfig,
    levels: &[f64],
) -> Result<(EvalReport, Vec<PerturbationRow>)> {
    let base = rollout(controller, env_cfg, cfg)?;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let report = rollout_perturbed(controller, env_cfg, cfg, level)?;
        let relative_reward = if base.aggregate.mean_reward == 0.0 {
            if report.aggregate.mean_reward == 0.0 {
                100.0
            } else {
                f64::NAN
            }
        } else {
            100.0 * report.aggregate.mean_reward / base.aggregate.mean_reward
        };
        rows.push(PerturbationRow {
            level,
            relative_reward,
            report,
        });
    }
    Ok((base, rows))
}

/// Value training, guidance, policy training and evaluation in one call.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub values: ValueTrainConfig,
    pub flow: FlowConfig,
    pub threshold: ThresholdConfig,
    pub eval: EvalConfig,
}

pub fn train_and_evaluate(ds: &OfflineDataset, cfg: &PipelineConfig) -> Result<EvalReport> {
    let trained = values::train(ds, &cfg.values)?;
    let policy = train_policy(ds, &trained.bundle, &cfg.flow, &cfg.threshold)?;
    let adv = AdvantageEvaluator::new(&trained.bundle, &cfg.threshold)?;
    rollout(&FlowController::new(&policy.policy, adv), &ds.meta.env, &cfg.eval)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub parameter: String,
    pub value: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

fn sweep(ds: &OfflineDataset, base: &PipelineConfig, name: &str, grid: &[f64], set: impl Fn(&mut PipelineConfig, f64)) -> Vec<AblationRow> {
    grid.iter()
        .map(|&v| {
            let mut cfg = base.clone();
            set(&mut cfg, v);
            let (report, error) = match train_and_evaluate(ds, &cfg) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            AblationRow {
                parameter: name.into(),
                value: v,
                report,
                error,
            }
        })
        .collect()
}

pub const TAU_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
pub const LAMBDA_GRID: [f64; 4] = [0.1, 0.25, 0.5, 1.0];
pub const N_GRID: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

/// Retrains and evaluates once per expectile level. Failed cells are recorded, not fatal.
pub fn tau_sweep(ds: &OfflineDataset, base: &PipelineConfig, grid: &[f64]) -> Vec<AblationRow> {
    sweep(ds, base, "tau", grid, |c, v| c.values.tau = v)
}

pub fn lambda_sweep(ds: &OfflineDataset, base: &PipelineConfig, grid: &[f64]) -> Vec<AblationRow> {
    sweep(ds, base, "lambda", grid, |c, v| c.values.lambda = v)
}

/// Seconds per action for a batch of states, minimum over `repeats` timings.
pub fn time_per_action<C: Controller + ?Sized>(controller: &C, states: &[State], repeats: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for r in 0..repeats.max(1) {
        let mut rngs: Vec<ChaCha8Rng> = (0..states.len()).map(|i| substream(r as u64, i as u64)).collect();
        let start = Instant::now();
        controller.act(states, &mut rngs)?;
        best = best.min(start.elapsed().as_secs_f64() / states.len().max(1) as f64);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateRow {
    pub candidates: usize,
    pub time_per_action: f64,
    pub report: Option<EvalReport>,
}

/// Re-evaluates one trained policy with different candidate counts. Timing
/// uses a fixed batch of `timing_states`; rollouts run only for counts in `rollout_for`.
pub fn n_sweep(
    policy: &FlowPolicy,
    adv: AdvantageEvaluator,
    env_cfg: &EnvConfig,
    cfg: &EvalConfig,
    grid: &[usize],
    rollout_for: &[usize],
    timing_states: &[State],
    repeats: usize,
) -> Result<Vec<CandidateRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &n in grid {
        let mut c = FlowController::new(policy, adv);
        c.candidates = n;
        let time = time_per_action(&c, timing_states, repeats)?;
        let report = if rollout_for.contains(&n) {
            Some(rollout(&c, env_cfg, cfg)?)
        } else {
            None
        };
        rows.push(CandidateRow {
            candidates: n,
            time_per_action: time,
            report,
        });
    }
    Ok(rows)
}

/// Uniform state mesh over the environment box.
pub fn state_mesh(env: &EnvConfig, n1: usize, n2: usize) -> Vec<State> {
    let lin = |lo: f64, hi: f64, n: usize, k: usize| if n == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 };
    let mut out = Vec::with_capacity(n1 * n2);
    for j in 0..n2 {
        for i in 0..n1 {
            out.push(State::new(
                lin(env.x1_bounds[0], env.x1_bounds[1], n1, i),
                lin(env.x2_bounds[0], env.x2_bounds[1], n2, j),
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZSensitivity {
    pub z_grid: Vec<f64>,
    /// `V̂` on the mesh for every budget: `values[k][i]` is state `i` at `z_grid[k]`.
    #[serde(skip)]
    pub values: Vec<Vec<f64>>,
    /// Mean over states of `V̂(x, z_first) - V̂(x, z_last)`.
    pub variation: f64,
    /// Mean over states of `V̂` at each budget.
    pub mean_per_z: Vec<f64>,
    /// Fraction of states with `V̂ >= 0` at each budget.
    pub nonnegative_per_z: Vec<f64>,
}

pub fn z_sensitivity_report<V: BudgetValue + ?Sized>(vhat: &V, states: &[State], z_grid: &[f64]) -> Result<ZSensitivity> {
    if z_grid.len() < 2 {
        return Err(Error::InvalidConfig("z grid needs at least two budgets".into()));
    }
    if states.is_empty() {
        return Err(Error::InvalidConfig("z sensitivity needs at least one state".into()));
    }
    let values: Vec<Vec<f64>> = z_grid
        .iter()
        .map(|&z| vhat.eval(states, &vec![z; states.len()]))
        .collect();
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("V̂ is not finite on the mesh".into()));
    }
    let n = states.len() as f64;
    let first = &values[0];
    let last = &values[values.len() - 1];
    let variation = first.iter().zip(last).map(|(a, b)| a - b).sum::<f64>() / n;
    Ok(ZSensitivity {
        z_grid: z_grid.to_vec(),
        mean_per_z: values.iter().map(|r| r.iter().sum::<f64>() / n).collect(),
        nonnegative_per_z: values.iter().map(|r| r.iter().filter(|&&v| v >= 0.0).count() as f64 / n).collect(),
        values,
        variation,
    })
}

/// Writes one mesh as CSV rows `x1,x2,z,v`.
pub fn write_mesh_csv<W: std::io::Write>(w: &mut W, states: &[State], report: &ZSensitivity) -> std::io::Result<()> {
    writeln!(w, "x1,x2,z,v_hat")?;
    for (k, &z) in report.z_grid.iter().enumerate() {
        for (s, v) in states.iter().zip(&report.values[k]) {
            writeln!(w, "{},{},{},{}", s.x1, s.x2, z, v)?;
        }
    }
    Ok(())
}

/// Matrix view of states, one row per state.
pub fn states_to_array(states: &[State]) -> Array2<f64> {
    Array2::from_shape_fn((states.len(), 2), |(i, j)| if j == 0 { states[i].x1 } else { states[i].x2 })
}
