//! Weighted flow-matching policies.
//!
//! A velocity field `v(a_t, c, t)` is regressed onto the straight-line target
//! `u = a - ε` along `a_t = (1 - t) ε + t a`, with each dataset pair weighted by
//! `exp(α Â)`. Integrating the learned ODE from Gaussian noise then samples the
//! behavior density tilted by the exponentiated advantage.
//!
//! The trainer and integrator are dimension-generic; the boat-specific parts
//! are [`AdvantageEvaluator`], [`train_policy`] and [`sample_actions`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::env::{Action, State};
use crate::error::{Error, Result};
use crate::format::Header;
use crate::nn::{read_mlp, write_mlp, AdamConfig, Mlp, OptimizerState};
use crate::threshold::{z_star_batch, SearchInterval, ThresholdConfig, ThresholdStatus, ZStar};
use crate::values::{BudgetScale, ValueBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightClips {
    pub feasible: f64,
    pub infeasible: f64,
}

impl Default for WeightClips {
    fn default() -> Self {
        Self {
            feasible: 100.0,
            infeasible: 150.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub alpha: f64,
    pub clips: WeightClips,
    pub integration_steps: usize,
    pub candidates: usize,
    /// Feed `z*(x)` to the velocity field as an extra input.
    pub condition_on_budget: bool,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub log_every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            clips: WeightClips::default(),
            integration_steps: 5,
            candidates: 8,
            condition_on_budget: false,
            hidden: vec![256, 256],
            batch_size: 256,
            steps: 100_000,
            seed: 0,
            adam: AdamConfig::default(),
            log_every: 1000,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.clips.feasible > 1.0 && self.clips.infeasible > 1.0) {
            return bad("weight clips must exceed 1".into());
        }
        if self.integration_steps == 0 {
            return bad("integration_steps must be at least 1".into());
        }
        if self.candidates == 0 {
            return bad("candidates must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty and positive".into());
        }
        Ok(())
    }
}

/// Straight-line path: `(a_t, u_t) = ((1 - t) ε + t a, a - ε)`.
pub fn path_point(a: &[f64], eps: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidConfig(format!("path time must lie in [0, 1], got {t}")));
    }
    if a.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: a.len(),
            got: eps.len(),
        });
    }
    let at = a.iter().zip(eps).map(|(&a, &e)| (1.0 - t) * e + t * a).collect();
    let u = a.iter().zip(eps).map(|(&a, &e)| a - e).collect();
    Ok((at, u))
}

/// `min(exp(α adv), clip)`, exponentiating only below the clip so nothing overflows.
pub fn guidance_weight(adv: f64, alpha: f64, feasible: bool, clips: WeightClips) -> f64 {
    let clip = if feasible { clips.feasible } else { clips.infeasible };
    let s = alpha * adv;
    if s.is_nan() {
        return clip;
    }
    if s >= clip.ln() {
        clip
    } else {
        s.exp()
    }
}

/// `π_β(a) exp(α Â(a)) / Z` over a finite action set, normalized in log space.
pub fn tilted_distribution(behavior: &[f64], adv: &[f64], alpha: f64) -> Vec<f64> {
    let logits: Vec<f64> = behavior
        .iter()
        .zip(adv)
        .map(|(&p, &a)| if p > 0.0 { p.ln() + alpha * a } else { f64::NEG_INFINITY })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// `Σ π Â - (1/α) KL(π || π_β)`, the objective the tilted distribution maximizes.
pub fn regularized_objective(pi: &[f64], behavior: &[f64], adv: &[f64], alpha: f64) -> f64 {
    let mut value = 0.0;
    for ((&p, &b), &a) in pi.iter().zip(behavior).zip(adv) {
        if p > 0.0 {
            value += p * a - p * (p / b).ln() / alpha;
        }
    }
    value
}

/// A velocity field with its sampler settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPolicy {
    pub net: Mlp,
    pub action_dim: usize,
    /// Width of the conditioning vector (state, plus the budget if enabled).
    pub cond_dim: usize,
    pub integration_steps: usize,
    pub candidates: usize,
    pub alpha: f64,
    pub clips: WeightClips,
    pub condition_on_budget: bool,
    pub budget_scale: Option<BudgetScale>,
    /// Project terminal actions onto the unit disc.
    pub project: bool,
}

impl FlowPolicy {
    pub fn new(action_dim: usize, cond_dim: usize, cfg: &FlowConfig) -> Self {
        let mut sizes = vec![action_dim + cond_dim + 1];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(action_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            net: Mlp::new(&sizes, &mut rng),
            action_dim,
            cond_dim,
            integration_steps: cfg.integration_steps,
            candidates: cfg.candidates,
            alpha: cfg.alpha,
            clips: cfg.clips,
            condition_on_budget: cfg.condition_on_budget,
            budget_scale: None,
            project: true,
        }
    }

    /// Boat policy: two action dimensions conditioned on the state (and `z*` if enabled).
    pub fn for_boat(cfg: &FlowConfig, bundle: &ValueBundle) -> Self {
        let cond = if cfg.condition_on_budget { 3 } else { 2 };
        let mut p = Self::new(2, cond, cfg);
        if cfg.condition_on_budget {
            p.budget_scale = Some(bundle.scale);
        }
        p
    }

    /// Rows `[a_t, c, t]`.
    fn input(&self, a: ArrayView2<f64>, cond: ArrayView2<f64>, t: &[f64]) -> Array2<f64> {
        let n = a.nrows();
        let mut m = Array2::zeros((n, self.action_dim + self.cond_dim + 1));
        for i in 0..n {
            for j in 0..self.action_dim {
                m[[i, j]] = a[[i, j]];
            }
            for j in 0..self.cond_dim {
                m[[i, self.action_dim + j]] = cond[[i, j]];
            }
            m[[i, self.action_dim + self.cond_dim]] = t[i];
        }
        m
    }

    pub fn velocity(&self, a: ArrayView2<f64>, cond: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        if cond.ncols() != self.cond_dim {
            return Err(Error::ShapeMismatch {
                expected: self.cond_dim,
                got: cond.ncols(),
            });
        }
        self.net.forward(self.input(a, cond, t).view())
    }

    /// Explicit Euler from `t = 0` to `1` starting at `eps`, row-wise. Projects if enabled.
    pub fn integrate(&self, cond: ArrayView2<f64>, eps: Array2<f64>) -> Result<Array2<f64>> {
        let n = eps.nrows();
        let h = 1.0 / self.integration_steps as f64;
        let mut a = eps;
        for k in 0..self.integration_steps {
            let t = vec![k as f64 * h; n];
            let v = self.velocity(a.view(), cond, &t)?;
            a.scaled_add(h, &v);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow integration left the finite range".into()));
        }
        if self.project {
            for mut row in a.rows_mut() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1.0 {
                    row.mapv_inplace(|v| v / norm);
                }
            }
        }
        Ok(a)
    }

    /// One integrated sample per conditioning row, no candidate selection.
    pub fn sample_raw<R: Rng + ?Sized>(&self, cond: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let eps = Array2::from_shape_simple_fn((cond.nrows(), self.action_dim), || rng.sample(StandardNormal));
        self.integrate(cond, eps)
    }

    /// Conditioning rows for boat states at their budgets.
    pub fn boat_condition(&self, states: &[State], z: &[f64]) -> Array2<f64> {
        let mut c = Array2::zeros((states.len(), self.cond_dim));
        for (i, s) in states.iter().enumerate() {
            c[[i, 0]] = s.x1;
            c[[i, 1]] = s.x2;
            if self.cond_dim > 2 {
                let scale = self.budget_scale.unwrap_or(BudgetScale { center: 0.0, half_width: 1.0 });
                c[[i, 2]] = scale.apply(z[i]);
            }
        }
        c
    }

    pub fn save(&self, path: &Path, seed: u64, steps: u64) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w, seed, steps).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W, seed: u64, steps: u64) -> std::io::Result<()> {
        let mut h = Header::default();
        h.push("action_dim", self.action_dim);
        h.push("cond_dim", self.cond_dim);
        h.push("integration_steps", self.integration_steps);
        h.push("candidates", self.candidates);
        h.push("alpha", format!("{:?}", self.alpha));
        h.push("clip_feasible", format!("{:?}", self.clips.feasible));
        h.push("clip_infeasible", format!("{:?}", self.clips.infeasible));
        h.push("condition_on_budget", self.condition_on_budget);
        h.push("project", self.project);
        if let Some(s) = self.budget_scale {
            h.push("budget_center", format!("{:?}", s.center));
            h.push("budget_half_width", format!("{:?}", s.half_width));
        }
        h.write(w, "epiflow-policy", "v1")?;
        write_mlp(w, &self.net, seed, steps)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let h = Header::read(r, "epiflow-policy", "v1")?;
        let action_dim: usize = h.parse("action_dim")?;
        let cond_dim: usize = h.parse("cond_dim")?;
        let net = read_mlp(r)?.net;
        if net.input_dim() != action_dim + cond_dim + 1 || net.output_dim() != action_dim {
            return Err(Error::ArchitectureMismatch(format!(
                "velocity field sizes {:?} do not fit action_dim {action_dim} and cond_dim {cond_dim}",
                net.sizes()
            )));
        }
        let budget_scale = match h.get("budget_center") {
            Ok(_) => Some(BudgetScale {
                center: h.parse("budget_center")?,
                half_width: h.parse("budget_half_width")?,
            }),
            Err(_) => None,
        };
        Ok(Self {
            net,
            action_dim,
            cond_dim,
            integration_steps: h.parse("integration_steps")?,
            candidates: h.parse("candidates")?,
            alpha: h.parse("alpha")?,
            clips: WeightClips {
                feasible: h.parse("clip_feasible")?,
                infeasible: h.parse("clip_infeasible")?,
            },
            condition_on_budget: h.parse("condition_on_budget")?,
            budget_scale,
            project: h.parse("project")?,
        })
    }
}

/// Weighted regression data: conditioning rows, data actions, per-row weights.
#[derive(Debug, Clone)]
pub struct WeightedData {
    pub cond: Array2<f64>,
    pub actions: Array2<f64>,
    pub weights: Array1<f64>,
}

/// Mean of `w ‖v(a_t, c, t) - u_t‖²` and its parameter gradient.
pub fn weighted_fm_loss(
    policy: &FlowPolicy,
    cond: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    t: &[f64],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = actions.nrows();
    let mut at = Array2::zeros(actions.raw_dim());
    let mut u = Array2::zeros(actions.raw_dim());
    for i in 0..n {
        let (p, v) = path_point(
            actions.row(i).as_slice().unwrap_or(&actions.row(i).to_vec()),
            &eps.row(i).to_vec(),
            t[i],
        )?;
        at.row_mut(i).assign(&Array1::from(p));
        u.row_mut(i).assign(&Array1::from(v));
    }
    let input = policy.input(at.view(), cond, t);
    let tape = policy.net.forward_tape(input.view())?;
    let diff = tape.output() - &u;
    let mut value = 0.0;
    let mut g_out = Array2::zeros(diff.raw_dim());
    for i in 0..n {
        let w = weights[i];
        for j in 0..policy.action_dim {
            let d = diff[[i, j]];
            value += w * d * d / n as f64;
            g_out[[i, j]] = 2.0 * w * d / n as f64;
        }
    }
    let (g, _) = policy.net.backward(&tape, g_out.view())?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("flow loss is {value}")));
    }
    Ok((value, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowLossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Runs weighted flow matching in place and returns the loss log.
pub fn train_weighted(policy: &mut FlowPolicy, data: &WeightedData, cfg: &FlowConfig) -> Result<Vec<FlowLossRecord>> {
    cfg.validate()?;
    let n = data.actions.nrows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if data.cond.nrows() != n || data.weights.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: data.cond.nrows().min(data.weights.len()),
        });
    }
    let mut opt = OptimizerState::new(policy.net.num_params(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let d = policy.action_dim;
    let mut log = Vec::new();
    let mut first: Option<f64> = None;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let cond = data.cond.select(Axis(0), &idx);
        let acts = data.actions.select(Axis(0), &idx);
        let w: Vec<f64> = idx.iter().map(|&i| data.weights[i]).collect();
        let eps = Array2::from_shape_simple_fn((idx.len(), d), || rng.sample(StandardNormal));
        let t: Vec<f64> = (0..idx.len()).map(|_| rng.gen::<f64>()).collect();
        let (loss, g) = weighted_fm_loss(policy, cond.view(), acts.view(), eps.view(), &t, &w).map_err(|e| {
            Error::Diverged {
                step,
                reason: e.to_string(),
            }
        })?;
        let base = *first.get_or_insert(loss.max(1e-12));
        if loss > 1e6 * base.max(1.0) {
            return Err(Error::Diverged {
                step,
                reason: format!("flow loss {loss:.3e} exploded"),
            });
        }
        opt.step(policy.net.params_mut(), &g, "velocity")?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log.push(FlowLossRecord { step, loss });
        }
    }
    Ok(log)
}

/// Frozen value bundle plus the threshold search that defines `Â(x, a; z*(x))`.
#[derive(Debug, Clone, Copy)]
pub struct AdvantageEvaluator<'a> {
    pub bundle: &'a ValueBundle,
    pub interval: SearchInterval,
}

impl<'a> AdvantageEvaluator<'a> {
    pub fn new(bundle: &'a ValueBundle, cfg: &ThresholdConfig) -> Result<Self> {
        Ok(Self {
            bundle,
            interval: SearchInterval::resolve(cfg, bundle.z_min, bundle.z_max)?,
        })
    }

    pub fn z_star(&self, states: &[State]) -> Result<Vec<ZStar>> {
        z_star_batch(self.bundle, states, &self.interval)
    }

    /// `min_i Q̂_i(x, z, a) - V̂(x, z)`.
    pub fn advantage(&self, x: ArrayView2<f64>, z: &[f64], a: ArrayView2<f64>) -> Array1<f64> {
        let z = ndarray::ArrayView1::from(z);
        self.bundle.q_hat_at(x, z, a) - self.bundle.v_hat_at(x, z)
    }

    /// `V_s(x) >= 0`, used to pick the weight clip.
    pub fn feasible(&self, x: ArrayView2<f64>) -> Vec<bool> {
        self.bundle.v_s_at(x).iter().map(|&v| v >= 0.0).collect()
    }
}

fn states_matrix(states: &[State]) -> Array2<f64> {
    Array2::from_shape_fn((states.len(), 2), |(i, j)| if j == 0 { states[i].x1 } else { states[i].x2 })
}

/// Guidance quantities for every dataset transition.
#[derive(Debug, Clone)]
pub struct GuidanceTable {
    pub z_star: Vec<ZStar>,
    pub advantage: Vec<f64>,
    pub feasible: Vec<bool>,
    pub weights: Vec<f64>,
}

impl GuidanceTable {
    pub fn status_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for z in &self.z_star {
            c[match z.status {
                ThresholdStatus::Feasible => 0,
                ThresholdStatus::Infeasible => 1,
                ThresholdStatus::Saturated => 2,
            }] += 1;
        }
        c
    }

    pub fn non_monotone(&self) -> usize {
        self.z_star.iter().filter(|z| !z.is_monotone()).count()
    }
}

const GUIDANCE_CHUNK: usize = 4096;

/// `z*`, `Â` and the clipped weight for every transition, computed in parallel chunks.
pub fn guidance_table(ds: &OfflineDataset, adv: &AdvantageEvaluator, alpha: f64, clips: WeightClips) -> Result<GuidanceTable> {
    let chunks: Vec<Result<GuidanceTable>> = ds
        .transitions
        .par_chunks(GUIDANCE_CHUNK)
        .map(|chunk| {
            let states: Vec<State> = chunk.iter().map(|t| t.x).collect();
            let zs = adv.z_star(&states)?;
            let x = states_matrix(&states);
            let a = Array2::from_shape_fn((chunk.len(), 2), |(i, j)| if j == 0 { chunk[i].a.a1 } else { chunk[i].a.a2 });
            let z: Vec<f64> = zs.iter().map(|z| z.z).collect();
            let advantage = adv.advantage(x.view(), &z, a.view()).to_vec();
            let feasible = adv.feasible(x.view());
            let weights = advantage
                .iter()
                .zip(&feasible)
                .map(|(&d, &f)| guidance_weight(d, alpha, f, clips))
                .collect();
            Ok(GuidanceTable {
                z_star: zs,
                advantage,
                feasible,
                weights,
            })
        })
        .collect();
    let mut out = GuidanceTable {
        z_star: Vec::with_capacity(ds.len()),
        advantage: Vec::with_capacity(ds.len()),
        feasible: Vec::with_capacity(ds.len()),
        weights: Vec::with_capacity(ds.len()),
    };
    for c in chunks {
        let c = c?;
        out.z_star.extend(c.z_star);
        out.advantage.extend(c.advantage);
        out.feasible.extend(c.feasible);
        out.weights.extend(c.weights);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PolicyTraining {
    pub policy: FlowPolicy,
    pub guidance: GuidanceTable,
    pub log: Vec<FlowLossRecord>,
}

/// Computes the guidance table from the frozen bundle, then trains the velocity field.
pub fn train_policy(
    ds: &OfflineDataset,
    bundle: &ValueBundle,
    cfg: &FlowConfig,
    threshold: &ThresholdConfig,
) -> Result<PolicyTraining> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let adv = AdvantageEvaluator::new(bundle, threshold)?;
    let guidance = guidance_table(ds, &adv, cfg.alpha, cfg.clips)?;
    let mut policy = FlowPolicy::for_boat(cfg, bundle);
    let states: Vec<State> = ds.transitions.iter().map(|t| t.x).collect();
    let z: Vec<f64> = guidance.z_star.iter().map(|z| z.z).collect();
    let data = WeightedData {
        cond: policy.boat_condition(&states, &z),
        actions: Array2::from_shape_fn((ds.len(), 2), |(i, j)| {
            let a = ds.transitions[i].a;
            if j == 0 {
                a.a1
            } else {
                a.a2
            }
        }),
        weights: Array1::from(guidance.weights.clone()),
    };
    let log = train_weighted(&mut policy, &data, cfg)?;
    Ok(PolicyTraining { policy, guidance, log })
}

/// Candidate sampling for a batch of states, one RNG per state.
///
/// Each state draws `N` base samples, integrates them, and keeps the one with
/// the largest clipped double-Q value at `(x, z*(x))`.
pub fn sample_actions<R: Rng>(
    policy: &FlowPolicy,
    adv: &AdvantageEvaluator,
    states: &[State],
    rngs: &mut [R],
) -> Result<Vec<Action>> {
    sample_actions_n(policy, adv, states, rngs, policy.candidates)
}

/// [`sample_actions`] with an explicit candidate count.
pub fn sample_actions_n<R: Rng>(
    policy: &FlowPolicy,
    adv: &AdvantageEvaluator,
    states: &[State],
    rngs: &mut [R],
    candidates: usize,
) -> Result<Vec<Action>> {
    if rngs.len() != states.len() {
        return Err(Error::ShapeMismatch {
            expected: states.len(),
            got: rngs.len(),
        });
    }
    if candidates == 0 {
        return Err(Error::InvalidConfig("candidates must be at least 1".into()));
    }
    if states.is_empty() {
        return Ok(Vec::new());
    }
    let n = candidates;
    // z* feeds only candidate scoring and the optional budget input
    let zs: Vec<f64> = if n > 1 || policy.cond_dim > 2 {
        adv.z_star(states)?.iter().map(|z| z.z).collect()
    } else {
        vec![0.0; states.len()]
    };
    let d = policy.action_dim;
    let mut rep_states = Vec::with_capacity(states.len() * n);
    let mut rep_z = Vec::with_capacity(states.len() * n);
    let mut eps = Array2::zeros((states.len() * n, d));
    for (i, (s, rng)) in states.iter().zip(rngs.iter_mut()).enumerate() {
        for c in 0..n {
            rep_states.push(*s);
            rep_z.push(zs[i]);
            for j in 0..d {
                eps[[i * n + c, j]] = rng.sample(StandardNormal);
            }
        }
    }
    let cond = policy.boat_condition(&rep_states, &rep_z);
    let acts = policy.integrate(cond.view(), eps)?;
    let scores = if n > 1 {
        adv.bundle
            .q_hat_at(states_matrix(&rep_states).view(), ndarray::ArrayView1::from(&rep_z), acts.view())
            .to_vec()
    } else {
        vec![0.0; rep_states.len()]
    };
    let mut out = Vec::with_capacity(states.len());
    for i in 0..states.len() {
        let mut best = i * n;
        for c in i * n + 1..(i + 1) * n {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        out.push(Action::new(acts[[best, 0]], acts[[best, 1]]));
    }
    Ok(out)
}

pub fn sample_action<R: Rng>(policy: &FlowPolicy, adv: &AdvantageEvaluator, x: &State, rng: &mut R) -> Result<Action> {
    Ok(sample_actions(policy, adv, std::slice::from_ref(x), std::slice::from_mut(rng))?[0])
}
