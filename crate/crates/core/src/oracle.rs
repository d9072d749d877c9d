//! Tabular ground truth for small deterministic state-constrained MDPs.
//!
//! Two independent routes to the constrained value are provided:
//!
//! * [`brute_force_constrained_value`]: finite-horizon dynamic programming
//!   restricted to the largest safe invariant set.
//! * [`value_iteration_epigraph`] + [`recover_value`]: the fixed point of the
//!   epigraph recursion on a uniform budget grid, read off at its zero level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One state of a tabular MDP. Every outgoing edge is one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularState {
    pub name: String,
    pub reward: f64,
    pub safety: f64,
    pub next: Vec<String>,
}

/// Serializable MDP description: `gamma`, `horizon` and a list of states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSpec {
    pub gamma: f64,
    pub horizon: usize,
    #[serde(rename = "state")]
    pub states: Vec<TabularState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub names: Vec<String>,
    /// `edges[x]` lists the successor of each action available in `x`.
    pub edges: Vec<Vec<usize>>,
    pub reward: Vec<f64>,
    pub safety: Vec<f64>,
    pub gamma: f64,
    pub horizon: usize,
}

impl TabularMdp {
    pub fn new(
        edges: Vec<Vec<usize>>,
        reward: Vec<f64>,
        safety: Vec<f64>,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self> {
        let names = (0..edges.len()).map(|i| format!("s{i}")).collect();
        let m = Self {
            names,
            edges,
            reward,
            safety,
            gamma,
            horizon,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_spec(spec: &TabularSpec) -> Result<Self> {
        let names: Vec<String> = spec.states.iter().map(|s| s.name.clone()).collect();
        let index = |name: &str| -> Result<usize> {
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::InvalidConfig(format!("edge to unknown state `{name}`")))
        };
        let edges = spec
            .states
            .iter()
            .map(|s| s.next.iter().map(|n| index(n)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let m = Self {
            names,
            edges,
            reward: spec.states.iter().map(|s| s.reward).collect(),
            safety: spec.states.iter().map(|s| s.safety).collect(),
            gamma: spec.gamma,
            horizon: spec.horizon,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_spec(&self) -> TabularSpec {
        TabularSpec {
            gamma: self.gamma,
            horizon: self.horizon,
            states: (0..self.len())
                .map(|i| TabularState {
                    name: self.names[i].clone(),
                    reward: self.reward[i],
                    safety: self.safety[i],
                    next: self.edges[i].iter().map(|&j| self.names[j].clone()).collect(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.edges.len();
        if n == 0 {
            return Err(Error::InvalidConfig("an MDP needs at least one state".into()));
        }
        if self.reward.len() != n || self.safety.len() != n {
            return Err(Error::InvalidConfig("reward and safety tables must cover every state".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        for (i, e) in self.edges.iter().enumerate() {
            if e.is_empty() {
                return Err(Error::InvalidConfig(format!("state {} has no actions", self.names[i])));
            }
            if e.iter().any(|&j| j >= n) {
                return Err(Error::InvalidConfig(format!("state {} has an edge out of range", self.names[i])));
            }
        }
        if self.reward.iter().chain(&self.safety).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("rewards and safety margins must be finite".into()));
        }
        Ok(())
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// `γ^H max|r| / (1 - γ)`: the return mass beyond the brute-force horizon.
    pub fn tail_bound(&self) -> f64 {
        self.gamma.powi(self.horizon as i32) * self.max_abs_reward() / (1.0 - self.gamma)
    }

    /// States from which some action sequence stays safe forever.
    pub fn safe_invariant_set(&self) -> Vec<bool> {
        let mut keep: Vec<bool> = self.safety.iter().map(|&l| l >= 0.0).collect();
        loop {
            let mut changed = false;
            for x in 0..self.len() {
                if keep[x] && !self.edges[x].iter().any(|&y| keep[y]) {
                    keep[x] = false;
                    changed = true;
                }
            }
            if !changed {
                return keep;
            }
        }
    }

    /// Range of discounted returns: `[min r, max r] / (1 - γ)`.
    pub fn return_range(&self) -> (f64, f64) {
        let lo = self.reward.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.reward.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo.min(0.0) / (1.0 - self.gamma), hi.max(0.0) / (1.0 - self.gamma))
    }

    /// Twelve states in a row. Stepping forward, skipping two ahead and
    /// staying put are allowed; states 6 and 9 are unsafe and the reward
    /// grows along the chain, so the best safe route skips over both.
    pub fn chain12() -> Self {
        let n = 12;
        let edges = (0..n)
            .map(|i| {
                let mut e = vec![i, (i + 1).min(n - 1)];
                if i + 2 < n {
                    e.push(i + 2);
                }
                e
            })
            .collect();
        let reward = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let safety = (0..n)
            .map(|i| match i {
                6 => -0.5,
                9 => -0.2,
                _ => 1.0 - 0.05 * i as f64,
            })
            .collect();
        Self::new(edges, reward, safety, 0.5, 400).expect("fixture is well formed")
    }
}

/// Best safe discounted return per state, `-inf` where no safe continuation exists.
pub fn brute_force_constrained_value(m: &TabularMdp) -> Vec<f64> {
    let viable = m.safe_invariant_set();
    let mut v: Vec<f64> = viable.iter().map(|&ok| if ok { 0.0 } else { f64::NEG_INFINITY }).collect();
    for _ in 0..m.horizon {
        v = (0..m.len())
            .map(|x| {
                if !viable[x] {
                    return f64::NEG_INFINITY;
                }
                let best = m.edges[x].iter().map(|&y| v[y]).fold(f64::NEG_INFINITY, f64::max);
                m.reward[x] + m.gamma * best
            })
            .collect();
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpigraphGrid {
    pub z: Vec<f64>,
    /// `values[x][k]` is `V̂(x, z[k])`.
    pub values: Vec<Vec<f64>>,
    pub sweeps: usize,
    pub last_change: f64,
}

impl EpigraphGrid {
    pub fn spacing(&self) -> f64 {
        self.z[1] - self.z[0]
    }

    /// Linear interpolation in `z`; constant below the grid and slope -1 above it.
    pub fn interpolate(&self, x: usize, z: f64) -> f64 {
        interpolate(&self.z, &self.values[x], z)
    }
}

fn interpolate(grid: &[f64], row: &[f64], z: f64) -> f64 {
    let n = grid.len();
    let (lo, hi) = (grid[0], grid[n - 1]);
    if z <= lo {
        return row[0];
    }
    if z >= hi {
        return row[n - 1] - (z - hi);
    }
    let h = (hi - lo) / (n - 1) as f64;
    let pos = (z - lo) / h;
    let k = (pos.floor() as usize).min(n - 2);
    let w = pos - k as f64;
    (1.0 - w) * row[k] + w * row[k + 1]
}

/// Budget grid settings for [`value_iteration_epigraph`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub z_lo: f64,
    pub z_hi: f64,
    pub points: usize,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl GridSpec {
    /// 401 points over the return range widened by one on each side.
    pub fn default_for(m: &TabularMdp) -> Self {
        let (lo, hi) = m.return_range();
        Self {
            z_lo: lo - 1.0,
            z_hi: hi + 1.0,
            points: 401,
            tolerance: 1e-10,
            max_sweeps: 200_000,
        }
    }
}

/// Iterates `V̂(x, z) <- max_a min(ℓ(x), γ V̂(f(x, a), (z - r(x)) / γ))` to a fixed point.
///
/// The iteration starts from `ℓ(x)`, an upper bound, so the iterates decrease
/// monotonically. Above the grid the value continues with slope -1 (the return
/// term binds for large budgets); below it the value is held constant.
pub fn value_iteration_epigraph(m: &TabularMdp, spec: &GridSpec) -> Result<EpigraphGrid> {
    if spec.points < 2 || !(spec.z_lo < spec.z_hi) {
        return Err(Error::InvalidConfig("budget grid needs at least two increasing points".into()));
    }
    let n = spec.points;
    let z: Vec<f64> = (0..n)
        .map(|k| spec.z_lo + (spec.z_hi - spec.z_lo) * k as f64 / (n - 1) as f64)
        .collect();
    let mut values: Vec<Vec<f64>> = m.safety.iter().map(|&l| vec![l; n]).collect();
    let mut next = values.clone();
    let mut last_change = f64::INFINITY;
    for sweep in 1..=spec.max_sweeps {
        last_change = 0.0;
        for x in 0..m.len() {
            for k in 0..n {
                let zp = (z[k] - m.reward[x]) / m.gamma;
                let best = m.edges[x]
                    .iter()
                    .map(|&y| interpolate(&z, &values[y], zp))
                    .fold(f64::NEG_INFINITY, f64::max);
                let v = m.safety[x].min(m.gamma * best);
                last_change = last_change.max((v - values[x][k]).abs());
                next[x][k] = v;
            }
        }
        std::mem::swap(&mut values, &mut next);
        if last_change < spec.tolerance {
            return Ok(EpigraphGrid {
                z,
                values,
                sweeps: sweep,
                last_change,
            });
        }
    }
    Err(Error::NoConvergence {
        sweeps: spec.max_sweeps,
        last_change,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Recovered {
    Feasible,
    /// Non-negative over the whole grid; the value is the grid top.
    Saturated,
    Infeasible,
}

/// Largest grid budget with `V̂ >= 0`, refined by linear interpolation at the crossing.
pub fn recover_value(grid: &EpigraphGrid) -> Vec<(f64, Recovered)> {
    let n = grid.z.len();
    grid.values
        .iter()
        .map(|row| {
            if row[0] < 0.0 {
                return (f64::NEG_INFINITY, Recovered::Infeasible);
            }
            if row[n - 1] >= 0.0 {
                return (grid.z[n - 1], Recovered::Saturated);
            }
            let k = (0..n - 1).rev().find(|&k| row[k] >= 0.0).unwrap();
            let (a, b) = (row[k], row[k + 1]);
            let z = grid.z[k] + (grid.z[k + 1] - grid.z[k]) * a / (a - b);
            (z, Recovered::Feasible)
        })
        .collect()
}

/// Outcome of comparing both routes on one MDP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub states: Vec<String>,
    pub brute_force: Vec<f64>,
    pub recovered: Vec<f64>,
    pub max_discrepancy: f64,
    pub spacing: f64,
    pub tail_bound: f64,
    pub infeasibility_agrees: bool,
    pub sweeps: usize,
    pub last_change: f64,
    pub monotone_in_z: bool,
}

impl EquivalenceReport {
    /// Discrepancy within two grid cells plus the horizon tail, and identical infeasible sets.
    pub fn passes(&self) -> bool {
        self.infeasibility_agrees && self.max_discrepancy <= 2.0 * self.spacing + self.tail_bound
    }
}

pub fn check_equivalence(m: &TabularMdp, spec: &GridSpec) -> Result<EquivalenceReport> {
    let brute = brute_force_constrained_value(m);
    let grid = value_iteration_epigraph(m, spec)?;
    let rec = recover_value(&grid);
    let mut max_discrepancy: f64 = 0.0;
    let mut infeasibility_agrees = true;
    for (b, (r, _)) in brute.iter().zip(&rec) {
        match (b.is_finite(), r.is_finite()) {
            (true, true) => max_discrepancy = max_discrepancy.max((b - r).abs()),
            (false, false) => {}
            _ => infeasibility_agrees = false,
        }
    }
    let monotone_in_z = grid.values.iter().all(|row| row.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    Ok(EquivalenceReport {
        states: m.names.clone(),
        brute_force: brute,
        recovered: rec.iter().map(|r| r.0).collect(),
        max_discrepancy,
        spacing: grid.spacing(),
        tail_bound: m.tail_bound(),
        infeasibility_agrees,
        sweeps: grid.sweeps,
        last_change: grid.last_change,
        monotone_in_z,
    })
}
