//! Per-state budget search: `z*(x) = sup { z : V̂(x, z) >= 0 }` by bisection.
//!
//! A coarse sign scan over the interval locates the largest-`z` sign change,
//! which brackets the bisection. The scan also counts sign changes so that
//! non-monotone value profiles can be reported.

use serde::{Deserialize, Serialize};

use crate::env::State;
use crate::error::{Error, Result};
use crate::values::ValueBundle;

/// Number of uniform points in the sign scan.
pub const SCAN_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    /// Lower end of the search interval; `None` means the dataset `z_min`.
    pub z_lo: Option<f64>,
    /// Upper end of the search interval; `None` means the dataset `z_max`.
    pub z_hi: Option<f64>,
    pub iterations: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            z_lo: None,
            z_hi: None,
            iterations: 32,
        }
    }
}

/// A validated search interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchInterval {
    pub z_lo: f64,
    pub z_hi: f64,
    pub iterations: usize,
}

impl SearchInterval {
    pub fn new(z_lo: f64, z_hi: f64, iterations: usize) -> Result<Self> {
        if !(z_lo < z_hi) || !z_lo.is_finite() || !z_hi.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "threshold interval must satisfy z_lo < z_hi, got [{z_lo}, {z_hi}]"
            )));
        }
        if iterations == 0 {
            return Err(Error::InvalidConfig("threshold iterations must be at least 1".into()));
        }
        Ok(Self { z_lo, z_hi, iterations })
    }

    /// Resolves the configured interval against the dataset budget range.
    pub fn resolve(cfg: &ThresholdConfig, z_min: f64, z_max: f64) -> Result<Self> {
        Self::new(cfg.z_lo.unwrap_or(z_min), cfg.z_hi.unwrap_or(z_max), cfg.iterations)
    }

    fn scan_grid(&self) -> Vec<f64> {
        let n = SCAN_POINTS - 1;
        (0..SCAN_POINTS)
            .map(|j| {
                if j == n {
                    self.z_hi
                } else {
                    self.z_lo + (self.z_hi - self.z_lo) * j as f64 / n as f64
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ThresholdStatus {
    Feasible,
    /// `V̂(x, z_lo) < 0`: no budget in the interval is feasible.
    Infeasible,
    /// `V̂(x, z_hi) >= 0`: the interval is too small to contain the crossing.
    Saturated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZStar {
    pub z: f64,
    pub status: ThresholdStatus,
    /// Sign changes seen by the scan; more than one means a non-monotone profile.
    pub sign_changes: usize,
}

impl ZStar {
    pub fn is_monotone(&self) -> bool {
        self.sign_changes <= 1
    }
}

/// Anything that can evaluate `V̂(x, z)` on a batch of `(state, budget)` pairs.
pub trait BudgetValue {
    fn eval(&self, states: &[State], z: &[f64]) -> Vec<f64>;
}

impl BudgetValue for ValueBundle {
    fn eval(&self, states: &[State], z: &[f64]) -> Vec<f64> {
        let x = ndarray::Array2::from_shape_fn((states.len(), 2), |(i, j)| {
            if j == 0 {
                states[i].x1
            } else {
                states[i].x2
            }
        });
        let z = ndarray::ArrayView1::from(z);
        self.v_hat_at(x.view(), z).to_vec()
    }
}

/// Adapter for closures `V̂(x, z)`.
pub struct FnValue<F>(pub F);

impl<F: Fn(&State, f64) -> f64> BudgetValue for FnValue<F> {
    fn eval(&self, states: &[State], z: &[f64]) -> Vec<f64> {
        states.iter().zip(z).map(|(s, &z)| (self.0)(s, z)).collect()
    }
}

pub fn z_star<V: BudgetValue + ?Sized>(vhat: &V, x: &State, interval: &SearchInterval) -> Result<ZStar> {
    Ok(z_star_batch(vhat, std::slice::from_ref(x), interval)?[0])
}

/// Elementwise [`z_star`], evaluated with one batched call per scan or bisection round.
pub fn z_star_batch<V: BudgetValue + ?Sized>(
    vhat: &V,
    states: &[State],
    interval: &SearchInterval,
) -> Result<Vec<ZStar>> {
    if states.is_empty() {
        return Ok(Vec::new());
    }
    let grid = interval.scan_grid();
    let m = grid.len();
    let mut rep_states = Vec::with_capacity(states.len() * m);
    let mut rep_z = Vec::with_capacity(states.len() * m);
    for s in states {
        for &z in &grid {
            rep_states.push(*s);
            rep_z.push(z);
        }
    }
    let scan = vhat.eval(&rep_states, &rep_z);
    if let Some(bad) = scan.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("V̂ evaluated to {bad} during the threshold scan")));
    }

    let mut out = Vec::with_capacity(states.len());
    // (output slot, bracket lo, bracket hi) for states that need bisection
    let mut pending: Vec<(usize, f64, f64)> = Vec::new();
    for (i, row) in scan.chunks(m).enumerate() {
        let sign_changes = row.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();
        let (z, status) = if row[0] < 0.0 {
            (interval.z_lo, ThresholdStatus::Infeasible)
        } else if row[m - 1] >= 0.0 {
            (interval.z_hi, ThresholdStatus::Saturated)
        } else {
            let j = (0..m - 1)
                .rev()
                .find(|&j| row[j] >= 0.0 && row[j + 1] < 0.0)
                .expect("row starts non-negative and ends negative");
            pending.push((i, grid[j], grid[j + 1]));
            (f64::NAN, ThresholdStatus::Feasible)
        };
        out.push(ZStar { z, status, sign_changes });
    }

    if !pending.is_empty() {
        let bis_states: Vec<State> = pending.iter().map(|&(i, _, _)| states[i]).collect();
        let mut lo: Vec<f64> = pending.iter().map(|p| p.1).collect();
        let mut hi: Vec<f64> = pending.iter().map(|p| p.2).collect();
        for _ in 0..interval.iterations {
            let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
            let v = vhat.eval(&bis_states, &mid);
            for k in 0..mid.len() {
                if !v[k].is_finite() {
                    return Err(Error::NonFinite(format!("V̂ evaluated to {} during bisection", v[k])));
                }
                if v[k] >= 0.0 {
                    lo[k] = mid[k];
                } else {
                    hi[k] = mid[k];
                }
            }
        }
        for (k, &(i, _, _)) in pending.iter().enumerate() {
            out[i].z = (0.5 * (lo[k] + hi[k])).clamp(interval.z_lo, interval.z_hi);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn origin() -> State {
        State::new(0.0, 0.0)
    }

    #[test]
    fn linear_root() {
        let iv = SearchInterval::new(0.0, 2.0, 32).unwrap();
        let r = z_star(&FnValue(|_: &State, z: f64| 1.0 - z), &origin(), &iv).unwrap();
        assert_eq!(r.status, ThresholdStatus::Feasible);
        assert!((r.z - 1.0).abs() <= 2.0 / 2f64.powi(32));
        assert_eq!(r.sign_changes, 1);
    }

    #[test]
    fn infeasible_and_saturated() {
        let iv = SearchInterval::new(-1.0, 1.0, 32).unwrap();
        let r = z_star(&FnValue(|_: &State, _z: f64| -1.0), &origin(), &iv).unwrap();
        assert_eq!((r.z, r.status), (-1.0, ThresholdStatus::Infeasible));
        let r = z_star(&FnValue(|_: &State, _z: f64| 0.5), &origin(), &iv).unwrap();
        assert_eq!((r.z, r.status), (1.0, ThresholdStatus::Saturated));
    }

    #[test]
    fn cubic_root() {
        // 8 - z^3 vanishes at the cube root of 8
        let iv = SearchInterval::new(0.0, 3.0, 32).unwrap();
        let r = z_star(&FnValue(|_: &State, z: f64| 8.0 - z * z * z), &origin(), &iv).unwrap();
        assert!((r.z - 2.0).abs() <= 3.0 / 2f64.powi(32));
    }

    #[test]
    fn non_monotone_uses_largest_crossing() {
        // positive on [0, 1) and [2, 3), negative elsewhere
        let f = |_: &State, z: f64| if z < 1.0 || (2.0..3.0).contains(&z) { 1.0 } else { -1.0 };
        let iv = SearchInterval::new(0.0, 4.0, 40).unwrap();
        let r = z_star(&FnValue(f), &origin(), &iv).unwrap();
        assert!((r.z - 3.0).abs() < 1e-9);
        assert_eq!(r.sign_changes, 3);
        assert!(!r.is_monotone());
    }

    #[test]
    fn batch_edge_cases() {
        let iv = SearchInterval::new(0.0, 2.0, 32).unwrap();
        let f = FnValue(|s: &State, z: f64| 1.0 + s.x1 - z);
        assert!(z_star_batch(&f, &[], &iv).unwrap().is_empty());
        let same = z_star_batch(&f, &[State::new(0.3, 0.0); 5], &iv).unwrap();
        assert!(same.windows(2).all(|w| w[0] == w[1]));
        let states: Vec<State> = (0..100).map(|i| State::new(-3.0 + 0.05 * i as f64, 0.0)).collect();
        for r in z_star_batch(&f, &states, &iv).unwrap() {
            assert!(r.z >= 0.0 && r.z <= 2.0);
        }
    }

    #[test]
    fn rejects_bad_interval_and_nan() {
        assert!(SearchInterval::new(1.0, 1.0, 32).is_err());
        assert!(SearchInterval::new(0.0, 1.0, 0).is_err());
        let iv = SearchInterval::new(0.0, 1.0, 8).unwrap();
        assert!(z_star(&FnValue(|_: &State, _z: f64| f64::NAN), &origin(), &iv).is_err());
        let resolved = SearchInterval::resolve(&ThresholdConfig::default(), -4.0, 0.0).unwrap();
        assert_eq!((resolved.z_lo, resolved.z_hi), (-4.0, 0.0));
    }

    proptest! {
        #[test]
        fn brackets_the_root_of_monotone_profiles(
            root in -0.9..0.9f64,
            slope in 0.1..10.0f64,
            iters in 5usize..40,
        ) {
            let iv = SearchInterval::new(-1.0, 1.0, iters).unwrap();
            let f = FnValue(move |_: &State, z: f64| slope * (root - z));
            let r = z_star(&f, &origin(), &iv).unwrap();
            let eps = 2.0 / 2f64.powi(iters as i32);
            prop_assert!(slope * (root - (r.z - eps)) >= 0.0);
            prop_assert!(slope * (root - (r.z + eps)) < 0.0);
        }

        #[test]
        fn extra_iterations_do_not_move_converged_output(root in -0.9..0.9f64) {
            let f = FnValue(move |_: &State, z: f64| root - z);
            let a = z_star(&f, &origin(), &SearchInterval::new(-1.0, 1.0, 45).unwrap()).unwrap();
            let b = z_star(&f, &origin(), &SearchInterval::new(-1.0, 1.0, 60).unwrap()).unwrap();
            prop_assert!((a.z - b.z).abs() <= 1e-9 * 2.0);
        }
    }
}
