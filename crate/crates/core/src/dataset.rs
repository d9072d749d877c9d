//! Offline dataset generation, persistence and minibatch sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::{self, Action, EnvConfig, State};
use crate::error::{Error, Result};
use crate::format::{decode_f64s, encode_f64s, read_payload, sha256_hex, Header};

const MAGIC: &str = "epiflow-dataset";
const VERSION: &str = "v1";
const COLUMNS: [&str; 9] = ["x1", "x2", "a1", "a2", "r", "ell", "x1_next", "x2_next", "done"];

/// Default ceiling on generated transitions (about 1.4 GB of rows).
pub const DEFAULT_MAX_TRANSITIONS: usize = 20_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub x: State,
    pub a: Action,
    pub r: f64,
    pub ell: f64,
    pub x_next: State,
    pub done: bool,
}

impl Transition {
    fn row(&self) -> [f64; 9] {
        [
            self.x.x1,
            self.x.x2,
            self.a.a1,
            self.a.a2,
            self.r,
            self.ell,
            self.x_next.x1,
            self.x_next.x2,
            if self.done { 1.0 } else { 0.0 },
        ]
    }

    fn from_row(row: &[f64]) -> Self {
        Self {
            x: State::new(row[0], row[1]),
            a: Action::new(row[2], row[3]),
            r: row[4],
            ell: row[5],
            x_next: State::new(row[6], row[7]),
            done: row[8] != 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub env: EnvConfig,
    pub n_traj: usize,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
    pub z_min: f64,
    pub z_max: f64,
}

/// Uniform sample from the unit disc (uniform angle, square-root radius).
pub fn sample_disc_action<R: Rng + ?Sized>(rng: &mut R) -> Action {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius = rng.gen::<f64>().sqrt();
    Action::new(radius * theta.cos(), radius * theta.sin())
}

pub fn sample_box_state<R: Rng + ?Sized>(rng: &mut R, cfg: &EnvConfig) -> State {
    State::new(
        rng.gen_range(cfg.x1_bounds[0]..=cfg.x1_bounds[1]),
        rng.gen_range(cfg.x2_bounds[0]..=cfg.x2_bounds[1]),
    )
}

/// Independent stream for one trajectory (or episode) of a seeded run.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn simulate(cfg: &EnvConfig, horizon: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Transition>> {
    let mut x = sample_box_state(rng, cfg);
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let a = sample_disc_action(rng);
        let step = env::step(&x, &a, t, cfg)?;
        out.push(Transition {
            x,
            a,
            r: step.reward,
            ell: step.ell,
            x_next: step.next,
            done: t + 1 == horizon,
        });
        x = step.next;
    }
    Ok(out)
}

/// Extremes of the discounted return over every suffix of one trajectory.
fn suffix_return_range(traj: &[Transition], gamma: f64) -> (f64, f64) {
    let mut g = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for tr in traj.iter().rev() {
        g = tr.r + gamma * g;
        lo = lo.min(g);
        hi = hi.max(g);
    }
    (lo, hi)
}

impl OfflineDataset {
    pub fn generate(cfg: &EnvConfig, n_traj: usize, horizon: usize, seed: u64) -> Result<Self> {
        Self::generate_with_cap(cfg, n_traj, horizon, seed, DEFAULT_MAX_TRANSITIONS)
    }

    pub fn generate_with_cap(
        cfg: &EnvConfig,
        n_traj: usize,
        horizon: usize,
        seed: u64,
        cap: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_traj == 0 || horizon == 0 {
            return Err(Error::InvalidConfig(
                "trajectory count and horizon must be at least 1".into(),
            ));
        }
        let requested = n_traj.saturating_mul(horizon);
        if requested > cap {
            return Err(Error::MemoryCap { requested, cap });
        }
        let trajectories: Vec<Vec<Transition>> = (0..n_traj)
            .into_par_iter()
            .map(|i| simulate(cfg, horizon, &mut substream(seed, i as u64)))
            .collect::<Result<_>>()?;
        let (mut z_min, mut z_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for traj in &trajectories {
            let (lo, hi) = suffix_return_range(traj, cfg.gamma);
            z_min = z_min.min(lo);
            z_max = z_max.max(hi);
        }
        Ok(Self {
            transitions: trajectories.into_iter().flatten().collect(),
            meta: DatasetMeta {
                env: cfg.clone(),
                n_traj,
                horizon,
                seed,
            },
            z_min,
            z_max,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.meta.env.gamma
    }

    /// Largest deviation of stored `r`, `ell` and `x_next` from the values
    /// recomputed with the generating config.
    pub fn audit(&self) -> AuditReport {
        let cfg = &self.meta.env;
        let mut rep = AuditReport::default();
        for tr in &self.transitions {
            rep.max_reward_error = rep.max_reward_error.max((tr.r - env::reward(&tr.x, cfg)).abs());
            rep.max_safety_error = rep.max_safety_error.max((tr.ell - env::safety(&tr.x, cfg)).abs());
            let next = cfg.clamp(env::step_unchecked(&tr.x, &tr.a, cfg.dt));
            rep.max_next_state_error = rep.max_next_state_error.max(next.distance(&tr.x_next));
            rep.max_action_norm = rep.max_action_norm.max(tr.a.norm());
        }
        rep
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Batch {
        let n = self.transitions.len();
        let gamma = self.gamma();
        let mut b = Batch::zeros(batch);
        for i in 0..batch {
            let idx = rng.gen_range(0..n);
            let tr = &self.transitions[idx];
            let z = if self.z_max > self.z_min {
                rng.gen_range(self.z_min..=self.z_max)
            } else {
                self.z_min
            };
            b.set(i, idx, tr, z, env::next_budget(z, tr.r, gamma));
        }
        b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let rows: Vec<f64> = self.transitions.iter().flat_map(|t| t.row()).collect();
        let payload = encode_f64s(&rows);
        let env = &self.meta.env;
        let mut h = Header::default();
        h.push("fields", COLUMNS.join(" "));
        h.push("count", self.transitions.len());
        h.push("n_traj", self.meta.n_traj);
        h.push("horizon", self.meta.horizon);
        h.push("seed", self.meta.seed);
        h.push("env.dt", format!("{:?}", env.dt));
        h.push("env.gamma", format!("{:?}", env.gamma));
        h.push("env.goal", format!("{:?} {:?}", env.goal[0], env.goal[1]));
        h.push("env.reward_scale", format!("{:?}", env.reward_scale));
        h.push(
            "env.obstacles",
            env.obstacles
                .iter()
                .map(|c| format!("{:?} {:?}", c[0], c[1]))
                .collect::<Vec<_>>()
                .join(" "),
        );
        h.push("env.obstacle_radius", format!("{:?}", env.obstacle_radius));
        h.push("env.episode_length", env.episode_length);
        h.push("env.x1_bounds", format!("{:?} {:?}", env.x1_bounds[0], env.x1_bounds[1]));
        h.push("env.x2_bounds", format!("{:?} {:?}", env.x2_bounds[0], env.x2_bounds[1]));
        h.push("z_min", format!("{:?}", self.z_min));
        h.push("z_max", format!("{:?}", self.z_max));
        h.push("checksum", sha256_hex(&payload));
        h.write(w, MAGIC, VERSION)?;
        w.write_all(&payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from<R: std::io::BufRead>(r: &mut R) -> Result<Self> {
        let h = Header::read(r, MAGIC, VERSION)?;
        if h.get("fields")? != COLUMNS.join(" ") {
            return Err(Error::MalformedHeader("unexpected field list".into()));
        }
        let count: usize = h.parse("count")?;
        let expected = h.get("checksum")?.to_string();
        let payload = read_payload(r, count * COLUMNS.len() * 8)?;
        let actual = sha256_hex(&payload);
        if actual != expected {
            return Err(Error::ChecksumMismatch { expected, actual });
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let pair = |key: &str| -> Result<[f64; 2]> {
            let v: Vec<f64> = h.parse_list(key)?;
            v.try_into()
                .map_err(|_| Error::MalformedHeader(format!("`{key}` needs two values")))
        };
        let flat_obstacles: Vec<f64> = h.parse_list("env.obstacles")?;
        if flat_obstacles.is_empty() || flat_obstacles.len() % 2 != 0 {
            return Err(Error::MalformedHeader("`env.obstacles` needs coordinate pairs".into()));
        }
        let env = EnvConfig {
            dt: h.parse("env.dt")?,
            gamma: h.parse("env.gamma")?,
            goal: pair("env.goal")?,
            reward_scale: h.parse("env.reward_scale")?,
            obstacles: flat_obstacles.chunks(2).map(|c| [c[0], c[1]]).collect(),
            obstacle_radius: h.parse("env.obstacle_radius")?,
            episode_length: h.parse("env.episode_length")?,
            x1_bounds: pair("env.x1_bounds")?,
            x2_bounds: pair("env.x2_bounds")?,
        };
        let z_min: f64 = h.parse("z_min")?;
        let z_max: f64 = h.parse("z_max")?;
        if !(z_min <= z_max) {
            return Err(Error::MalformedHeader(format!("z_min {z_min} exceeds z_max {z_max}")));
        }
        let rows = decode_f64s(&payload);
        Ok(Self {
            transitions: rows.chunks_exact(COLUMNS.len()).map(Transition::from_row).collect(),
            meta: DatasetMeta {
                env,
                n_traj: h.parse("n_traj")?,
                horizon: h.parse("horizon")?,
                seed: h.parse("seed")?,
            },
            z_min,
            z_max,
        })
    }

    /// Human-readable export with the same columns as the binary rows.
    pub fn export_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", COLUMNS.join(","))?;
        for t in &self.transitions {
            let row = t.row();
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct AuditReport {
    pub max_reward_error: f64,
    pub max_safety_error: f64,
    pub max_next_state_error: f64,
    pub max_action_norm: f64,
}

/// Structure-of-arrays minibatch with sampled budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub ell: Array1<f64>,
    pub x_next: Array2<f64>,
    pub done: Vec<bool>,
    pub z: Array1<f64>,
    pub z_next: Array1<f64>,
}

impl Batch {
    pub fn zeros(n: usize) -> Self {
        Self {
            indices: vec![0; n],
            x: Array2::zeros((n, 2)),
            a: Array2::zeros((n, 2)),
            r: Array1::zeros(n),
            ell: Array1::zeros(n),
            x_next: Array2::zeros((n, 2)),
            done: vec![false; n],
            z: Array1::zeros(n),
            z_next: Array1::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn set(&mut self, i: usize, index: usize, tr: &Transition, z: f64, z_next: f64) {
        self.indices[i] = index;
        self.x[[i, 0]] = tr.x.x1;
        self.x[[i, 1]] = tr.x.x2;
        self.a[[i, 0]] = tr.a.a1;
        self.a[[i, 1]] = tr.a.a2;
        self.r[i] = tr.r;
        self.ell[i] = tr.ell;
        self.x_next[[i, 0]] = tr.x_next.x1;
        self.x_next[[i, 1]] = tr.x_next.x2;
        self.done[i] = tr.done;
        self.z[i] = z;
        self.z_next[i] = z_next;
    }

    /// Builds a batch from explicit transitions and budgets.
    pub fn from_items(items: &[(Transition, f64)], gamma: f64) -> Self {
        let mut b = Self::zeros(items.len());
        for (i, (tr, z)) in items.iter().enumerate() {
            b.set(i, i, tr, *z, env::next_budget(*z, tr.r, gamma));
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> OfflineDataset {
        OfflineDataset::generate(&EnvConfig::default(), 6, 25, 9).unwrap()
    }

    #[test]
    fn generates_expected_count() {
        let ds = small();
        assert_eq!(ds.len(), 150);
        assert!(ds.transitions[24].done && !ds.transitions[23].done);
        let one = OfflineDataset::generate(&EnvConfig::default(), 1, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        let r0 = env::reward(&one.transitions[0].x, &one.meta.env);
        assert_eq!(one.z_min, r0);
        assert_eq!(one.z_max, r0);
    }

    #[test]
    fn full_scale_count_is_checked_against_cap() {
        // 2500 x 400 is exactly one million rows, under the default cap
        assert!(2500 * 400 <= DEFAULT_MAX_TRANSITIONS);
        assert_eq!(2500 * 400, 1_000_000);
        let err = OfflineDataset::generate_with_cap(&EnvConfig::default(), 2500, 400, 0, 999_999)
            .unwrap_err();
        assert!(matches!(err, Error::MemoryCap { requested: 1_000_000, .. }));
        assert!(OfflineDataset::generate(&EnvConfig::default(), 0, 5, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        small().write_to(&mut a).unwrap();
        small().write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn audit_is_clean() {
        let rep = small().audit();
        assert!(rep.max_reward_error <= 1e-12);
        assert!(rep.max_safety_error <= 1e-12);
        assert!(rep.max_next_state_error <= 1e-12);
        assert!(rep.max_action_norm <= 1.0);
    }

    #[test]
    fn suffix_range_bounds_every_suffix_return() {
        let ds = small();
        let gamma = ds.gamma();
        for traj in ds.transitions.chunks(ds.meta.horizon) {
            for start in 0..traj.len() {
                let g: f64 = traj[start..]
                    .iter()
                    .enumerate()
                    .map(|(k, t)| gamma.powi(k as i32) * t.r)
                    .sum();
                assert!(g >= ds.z_min - 1e-12 && g <= ds.z_max + 1e-12);
            }
        }
    }

    #[test]
    fn batch_budgets_in_range() {
        let ds = OfflineDataset::generate(&EnvConfig::default(), 2, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = ds.sample_batch(4, &mut rng);
        assert_eq!(b.len(), 4);
        for i in 0..4 {
            assert!(b.z[i] >= ds.z_min && b.z[i] <= ds.z_max);
            let expect = (b.z[i] - b.r[i]) / ds.gamma();
            assert!((b.z_next[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn budget_update_at_lower_end_with_zero_reward() {
        let tr = Transition {
            x: State::new(0.5, 0.0),
            a: Action::default(),
            r: 0.0,
            ell: 1.0,
            x_next: State::new(0.51, 0.0),
            done: false,
        };
        let b = Batch::from_items(&[(tr, -3.0)], 0.99);
        assert_eq!(b.z_next[0], -3.0 / 0.99);
    }

    #[test]
    fn sampled_budget_mean_is_midpoint() {
        let ds = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let b = ds.sample_batch(n, &mut rng);
        let mean = b.z.mean().unwrap();
        let width = ds.z_max - ds.z_min;
        let se = width / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 0.5 * (ds.z_min + ds.z_max)).abs() < 3.0 * se);
    }

    #[test]
    fn disc_actions_are_uniform_over_area() {
        // E|a|^2 = 1/2 and Var|a|^2 = 1/12 for the uniform disc
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let a = sample_disc_action(&mut rng);
                assert!(a.norm() <= 1.0);
                a.a1 * a.a1 + a.a2 * a.a2
            })
            .sum::<f64>()
            / n as f64;
        let sigma = (1.0f64 / 12.0).sqrt() / (n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        ds.save(&path).unwrap();
        assert_eq!(OfflineDataset::load(&path).unwrap(), ds);

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 100];
        assert!(matches!(
            OfflineDataset::read_from(&mut &truncated[..]),
            Err(Error::ChecksumMismatch { .. })
        ));

        let mut empty = ds.clone();
        empty.transitions.clear();
        let mut buf = Vec::new();
        empty.write_to(&mut buf).unwrap();
        let err = OfflineDataset::read_from(&mut buf.as_slice()).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");

        let text = String::from_utf8_lossy(&bytes[..40]).replace("v1", "v9");
        let mut bumped = text.into_bytes();
        bumped.extend_from_slice(&bytes[40..]);
        assert!(matches!(
            OfflineDataset::read_from(&mut bumped.as_slice()),
            Err(Error::VersionMismatch { .. })
        ));
        assert!(matches!(
            OfflineDataset::read_from(&mut &b"garbage\n"[..]),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn csv_export_has_one_row_per_transition() {
        let ds = small();
        let mut out = Vec::new();
        ds.export_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), ds.len() + 1);
        assert!(text.starts_with("x1,x2,a1,a2,r,ell,x1_next,x2_next,done"));
    }
}
