//! Epigraph value learning.
//!
//! Six learned functions are trained from offline transitions:
//!
//! * `Q̂(x, z, a)` and `V̂(x, z)`: the auxiliary epigraph value over the
//!   budget-augmented state. `Q̂` regresses onto `min(ℓ(x), γ V̂(x', z'))`
//!   and `V̂` is an upper expectile of `Q̂` over dataset actions.
//! * `Q_r / V_r`: best dataset-supported discounted return.
//! * `Q_s / V_s`: best dataset-supported discounted worst-case safety margin.
//!
//! The decomposition penalty keeps `V̂(x, z) <= min(V_r(x) - z, V_s(x))`,
//! which is what gives `V̂` its dependence on `z`.
//!
//! All Q functions carry two heads; every target uses the elementwise minimum
//! of the two heads of the slowly moving target copy.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, OfflineDataset};
use crate::error::{Error, Result};
use crate::format::Header;
use crate::nn::{expectile_loss_unchecked, read_mlp, write_mlp, AdamConfig, Mlp, OptimizerState, TargetCopy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueTrainConfig {
    pub tau: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    pub ema_rate: f64,
    pub log_every: usize,
}

impl Default for ValueTrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            lambda: 0.25,
            gamma: 0.99,
            batch_size: 256,
            steps: 100_000,
            seed: 0,
            hidden: vec![256, 256],
            adam: AdamConfig::default(),
            ema_rate: 0.005,
            log_every: 1000,
        }
    }
}

impl ValueTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer sizes must be positive".into()));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!("ema_rate must lie in (0, 1], got {}", self.ema_rate)));
        }
        Ok(())
    }
}

/// Affine map of the budget onto roughly `[-1, 1]` before it enters a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetScale {
    pub center: f64,
    pub half_width: f64,
}

impl BudgetScale {
    pub fn from_range(z_min: f64, z_max: f64) -> Self {
        Self {
            center: 0.5 * (z_min + z_max),
            half_width: (0.5 * (z_max - z_min)).max(1e-6),
        }
    }

    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        (z - self.center) / self.half_width
    }
}

/// Trainable networks, used to route gradients and optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetId {
    QHat(usize),
    VHat,
    QR(usize),
    VR,
    QS(usize),
    VS,
}

impl NetId {
    pub const ALL: [NetId; 9] = [
        NetId::QHat(0),
        NetId::QHat(1),
        NetId::VHat,
        NetId::QR(0),
        NetId::QR(1),
        NetId::VR,
        NetId::QS(0),
        NetId::QS(1),
        NetId::VS,
    ];

    fn index(self) -> usize {
        match self {
            NetId::QHat(i) => i,
            NetId::VHat => 2,
            NetId::QR(i) => 3 + i,
            NetId::VR => 5,
            NetId::QS(i) => 6 + i,
            NetId::VS => 8,
        }
    }

    pub fn name(self) -> String {
        match self {
            NetId::QHat(i) => format!("q_hat.{i}"),
            NetId::VHat => "v_hat".into(),
            NetId::QR(i) => format!("q_r.{i}"),
            NetId::VR => "v_r".into(),
            NetId::QS(i) => format!("q_s.{i}"),
            NetId::VS => "v_s".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueBundle {
    pub q_hat: [Mlp; 2],
    pub q_hat_target: [TargetCopy; 2],
    pub v_hat: Mlp,
    pub q_r: [Mlp; 2],
    pub q_r_target: [TargetCopy; 2],
    pub v_r: Mlp,
    pub q_s: [Mlp; 2],
    pub q_s_target: [TargetCopy; 2],
    pub v_s: Mlp,
    pub gamma: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub scale: BudgetScale,
}

/// Loss value plus the parameter gradient of every network it trains.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<(NetId, Vec<f64>)>,
}

impl LossOutput {
    pub fn grad(&self, id: NetId) -> Option<&[f64]> {
        self.grads.iter().find(|(n, _)| *n == id).map(|(_, g)| g.as_slice())
    }
}

fn sizes(input: usize, hidden: &[usize]) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(1);
    s
}

fn col(out: Array2<f64>) -> Array1<f64> {
    out.index_axis_move(Axis(1), 0)
}

fn as_col(v: &Array1<f64>) -> ArrayView2<'_, f64> {
    v.view().insert_axis(Axis(1))
}

fn elementwise_min(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    Zip::from(a).and(b).map_collect(|&p, &q| p.min(q))
}

impl ValueBundle {
    pub fn new(hidden: &[usize], gamma: f64, z_min: f64, z_max: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pair = |input: usize| [Mlp::new(&sizes(input, hidden), &mut rng), Mlp::new(&sizes(input, hidden), &mut rng)];
        let q_hat = pair(5);
        let q_r = pair(4);
        let q_s = pair(4);
        let v_hat = Mlp::new(&sizes(3, hidden), &mut rng);
        let v_r = Mlp::new(&sizes(2, hidden), &mut rng);
        let v_s = Mlp::new(&sizes(2, hidden), &mut rng);
        let targets = |q: &[Mlp; 2]| [TargetCopy::of(&q[0]), TargetCopy::of(&q[1])];
        Self {
            q_hat_target: targets(&q_hat),
            q_r_target: targets(&q_r),
            q_s_target: targets(&q_s),
            q_hat,
            v_hat,
            q_r,
            v_r,
            q_s,
            v_s,
            gamma,
            z_min,
            z_max,
            scale: BudgetScale::from_range(z_min, z_max),
        }
    }

    pub fn for_dataset(ds: &OfflineDataset, cfg: &ValueTrainConfig) -> Self {
        Self::new(&cfg.hidden, cfg.gamma, ds.z_min, ds.z_max, cfg.seed)
    }

    pub fn net(&self, id: NetId) -> &Mlp {
        match id {
            NetId::QHat(i) => &self.q_hat[i],
            NetId::VHat => &self.v_hat,
            NetId::QR(i) => &self.q_r[i],
            NetId::VR => &self.v_r,
            NetId::QS(i) => &self.q_s[i],
            NetId::VS => &self.v_s,
        }
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut Mlp {
        match id {
            NetId::QHat(i) => &mut self.q_hat[i],
            NetId::VHat => &mut self.v_hat,
            NetId::QR(i) => &mut self.q_r[i],
            NetId::VR => &mut self.v_r,
            NetId::QS(i) => &mut self.q_s[i],
            NetId::VS => &mut self.v_s,
        }
    }

    /// Rows `[x1, x2, z~]`.
    pub fn xz_input(&self, x: ArrayView2<f64>, z: ArrayView1<f64>) -> Array2<f64> {
        let mut m = Array2::zeros((x.nrows(), 3));
        for i in 0..x.nrows() {
            m[[i, 0]] = x[[i, 0]];
            m[[i, 1]] = x[[i, 1]];
            m[[i, 2]] = self.scale.apply(z[i]);
        }
        m
    }

    /// Rows `[x1, x2, z~, a1, a2]`.
    pub fn xza_input(&self, x: ArrayView2<f64>, z: ArrayView1<f64>, a: ArrayView2<f64>) -> Array2<f64> {
        let mut m = Array2::zeros((x.nrows(), 5));
        for i in 0..x.nrows() {
            m[[i, 0]] = x[[i, 0]];
            m[[i, 1]] = x[[i, 1]];
            m[[i, 2]] = self.scale.apply(z[i]);
            m[[i, 3]] = a[[i, 0]];
            m[[i, 4]] = a[[i, 1]];
        }
        m
    }

    /// Rows `[x1, x2, a1, a2]`.
    pub fn xa_input(x: ArrayView2<f64>, a: ArrayView2<f64>) -> Array2<f64> {
        ndarray::concatenate![Axis(1), x, a]
    }

    fn eval(net: &Mlp, input: &Array2<f64>) -> Array1<f64> {
        col(net.forward(input.view()).expect("bundle inputs are built with matching widths"))
    }

    pub fn v_hat_at(&self, x: ArrayView2<f64>, z: ArrayView1<f64>) -> Array1<f64> {
        Self::eval(&self.v_hat, &self.xz_input(x, z))
    }

    /// Clipped double-Q value of the online `Q̂` heads.
    pub fn q_hat_at(&self, x: ArrayView2<f64>, z: ArrayView1<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        let inp = self.xza_input(x, z, a);
        elementwise_min(&Self::eval(&self.q_hat[0], &inp), &Self::eval(&self.q_hat[1], &inp))
    }

    pub fn v_r_at(&self, x: ArrayView2<f64>) -> Array1<f64> {
        Self::eval(&self.v_r, &x.to_owned())
    }

    pub fn v_s_at(&self, x: ArrayView2<f64>) -> Array1<f64> {
        Self::eval(&self.v_s, &x.to_owned())
    }

    /// `V̂(x, z)` for a single point.
    pub fn v_hat_point(&self, x: [f64; 2], z: f64) -> f64 {
        self.v_hat
            .forward_one(&[x[0], x[1], self.scale.apply(z)])
            .expect("width 3")[0]
    }

    fn target_min(targets: &[TargetCopy; 2], input: &Array2<f64>) -> Array1<f64> {
        elementwise_min(&Self::eval(&targets[0].net, input), &Self::eval(&targets[1].net, input))
    }

    /// Squared regression of both heads of a Q pair onto `y`, averaged over heads.
    fn q_pair_regression(
        heads: &[Mlp; 2],
        ids: [NetId; 2],
        input: &Array2<f64>,
        y: &Array1<f64>,
    ) -> Result<LossOutput> {
        let n = y.len() as f64;
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(2);
        for (head, id) in heads.iter().zip(ids) {
            let tape = head.forward_tape(input.view())?;
            let pred = tape.output().column(0).to_owned();
            let diff = &pred - y;
            value += 0.5 * diff.mapv(|d| d * d).sum() / n;
            let g_out = diff.mapv(|d| d / n);
            let (g, _) = head.backward(&tape, as_col(&g_out))?;
            grads.push((id, g));
        }
        Ok(LossOutput { value, grads })
    }

    /// Expectile distillation of a target value into a state-value network.
    fn expectile_distill(net: &Mlp, id: NetId, input: &Array2<f64>, target: &Array1<f64>, tau: f64) -> Result<LossOutput> {
        let n = target.len() as f64;
        let tape = net.forward_tape(input.view())?;
        let pred = tape.output().column(0).to_owned();
        let mut value = 0.0;
        let mut g_out = Array1::zeros(target.len());
        for i in 0..target.len() {
            let (l, d) = expectile_loss_unchecked(target[i] - pred[i], tau);
            value += l / n;
            g_out[i] = -d / n;
        }
        let (g, _) = net.backward(&tape, as_col(&g_out))?;
        Ok(LossOutput { value, grads: vec![(id, g)] })
    }

    /// `min(ℓ(x), γ V̂(x', z'))` with the online `V̂` and no gradient.
    pub fn q_hat_targets(&self, batch: &Batch) -> Array1<f64> {
        let v_next = self.v_hat_at(batch.x_next.view(), batch.z_next.view());
        Zip::from(&batch.ell)
            .and(&v_next)
            .map_collect(|&l, &v| q_hat_target(l, v, self.gamma))
    }

    pub fn loss_q_hat(&self, batch: &Batch) -> Result<LossOutput> {
        let y = self.q_hat_targets(batch);
        let input = self.xza_input(batch.x.view(), batch.z.view(), batch.a.view());
        finite(Self::q_pair_regression(&self.q_hat, [NetId::QHat(0), NetId::QHat(1)], &input, &y)?, "q_hat")
    }

    pub fn loss_v_hat(&self, batch: &Batch, tau: f64) -> Result<LossOutput> {
        let q_input = self.xza_input(batch.x.view(), batch.z.view(), batch.a.view());
        let q_min = Self::target_min(&self.q_hat_target, &q_input);
        let input = self.xz_input(batch.x.view(), batch.z.view());
        finite(Self::expectile_distill(&self.v_hat, NetId::VHat, &input, &q_min, tau)?, "v_hat")
    }

    /// `r(x) + γ V_r(x')`, gradient-blocked.
    pub fn reward_targets(&self, batch: &Batch) -> Array1<f64> {
        &batch.r + &(self.v_r_at(batch.x_next.view()) * self.gamma)
    }

    /// `min(ℓ(x), γ V_s(x'))`, gradient-blocked.
    pub fn safety_targets(&self, batch: &Batch) -> Array1<f64> {
        let v_next = self.v_s_at(batch.x_next.view());
        Zip::from(&batch.ell)
            .and(&v_next)
            .map_collect(|&l, &v| l.min(self.gamma * v))
    }

    pub fn loss_reward_envelope(&self, batch: &Batch, tau: f64) -> Result<LossOutput> {
        let xa = Self::xa_input(batch.x.view(), batch.a.view());
        let y = self.reward_targets(batch);
        let mut out = Self::q_pair_regression(&self.q_r, [NetId::QR(0), NetId::QR(1)], &xa, &y)?;
        let q_min = Self::target_min(&self.q_r_target, &xa);
        let v = Self::expectile_distill(&self.v_r, NetId::VR, &batch.x.to_owned(), &q_min, tau)?;
        out.value += v.value;
        out.grads.extend(v.grads);
        finite(out, "reward envelope")
    }

    pub fn loss_safety_envelope(&self, batch: &Batch, tau: f64) -> Result<LossOutput> {
        let xa = Self::xa_input(batch.x.view(), batch.a.view());
        let y = self.safety_targets(batch);
        let mut out = Self::q_pair_regression(&self.q_s, [NetId::QS(0), NetId::QS(1)], &xa, &y)?;
        let q_min = Self::target_min(&self.q_s_target, &xa);
        let v = Self::expectile_distill(&self.v_s, NetId::VS, &batch.x.to_owned(), &q_min, tau)?;
        out.value += v.value;
        out.grads.extend(v.grads);
        finite(out, "safety envelope")
    }

    /// Upper bound `min(V_r(x) - z, V_s(x))` on `V̂(x, z)`.
    pub fn decomposition_bound(&self, x: ArrayView2<f64>, z: ArrayView1<f64>) -> Array1<f64> {
        let vr = self.v_r_at(x);
        let vs = self.v_s_at(x);
        Zip::from(&vr)
            .and(&vs)
            .and(&z)
            .map_collect(|&r, &s, &z| (r - z).min(s))
    }

    pub fn loss_regularizer(&self, batch: &Batch) -> Result<LossOutput> {
        let bound = self.decomposition_bound(batch.x.view(), batch.z.view());
        let input = self.xz_input(batch.x.view(), batch.z.view());
        let n = bound.len() as f64;
        let tape = self.v_hat.forward_tape(input.view())?;
        let pred = tape.output().column(0).to_owned();
        let mut value = 0.0;
        let mut g_out = Array1::zeros(bound.len());
        for i in 0..bound.len() {
            let excess = pred[i] - bound[i];
            if excess > 0.0 {
                value += excess / n;
                g_out[i] = 1.0 / n;
            }
        }
        let (g, _) = self.v_hat.backward(&tape, as_col(&g_out))?;
        finite(LossOutput { value, grads: vec![(NetId::VHat, g)] }, "regularizer")
    }

    /// `L_V̂ + λ L_reg`, the objective of the `V̂` update.
    pub fn loss_v_hat_total(&self, batch: &Batch, tau: f64, lambda: f64) -> Result<(LossOutput, f64, f64)> {
        let v = self.loss_v_hat(batch, tau)?;
        if lambda == 0.0 {
            let lv = v.value;
            return Ok((v, lv, 0.0));
        }
        let reg = self.loss_regularizer(batch)?;
        let mut g = v.grads[0].1.clone();
        for (gi, ri) in g.iter_mut().zip(&reg.grads[0].1) {
            *gi += lambda * ri;
        }
        let total = LossOutput {
            value: v.value + lambda * reg.value,
            grads: vec![(NetId::VHat, g)],
        };
        Ok((total, v.value, reg.value))
    }

    pub fn update_targets(&mut self, rho: f64) -> Result<()> {
        for i in 0..2 {
            self.q_hat_target[i].update(&self.q_hat[i], rho)?;
            self.q_r_target[i].update(&self.q_r[i], rho)?;
            self.q_s_target[i].update(&self.q_s[i], rho)?;
        }
        Ok(())
    }

    fn all_nets(&self) -> Vec<(String, &Mlp)> {
        let mut v: Vec<(String, &Mlp)> = NetId::ALL.iter().map(|&id| (id.name(), self.net(id))).collect();
        for i in 0..2 {
            v.push((format!("q_hat_target.{i}"), &self.q_hat_target[i].net));
            v.push((format!("q_r_target.{i}"), &self.q_r_target[i].net));
            v.push((format!("q_s_target.{i}"), &self.q_s_target[i].net));
        }
        v
    }

    pub fn save(&self, path: &Path, cfg: &ValueTrainConfig, steps_done: u64) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w, cfg, steps_done).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W, cfg: &ValueTrainConfig, steps_done: u64) -> std::io::Result<()> {
        let nets = self.all_nets();
        let mut h = Header::default();
        h.push("networks", nets.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(" "));
        h.push("gamma", format!("{:?}", self.gamma));
        h.push("z_min", format!("{:?}", self.z_min));
        h.push("z_max", format!("{:?}", self.z_max));
        h.push("config.tau", format!("{:?}", cfg.tau));
        h.push("config.lambda", format!("{:?}", cfg.lambda));
        h.push("config.gamma", format!("{:?}", cfg.gamma));
        h.push("config.batch_size", cfg.batch_size);
        h.push("config.steps", cfg.steps);
        h.push("config.seed", cfg.seed);
        h.push("config.hidden", cfg.hidden.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "));
        h.push("config.lr", format!("{:?}", cfg.adam.lr));
        h.push("config.ema_rate", format!("{:?}", cfg.ema_rate));
        h.write(w, "epiflow-values", "v1")?;
        for (_, net) in nets {
            write_mlp(w, net, cfg.seed, steps_done)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let h = Header::read(r, "epiflow-values", "v1")?;
        let names: Vec<String> = h.parse_list("networks")?;
        let mut nets = Vec::with_capacity(names.len());
        for _ in &names {
            nets.push(read_mlp(r)?.net);
        }
        let take = |name: &str, input: usize| -> Result<Mlp> {
            let i = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::MalformedHeader(format!("missing network `{name}`")))?;
            let net = nets[i].clone();
            if net.input_dim() != input || net.output_dim() != 1 {
                return Err(Error::ArchitectureMismatch(format!(
                    "`{name}` has sizes {:?}, expected input {input} and one output",
                    net.sizes()
                )));
            }
            Ok(net)
        };
        let z_min: f64 = h.parse("z_min")?;
        let z_max: f64 = h.parse("z_max")?;
        Ok(Self {
            q_hat: [take("q_hat.0", 5)?, take("q_hat.1", 5)?],
            q_hat_target: [TargetCopy { net: take("q_hat_target.0", 5)? }, TargetCopy { net: take("q_hat_target.1", 5)? }],
            v_hat: take("v_hat", 3)?,
            q_r: [take("q_r.0", 4)?, take("q_r.1", 4)?],
            q_r_target: [TargetCopy { net: take("q_r_target.0", 4)? }, TargetCopy { net: take("q_r_target.1", 4)? }],
            v_r: take("v_r", 2)?,
            q_s: [take("q_s.0", 4)?, take("q_s.1", 4)?],
            q_s_target: [TargetCopy { net: take("q_s_target.0", 4)? }, TargetCopy { net: take("q_s_target.1", 4)? }],
            v_s: take("v_s", 2)?,
            gamma: h.parse("gamma")?,
            z_min,
            z_max,
            scale: BudgetScale::from_range(z_min, z_max),
        })
    }
}

fn finite(out: LossOutput, what: &str) -> Result<LossOutput> {
    if out.value.is_finite() {
        Ok(out)
    } else {
        Err(Error::NonFinite(format!("{what} loss is {}", out.value)))
    }
}

/// `min(ℓ(x), γ V̂(x', z'))`.
pub fn q_hat_target(ell_x: f64, v_hat_next: f64, gamma: f64) -> f64 {
    ell_x.min(gamma * v_hat_next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub q_hat: f64,
    pub v_hat: f64,
    pub regularizer: f64,
    pub reward_envelope: f64,
    pub safety_envelope: f64,
}

/// Adam state for every trainable network of a bundle.
#[derive(Debug, Clone)]
pub struct BundleOptimizer {
    states: Vec<OptimizerState>,
}

impl BundleOptimizer {
    pub fn new(bundle: &ValueBundle, adam: AdamConfig) -> Self {
        Self {
            states: NetId::ALL
                .iter()
                .map(|&id| OptimizerState::new(bundle.net(id).num_params(), adam))
                .collect(),
        }
    }

    pub fn apply(&mut self, bundle: &mut ValueBundle, out: &LossOutput) -> Result<()> {
        for (id, g) in &out.grads {
            self.states[id.index()].step(bundle.net_mut(*id).params_mut(), g, &id.name())?;
        }
        Ok(())
    }
}

/// One interleaved update: `Q̂`, reward envelope, safety envelope, then `V̂`
/// with the decomposition penalty, followed by the target-copy updates.
pub fn train_step(
    bundle: &mut ValueBundle,
    opt: &mut BundleOptimizer,
    batch: &Batch,
    cfg: &ValueTrainConfig,
    step: usize,
) -> Result<LossRecord> {
    let q = bundle.loss_q_hat(batch)?;
    opt.apply(bundle, &q)?;
    let r = bundle.loss_reward_envelope(batch, cfg.tau)?;
    opt.apply(bundle, &r)?;
    let s = bundle.loss_safety_envelope(batch, cfg.tau)?;
    opt.apply(bundle, &s)?;
    let (v, lv, lreg) = bundle.loss_v_hat_total(batch, cfg.tau, cfg.lambda)?;
    opt.apply(bundle, &v)?;
    bundle.update_targets(cfg.ema_rate)?;
    Ok(LossRecord {
        step,
        q_hat: q.value,
        v_hat: lv,
        regularizer: lreg,
        reward_envelope: r.value,
        safety_envelope: s.value,
    })
}

/// Trained bundle plus the periodic loss log.
#[derive(Debug, Clone)]
pub struct ValueTraining {
    pub bundle: ValueBundle,
    pub log: Vec<LossRecord>,
}

pub fn train(ds: &OfflineDataset, cfg: &ValueTrainConfig) -> Result<ValueTraining> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut bundle = ValueBundle::for_dataset(ds, cfg);
    let mut opt = BundleOptimizer::new(&bundle, cfg.adam);
    // separate stream from initialization
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let guard = 10.0 * ds.z_min.abs().max(ds.z_max.abs()).max(1e-3);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let batch = ds.sample_batch(cfg.batch_size, &mut rng);
        let rec = train_step(&mut bundle, &mut opt, &batch, cfg, step).map_err(|e| Error::Diverged {
            step,
            reason: e.to_string(),
        })?;
        let log_now = cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps);
        if log_now || step % 100 == 0 {
            let v = bundle.v_hat_at(batch.x.view(), batch.z.view());
            let worst = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if !(worst <= guard) {
                return Err(Error::Diverged {
                    step,
                    reason: format!("|V̂| reached {worst:.3e}, above the guard {guard:.3e}"),
                });
            }
        }
        if log_now {
            log.push(rec);
        }
    }
    Ok(ValueTraining { bundle, log })
}
