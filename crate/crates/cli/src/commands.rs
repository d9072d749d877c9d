use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use epiflow_core::eval::{
    self, lambda_sweep, n_sweep, perturbation_sweep, rollout, state_mesh, tau_sweep, write_mesh_csv, z_sensitivity_report,
    AblationRow, EvalReport, FlowController, PipelineConfig,
};
use epiflow_core::flow::{train_policy, AdvantageEvaluator, FlowPolicy};
use epiflow_core::oracle::{check_equivalence, GridSpec, TabularMdp, TabularSpec};
use epiflow_core::values;
use epiflow_core::{OfflineDataset, ValueBundle};
use serde_json::json;

use crate::config::{require_sections, RunConfig};
use crate::manifest::{FileEntry, Manifest};

pub const DATASET: &str = "dataset.bin";
pub const VALUES: &str = "values.ckpt";
pub const POLICY: &str = "policy.ckpt";

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub deterministic: bool,
    /// Sections present in the config file; `None` when running on defaults.
    pub sections: Option<std::collections::BTreeSet<String>>,
}

impl Ctx {
    fn require(&self, sections: &[&str]) -> Result<()> {
        match &self.sections {
            Some(s) => require_sections(s, sections),
            None => Ok(()),
        }
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, &self.cfg, self.deterministic)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn upstream(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("missing upstream artifact {}; run `epiflow {producer}` first", p.display());
        }
        Ok(p)
    }

    fn load_dataset(&self) -> Result<OfflineDataset> {
        let p = self.upstream(DATASET, "gen-data")?;
        Ok(OfflineDataset::load(&p).with_context(|| format!("cannot load dataset {}", p.display()))?)
    }

    fn load_values(&self) -> Result<ValueBundle> {
        let p = self.upstream(VALUES, "train-values")?;
        let b = ValueBundle::load(&p).with_context(|| format!("cannot load value checkpoint {}", p.display()))?;
        let sizes = b.v_hat.sizes();
        let hidden = &sizes[1..sizes.len() - 1];
        if hidden != self.cfg.values.hidden.as_slice() {
            bail!(
                "architecture mismatch: {} has hidden layers {:?} but values.hidden is {:?}",
                p.display(),
                hidden,
                self.cfg.values.hidden
            );
        }
        Ok(b)
    }

    fn load_policy(&self) -> Result<FlowPolicy> {
        let p = self.upstream(POLICY, "train-policy")?;
        let policy = FlowPolicy::load(&p).with_context(|| format!("cannot load policy checkpoint {}", p.display()))?;
        let sizes = policy.net.sizes();
        let hidden = &sizes[1..sizes.len() - 1];
        if hidden != self.cfg.policy.hidden.as_slice() || policy.condition_on_budget != self.cfg.policy.condition_on_budget {
            bail!(
                "architecture mismatch: {} has hidden layers {:?} (budget input: {}) but the config asks for {:?} (budget input: {})",
                p.display(),
                hidden,
                policy.condition_on_budget,
                self.cfg.policy.hidden,
                self.cfg.policy.condition_on_budget
            );
        }
        Ok(policy)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
    }
}

pub fn gen_data(ctx: &Ctx) -> Result<()> {
    ctx.require(&["env", "dataset"])?;
    let c = &ctx.cfg;
    let ds = OfflineDataset::generate(&c.env, c.dataset.n_traj, c.dataset.horizon, c.seed)?;
    ds.save(&ctx.path(DATASET))?;
    let audit = ds.audit();
    let mut m = ctx.manifest("gen-data");
    m.outputs.push(FileEntry::of(&ctx.out, DATASET)?);
    m.summary = json!({
        "transitions": ds.len(),
        "z_min": ds.z_min,
        "z_max": ds.z_max,
        "audit": audit,
    });
    m.write(&ctx.out, "dataset.json")?;
    println!(
        "wrote {} transitions to {} (z in [{:.4}, {:.4}])",
        ds.len(),
        ctx.path(DATASET).display(),
        ds.z_min,
        ds.z_max
    );
    Ok(())
}

pub fn train_values(ctx: &Ctx) -> Result<()> {
    ctx.require(&["values"])?;
    let ds = ctx.load_dataset()?;
    let trained = values::train(&ds, &ctx.cfg.values)?;
    trained.bundle.save(&ctx.path(VALUES), &ctx.cfg.values, ctx.cfg.values.steps as u64)?;
    let mut log = String::from("step,q_hat,v_hat,regularizer,reward_envelope,safety_envelope\n");
    for r in &trained.log {
        writeln!(
            log,
            "{},{},{},{},{},{}",
            r.step, r.q_hat, r.v_hat, r.regularizer, r.reward_envelope, r.safety_envelope
        )?;
    }
    ctx.write("values_log.csv", &log)?;
    let mut m = ctx.manifest("train-values");
    m.inputs.push(FileEntry::of(&ctx.out, DATASET)?);
    m.outputs.push(FileEntry::of(&ctx.out, VALUES)?);
    m.outputs.push(FileEntry::of(&ctx.out, "values_log.csv")?);
    m.summary = json!({ "steps": ctx.cfg.values.steps, "final": trained.log.last() });
    m.write(&ctx.out, "values.json")?;
    println!("trained values for {} steps -> {}", ctx.cfg.values.steps, ctx.path(VALUES).display());
    Ok(())
}

pub fn train_policy_cmd(ctx: &Ctx) -> Result<()> {
    ctx.require(&["policy"])?;
    let ds = ctx.load_dataset()?;
    let bundle = ctx.load_values()?;
    let trained = train_policy(&ds, &bundle, &ctx.cfg.policy, &ctx.cfg.threshold)?;
    trained
        .policy
        .save(&ctx.path(POLICY), ctx.cfg.policy.seed, ctx.cfg.policy.steps as u64)?;
    let mut log = String::from("step,loss\n");
    for r in &trained.log {
        writeln!(log, "{},{}", r.step, r.loss)?;
    }
    ctx.write("policy_log.csv", &log)?;
    let g = &trained.guidance;
    let [feasible, infeasible, saturated] = g.status_counts();
    let mean_w = g.weights.iter().sum::<f64>() / g.weights.len() as f64;
    let mut m = ctx.manifest("train-policy");
    m.inputs.push(FileEntry::of(&ctx.out, DATASET)?);
    m.inputs.push(FileEntry::of(&ctx.out, VALUES)?);
    m.outputs.push(FileEntry::of(&ctx.out, POLICY)?);
    m.outputs.push(FileEntry::of(&ctx.out, "policy_log.csv")?);
    m.summary = json!({
        "z_star": { "feasible": feasible, "infeasible": infeasible, "saturated": saturated, "non_monotone": g.non_monotone() },
        "mean_weight": mean_w,
        "final": trained.log.last(),
    });
    m.write(&ctx.out, "policy.json")?;
    println!(
        "trained policy for {} steps -> {} (z*: {feasible} feasible, {infeasible} infeasible, {saturated} saturated)",
        ctx.cfg.policy.steps,
        ctx.path(POLICY).display()
    );
    Ok(())
}

const REPORT_HEADER: &str = "config,seed,episodes,mean_reward,sd_reward,safety_rate,mean_cost,time_per_action\n";

fn report_rows(out: &mut String, label: &str, r: &EvalReport) {
    for s in &r.per_seed {
        let _ = writeln!(
            out,
            "{label},{},{},{},{},{},{},{}",
            s.seed,
            s.summary.episodes,
            s.summary.mean_reward,
            s.summary.sd_reward,
            s.summary.safety_rate,
            s.summary.mean_cost,
            r.time_per_action
        );
    }
}

fn print_summary(label: &str, r: &EvalReport) {
    let a = &r.aggregate;
    println!(
        "{label}: reward {:.2} ± {:.2}, safety {:.1}%, cost {:.3} over {} episodes",
        a.mean_reward, a.sd_reward, a.safety_rate, a.mean_cost, a.episodes
    );
}

pub fn eval_cmd(ctx: &Ctx) -> Result<()> {
    ctx.require(&["eval"])?;
    let bundle = ctx.load_values()?;
    let policy = ctx.load_policy()?;
    let adv = AdvantageEvaluator::new(&bundle, &ctx.cfg.threshold)?;
    let report = rollout(&FlowController::new(&policy, adv), &ctx.cfg.env, &ctx.cfg.eval)?;
    let mut csv = REPORT_HEADER.to_string();
    report_rows(&mut csv, "default", &report);
    ctx.write("eval.csv", &csv)?;
    let mut m = ctx.manifest("eval");
    m.inputs.push(FileEntry::of(&ctx.out, VALUES)?);
    m.inputs.push(FileEntry::of(&ctx.out, POLICY)?);
    m.outputs.push(FileEntry::of(&ctx.out, "eval.csv")?);
    m.summary = serde_json::to_value(&report)?;
    m.write(&ctx.out, "eval.json")?;
    print_summary("eval", &report);
    Ok(())
}

fn pipeline(cfg: &RunConfig) -> PipelineConfig {
    PipelineConfig {
        values: cfg.values.clone(),
        flow: cfg.policy.clone(),
        threshold: cfg.threshold,
        eval: cfg.eval.clone(),
    }
}

fn write_sweep(ctx: &Ctx, name: &str, rows: &[AblationRow]) -> Result<()> {
    let mut csv = REPORT_HEADER.to_string();
    for row in rows {
        let label = format!("{}={}", row.parameter, row.value);
        match (&row.report, &row.error) {
            (Some(r), _) => {
                report_rows(&mut csv, &label, r);
                print_summary(&label, r);
            }
            (None, Some(e)) => println!("{label}: failed: {e}"),
            _ => {}
        }
    }
    let file = format!("ablate_{name}.csv");
    ctx.write(&file, &csv)?;
    let mut m = ctx.manifest(&format!("ablate {name}"));
    m.inputs.push(FileEntry::of(&ctx.out, DATASET)?);
    m.outputs.push(FileEntry::of(&ctx.out, &file)?);
    m.summary = serde_json::to_value(rows)?;
    m.write(&ctx.out, &format!("ablate_{name}.json"))
}

pub fn ablate_tau(ctx: &Ctx) -> Result<()> {
    let ds = ctx.load_dataset()?;
    let rows = tau_sweep(&ds, &pipeline(&ctx.cfg), &ctx.cfg.ablate.tau_grid);
    write_sweep(ctx, "tau", &rows)
}

pub fn ablate_lambda(ctx: &Ctx) -> Result<()> {
    let ds = ctx.load_dataset()?;
    let rows = lambda_sweep(&ds, &pipeline(&ctx.cfg), &ctx.cfg.ablate.lambda_grid);
    write_sweep(ctx, "lambda", &rows)
}

pub fn ablate_n(ctx: &Ctx) -> Result<()> {
    let bundle = ctx.load_values()?;
    let policy = ctx.load_policy()?;
    let adv = AdvantageEvaluator::new(&bundle, &ctx.cfg.threshold)?;
    let a = &ctx.cfg.ablate;
    let mut rng = epiflow_core::dataset::substream(ctx.cfg.seed, u64::MAX);
    let states: Vec<_> = (0..a.timing_states)
        .map(|_| eval::safe_initial_state(&mut rng, &ctx.cfg.env))
        .collect();
    let rows = n_sweep(&policy, adv, &ctx.cfg.env, &ctx.cfg.eval, &a.n_grid, &a.n_rollouts, &states, a.timing_repeats)?;
    let mut csv = String::from("candidates,time_per_action,mean_reward,safety_rate,mean_cost\n");
    for r in &rows {
        let (rew, safe, cost) = match &r.report {
            Some(rep) => (
                rep.aggregate.mean_reward.to_string(),
                rep.aggregate.safety_rate.to_string(),
                rep.aggregate.mean_cost.to_string(),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        writeln!(csv, "{},{},{rew},{safe},{cost}", r.candidates, r.time_per_action)?;
        println!("N={}: {:.3e} s/action {}", r.candidates, r.time_per_action, if rew.is_empty() { String::new() } else { format!("reward {rew} safety {safe}% cost {cost}") });
    }
    ctx.write("ablate_n.csv", &csv)?;
    let mut m = ctx.manifest("ablate n");
    m.inputs.push(FileEntry::of(&ctx.out, VALUES)?);
    m.inputs.push(FileEntry::of(&ctx.out, POLICY)?);
    m.outputs.push(FileEntry::of(&ctx.out, "ablate_n.csv")?);
    m.summary = serde_json::to_value(&rows)?;
    m.write(&ctx.out, "ablate_n.json")
}

pub fn ablate_perturb(ctx: &Ctx) -> Result<()> {
    let bundle = ctx.load_values()?;
    let policy = ctx.load_policy()?;
    let adv = AdvantageEvaluator::new(&bundle, &ctx.cfg.threshold)?;
    let (base, rows) = perturbation_sweep(
        &FlowController::new(&policy, adv),
        &ctx.cfg.env,
        &ctx.cfg.eval,
        &ctx.cfg.eval.perturbation_levels,
    )?;
    let mut csv = REPORT_HEADER.to_string();
    report_rows(&mut csv, "level=0", &base);
    print_summary("level=0", &base);
    for r in &rows {
        let label = format!("level={}", r.level);
        report_rows(&mut csv, &label, &r.report);
        print_summary(&label, &r.report);
        println!("  relative reward {:.1}%", r.relative_reward);
    }
    ctx.write("ablate_perturb.csv", &csv)?;
    let mut m = ctx.manifest("ablate perturb");
    m.inputs.push(FileEntry::of(&ctx.out, VALUES)?);
    m.inputs.push(FileEntry::of(&ctx.out, POLICY)?);
    m.outputs.push(FileEntry::of(&ctx.out, "ablate_perturb.csv")?);
    m.summary = json!({ "base": base, "levels": rows });
    m.write(&ctx.out, "ablate_perturb.json")
}

pub fn ablate_zsens(ctx: &Ctx, compare: Option<&Path>) -> Result<()> {
    let bundle = ctx.load_values()?;
    let a = &ctx.cfg.ablate;
    let mesh = state_mesh(&ctx.cfg.env, a.mesh[0], a.mesh[1]);
    let k = a.z_points.max(2);
    let z_grid: Vec<f64> = (0..k)
        .map(|i| bundle.z_min + (bundle.z_max - bundle.z_min) * i as f64 / (k - 1) as f64)
        .collect();
    let rep = z_sensitivity_report(&bundle, &mesh, &z_grid)?;
    let mut csv = Vec::new();
    write_mesh_csv(&mut csv, &mesh, &rep)?;
    std::fs::write(ctx.path("zsens_mesh.csv"), csv)?;
    println!("z variation {:.6}", rep.variation);
    let mut summary = json!({ "report": rep });
    if let Some(other) = compare {
        let b = ValueBundle::load(other).with_context(|| format!("cannot load value checkpoint {}", other.display()))?;
        let o = z_sensitivity_report(&b, &mesh, &z_grid)?;
        println!("z variation of {}: {:.6}", other.display(), o.variation);
        summary["compare"] = json!({ "path": other.display().to_string(), "report": o });
    }
    let mut m = ctx.manifest("ablate zsens");
    m.inputs.push(FileEntry::of(&ctx.out, VALUES)?);
    m.outputs.push(FileEntry::of(&ctx.out, "zsens_mesh.csv")?);
    m.summary = summary;
    m.write(&ctx.out, "zsens.json")
}

pub fn oracle(path: Option<&Path>) -> Result<()> {
    let mdp = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read MDP file {}", p.display()))?;
            let spec: TabularSpec = toml::from_str(&text).with_context(|| format!("invalid MDP file {}", p.display()))?;
            TabularMdp::from_spec(&spec)?
        }
        None => TabularMdp::chain12(),
    };
    let rep = check_equivalence(&mdp, &GridSpec::default_for(&mdp))?;
    println!("state,brute_force,recovered");
    for ((s, b), r) in rep.states.iter().zip(&rep.brute_force).zip(&rep.recovered) {
        println!("{s},{b},{r}");
    }
    println!(
        "max discrepancy {:.6} ({:.3} grid cells), infeasible sets agree: {}, sweeps {}, monotone in z: {}",
        rep.max_discrepancy,
        rep.max_discrepancy / rep.spacing,
        rep.infeasibility_agrees,
        rep.sweeps,
        rep.monotone_in_z
    );
    println!("{}", if rep.passes() { "PASS" } else { "FAIL" });
    Ok(())
}
