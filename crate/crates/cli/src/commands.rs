//! The four experiment commands: dataset generation, training, evaluation,
//! and ablation grids.
//!
//! Directory convention under the experiment root (`--out`):
//!   datasets/<task>_<quality>.ndjson   one episode per line
//!   datasets/summary.json              generation summaries
//!   stage1/<hash8>/seed<k>/            shared skill-discovery artifacts
//!   runs/<mode>/seed<k>/               params.ndjson, metrics.csv, meta.json
//!   eval/report.json, eval/report.csv
//!   ablate/<which>.csv
//!
//! Stage-one artifacts are keyed by a hash of the fields they depend on, so
//! every stage-two variant under the same configuration shares them instead
//! of repeating identical training.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use hygen_core::data::{generate_dataset, load_dataset, save_dataset, Dataset, GenSummary};
use hygen_core::error::{Error, Result};
use hygen_core::num::ParamBundle;
use hygen_core::policy::{
    evaluate, train_bc, train_policy, Actor, CqlMode, MetricRow, ModeFlags, PolicyArtifacts,
    RatioMode,
};
use hygen_core::skills::{init_stage1, skill_usage, train_skills, SkillLogRow};

use crate::config::ExperimentConfig;
use crate::jobs::run_parallel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainMode {
    Hygen,
    OfflineOnly,
    OnlineOnly,
    Bc,
    FixedRatio(f64),
    NoRefine,
    Cql(CqlMode),
}

pub const MODE_USAGE: &str =
    "hygen | offline_only | online_only | bc | fixed_ratio:<r> | no_refine | cql:dynamic | cql:fixed | cql:none";

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "hygen" => Ok(TrainMode::Hygen),
            "offline_only" => Ok(TrainMode::OfflineOnly),
            "online_only" => Ok(TrainMode::OnlineOnly),
            "bc" => Ok(TrainMode::Bc),
            "no_refine" => Ok(TrainMode::NoRefine),
            "cql:dynamic" => Ok(TrainMode::Cql(CqlMode::Dynamic)),
            "cql:fixed" => Ok(TrainMode::Cql(CqlMode::Fixed)),
            "cql:none" => Ok(TrainMode::Cql(CqlMode::None)),
            _ => {
                if let Some(r) = s.strip_prefix("fixed_ratio:") {
                    let r: f64 = r.parse().map_err(|_| {
                        Error::Config(format!("bad ratio in mode '{s}'; modes: {MODE_USAGE}"))
                    })?;
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::Config(format!(
                            "fixed ratio {r} outside [0, 1]; modes: {MODE_USAGE}"
                        )));
                    }
                    Ok(TrainMode::FixedRatio(r))
                } else {
                    Err(Error::Config(format!(
                        "unknown mode '{s}'; modes: {MODE_USAGE}"
                    )))
                }
            }
        }
    }

    pub fn dir_name(&self) -> String {
        match self {
            TrainMode::Hygen => "hygen".into(),
            TrainMode::OfflineOnly => "offline_only".into(),
            TrainMode::OnlineOnly => "online_only".into(),
            TrainMode::Bc => "bc".into(),
            TrainMode::FixedRatio(r) => format!("fixed_ratio_{r}"),
            TrainMode::NoRefine => "no_refine".into(),
            TrainMode::Cql(CqlMode::Dynamic) => "cql_dynamic".into(),
            TrainMode::Cql(CqlMode::Fixed) => "cql_fixed".into(),
            TrainMode::Cql(CqlMode::None) => "cql_none".into(),
        }
    }

    /// Stage-two switches; cloning has none.
    pub fn flags(&self) -> Option<ModeFlags> {
        match self {
            TrainMode::Bc => None,
            TrainMode::Hygen => Some(ModeFlags::hybrid()),
            TrainMode::OfflineOnly => Some(ModeFlags::offline_only()),
            TrainMode::OnlineOnly => Some(ModeFlags::online_only()),
            TrainMode::FixedRatio(r) => Some(ModeFlags {
                ratio: RatioMode::Fixed(*r),
                ..ModeFlags::hybrid()
            }),
            TrainMode::NoRefine => Some(ModeFlags {
                refine_decoder: false,
                ..ModeFlags::hybrid()
            }),
            TrainMode::Cql(m) => Some(ModeFlags {
                cql: *m,
                ..ModeFlags::hybrid()
            }),
        }
    }

    pub fn needs_datasets(&self) -> bool {
        !matches!(self, TrainMode::OnlineOnly)
    }

    pub fn needs_stage1_training(&self) -> bool {
        !matches!(self, TrainMode::Bc | TrainMode::OnlineOnly)
    }
}

#[derive(Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    pub stage1_hash: String,
    pub actor: String,
    pub refine: bool,
}

// ── dataset generation ───────────────────────────────────────────────

fn dataset_path(out: &Path, task: &str, quality: &str) -> PathBuf {
    out.join("datasets").join(format!("{task}_{quality}.ndjson"))
}

fn dataset_seed(task: &str, quality: &str) -> u64 {
    // Datasets are fixtures of the configuration, not of the seed list.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in task.bytes().chain(quality.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Win rate of the scripted controller at a given strength, by Monte Carlo.
pub fn scripted_win_rate(
    cfg: &ExperimentConfig,
    task_name: &str,
    strength: f64,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let task = cfg.task(task_name)?;
    let mut wins = 0usize;
    for ep in 0..episodes {
        let mut env = hygen_core::arena::Env::reset(&task, seed.wrapping_add(ep as u64))?;
        let mut ctrl = hygen_core::arena::ScriptedController::new(
            strength,
            seed ^ (ep as u64).wrapping_mul(0x517c),
        )?;
        loop {
            let acts = ctrl.act(&env);
            let r = env.step(&acts)?;
            if r.done {
                if r.win {
                    wins += 1;
                }
                break;
            }
        }
    }
    Ok(wins as f64 / episodes as f64)
}

/// Sweep controller strengths on a 0.05 grid and pick the one whose win
/// rate lands closest to half the expert's.
pub fn calibrate_medium(cfg: &ExperimentConfig, task_name: &str) -> Result<(f64, f64, f64)> {
    let probe = 300;
    let seed = dataset_seed(task_name, "calibration");
    let expert_wr = scripted_win_rate(cfg, task_name, cfg.expert_strength, probe, seed)?;
    let target = 0.5 * expert_wr;
    let mut best = (f64::INFINITY, 0.05, 0.0);
    for step in 1..=19 {
        let p = step as f64 * 0.05;
        let wr = scripted_win_rate(cfg, task_name, p, probe, seed ^ step)?;
        let gap = (wr - target).abs();
        if gap < best.0 {
            best = (gap, p, wr);
        }
    }
    Ok((best.1, best.2, expert_wr))
}

#[derive(Serialize, Deserialize)]
pub struct GenReport {
    pub config_hash: String,
    pub quality: String,
    pub tasks: Vec<GenSummary>,
    /// Expert reference win rates measured during medium calibration.
    pub expert_reference: Vec<(String, f64)>,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GenReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join("datasets"))?;
    let summaries = run_parallel(cfg.source_tasks.len(), |i| -> Result<(GenSummary, Option<(String, f64)>)> {
        let name = &cfg.source_tasks[i];
        let task = cfg.task(name)?;
        let (strength, expert_ref) = if cfg.quality == "expert" {
            (cfg.expert_strength, None)
        } else {
            let (p, _, expert_wr) = calibrate_medium(cfg, name)?;
            (p, Some((name.clone(), expert_wr)))
        };
        let (episodes, summary) = generate_dataset(
            &task,
            strength,
            &cfg.quality,
            cfg.dataset_episodes,
            dataset_seed(name, &cfg.quality),
        )?;
        save_dataset(&episodes, &dataset_path(out, name, &cfg.quality))?;
        Ok((summary, expert_ref))
    });
    let mut tasks = Vec::new();
    let mut expert_reference = Vec::new();
    for r in summaries {
        let (s, e) = r?;
        tasks.push(s);
        if let Some(e) = e {
            expert_reference.push(e);
        }
    }
    let report = GenReport {
        config_hash: cfg.hash(),
        quality: cfg.quality.clone(),
        tasks,
        expert_reference,
    };
    let mut f = std::fs::File::create(out.join("datasets").join("summary.json"))?;
    f.write_all(serde_json::to_string_pretty(&report).unwrap().as_bytes())?;
    Ok(report)
}

pub fn load_source_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let mut data = Dataset::new(cfg.source_tasks.clone(), &cfg.quality);
    for name in &cfg.source_tasks {
        let path = dataset_path(out, name, &cfg.quality);
        if !path.exists() {
            return Err(Error::Data(format!(
                "dataset {} not found; run gen-data first",
                path.display()
            )));
        }
        data.extend_validated(load_dataset(&path)?)?;
    }
    Ok(data)
}

// ── training ─────────────────────────────────────────────────────────

fn write_metrics_csv(path: &Path, config_hash: &str, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# config_hash={config_hash}")?;
    writeln!(
        f,
        "step,r_h,epsilon,l_total,l_td,l_c,l_cql,eval_task,eval_win_rate,eval_return"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.step,
            r.r_h,
            r.epsilon,
            r.l_total,
            r.l_td,
            r.l_c,
            r.l_cql,
            r.eval_task.as_deref().unwrap_or(""),
            r.eval_win_rate.map_or(String::new(), |v| format!("{v:.6}")),
            r.eval_return.map_or(String::new(), |v| format!("{v:.6}")),
        )?;
    }
    Ok(())
}

fn write_stage1_csv(path: &Path, config_hash: &str, rows: &[SkillLogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# config_hash={config_hash}")?;
    writeln!(f, "step,l_vae,recon_term,kl_term")?;
    for r in rows {
        writeln!(f, "{},{:.6},{:.6},{:.6}", r.step, r.l_vae, r.recon, r.kl)?;
    }
    Ok(())
}

/// Load or train the shared stage-one artifacts for one seed.
pub fn stage1_get_or_train(
    cfg: &ExperimentConfig,
    out: &Path,
    data: &Dataset,
    seed: u64,
) -> Result<ParamBundle> {
    let hash = cfg.stage1_hash();
    let dir = out
        .join("stage1")
        .join(&hash[..16])
        .join(format!("seed{seed}"));
    let params_path = dir.join("params.ndjson");
    if params_path.exists() {
        return ParamBundle::load(&params_path);
    }
    let dims = cfg.dims()?;
    let tasks = cfg.task_registry()?;
    let (bundle, log) = train_skills(data, &tasks, &dims, &cfg.skills_config(), seed)?;
    std::fs::create_dir_all(&dir)?;
    write_stage1_csv(&dir.join("loss_log.csv"), &cfg.hash(), &log)?;
    let usage = skill_usage(&bundle, data, &tasks, &dims, 500, seed ^ 0x5a5a)?;
    let usage_json = serde_json::json!({
        "stage1_hash": hash,
        "seed": seed,
        "skill_usage": usage,
    });
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&usage_json).unwrap(),
    )?;
    bundle.save(&params_path)?;
    Ok(bundle)
}

/// Train one (mode, seed) run; returns the run directory.
pub fn train_one(
    cfg: &ExperimentConfig,
    mode: TrainMode,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    train_one_inner(cfg, mode, seed, out, false)
}

/// Like `train_one`, but returns immediately when the run's artifacts are
/// already complete. Training is deterministic, so a finished run and a
/// repeated run are interchangeable; grids resume instead of repeating.
pub fn train_one_resumable(
    cfg: &ExperimentConfig,
    mode: TrainMode,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    train_one_inner(cfg, mode, seed, out, true)
}

fn train_one_inner(
    cfg: &ExperimentConfig,
    mode: TrainMode,
    seed: u64,
    out: &Path,
    resume: bool,
) -> Result<PathBuf> {
    let dims = cfg.dims()?;
    let tasks = cfg.task_registry()?;
    let run_dir = out
        .join("runs")
        .join(mode.dir_name())
        .join(format!("seed{seed}"));
    if resume
        && run_dir.join("params.ndjson").exists()
        && run_dir.join("metrics.csv").exists()
        && run_dir.join("meta.json").exists()
    {
        return Ok(run_dir);
    }
    std::fs::create_dir_all(&run_dir)?;

    let data = if mode.needs_datasets() {
        load_source_datasets(cfg, out)?
    } else {
        Dataset::new(cfg.source_tasks.clone(), &cfg.quality)
    };

    let artifacts: PolicyArtifacts = match mode {
        TrainMode::Bc => train_bc(
            &data,
            &cfg.source_tasks,
            &tasks,
            &dims,
            &cfg.policy_config(),
            seed,
        )?,
        _ => {
            let stage1 = if mode.needs_stage1_training() {
                stage1_get_or_train(cfg, out, &data, seed)?
            } else {
                init_stage1(&dims, seed)
            };
            let flags = mode.flags().expect("non-bc mode has flags");
            train_policy(
                &data,
                &cfg.source_tasks,
                &tasks,
                &dims,
                &stage1,
                &cfg.policy_config(),
                flags,
                seed,
            )?
        }
    };
    write_metrics_csv(&run_dir.join("metrics.csv"), &cfg.hash(), &artifacts.metrics)?;
    artifacts.params.save(&run_dir.join("params.ndjson"))?;
    let meta = RunMeta {
        mode: mode.dir_name(),
        seed,
        config_hash: cfg.hash(),
        stage1_hash: cfg.stage1_hash(),
        actor: if matches!(mode, TrainMode::Bc) {
            "cloning".into()
        } else {
            "skills".into()
        },
        refine: mode.flags().map_or(false, |f| f.refine_decoder),
    };
    std::fs::write(
        run_dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).unwrap(),
    )?;
    Ok(run_dir)
}

/// Train every configured seed for one mode, in parallel workers.
pub fn cmd_train(cfg: &ExperimentConfig, mode: TrainMode, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let seeds = cfg.effective_seeds()?;
    // Stage-one artifacts are shared across seeds sequentially first, so
    // parallel workers never race to train the same seed's artifacts.
    if mode.needs_stage1_training() {
        let data = load_source_datasets(cfg, out)?;
        for &s in &seeds {
            stage1_get_or_train(cfg, out, &data, s)?;
        }
    }
    let dirs = run_parallel(seeds.len(), |i| train_one(cfg, mode, seeds[i], out));
    dirs.into_iter().collect()
}

// ── evaluation ───────────────────────────────────────────────────────

#[derive(Serialize, Deserialize, Clone)]
pub struct TaskReport {
    pub task: String,
    pub kind: String,
    pub win_rate_mean: f64,
    pub win_rate_std: f64,
    pub return_mean: f64,
}

#[derive(Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub params: String,
    pub actor: String,
    pub eval_episodes: usize,
    pub eval_seeds: Vec<u64>,
    pub tasks: Vec<TaskReport>,
    pub wall_seconds: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Evaluate a parameter bundle over every configured task: greedy rollouts,
/// `eval_episodes` per evaluation seed, statistics across seeds.
pub fn eval_bundle(
    cfg: &ExperimentConfig,
    params: &ParamBundle,
    actor_kind: &str,
) -> Result<Vec<TaskReport>> {
    let dims = cfg.dims()?;
    let seeds = cfg.effective_seeds()?;
    let mut out = Vec::new();
    let all: Vec<(String, String)> = cfg
        .source_tasks
        .iter()
        .map(|t| (t.clone(), "source".to_string()))
        .chain(
            cfg.unseen_tasks
                .iter()
                .map(|t| (t.clone(), "unseen".to_string())),
        )
        .collect();
    let reports = run_parallel(all.len(), |i| -> Result<TaskReport> {
        let (name, kind) = &all[i];
        let task = cfg.task(name)?;
        let mut rates = Vec::with_capacity(seeds.len());
        let mut rets = Vec::with_capacity(seeds.len());
        for &s in &seeds {
            let actor = match actor_kind {
                "cloning" => Actor::Cloning { decoder: params },
                "random" => Actor::Random,
                _ => Actor::Skills { policy: params },
            };
            let (wr, ret) = evaluate(
                &actor,
                &task,
                &dims,
                cfg.eval_episodes,
                s ^ 0xe7a1_0000 ^ ((i as u64) << 40),
            )?;
            rates.push(wr);
            rets.push(ret);
        }
        let (wm, ws) = mean_std(&rates);
        let (rm, _) = mean_std(&rets);
        Ok(TaskReport {
            task: name.clone(),
            kind: kind.clone(),
            win_rate_mean: wm,
            win_rate_std: ws,
            return_mean: rm,
        })
    });
    for r in reports {
        out.push(r?);
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &ExperimentConfig, params_path: &Path, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    if !params_path.exists() {
        return Err(Error::Data(format!(
            "params file {} not found",
            params_path.display()
        )));
    }
    let t0 = Instant::now();
    let params = ParamBundle::load(params_path)?;
    // The sidecar written by training tells evaluation how to act.
    let meta_path = params_path.parent().map(|d| d.join("meta.json"));
    let actor = match meta_path.filter(|p| p.exists()) {
        Some(p) => {
            let meta: RunMeta = serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::Data(format!("meta.json: {e}")))?;
            meta.actor
        }
        None => "skills".to_string(),
    };
    let tasks = eval_bundle(cfg, &params, &actor)?;
    let report = RunReport {
        config_hash: cfg.hash(),
        params: params_path.display().to_string(),
        actor,
        eval_episodes: cfg.eval_episodes,
        eval_seeds: cfg.effective_seeds()?,
        tasks,
        wall_seconds: t0.elapsed().as_secs_f64(),
    };
    let dir = out.join("eval");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("report.csv"))?);
    writeln!(f, "# config_hash={}", report.config_hash)?;
    writeln!(f, "task,kind,win_rate_mean,win_rate_std,return_mean")?;
    for t in &report.tasks {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.6}",
            t.task, t.kind, t.win_rate_mean, t.win_rate_std, t.return_mean
        )?;
    }
    Ok(report)
}

// ── ablations ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AblationArm {
    pub name: String,
    pub mode: TrainMode,
    pub n_skills_override: Option<usize>,
    pub is_default: bool,
}

pub fn ablation_arms(which: &str) -> Result<Vec<AblationArm>> {
    let arm = |name: &str, mode: TrainMode, is_default: bool| AblationArm {
        name: name.to_string(),
        mode,
        n_skills_override: None,
        is_default,
    };
    match which {
        "ratio" => Ok(vec![
            arm("dynamic", TrainMode::Hygen, true),
            arm("fixed_0.2", TrainMode::FixedRatio(0.2), false),
            arm("fixed_0.5", TrainMode::FixedRatio(0.5), false),
            arm("fixed_0.8", TrainMode::FixedRatio(0.8), false),
        ]),
        "refine" => Ok(vec![
            arm("with_refinement", TrainMode::Hygen, true),
            arm("no_refinement", TrainMode::NoRefine, false),
        ]),
        "cql" => Ok(vec![
            arm("dynamic", TrainMode::Hygen, true),
            arm("fixed", TrainMode::Cql(CqlMode::Fixed), false),
            arm("none", TrainMode::Cql(CqlMode::None), false),
        ]),
        "skills" => Ok([1usize, 2, 3, 4, 5, 6, 8]
            .iter()
            .map(|&z| AblationArm {
                name: format!("skills_{z}"),
                mode: TrainMode::Hygen,
                n_skills_override: Some(z),
                is_default: z == 4,
            })
            .collect()),
        _ => Err(Error::Config(format!(
            "unknown ablation '{which}'; one of: ratio, refine, cql, skills"
        ))),
    }
}

#[derive(Clone, Serialize)]
pub struct AblationRow {
    pub which: String,
    pub arm: String,
    pub is_default: bool,
    pub task: String,
    pub win_rate_mean: f64,
    pub win_rate_std: f64,
    pub return_mean: f64,
    pub seeds: usize,
}

/// Train the arm grid over the seed list, evaluate final source-task win
/// rates, and emit the comparison table.
pub fn cmd_ablate(cfg: &ExperimentConfig, which: &str, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let arms = ablation_arms(which)?;
    let seeds = cfg.effective_seeds()?;
    let sub = out.join("ablate").join(which);
    std::fs::create_dir_all(&sub)?;

    // Flatten (arm, seed) into one job list.
    let mut jobs = Vec::new();
    for ai in 0..arms.len() {
        for &s in &seeds {
            jobs.push((ai, s));
        }
    }
    // Stage-one artifacts first (sequential per distinct stage-one hash).
    for arm in &arms {
        let mut acfg = cfg.clone();
        if let Some(z) = arm.n_skills_override {
            acfg.n_skills = z;
        }
        if arm.mode.needs_stage1_training() {
            let data = load_source_datasets(&acfg, out)?;
            for &s in &seeds {
                stage1_get_or_train(&acfg, out, &data, s)?;
            }
        }
    }
    let results = run_parallel(jobs.len(), |j| -> Result<(usize, u64, Vec<(String, f64, f64)>)> {
        let (ai, seed) = jobs[j];
        let arm = &arms[ai];
        let mut acfg = cfg.clone();
        if let Some(z) = arm.n_skills_override {
            acfg.n_skills = z;
        }
        let arm_out = sub.join(&arm.name);
        std::fs::create_dir_all(&arm_out)?;
        // Datasets live at the experiment root.
        link_datasets(out, &arm_out, &acfg)?;
        let run_dir = train_one_resumable(&acfg, arm.mode, seed, &arm_out)?;
        let params = ParamBundle::load(&run_dir.join("params.ndjson"))?;
        let dims = acfg.dims()?;
        let mut rows = Vec::new();
        for name in &acfg.source_tasks {
            let task = acfg.task(name)?;
            let actor = Actor::Skills { policy: &params };
            let (wr, ret) = evaluate(&actor, &task, &dims, acfg.eval_episodes, seed ^ 0xab1a7e)?;
            rows.push((name.clone(), wr, ret));
        }
        Ok((ai, seed, rows))
    });

    // Aggregate to mean +- std per (arm, task) and a source-mean row.
    let mut per_arm: Vec<Vec<(u64, Vec<(String, f64, f64)>)>> = vec![Vec::new(); arms.len()];
    for r in results {
        let (ai, seed, rows) = r?;
        per_arm[ai].push((seed, rows));
    }
    let mut table = Vec::new();
    for (ai, arm) in arms.iter().enumerate() {
        let runs = &mut per_arm[ai];
        runs.sort_by_key(|(s, _)| *s);
        let mut all_rates: Vec<f64> = Vec::new();
        for task in &cfg.source_tasks {
            let rates: Vec<f64> = runs
                .iter()
                .map(|(_, rows)| rows.iter().find(|(t, _, _)| t == task).unwrap().1)
                .collect();
            let rets: Vec<f64> = runs
                .iter()
                .map(|(_, rows)| rows.iter().find(|(t, _, _)| t == task).unwrap().2)
                .collect();
            let (wm, ws) = mean_std(&rates);
            let (rm, _) = mean_std(&rets);
            table.push(AblationRow {
                which: which.to_string(),
                arm: arm.name.clone(),
                is_default: arm.is_default,
                task: task.clone(),
                win_rate_mean: wm,
                win_rate_std: ws,
                return_mean: rm,
                seeds: runs.len(),
            });
            all_rates.extend(rates);
        }
        let per_seed_means: Vec<f64> = runs
            .iter()
            .map(|(_, rows)| rows.iter().map(|(_, wr, _)| *wr).sum::<f64>() / rows.len() as f64)
            .collect();
        let (wm, ws) = mean_std(&per_seed_means);
        table.push(AblationRow {
            which: which.to_string(),
            arm: arm.name.clone(),
            is_default: arm.is_default,
            task: "source_mean".to_string(),
            win_rate_mean: wm,
            win_rate_std: ws,
            return_mean: 0.0,
            seeds: runs.len(),
        });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(
        out.join("ablate").join(format!("{which}.csv")),
    )?);
    writeln!(f, "# config_hash={}", cfg.hash())?;
    writeln!(
        f,
        "which,arm,is_default,task,win_rate_mean,win_rate_std,return_mean,seeds"
    )?;
    for r in &table {
        writeln!(
            f,
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            r.which,
            r.arm,
            r.is_default,
            r.task,
            r.win_rate_mean,
            r.win_rate_std,
            r.return_mean,
            r.seeds
        )?;
    }
    Ok(table)
}

/// Ablation arm directories read datasets and stage-one artifacts from the
/// experiment root; hard links keep a single copy on disk.
fn link_datasets(root: &Path, arm_out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let src_dir = root.join("datasets");
    let dst_dir = arm_out.join("datasets");
    std::fs::create_dir_all(&dst_dir)?;
    for name in &cfg.source_tasks {
        let src = dataset_path(root, name, &cfg.quality);
        let dst = dataset_path(arm_out, name, &cfg.quality);
        if src.exists() && !dst.exists() {
            if std::fs::hard_link(&src, &dst).is_err() {
                std::fs::copy(&src, &dst)?;
            }
        }
    }
    // Stage-one artifacts are keyed by hash; point the arm at the root's.
    let s1_root = root.join("stage1");
    let s1_arm = arm_out.join("stage1");
    if s1_root.exists() && !s1_arm.exists() {
        #[cfg(unix)]
        let _ = std::os::unix::fs::symlink(&s1_root, &s1_arm);
    }
    let _ = src_dir;
    Ok(())
}
