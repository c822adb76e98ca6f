//! Harness-level integration: mode switches, artifact determinism, report
//! structure, and the CLI binary's exit-code contract.

use std::path::{Path, PathBuf};
use std::process::Command;

use hygen_cli::commands::{ablation_arms, cmd_eval, cmd_gen_data, train_one, RunMeta};
use hygen_cli::{ExperimentConfig, TrainMode};
use hygen_core::num::ParamBundle;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.source_tasks = vec!["2v2".into(), "3v3".into()];
    cfg.unseen_tasks = vec!["2v3".into()];
    cfg.stage1_steps = 40;
    cfg.stage2_steps = 30;
    cfg.decay_steps = 20;
    cfg.dataset_episodes = 30;
    cfg.eval_episodes = 4;
    cfg.seeds = vec![0, 1];
    cfg
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_metrics(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn mode_parse_lists_valid_modes_on_error() {
    let err = TrainMode::parse("qmix").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("hygen") && msg.contains("fixed_ratio"), "{msg}");
    assert!(matches!(
        TrainMode::parse("fixed_ratio:0.5").unwrap(),
        TrainMode::FixedRatio(_)
    ));
    assert!(TrainMode::parse("fixed_ratio:1.5").is_err());
}

#[test]
fn fixed_ratio_logs_constant_and_cql_none_logs_zero() {
    let cfg = tiny_config();
    let dir = fresh_dir("harness_ratio");
    cmd_gen_data(&cfg, &dir).unwrap();
    let run = train_one(&cfg, TrainMode::FixedRatio(0.5), 0, &dir).unwrap();
    for row in read_metrics(&run.join("metrics.csv")) {
        assert_eq!(row[1], "0.500000", "r_h drifted: {row:?}");
    }
    let run = train_one(&cfg, TrainMode::Cql(hygen_core::policy::CqlMode::None), 0, &dir).unwrap();
    for row in read_metrics(&run.join("metrics.csv")) {
        assert_eq!(row[6], "0.000000", "l_cql nonzero: {row:?}");
    }
}

#[test]
fn no_refine_preserves_decoder_and_modes_share_initialization() {
    let cfg = tiny_config();
    let dir = fresh_dir("harness_norefine");
    cmd_gen_data(&cfg, &dir).unwrap();
    let run = train_one(&cfg, TrainMode::NoRefine, 1, &dir).unwrap();
    let params = ParamBundle::load(&run.join("params.ndjson")).unwrap();
    let stage1_dir = dir
        .join("stage1")
        .join(&cfg.stage1_hash()[..16])
        .join("seed1");
    let stage1 = ParamBundle::load(&stage1_dir.join("params.ndjson")).unwrap();
    assert_eq!(
        params.extract("dec.").content_hash(),
        stage1.extract("dec.").content_hash(),
        "frozen decoder changed during stage two"
    );

    // Modes differ only in their switch: with zero training steps, every
    // skill-based mode initializes identical parameters.
    let mut cfg0 = cfg.clone();
    cfg0.stage2_steps = 0;
    let dir0 = fresh_dir("harness_init_eq");
    cmd_gen_data(&cfg0, &dir0).unwrap();
    let mut hashes = Vec::new();
    for mode in [
        TrainMode::Hygen,
        TrainMode::NoRefine,
        TrainMode::Cql(hygen_core::policy::CqlMode::Fixed),
        TrainMode::FixedRatio(0.2),
        TrainMode::OfflineOnly,
    ] {
        let run = train_one(&cfg0, mode, 3, &dir0).unwrap();
        let p = ParamBundle::load(&run.join("params.ndjson")).unwrap();
        hashes.push(p.content_hash());
    }
    assert!(
        hashes.windows(2).all(|w| w[0] == w[1]),
        "mode initializations diverge: {hashes:?}"
    );
}

#[test]
fn eval_report_covers_all_tasks_with_seed_statistics() {
    let cfg = tiny_config();
    let dir = fresh_dir("harness_eval");
    cmd_gen_data(&cfg, &dir).unwrap();
    let run = train_one(&cfg, TrainMode::Hygen, 0, &dir).unwrap();
    let report = cmd_eval(&cfg, &run.join("params.ndjson"), &dir).unwrap();
    let names: Vec<&str> = report.tasks.iter().map(|t| t.task.as_str()).collect();
    assert_eq!(names, vec!["2v2", "3v3", "2v3"]);
    let kinds: Vec<&str> = report.tasks.iter().map(|t| t.kind.as_str()).collect();
    assert_eq!(kinds, vec!["source", "source", "unseen"]);
    assert_eq!(report.eval_seeds.len(), 2);
    // Std are across seeds: with both seeds equal rates it is zero, and it
    // is always finite and non-negative.
    for t in &report.tasks {
        assert!(t.win_rate_std >= 0.0 && t.win_rate_std.is_finite());
    }
    assert!(dir.join("eval/report.csv").exists());
    let csv = std::fs::read_to_string(dir.join("eval/report.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={}", cfg.hash())));
}

#[test]
fn untrained_params_evaluate_near_random_baseline() {
    // Zero-shot with untrained networks lands near the uniform-random
    // oracle on the unseen task (both are hopeless in this arena).
    let cfg = tiny_config();
    let dims = cfg.dims().unwrap();
    let task = cfg.task("2v3").unwrap();
    let stage1 = hygen_core::skills::init_stage1(&dims, 3);
    let mut rng = hygen_core::Rng::new(4);
    let mut params = hygen_core::nets::init_value(&dims, Some(&stage1), &mut rng);
    params.absorb(&hygen_core::nets::init_local_encoder(&dims, &mut rng), "");
    params.absorb(&stage1, "");
    let _ = &rng;
    let (wr_untrained, _) =
        hygen_core::policy::zero_shot_eval(&params, &dims, &task, 64, 5).unwrap();
    let (wr_random, _) = hygen_core::policy::evaluate(
        &hygen_core::policy::Actor::Random,
        &task,
        &dims,
        64,
        5,
    )
    .unwrap();
    assert!(
        (wr_untrained - wr_random).abs() <= 0.10,
        "untrained {wr_untrained} vs random {wr_random}"
    );
}

#[test]
fn mean_std_is_over_seeds_not_episodes() {
    let (m, s) = hygen_cli::commands::mean_std(&[0.2, 0.4, 0.6, 0.8, 1.0]);
    assert!((m - 0.6).abs() < 1e-12);
    // Sample standard deviation with n - 1.
    assert!((s - 0.31622776601683794).abs() < 1e-12);
}

#[test]
fn ablation_arm_tables() {
    let ratio: Vec<String> = ablation_arms("ratio")
        .unwrap()
        .iter()
        .map(|a| a.name.clone())
        .collect();
    assert_eq!(ratio, vec!["dynamic", "fixed_0.2", "fixed_0.5", "fixed_0.8"]);
    let skills = ablation_arms("skills").unwrap();
    let zs: Vec<usize> = skills.iter().map(|a| a.n_skills_override.unwrap()).collect();
    assert_eq!(zs, vec![1, 2, 3, 4, 5, 6, 8]);
    let defaults: Vec<bool> = skills.iter().map(|a| a.is_default).collect();
    assert_eq!(defaults.iter().filter(|&&d| d).count(), 1);
    assert!(skills.iter().any(|a| a.is_default && a.n_skills_override == Some(4)));
    assert!(ablation_arms("nonsense").is_err());
}

#[test]
fn run_meta_describes_mode() {
    let cfg = tiny_config();
    let dir = fresh_dir("harness_meta");
    cmd_gen_data(&cfg, &dir).unwrap();
    let run = train_one(&cfg, TrainMode::Bc, 0, &dir).unwrap();
    let meta: RunMeta =
        serde_json::from_str(&std::fs::read_to_string(run.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta.actor, "cloning");
    assert_eq!(meta.mode, "bc");
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_hygen");
    let dir = fresh_dir("harness_exit");

    // Config error: unknown key -> exit 2.
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{\"not_a_key\": 1}").unwrap();
    let out = Command::new(bin)
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Unknown mode -> usage error, exit 2, message lists modes.
    let good = dir.join("good.json");
    std::fs::write(
        &good,
        serde_json::to_string(&tiny_config()).unwrap(),
    )
    .unwrap();
    let out = Command::new(bin)
        .args(["train", "--mode", "nonsense", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fixed_ratio"));

    // Missing datasets -> data error, exit 3.
    let out = Command::new(bin)
        .args(["train", "--mode", "hygen", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Missing params -> data error, exit 3.
    let out = Command::new(bin)
        .args(["eval", "--params", "/nonexistent/p.ndjson", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn seed_env_override() {
    // HYGEN_SEED replaces the configured seed list. Set and restore around
    // the check; the variable is process-global, so run it in a child.
    let bin = env!("CARGO_BIN_EXE_hygen");
    let dir = fresh_dir("harness_seed_env");
    let mut cfg = tiny_config();
    cfg.source_tasks = vec!["2v2".into()];
    cfg.unseen_tasks = vec![];
    cfg.stage1_steps = 10;
    cfg.stage2_steps = 5;
    cfg.dataset_episodes = 10;
    let cfg_path = dir.join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = Command::new(bin)
        .args(["gen-data", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(bin)
        .env("HYGEN_SEED", "9")
        .args(["train", "--mode", "bc", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("runs/bc/seed9/params.ndjson").exists());
    assert!(!dir.join("runs/bc/seed0").exists());
}
