//! Experiment configuration: flat JSON with exactly these keys; unknown
//! keys are a hard error so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hygen_core::arena::TaskSpec;
use hygen_core::error::{Error, Result};
use hygen_core::nets::NetDims;
use hygen_core::policy::PolicyConfig;
use hygen_core::skills::SkillsConfig;

pub const MIX_HIDDEN: usize = 32;

fn d_source_tasks() -> Vec<String> {
    ["3v3", "4v5", "5v6"].map(String::from).to_vec()
}
fn d_unseen_tasks() -> Vec<String> {
    ["4v4", "5v5", "6v6", "6v7"].map(String::from).to_vec()
}
fn d_quality() -> String {
    "medium".into()
}
fn d_hidden() -> usize {
    64
}
fn d_embed() -> usize {
    128
}
fn d_alpha() -> f64 {
    5.0
}
fn d_beta() -> f64 {
    0.001
}
fn d_eta() -> f64 {
    5.0
}
fn d_n_skills() -> usize {
    4
}
fn d_n_heads() -> usize {
    4
}
fn d_stage1_steps() -> u64 {
    15_000
}
fn d_stage2_steps() -> u64 {
    35_000
}
fn d_r_start() -> f64 {
    1.0
}
fn d_r_end() -> f64 {
    0.1
}
fn d_decay_steps() -> u64 {
    5000
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    0.0005
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn d_dataset_episodes() -> usize {
    2000
}
fn d_eval_episodes() -> usize {
    32
}
fn d_expert_strength() -> f64 {
    0.95
}
fn d_grid() -> i64 {
    16
}
fn d_health() -> i64 {
    10
}
fn d_range() -> i64 {
    3
}
fn d_damage() -> i64 {
    2
}
fn d_sight() -> i64 {
    6
}
fn d_episode_limit() -> usize {
    60
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_source_tasks")]
    pub source_tasks: Vec<String>,
    #[serde(default = "d_unseen_tasks")]
    pub unseen_tasks: Vec<String>,
    #[serde(default = "d_quality")]
    pub quality: String,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_embed")]
    pub embedding_dim: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_n_skills")]
    pub n_skills: usize,
    #[serde(default = "d_n_heads")]
    pub n_heads: usize,
    #[serde(default = "d_stage1_steps")]
    pub stage1_steps: u64,
    #[serde(default = "d_stage2_steps")]
    pub stage2_steps: u64,
    #[serde(default = "d_r_start")]
    pub r_start: f64,
    #[serde(default = "d_r_end")]
    pub r_end: f64,
    #[serde(default = "d_decay_steps")]
    pub decay_steps: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_dataset_episodes")]
    pub dataset_episodes: usize,
    #[serde(default = "d_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "d_expert_strength")]
    pub expert_strength: f64,
    #[serde(default = "d_grid")]
    pub grid_width: i64,
    #[serde(default = "d_grid")]
    pub grid_height: i64,
    #[serde(default = "d_health")]
    pub unit_health: i64,
    #[serde(default = "d_range")]
    pub attack_range: i64,
    #[serde(default = "d_damage")]
    pub attack_damage: i64,
    #[serde(default = "d_sight")]
    pub sight_range: i64,
    #[serde(default = "d_episode_limit")]
    pub episode_limit: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_tasks.is_empty() {
            return Err(Error::Config("source_tasks must not be empty".into()));
        }
        if self.quality != "expert" && self.quality != "medium" {
            return Err(Error::Config(format!(
                "quality must be 'expert' or 'medium', got '{}'",
                self.quality
            )));
        }
        if self.r_end > self.r_start || !(0.0..=1.0).contains(&self.r_start) {
            return Err(Error::Config("require 0 <= r_end <= r_start <= 1".into()));
        }
        if self.embedding_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embedding_dim {} must divide into {} heads",
                self.embedding_dim, self.n_heads
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        for name in self.source_tasks.iter().chain(&self.unseen_tasks) {
            self.task(name)?;
        }
        Ok(())
    }

    /// Seed list, overridable via the HYGEN_SEED environment variable
    /// (comma-separated).
    pub fn effective_seeds(&self) -> Result<Vec<u64>> {
        match std::env::var("HYGEN_SEED") {
            Err(_) => Ok(self.seeds.clone()),
            Ok(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Config(format!("HYGEN_SEED: bad seed '{s}'")))
                })
                .collect(),
        }
    }

    /// A task spec with this config's environment parameters.
    pub fn task(&self, name: &str) -> Result<TaskSpec> {
        let mut t = TaskSpec::parse(name)?;
        t.grid_width = self.grid_width;
        t.grid_height = self.grid_height;
        t.unit_health = self.unit_health;
        t.attack_range = self.attack_range;
        t.attack_damage = self.attack_damage;
        t.sight_range = self.sight_range;
        t.episode_limit = self.episode_limit;
        t.validate()?;
        Ok(t)
    }

    pub fn task_registry(&self) -> Result<BTreeMap<String, TaskSpec>> {
        let mut map = BTreeMap::new();
        for name in self.source_tasks.iter().chain(&self.unseen_tasks) {
            map.insert(name.clone(), self.task(name)?);
        }
        Ok(map)
    }

    /// Network capacity spanning every configured task.
    pub fn dims(&self) -> Result<NetDims> {
        let mut max_allies = 1;
        let mut max_enemies = 1;
        for name in self.source_tasks.iter().chain(&self.unseen_tasks) {
            let t = self.task(name)?;
            max_allies = max_allies.max(t.n_allies);
            max_enemies = max_enemies.max(t.n_enemies);
        }
        let dims = NetDims {
            n_skills: self.n_skills,
            n_heads: self.n_heads,
            embed: self.embedding_dim,
            hidden: self.hidden_dim,
            max_allies,
            max_enemies,
            mix_hidden: MIX_HIDDEN,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn skills_config(&self) -> SkillsConfig {
        SkillsConfig {
            beta: self.beta,
            steps: self.stage1_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            log_every: 100,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            alpha: self.alpha,
            eta: self.eta,
            steps: self.stage2_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            r_start: self.r_start,
            r_end: self.r_end,
            decay_steps: self.decay_steps,
            eval_episodes: self.eval_episodes,
            ..Default::default()
        }
    }

    /// Content hash of the fully resolved configuration.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_json().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash over only the fields stage one depends on, so stage-one
    /// artifacts can be shared by every mode under the same config.
    pub fn stage1_hash(&self) -> String {
        let key = serde_json::json!({
            "source_tasks": self.source_tasks,
            "unseen_tasks": self.unseen_tasks,
            "quality": self.quality,
            "hidden_dim": self.hidden_dim,
            "embedding_dim": self.embedding_dim,
            "beta": self.beta,
            "n_skills": self.n_skills,
            "n_heads": self.n_heads,
            "stage1_steps": self.stage1_steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "dataset_episodes": self.dataset_episodes,
            "expert_strength": self.expert_strength,
            "env": [
                self.grid_width, self.grid_height, self.unit_health,
                self.attack_range, self.attack_damage, self.sight_range,
                self.episode_limit as i64,
            ],
        });
        let mut h = Sha256::new();
        h.update(key.to_string().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
