//! Trajectory datasets, the online replay buffer, and hybrid sampling.
//!
//! Offline datasets are NDJSON files, one episode object per line. The
//! online buffer is a fixed-capacity FIFO ring of complete episodes. Each
//! training batch draws `round(R_h * B)` episodes from the offline pool and
//! the rest from the online buffer, where the hybrid ratio `R_h` decays
//! linearly over training.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::arena::{Env, ScriptedController, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub state: Vec<f64>,
    /// Per-agent flattened entity tokens.
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    pub reward: f64,
    pub done: bool,
    pub win: bool,
    /// Executed skill per agent; present only for episodes collected online.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skills: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub task: String,
    pub quality: String,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    pub fn n_agents(&self) -> usize {
        self.steps.first().map_or(0, |s| s.actions.len())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn win(&self) -> bool {
        self.steps.last().is_some_and(|s| s.win)
    }

    pub fn episode_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn has_skills(&self) -> bool {
        self.steps.iter().all(|s| s.skills.is_some())
    }

    /// Structural checks: non-empty, consistent agent counts, and done set
    /// exactly on the final step.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Data("episode has no steps".into()));
        }
        let n = self.n_agents();
        for (t, s) in self.steps.iter().enumerate() {
            if s.obs.len() != n || s.actions.len() != n || s.masks.len() != n {
                return Err(Error::Data(format!(
                    "step {t}: inconsistent agent arrays (expected {n})"
                )));
            }
            if let Some(sk) = &s.skills {
                if sk.len() != n {
                    return Err(Error::Data(format!("step {t}: skills length != {n}")));
                }
            }
            let is_last = t + 1 == self.steps.len();
            if s.done != is_last {
                return Err(Error::Data(format!(
                    "step {t}: done={} but episode has {} steps",
                    s.done,
                    self.steps.len()
                )));
            }
        }
        Ok(())
    }
}

/// A multi-task offline dataset: episodes spanning one or more source tasks.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub tasks: Vec<String>,
    pub quality: String,
    pub episodes: Vec<Arc<EpisodeRecord>>,
}

impl Dataset {
    pub fn new(tasks: Vec<String>, quality: &str) -> Self {
        Dataset {
            tasks,
            quality: quality.to_string(),
            episodes: Vec::new(),
        }
    }

    pub fn per_task_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.episodes {
            *counts.entry(e.task.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn extend_validated(&mut self, episodes: Vec<EpisodeRecord>) -> Result<()> {
        for e in episodes {
            if !self.tasks.contains(&e.task) {
                return Err(Error::Data(format!(
                    "episode task '{}' not in declared task list {:?}",
                    e.task, self.tasks
                )));
            }
            e.validate()?;
            self.episodes.push(Arc::new(e));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenSummary {
    pub task: String,
    pub quality: String,
    pub strength: f64,
    pub episodes: usize,
    pub win_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

/// Roll out `n_episodes` complete episodes with a scripted controller of the
/// given strength. Fully deterministic in `seed`.
pub fn generate_dataset(
    task: &TaskSpec,
    strength: f64,
    quality: &str,
    n_episodes: usize,
    seed: u64,
) -> Result<(Vec<EpisodeRecord>, GenSummary)> {
    if n_episodes < 1 {
        return Err(Error::Contract("n_episodes must be at least 1".into()));
    }
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut wins = 0usize;
    let mut returns = 0.0;
    let mut lengths = 0usize;
    for ep in 0..n_episodes {
        let mut env = Env::reset(task, seed.wrapping_add(ep as u64))?;
        let mut ctrl =
            ScriptedController::new(strength, seed ^ (ep as u64).wrapping_mul(0x9e37))?;
        let mut steps = Vec::new();
        loop {
            let state = env.state();
            let obs = env.observations();
            let masks = env.action_masks();
            let actions = ctrl.act(&env);
            let r = env.step(&actions)?;
            steps.push(StepRecord {
                state,
                obs,
                actions,
                masks,
                reward: r.reward,
                done: r.done,
                win: r.win,
                skills: None,
            });
            if r.done {
                break;
            }
        }
        let rec = EpisodeRecord {
            task: task.name.clone(),
            quality: quality.to_string(),
            steps,
        };
        if rec.win() {
            wins += 1;
        }
        returns += rec.episode_return();
        lengths += rec.len();
        episodes.push(rec);
    }
    let summary = GenSummary {
        task: task.name.clone(),
        quality: quality.to_string(),
        strength,
        episodes: n_episodes,
        win_rate: wins as f64 / n_episodes as f64,
        mean_return: returns / n_episodes as f64,
        mean_length: lengths as f64 / n_episodes as f64,
    };
    Ok((episodes, summary))
}

/// Write episodes as NDJSON, one per line. Floats go through the shortest
/// round-trip encoding, so a reload reproduces them bit for bit.
pub fn save_dataset(episodes: &[EpisodeRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, e) in episodes.iter().enumerate() {
        serde_json::to_writer(&mut f, e)
            .map_err(|e| Error::Data(format!("serialize episode {i}: {e}")))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Read an NDJSON dataset fragment. Parse failures name the line; an empty
/// file is an empty dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}: line {}: {e}", path.display(), lineno + 1))
        })?;
        rec.validate()
            .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Fixed-capacity FIFO buffer of complete online episodes.
#[derive(Clone, Debug)]
pub struct OnlineBuffer {
    episodes: std::collections::VecDeque<Arc<EpisodeRecord>>,
    capacity: usize,
    pub inserted: u64,
}

pub const DEFAULT_BUFFER_CAPACITY: usize = 2000;

impl OnlineBuffer {
    pub fn new(capacity: usize) -> Self {
        OnlineBuffer {
            episodes: std::collections::VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<EpisodeRecord>> {
        self.episodes.iter()
    }

    /// Append a complete episode carrying executed-skill labels; evicts the
    /// oldest episode once at capacity.
    pub fn push(&mut self, episode: EpisodeRecord) -> Result<()> {
        if !episode.has_skills() {
            return Err(Error::Contract(
                "online episode is missing executed-skill labels".into(),
            ));
        }
        episode.validate()?;
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(Arc::new(episode));
        self.inserted += 1;
        Ok(())
    }

    pub fn get(&self, i: usize) -> &Arc<EpisodeRecord> {
        &self.episodes[i]
    }
}

/// Linearly decaying hybrid ratio: starts at `r_start`, reaches `r_end`
/// after `decay_steps`, constant afterwards.
pub fn hybrid_ratio(t: u64, r_start: f64, r_end: f64, decay_steps: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r_end) || !(0.0..=1.0).contains(&r_start) || r_end > r_start {
        return Err(Error::Config(format!(
            "hybrid ratio bounds must satisfy 0 <= r_end <= r_start <= 1, got {r_start}, {r_end}"
        )));
    }
    if decay_steps < 1 {
        return Err(Error::Config("decay_steps must be at least 1".into()));
    }
    Ok(r_end.max(r_start - (r_start - r_end) * t as f64 / decay_steps as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Offline,
    Online,
}

/// A training batch of episodes with per-record origin flags.
pub struct HybridBatch {
    pub entries: Vec<(Arc<EpisodeRecord>, Origin)>,
    pub n_offline: usize,
    pub n_online: usize,
}

/// Compose a batch of `batch_size` episodes: `round(r_h * B)` offline (round
/// half away from zero, clamped to [0, B]) and the rest online, drawn
/// uniformly with replacement. While the online buffer holds fewer episodes
/// than requested, the shortfall is backfilled from the offline pool.
pub fn sample_hybrid(
    offline: &Dataset,
    online: &OnlineBuffer,
    batch_size: usize,
    r_h: f64,
    rng: &mut Rng,
) -> Result<HybridBatch> {
    if batch_size < 1 {
        return Err(Error::Contract("batch_size must be at least 1".into()));
    }
    if offline.episodes.is_empty() && online.is_empty() {
        return Err(Error::Data("both episode pools are empty".into()));
    }
    let n_offline = ((r_h * batch_size as f64).round() as usize).min(batch_size);
    let mut n_online = batch_size - n_offline;
    let mut backfilled = 0usize;
    if online.len() < n_online && !offline.episodes.is_empty() {
        backfilled = n_online - online.len();
        n_online = online.len();
    }
    if offline.episodes.is_empty() && n_offline > 0 {
        return Err(Error::Data(
            "offline pool empty but offline draws requested".into(),
        ));
    }
    let mut entries = Vec::with_capacity(batch_size);
    for _ in 0..(n_offline + backfilled) {
        let e = &offline.episodes[rng.below(offline.episodes.len())];
        entries.push((Arc::clone(e), Origin::Offline));
    }
    for _ in 0..n_online {
        let e = online.get(rng.below(online.len()));
        entries.push((Arc::clone(e), Origin::Online));
    }
    Ok(HybridBatch {
        entries,
        n_offline: n_offline + backfilled,
        n_online,
    })
}
