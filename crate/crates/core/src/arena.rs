//! Deterministic cooperative skirmish environment family.
//!
//! A task is a grid battle between a controlled team of allies and a
//! scripted team of enemies, parameterized by team sizes so the same code
//! serves every task in a multi-task set. Observations are entity tokens
//! (one fixed-length token per unit), actions are noop/move/attack, and the
//! team reward is shaped from damage, kills and the win bonus, normalized so
//! a won episode returns exactly 20.
//!
//! Everything is deterministic given (task, seed, action sequence): the only
//! randomness is the placement jitter at reset, and the scripted opponent is
//! a fixed function of the state.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Features per entity token:
/// [rel_x/width, rel_y/height, health/max, is_self, is_ally, is_enemy,
///  chebyshev_dist/sight, visible]
pub const TOKEN_FEATURES: usize = 8;

/// Actions 0..5 are noop and the four moves; 5+j attacks enemy j.
pub const FIXED_ACTIONS: usize = 5;

pub const ACT_NOOP: usize = 0;
pub const ACT_NORTH: usize = 1;
pub const ACT_SOUTH: usize = 2;
pub const ACT_EAST: usize = 3;
pub const ACT_WEST: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub n_allies: usize,
    pub n_enemies: usize,
    pub grid_width: i64,
    pub grid_height: i64,
    pub unit_health: i64,
    pub attack_range: i64,
    pub attack_damage: i64,
    pub sight_range: i64,
    pub episode_limit: usize,
}

impl TaskSpec {
    pub fn new(n_allies: usize, n_enemies: usize) -> Self {
        TaskSpec {
            name: format!("{n_allies}v{n_enemies}"),
            n_allies,
            n_enemies,
            grid_width: 16,
            grid_height: 16,
            unit_health: 10,
            attack_range: 3,
            attack_damage: 2,
            sight_range: 6,
            episode_limit: 60,
        }
    }

    /// Parse a "3v3"-style name.
    pub fn parse(name: &str) -> Result<Self> {
        let (a, e) = name
            .split_once('v')
            .ok_or_else(|| Error::Config(format!("task name '{name}' is not of the form NvM")))?;
        let n_allies: usize = a
            .parse()
            .map_err(|_| Error::Config(format!("bad ally count in task '{name}'")))?;
        let n_enemies: usize = e
            .parse()
            .map_err(|_| Error::Config(format!("bad enemy count in task '{name}'")))?;
        let spec = TaskSpec::new(n_allies, n_enemies);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_allies < 1 || self.n_enemies < 1 {
            return Err(Error::Config("team sizes must be at least 1".into()));
        }
        if self.episode_limit < 1 {
            return Err(Error::Config("episode_limit must be at least 1".into()));
        }
        if self.attack_range > self.sight_range {
            return Err(Error::Config(
                "attack range must not exceed sight range".into(),
            ));
        }
        if self.grid_width < 4 || self.grid_height < 1 {
            return Err(Error::Config("grid too small".into()));
        }
        Ok(())
    }

    pub fn n_entities(&self) -> usize {
        self.n_allies + self.n_enemies
    }

    pub fn n_actions(&self) -> usize {
        FIXED_ACTIONS + self.n_enemies
    }

    /// Normalizer giving a maximum episode return of exactly 20.
    pub fn reward_norm(&self) -> f64 {
        let ne = self.n_enemies as f64;
        (ne * self.unit_health as f64 + 5.0 * ne + 20.0) / 20.0
    }

    pub fn state_len(&self) -> usize {
        4 * self.n_entities()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Unit {
    pub x: i64,
    pub y: i64,
    pub health: i64,
}

impl Unit {
    pub fn alive(&self) -> bool {
        self.health > 0
    }
}

fn chebyshev(a: &Unit, b: &Unit) -> i64 {
    (a.x - b.x).abs().max((a.y - b.y).abs())
}

fn manhattan(a: &Unit, b: &Unit) -> i64 {
    (a.x - b.x).abs() + (a.y - b.y).abs()
}

#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
    pub win: bool,
}

#[derive(Clone, Debug)]
pub struct Env {
    pub task: TaskSpec,
    allies: Vec<Unit>,
    enemies: Vec<Unit>,
    steps: usize,
    done: bool,
    win: bool,
}

impl Env {
    /// Place both teams and return the ready environment. Allies go in the
    /// left quarter of the grid, enemies in the right quarter, rows spread
    /// evenly and jittered by the seeded RNG.
    pub fn reset(task: &TaskSpec, seed: u64) -> Result<Env> {
        task.validate()?;
        let quarter = task.grid_width / 4;
        let capacity = (quarter * task.grid_height) as usize;
        if task.n_allies > capacity || task.n_enemies > capacity {
            return Err(Error::Config(format!(
                "team of {} does not fit in a {}x{} quarter",
                task.n_allies.max(task.n_enemies),
                quarter,
                task.grid_height
            )));
        }
        let mut rng = Rng::new(seed);
        // Rows are spread evenly across the middle band of the grid so a
        // team deploys in mutual-support distance rather than strung across
        // the full map height.
        let band = task.grid_height / 2;
        let band_lo = task.grid_height / 4;
        let place = |n: usize, base_x: i64, lo_x: i64, hi_x: i64, rng: &mut Rng| -> Vec<Unit> {
            (0..n)
                .map(|i| {
                    let y0 = band_lo + ((i as i64 + 1) * band) / (n as i64 + 1);
                    let dy = rng.below(3) as i64 - 1;
                    Unit {
                        x: base_x.clamp(lo_x, hi_x),
                        y: (y0 + dy).clamp(0, task.grid_height - 1),
                        health: task.unit_health,
                    }
                })
                .collect()
        };
        let allies = place(task.n_allies, task.grid_width / 8, 0, quarter - 1, &mut rng);
        let enemies = place(
            task.n_enemies,
            task.grid_width - 1 - task.grid_width / 8,
            task.grid_width - quarter,
            task.grid_width - 1,
            &mut rng,
        );
        Ok(Env {
            task: task.clone(),
            allies,
            enemies,
            steps: 0,
            done: false,
            win: false,
        })
    }

    #[cfg(test)]
    fn with_units(task: &TaskSpec, allies: Vec<Unit>, enemies: Vec<Unit>) -> Env {
        Env {
            task: task.clone(),
            allies,
            enemies,
            steps: 0,
            done: false,
            win: false,
        }
    }

    pub fn allies(&self) -> &[Unit] {
        &self.allies
    }

    pub fn enemies(&self) -> &[Unit] {
        &self.enemies
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn win(&self) -> bool {
        self.win
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Global state: [x/w, y/h, health/max, alive] per unit, allies first.
    pub fn state(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.task.state_len());
        let w = self.task.grid_width as f64;
        let h = self.task.grid_height as f64;
        let hp = self.task.unit_health as f64;
        for u in self.allies.iter().chain(self.enemies.iter()) {
            if u.alive() {
                out.extend_from_slice(&[
                    u.x as f64 / w,
                    u.y as f64 / h,
                    u.health as f64 / hp,
                    1.0,
                ]);
            } else {
                out.extend_from_slice(&[0.0, 0.0, 0.0, 0.0]);
            }
        }
        out
    }

    /// Entity-token observation for one agent: self token first, then the
    /// other allies by index, then enemies by index. Dead or out-of-sight
    /// units produce all-zero tokens; a dead agent observes nothing.
    pub fn observation(&self, agent: usize) -> Vec<f64> {
        let n_tok = self.task.n_entities();
        let mut out = vec![0.0; n_tok * TOKEN_FEATURES];
        let me = &self.allies[agent];
        if !me.alive() {
            return out;
        }
        let w = self.task.grid_width as f64;
        let h = self.task.grid_height as f64;
        let hp = self.task.unit_health as f64;
        let sight = self.task.sight_range;
        let mut write = |slot: usize, u: &Unit, is_self: bool, is_ally: bool| {
            let dist = chebyshev(me, u);
            if !u.alive() || dist > sight {
                return;
            }
            let t = &mut out[slot * TOKEN_FEATURES..(slot + 1) * TOKEN_FEATURES];
            t[0] = (u.x - me.x) as f64 / w;
            t[1] = (u.y - me.y) as f64 / h;
            t[2] = u.health as f64 / hp;
            t[3] = if is_self { 1.0 } else { 0.0 };
            t[4] = if is_ally && !is_self { 1.0 } else { 0.0 };
            t[5] = if is_ally { 0.0 } else { 1.0 };
            t[6] = dist as f64 / sight as f64;
            t[7] = 1.0;
        };
        write(0, me, true, true);
        let mut slot = 1;
        for (j, u) in self.allies.iter().enumerate() {
            if j == agent {
                continue;
            }
            write(slot, u, false, true);
            slot += 1;
        }
        for u in &self.enemies {
            write(slot, u, false, false);
            slot += 1;
        }
        out
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.task.n_allies).map(|i| self.observation(i)).collect()
    }

    /// Valid actions for one agent. Dead agents can only noop; attack j
    /// requires enemy j alive and within attack range (attack range never
    /// exceeds sight, so in-range implies visible).
    pub fn action_mask(&self, agent: usize) -> Vec<bool> {
        let mut mask = vec![false; self.task.n_actions()];
        mask[ACT_NOOP] = true;
        let me = &self.allies[agent];
        if !me.alive() {
            return mask;
        }
        mask[ACT_NORTH] = true;
        mask[ACT_SOUTH] = true;
        mask[ACT_EAST] = true;
        mask[ACT_WEST] = true;
        for (j, e) in self.enemies.iter().enumerate() {
            if e.alive() && chebyshev(me, e) <= self.task.attack_range {
                mask[FIXED_ACTIONS + j] = true;
            }
        }
        mask
    }

    pub fn action_masks(&self) -> Vec<Vec<bool>> {
        (0..self.task.n_allies).map(|i| self.action_mask(i)).collect()
    }

    /// Advance one step. Resolution order: ally moves, simultaneous ally
    /// attacks, scripted enemy phase, then deaths. Every submitted action
    /// must be permitted by the current mask.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Contract("step on a finished episode".into()));
        }
        // Every decision this step — ally actions were chosen by the caller
        // from the same view — is based on the step-start state; phases only
        // order the resolution.
        let ally_snapshot = self.allies.clone();
        let enemy_snapshot = self.enemies.clone();
        if actions.len() != self.task.n_allies {
            return Err(Error::Contract(format!(
                "expected {} actions, got {}",
                self.task.n_allies,
                actions.len()
            )));
        }
        for (i, &a) in actions.iter().enumerate() {
            let mask = self.action_mask(i);
            if a >= mask.len() || !mask[a] {
                return Err(Error::Contract(format!(
                    "agent {i} submitted masked action {a}"
                )));
            }
        }

        // Phase 1: ally moves, clamped to the grid; stacking is allowed.
        for (i, &a) in actions.iter().enumerate() {
            let me = &mut self.allies[i];
            if !me.alive() {
                continue;
            }
            match a {
                ACT_NORTH => me.y = (me.y - 1).max(0),
                ACT_SOUTH => me.y = (me.y + 1).min(self.task.grid_height - 1),
                ACT_EAST => me.x = (me.x + 1).min(self.task.grid_width - 1),
                ACT_WEST => me.x = (me.x - 1).max(0),
                _ => {}
            }
        }

        // Phase 2: ally attacks land simultaneously.
        let mut incoming = vec![0i64; self.task.n_enemies];
        for (i, &a) in actions.iter().enumerate() {
            if self.allies[i].alive() && a >= FIXED_ACTIONS {
                incoming[a - FIXED_ACTIONS] += self.task.attack_damage;
            }
        }
        let mut damage_dealt = 0i64;
        let mut kills = 0usize;
        for (j, dmg) in incoming.iter().enumerate() {
            if *dmg > 0 {
                let e = &mut self.enemies[j];
                let effective = (*dmg).min(e.health);
                damage_dealt += effective;
                e.health -= effective;
                if effective > 0 && e.health == 0 {
                    kills += 1;
                }
            }
        }

        // Phase 3: scripted enemies. Decisions come from the step-start
        // snapshot; an enemy killed in phase 2 loses its action, and the
        // surviving moves and attacks apply simultaneously.
        enum EnemyAct {
            Stay,
            MoveTo(i64, i64),
            Attack(usize),
        }
        // The built-in opponent reacts at half rate: it acts on even steps
        // and holds on odd ones. Trained or scripted controllers act every
        // step, which is the edge that makes competent play dominant.
        let enemy_turn = self.steps % 2 == 0;
        let mut decisions = Vec::with_capacity(self.task.n_enemies);
        for (j, e) in enemy_snapshot.iter().enumerate() {
            if !enemy_turn || !e.alive() || !self.enemies[j].alive() {
                decisions.push(EnemyAct::Stay);
                continue;
            }
            // Fire spreads: in-range allies sorted by (distance, index), and
            // enemy j takes the (j mod count)-th. The built-in opponent does
            // not concentrate fire; that gap is what a competent controller
            // exploits.
            let mut in_range: Vec<(i64, usize)> = ally_snapshot
                .iter()
                .enumerate()
                .filter(|(_, a)| a.alive() && chebyshev(e, a) <= self.task.attack_range)
                .map(|(i, a)| (chebyshev(e, a), i))
                .collect();
            if !in_range.is_empty() {
                in_range.sort();
                let pick = in_range[j % in_range.len()].1;
                decisions.push(EnemyAct::Attack(pick));
                continue;
            }
            // Otherwise close on the nearest living ally.
            let mut nearest: Option<usize> = None;
            for (i, a) in ally_snapshot.iter().enumerate() {
                if a.alive() {
                    let better = match nearest {
                        None => true,
                        Some(n) => chebyshev(e, a) < chebyshev(e, &ally_snapshot[n]),
                    };
                    if better {
                        nearest = Some(i);
                    }
                }
            }
            match nearest {
                Some(n) => {
                    let goal = ally_snapshot[n];
                    match approach_move(e, &goal, self.task.grid_width, self.task.grid_height) {
                        Some((x, y)) => decisions.push(EnemyAct::MoveTo(x, y)),
                        None => decisions.push(EnemyAct::Stay),
                    }
                }
                None => decisions.push(EnemyAct::Stay),
            }
        }
        for (j, d) in decisions.iter().enumerate() {
            match d {
                EnemyAct::Stay => {}
                EnemyAct::MoveTo(x, y) => {
                    self.enemies[j].x = *x;
                    self.enemies[j].y = *y;
                }
                EnemyAct::Attack(t) => {
                    let a = &mut self.allies[*t];
                    a.health = (a.health - self.task.attack_damage).max(0);
                }
            }
        }

        // Phase 4: deaths are already reflected in clamped health; settle
        // the episode flags and reward.
        self.steps += 1;
        let enemies_alive = self.enemies.iter().any(Unit::alive);
        let allies_alive = self.allies.iter().any(Unit::alive);
        let win_now = !enemies_alive;
        let done = win_now || !allies_alive || self.steps >= self.task.episode_limit;
        self.done = done;
        self.win = win_now;
        let reward = (damage_dealt as f64
            + 5.0 * kills as f64
            + if win_now { 20.0 } else { 0.0 })
            / self.task.reward_norm();
        Ok(StepResult {
            reward,
            done,
            win: win_now,
        })
    }
}

/// Best single-axis move toward `goal`: minimizes Chebyshev distance first,
/// Manhattan distance second (so diagonal standoffs still close), ties
/// broken in N, S, E, W order. None when no move improves on staying.
fn approach_move(from: &Unit, goal: &Unit, width: i64, height: i64) -> Option<(i64, i64)> {
    let candidates = [
        (from.x, (from.y - 1).max(0)),
        (from.x, (from.y + 1).min(height - 1)),
        ((from.x + 1).min(width - 1), from.y),
        ((from.x - 1).max(0), from.y),
    ];
    let score = |x: i64, y: i64| {
        let u = Unit { x, y, health: 1 };
        (chebyshev(&u, goal), manhattan(&u, goal))
    };
    let stay = score(from.x, from.y);
    let mut best: Option<((i64, i64), (i64, i64))> = None;
    for (x, y) in candidates {
        let s = score(x, y);
        if s < stay && best.as_ref().map_or(true, |(bs, _)| s < *bs) {
            best = Some((s, (x, y)));
        }
    }
    best.map(|(_, pos)| pos)
}

/// Parametric scripted team controller: with probability `strength` each
/// agent plays the greedy rule (attack the weakest in-range enemy, else
/// approach the nearest enemy), otherwise a uniformly random valid action.
pub struct ScriptedController {
    pub strength: f64,
    rng: Rng,
}

impl ScriptedController {
    pub fn new(strength: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::Config(format!(
                "controller strength {strength} outside [0, 1]"
            )));
        }
        Ok(ScriptedController {
            strength,
            rng: Rng::new(seed),
        })
    }

    pub fn act(&mut self, env: &Env) -> Vec<usize> {
        (0..env.task.n_allies)
            .map(|i| self.act_for(env, i))
            .collect()
    }

    fn act_for(&mut self, env: &Env, agent: usize) -> usize {
        let me = &env.allies()[agent];
        if !me.alive() {
            return ACT_NOOP;
        }
        if self.rng.f64() < self.strength {
            self.greedy(env, agent)
        } else {
            let mask = env.action_mask(agent);
            let valid: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
            *self.rng.choose(&valid)
        }
    }

    fn greedy(&self, env: &Env, agent: usize) -> usize {
        let me = &env.allies()[agent];
        let mut target: Option<usize> = None;
        for (j, e) in env.enemies().iter().enumerate() {
            if e.alive() && chebyshev(me, e) <= env.task.attack_range {
                let better = match target {
                    None => true,
                    Some(t) => e.health < env.enemies()[t].health,
                };
                if better {
                    target = Some(j);
                }
            }
        }
        if let Some(j) = target {
            return FIXED_ACTIONS + j;
        }
        let mut nearest: Option<usize> = None;
        for (j, e) in env.enemies().iter().enumerate() {
            if e.alive() {
                let better = match nearest {
                    None => true,
                    Some(n) => chebyshev(me, e) < chebyshev(me, &env.enemies()[n]),
                };
                if better {
                    nearest = Some(j);
                }
            }
        }
        match nearest {
            Some(j) => {
                let goal = env.enemies()[j];
                match approach_move(me, &goal, env.task.grid_width, env.task.grid_height) {
                    Some((x, y)) => {
                        if y < me.y {
                            ACT_NORTH
                        } else if y > me.y {
                            ACT_SOUTH
                        } else if x > me.x {
                            ACT_EAST
                        } else {
                            ACT_WEST
                        }
                    }
                    None => ACT_NOOP,
                }
            }
            None => ACT_NOOP,
        }
    }
}
