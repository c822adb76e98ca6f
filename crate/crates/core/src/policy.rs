//! Stage two: hybrid high-level policy learning over discovered skills.
//!
//! Per-agent value networks score skills from local histories; a monotone
//! mixing network (hypernetworks conditioned on an attention-pooled state
//! embedding) combines them into a joint value trained by TD with target
//! networks. A local observation encoder is pulled toward the frozen global
//! encoder by a consistency loss, and a conservative regularizer — weighted
//! by the current hybrid ratio — penalizes skill values the data never
//! chose. Batches mix offline and online episodes per the decaying ratio;
//! one fresh episode is collected per gradient step.
//!
//! The value trunk starts from the stage-one decoder trunk and carries the
//! decoder head with it, so TD updates keep refining the representation the
//! decoder acts through. Execution is greedy: pick the skill with the best
//! individual value, decode it against the action mask.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::arena::{Env, TaskSpec};
use crate::data::{
    hybrid_ratio, sample_hybrid, Dataset, EpisodeRecord, OnlineBuffer, Origin, StepRecord,
};
use crate::error::{Error, Result};
use crate::nets::{
    argmax, batched_linear, decompose_state, encoder_forward, init_local_encoder, init_value,
    linear_row, masked_argmax, mix_with_weights, mlp_row, pad_mask, rnn_step_row,
    stream_features, trunk_states_plain, NetDims,
};
use crate::num::optim::TapeParams;
use crate::num::tape::NO_ROW;
use crate::num::{adam_step, AdamHyper, AdamState, ParamBundle, Tape, Tensor, TensorId};
use crate::rng::Rng;
use crate::skills::agent_alive;

pub const DEFAULT_STAGE2_STEPS: u64 = 35_000;

#[derive(Clone, Debug)]
pub struct PolicyConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub eta: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub r_start: f64,
    pub r_end: f64,
    pub decay_steps: u64,
    pub target_sync: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay: u64,
    pub buffer_capacity: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            gamma: 0.99,
            alpha: 5.0,
            eta: 5.0,
            steps: DEFAULT_STAGE2_STEPS,
            batch_size: 32,
            lr: 0.0005,
            r_start: 1.0,
            r_end: 0.1,
            decay_steps: 5000,
            target_sync: 200,
            eval_every: 500,
            eval_episodes: 32,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay: 5000,
            buffer_capacity: crate::data::DEFAULT_BUFFER_CAPACITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RatioMode {
    Dynamic,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CqlMode {
    Dynamic,
    Fixed,
    None,
}

/// The switches distinguishing the training variants. Everything else is
/// identical across modes.
#[derive(Clone, Copy, Debug)]
pub struct ModeFlags {
    pub ratio: RatioMode,
    pub cql: CqlMode,
    /// When false, execution decodes through the frozen stage-one decoder
    /// instead of the live value trunk.
    pub refine_decoder: bool,
    /// When false, no online episodes are collected (pure offline).
    pub collect_online: bool,
}

impl ModeFlags {
    pub fn hybrid() -> Self {
        ModeFlags {
            ratio: RatioMode::Dynamic,
            cql: CqlMode::Dynamic,
            refine_decoder: true,
            collect_online: true,
        }
    }

    pub fn offline_only() -> Self {
        ModeFlags {
            ratio: RatioMode::Fixed(1.0),
            cql: CqlMode::Dynamic,
            refine_decoder: true,
            collect_online: false,
        }
    }

    pub fn online_only() -> Self {
        ModeFlags {
            ratio: RatioMode::Fixed(0.0),
            cql: CqlMode::None,
            refine_decoder: true,
            collect_online: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricRow {
    pub step: u64,
    pub r_h: f64,
    pub epsilon: f64,
    pub l_total: f64,
    pub l_td: f64,
    pub l_c: f64,
    pub l_cql: f64,
    pub eval_task: Option<String>,
    pub eval_win_rate: Option<f64>,
    pub eval_return: Option<f64>,
}

// ── frozen-encoder caches ────────────────────────────────────────────

/// Per-episode quantities under the frozen stage-one encoder: skill labels,
/// global log posteriors (consistency targets), and action-free pooled state
/// embeddings (mixer conditioning).
pub struct EpisodeAux {
    pub labels: Vec<Vec<usize>>,
    pub global_log_post: Vec<Vec<Vec<f64>>>,
    pub state_emb: Vec<Vec<f64>>,
}

pub fn build_aux(
    ep: &EpisodeRecord,
    stage1: &ParamBundle,
    task: &TaskSpec,
    dims: &NetDims,
) -> Result<EpisodeAux> {
    let n_tok = task.n_entities();
    let mut labels = Vec::with_capacity(ep.len());
    let mut global_log_post = Vec::with_capacity(ep.len());
    let mut state_emb = Vec::with_capacity(ep.len());
    for step in &ep.steps {
        let with_actions = decompose_state(&step.state, Some(&step.actions), task, dims)?;
        let enc = encoder_forward(stage1, dims, &with_actions, n_tok, task.n_allies);
        let step_labels = match &step.skills {
            Some(recorded) => recorded.clone(),
            None => enc.log_posteriors.iter().map(|lp| argmax(lp)).collect(),
        };
        labels.push(step_labels);
        global_log_post.push(enc.log_posteriors);
        let state_only = decompose_state(&step.state, None, task, dims)?;
        let pooled = encoder_forward(stage1, dims, &state_only, n_tok, 0).pooled;
        state_emb.push(pooled);
    }
    Ok(EpisodeAux {
        labels,
        global_log_post,
        state_emb,
    })
}

/// Cache of per-episode aux data. Keys are episode addresses, but each
/// entry holds a Weak handle that both verifies identity on lookup and, by
/// keeping the allocation's control block alive, prevents a recycled
/// address from ever aliasing a dead entry.
#[derive(Default)]
pub struct AuxCache {
    map: HashMap<usize, (std::sync::Weak<EpisodeRecord>, Arc<EpisodeAux>)>,
}

impl AuxCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(
        &mut self,
        ep: &Arc<EpisodeRecord>,
        stage1: &ParamBundle,
        task: &TaskSpec,
        dims: &NetDims,
    ) -> Result<Arc<EpisodeAux>> {
        let key = Arc::as_ptr(ep) as usize;
        if let Some((weak, aux)) = self.map.get(&key) {
            if let Some(live) = weak.upgrade() {
                if Arc::ptr_eq(&live, ep) {
                    return Ok(Arc::clone(aux));
                }
            }
        }
        let aux = Arc::new(build_aux(ep, stage1, task, dims)?);
        self.map
            .insert(key, (Arc::downgrade(ep), Arc::clone(&aux)));
        Ok(aux)
    }

    /// Drop entries whose episode has left the pools.
    pub fn prune(&mut self, _offline: &Dataset, _online: &OnlineBuffer) {
        self.map.retain(|_, (weak, _)| weak.upgrade().is_some());
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

// ── batched losses ───────────────────────────────────────────────────

/// Host-side layout of one stage-two training batch.
///
/// Agent rows are (episode, agent) pairs sorted by episode length
/// descending; time-major stacking gives each (t, row) a "ts" index.
/// Episode rows ("est" indices) are the per-(episode, t) grid for the mixer.
pub struct PolicyBatch {
    pub streams: Tensor,
    pub active: Vec<usize>,
    labels_ts: Vec<usize>,
    actions_ts: Vec<usize>,
    masks_ts: Vec<bool>,
    alive_ts: Vec<f64>,
    n_alive: f64,
    /// Per-ts-row global log posterior (consistency target).
    global_lp_ts: Tensor,
    /// Per-est-row pooled state embedding.
    emb_est: Tensor,
    /// Per-est-row TD target, computed against the frozen target bundle.
    y_est: Tensor,
    /// Per agent capacity slot, per est row: the ts index or NO_ROW.
    agent_ts_of_est: Vec<Vec<usize>>,
    pub n_ts: usize,
    pub n_est: usize,
}

impl PolicyBatch {
    pub fn build(
        entries: &[(Arc<EpisodeRecord>, Origin)],
        auxes: &[Arc<EpisodeAux>],
        tasks: &BTreeMap<String, TaskSpec>,
        dims: &NetDims,
        target: &ParamBundle,
        gamma: f64,
    ) -> Result<PolicyBatch> {
        let si = dims.stream_input();
        let nz = dims.n_skills;
        // Sort episodes by length, descending.
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(entries[i].0.len()));
        let max_len = entries[order[0]].0.len();
        // Agent rows grouped by sorted episode; per sorted position, where
        // its rows start.
        let mut row_episode: Vec<usize> = Vec::new();
        let mut row_agent: Vec<usize> = Vec::new();
        let mut row_offset_of_pos = Vec::with_capacity(order.len());
        for &e in &order {
            row_offset_of_pos.push(row_episode.len());
            for i in 0..entries[e].0.n_agents() {
                row_episode.push(e);
                row_agent.push(i);
            }
        }
        // Active counts per t, for agent rows and episode rows.
        let mut active = Vec::with_capacity(max_len);
        let mut active_ep = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let eps_active = order
                .iter()
                .take_while(|&&e| entries[e].0.len() > t)
                .count();
            active_ep.push(eps_active);
            let rows_active: usize = order
                .iter()
                .take(eps_active)
                .map(|&e| entries[e].0.n_agents())
                .sum();
            active.push(rows_active);
        }
        let mut ts_offset = Vec::with_capacity(max_len);
        let mut acc = 0;
        for &a in &active {
            ts_offset.push(acc);
            acc += a;
        }
        let n_ts = acc;
        let mut est_offset = Vec::with_capacity(max_len);
        let mut acc_e = 0;
        for &a in &active_ep {
            est_offset.push(acc_e);
            acc_e += a;
        }
        let n_est = acc_e;

        // Streams, labels, targets for reconstruction, aliveness,
        // consistency targets.
        let mut streams = vec![0.0; n_ts * si];
        let mut labels_ts = vec![0usize; n_ts];
        let mut actions_ts = vec![0usize; n_ts];
        let mut masks_ts = vec![false; n_ts * dims.max_actions()];
        let mut alive_ts = vec![0.0; n_ts];
        let mut global_lp = vec![0.0; n_ts * nz];
        for t in 0..max_len {
            for r in 0..active[t] {
                let e = row_episode[r];
                let (ep, _) = &entries[e];
                let i = row_agent[r];
                let task = tasks
                    .get(&ep.task)
                    .ok_or_else(|| Error::Data(format!("unknown task '{}'", ep.task)))?;
                let ts = ts_offset[t] + r;
                let prev = (t > 0).then(|| ep.steps[t - 1].actions[i]);
                stream_features(
                    &ep.steps[t].obs[i],
                    prev,
                    task,
                    dims,
                    &mut streams[ts * si..(ts + 1) * si],
                );
                let aux = &auxes[e];
                labels_ts[ts] = aux.labels[t][i];
                actions_ts[ts] = ep.steps[t].actions[i];
                let padded = pad_mask(&ep.steps[t].masks[i], dims);
                masks_ts[ts * dims.max_actions()..(ts + 1) * dims.max_actions()]
                    .copy_from_slice(&padded);
                alive_ts[ts] = if agent_alive(ep, t, i) { 1.0 } else { 0.0 };
                global_lp[ts * nz..(ts + 1) * nz]
                    .copy_from_slice(&aux.global_log_post[t][i]);
            }
        }
        let n_alive: f64 = alive_ts.iter().sum();
        if n_alive == 0.0 {
            return Err(Error::Data("batch has no living agent steps".into()));
        }

        // Mixer-side tensors and the agent-slot gather map.
        let mut emb_est = vec![0.0; n_est * dims.embed];
        let mut agent_ts_of_est = vec![vec![NO_ROW; n_est]; dims.max_allies];
        for t in 0..max_len {
            for p in 0..active_ep[t] {
                let e = order[p];
                let (ep, _) = &entries[e];
                let est = est_offset[t] + p;
                emb_est[est * dims.embed..(est + 1) * dims.embed]
                    .copy_from_slice(&auxes[e].state_emb[t]);
                for i in 0..ep.n_agents() {
                    agent_ts_of_est[i][est] = ts_offset[t] + row_offset_of_pos[p] + i;
                }
            }
        }

        // TD targets under the frozen target parameters: greedy per-agent
        // skill maxima mixed at the next step. Terminal steps contribute
        // the reward alone. All network passes are batched.
        let h_target =
            trunk_states_plain(target, "val.trunk", &streams, &active, si, dims.hidden);
        let q_target = batched_linear(
            target.get("val.qhead.w"),
            target.get("val.qhead.b"),
            &h_target,
            n_ts,
        );
        let hyp = |name: &str| -> Vec<f64> {
            batched_linear(
                target.get(&format!("{name}.w")),
                target.get(&format!("{name}.b")),
                &emb_est,
                n_est,
            )
        };
        let (w1_all, b1_all, w2_all, b2_all) =
            (hyp("mix.w1"), hyp("mix.b1"), hyp("mix.w2"), hyp("mix.b2"));
        let mh = dims.mix_hidden;
        let mut y_est = vec![0.0; n_est];
        for t in 0..max_len {
            for p in 0..active_ep[t] {
                let e = order[p];
                let (ep, _) = &entries[e];
                let est = est_offset[t] + p;
                let step = &ep.steps[t];
                let mut y = step.reward;
                if !step.done {
                    let t1 = t + 1;
                    let est1 = est_offset[t1] + p;
                    let mut q_next = Vec::with_capacity(ep.n_agents());
                    for i in 0..ep.n_agents() {
                        let ts1 = ts_offset[t1] + row_offset_of_pos[p] + i;
                        let qs = &q_target[ts1 * nz..(ts1 + 1) * nz];
                        q_next.push(qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                    }
                    let qtot_next = mix_with_weights(
                        &q_next,
                        &w1_all[est1 * dims.max_allies * mh..(est1 + 1) * dims.max_allies * mh],
                        &b1_all[est1 * mh..(est1 + 1) * mh],
                        &w2_all[est1 * mh..(est1 + 1) * mh],
                        b2_all[est1],
                    );
                    y += gamma * qtot_next;
                }
                y_est[est] = y;
            }
        }

        Ok(PolicyBatch {
            streams: Tensor::new(vec![n_ts, si], streams)?,
            active,
            labels_ts,
            actions_ts,
            masks_ts,
            alive_ts,
            n_alive,
            global_lp_ts: Tensor::new(vec![n_ts, nz], global_lp)?,
            emb_est: Tensor::new(vec![n_est, dims.embed], emb_est)?,
            y_est: Tensor::new(vec![n_est, 1], y_est)?,
            agent_ts_of_est,
            n_ts,
            n_est,
        })
    }
}

/// Recurrent trunk over the batch streams, keeping every timestep's hidden
/// state (time-major, aligned with ts indices).
pub fn trunk_all_states_on_tape(
    tape: &mut Tape,
    params: &TapeParams,
    prefix: &str,
    streams: TensorId,
    active: &[usize],
) -> Result<TensorId> {
    let wh = params.id(&format!("{prefix}.wh"));
    let xp = tape.matmul(streams, params.id(&format!("{prefix}.wx")))?;
    let xp = tape.add_row(xp, params.id(&format!("{prefix}.b")))?;
    let mut states = Vec::with_capacity(active.len());
    let mut h_prev: Option<TensorId> = None;
    let mut offset = 0;
    for &n_active in active {
        let xj = tape.slice_rows(xp, offset, n_active)?;
        offset += n_active;
        let pre = match h_prev {
            None => xj,
            Some(h) => {
                let ha = tape.slice_rows(h, 0, n_active)?;
                let mm = tape.matmul(ha, wh)?;
                tape.add(xj, mm)?
            }
        };
        let hj = tape.tanh(pre);
        states.push(hj);
        h_prev = Some(hj);
    }
    tape.concat_rows(&states)
}

pub struct StageTwoLosses {
    /// The optimized scalar: the composite policy loss plus, when decoder
    /// refinement is on, the reconstruction term for the decoder (a
    /// disjoint parameter set, so the composite's gradients are untouched).
    pub objective: TensorId,
    /// The composite policy loss exactly as defined: TD + alpha *
    /// consistency + weighted conservative term.
    pub total: TensorId,
    pub td: TensorId,
    pub consistency: TensorId,
    pub cql: Option<TensorId>,
    /// Decoder reconstruction term (refinement), when enabled.
    pub reconstruction: Option<TensorId>,
    /// Mixed joint value per (episode, t) row, for diagnostics and tests.
    pub qtot: TensorId,
}

/// All stage-two loss terms on one tape. `cql_weight` is the coefficient on
/// the conservative term inside the total (already including the ratio
/// under the dynamic scheme); `None` skips the term entirely. With `refine`
/// the action decoder additionally trains to reconstruct the batch actions
/// conditioned on the labeled skills; its parameters are disjoint from the
/// composite's, so the composite and its gradients are identical either
/// way.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    policy: &TapeParams,
    batch: &PolicyBatch,
    dims: &NetDims,
    alpha: f64,
    cql_weight: Option<f64>,
    refine: bool,
) -> Result<StageTwoLosses> {
    let nz = dims.n_skills;
    let streams = tape.constant(batch.streams.clone());

    // Individual skill values along the whole batch.
    let h_val = trunk_all_states_on_tape(tape, policy, "val.trunk", streams, &batch.active)?;
    let q_all = tape.matmul(h_val, policy.id("val.qhead.w"))?;
    let q_all = tape.add_row(q_all, policy.id("val.qhead.b"))?;
    let q_chosen = tape.select_col_per_row(q_all, batch.labels_ts.clone())?;

    // Monotone mixing via hypernetworks on the pooled state embedding.
    let emb = tape.constant(batch.emb_est.clone());
    let mh = dims.mix_hidden;
    let w1 = tape.matmul(emb, policy.id("mix.w1.w"))?;
    let w1 = tape.add_row(w1, policy.id("mix.w1.b"))?;
    let w1 = tape.abs(w1);
    let b1 = tape.matmul(emb, policy.id("mix.b1.w"))?;
    let b1 = tape.add_row(b1, policy.id("mix.b1.b"))?;
    let w2 = tape.matmul(emb, policy.id("mix.w2.w"))?;
    let w2 = tape.add_row(w2, policy.id("mix.w2.b"))?;
    let w2 = tape.abs(w2);
    let b2 = tape.matmul(emb, policy.id("mix.b2.w"))?;
    let b2 = tape.add_row(b2, policy.id("mix.b2.b"))?;
    let mut hidden = b1;
    for slot in 0..dims.max_allies {
        let idx = batch.agent_ts_of_est[slot].clone();
        if idx.iter().all(|&i| i == NO_ROW) {
            continue;
        }
        let q_col = tape.gather_rows(q_chosen, idx)?;
        let w1_slot = tape.slice_cols(w1, slot * mh, mh)?;
        let contrib = tape.mul_col_broadcast(w1_slot, q_col)?;
        hidden = tape.add(hidden, contrib)?;
    }
    let hidden = tape.elu(hidden);
    let weighted = tape.mul(hidden, w2)?;
    let qtot = tape.sum_cols(weighted);
    let qtot = tape.add(qtot, b2)?;

    // Squared TD error against the precomputed constant targets.
    let y = tape.constant(batch.y_est.clone());
    let diff = tape.affine_combine(&[(y, 1.0), (qtot, -1.0)])?;
    let sq = tape.square(diff);
    let l_td = tape.mean_weighted(sq, vec![1.0; batch.n_est], batch.n_est as f64)?;

    // Consistency: KL(local posterior || frozen global posterior).
    let h_loc = trunk_all_states_on_tape(tape, policy, "loc.trunk", streams, &batch.active)?;
    let loc_logits = tape.matmul(h_loc, policy.id("loc.head.w"))?;
    let loc_logits = tape.add_row(loc_logits, policy.id("loc.head.b"))?;
    let log_local = tape.masked_log_softmax_rows(loc_logits, vec![true; batch.n_ts * nz])?;
    let p_local = tape.exp(log_local);
    let global_lp = tape.constant(batch.global_lp_ts.clone());
    let log_ratio = tape.affine_combine(&[(log_local, 1.0), (global_lp, -1.0)])?;
    let kl_terms = tape.mul(p_local, log_ratio)?;
    let kl_rows = tape.sum_cols(kl_terms);
    let l_c = tape.mean_weighted(kl_rows, batch.alive_ts.clone(), batch.n_alive)?;

    // Conservative term: logsumexp over skills minus the labeled value.
    let l_cql = if cql_weight.is_some() {
        let lse = tape.logsumexp_rows(q_all);
        let gap = tape.affine_combine(&[(lse, 1.0), (q_chosen, -1.0)])?;
        Some(tape.mean_weighted(gap, batch.alive_ts.clone(), batch.n_alive)?)
    } else {
        None
    };

    let mut parts = vec![(l_td, 1.0), (l_c, alpha)];
    if let (Some(cql), Some(w)) = (l_cql, cql_weight) {
        parts.push((cql, w));
    }
    let total = tape.affine_combine(&parts)?;

    // Decoder refinement: reconstruct each executed action from the local
    // stream and the labeled skill, over the whole hybrid batch.
    let l_rec = if refine {
        let h_dec = trunk_all_states_on_tape(tape, policy, "dec.trunk", streams, &batch.active)?;
        let mut onehot = vec![0.0; batch.n_ts * nz];
        for (r, &z) in batch.labels_ts.iter().enumerate() {
            onehot[r * nz + z] = 1.0;
        }
        let zc = tape.constant(Tensor::new(vec![batch.n_ts, nz], onehot)?);
        let x = tape.concat_cols(&[h_dec, zc])?;
        let x = tape.matmul(x, policy.id("dec.head.w1"))?;
        let x = tape.add_row(x, policy.id("dec.head.b1"))?;
        let x = tape.relu(x);
        let x = tape.matmul(x, policy.id("dec.head.w2"))?;
        let logits = tape.add_row(x, policy.id("dec.head.b2"))?;
        let log_p = tape.masked_log_softmax_rows(logits, batch.masks_ts.clone())?;
        let picked = tape.select_col_per_row(log_p, batch.actions_ts.clone())?;
        let mean = tape.mean_weighted(picked, batch.alive_ts.clone(), batch.n_alive)?;
        Some(tape.scale(mean, -1.0))
    } else {
        None
    };
    let objective = match l_rec {
        Some(rec) => tape.affine_combine(&[(total, 1.0), (rec, 1.0)])?,
        None => total,
    };
    Ok(StageTwoLosses {
        objective,
        total,
        td: l_td,
        consistency: l_c,
        cql: l_cql,
        reconstruction: l_rec,
        qtot,
    })
}

// ── acting ───────────────────────────────────────────────────────────

/// Epsilon-greedy skill choice; ties break to the lowest index. Eval mode
/// forces greedy.
pub fn select_skill(q: &[f64], epsilon: f64, rng: &mut Rng, eval_mode: bool) -> usize {
    if !eval_mode && epsilon > 0.0 && rng.f64() < epsilon {
        rng.below(q.len())
    } else {
        argmax(q)
    }
}

/// Greedy action for a skill: argmax of the decoder head's masked logits.
pub fn act(
    params: &ParamBundle,
    head_prefix: &str,
    h: &[f64],
    skill: usize,
    mask: &[bool],
    n_skills: usize,
) -> Result<usize> {
    if skill >= n_skills {
        return Err(Error::Contract(format!(
            "skill id {skill} out of range {n_skills}"
        )));
    }
    let mut input = h.to_vec();
    let mut onehot = vec![0.0; n_skills];
    onehot[skill] = 1.0;
    input.extend_from_slice(&onehot);
    let logits = mlp_row(params, head_prefix, &input);
    masked_argmax(&logits, mask)
}

/// Masked action distribution for a skill (softmax over valid entries).
pub fn decode_action_probs(
    params: &ParamBundle,
    head_prefix: &str,
    h: &[f64],
    skill: usize,
    mask: &[bool],
    n_skills: usize,
) -> Result<Vec<f64>> {
    if mask.iter().all(|&m| !m) {
        return Err(Error::Contract("action mask has no valid entry".into()));
    }
    let mut input = h.to_vec();
    let mut onehot = vec![0.0; n_skills];
    onehot[skill] = 1.0;
    input.extend_from_slice(&onehot);
    let logits = mlp_row(params, head_prefix, &input);
    let masked: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l } else { f64::NEG_INFINITY })
        .collect();
    Ok(crate::nets::softmax_row(&masked))
}

/// How an agent turns observations into environment actions.
pub enum Actor<'a> {
    /// Greedy skill selection on the value trunk, decoded through the
    /// bundle's action decoder (stage-one weights, refined in place when
    /// refinement is on).
    Skills { policy: &'a ParamBundle },
    /// Imitation: decoder architecture with zero skill conditioning,
    /// sampling from the learned action distribution.
    Cloning { decoder: &'a ParamBundle },
    /// Uniform over valid actions.
    Random,
}

/// Roll one episode. Records executed skills (0 for skill-less actors) so
/// the episode can enter the online buffer.
pub fn collect_episode(
    actor: &Actor<'_>,
    task: &TaskSpec,
    dims: &NetDims,
    env_seed: u64,
    epsilon: f64,
    rng: &mut Rng,
    quality: &str,
) -> Result<EpisodeRecord> {
    dims.admits(task)?;
    let mut env = Env::reset(task, env_seed)?;
    let n = task.n_allies;
    let hidden = dims.hidden;
    let mut h_val = vec![vec![0.0; hidden]; n];
    let mut h_dec = vec![vec![0.0; hidden]; n];
    let mut prev_actions: Vec<Option<usize>> = vec![None; n];
    let mut steps = Vec::new();
    let mut x = vec![0.0; dims.stream_input()];
    loop {
        let state = env.state();
        let obs = env.observations();
        let masks = env.action_masks();
        let mut actions = Vec::with_capacity(n);
        let mut skills = Vec::with_capacity(n);
        for i in 0..n {
            let alive = env.allies()[i].alive();
            let padded = pad_mask(&masks[i], dims);
            let (action, skill) = match actor {
                Actor::Skills { policy } => {
                    stream_features(&obs[i], prev_actions[i], task, dims, &mut x);
                    h_val[i] = rnn_step_row(policy, "val.trunk", &x, &h_val[i]);
                    h_dec[i] = rnn_step_row(policy, "dec.trunk", &x, &h_dec[i]);
                    if alive {
                        let q = linear_row(
                            policy.get("val.qhead.w"),
                            policy.get("val.qhead.b"),
                            &h_val[i],
                        );
                        let skill = select_skill(&q, epsilon, rng, false);
                        let action =
                            act(policy, "dec.head", &h_dec[i], skill, &padded, dims.n_skills)?;
                        (action, skill)
                    } else {
                        (0, 0)
                    }
                }
                Actor::Cloning { decoder } => {
                    stream_features(&obs[i], prev_actions[i], task, dims, &mut x);
                    h_dec[i] = rnn_step_row(decoder, "dec.trunk", &x, &h_dec[i]);
                    if alive {
                        let mut input = h_dec[i].clone();
                        input.extend(std::iter::repeat(0.0).take(dims.n_skills));
                        let logits = mlp_row(decoder, "dec.head", &input);
                        let masked: Vec<f64> = logits
                            .iter()
                            .zip(&padded)
                            .map(|(&l, &m)| if m { l } else { f64::NEG_INFINITY })
                            .collect();
                        let probs = crate::nets::softmax_row(&masked);
                        let u = rng.f64();
                        let mut acc = 0.0;
                        let mut choice = padded.iter().position(|&m| m).unwrap();
                        for (a, &p) in probs.iter().enumerate() {
                            if padded[a] {
                                acc += p;
                                if u < acc {
                                    choice = a;
                                    break;
                                }
                            }
                        }
                        (choice, 0)
                    } else {
                        (0, 0)
                    }
                }
                Actor::Random => {
                    if alive {
                        let valid: Vec<usize> =
                            (0..masks[i].len()).filter(|&a| masks[i][a]).collect();
                        (*rng.choose(&valid), 0)
                    } else {
                        (0, 0)
                    }
                }
            };
            actions.push(action);
            skills.push(skill);
        }
        let r = env.step(&actions)?;
        for i in 0..n {
            prev_actions[i] = Some(actions[i]);
        }
        steps.push(StepRecord {
            state,
            obs,
            actions,
            masks,
            reward: r.reward,
            done: r.done,
            win: r.win,
            skills: Some(skills),
        });
        if r.done {
            break;
        }
    }
    Ok(EpisodeRecord {
        task: task.name.clone(),
        quality: quality.to_string(),
        steps,
    })
}

/// Greedy evaluation rollouts; no parameter updates.
pub fn evaluate(
    actor: &Actor<'_>,
    task: &TaskSpec,
    dims: &NetDims,
    n_episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::Contract(
            "evaluation requires at least one episode".into(),
        ));
    }
    dims.admits(task)?;
    let mut wins = 0usize;
    let mut ret = 0.0;
    let mut rng = Rng::stream(seed, 0x9a11);
    for ep in 0..n_episodes {
        let rec = collect_episode(
            actor,
            task,
            dims,
            seed.wrapping_add(ep as u64),
            0.0,
            &mut rng,
            "eval",
        )?;
        if rec.win() {
            wins += 1;
        }
        ret += rec.episode_return();
    }
    Ok((wins as f64 / n_episodes as f64, ret / n_episodes as f64))
}

// ── training loops ───────────────────────────────────────────────────

pub struct PolicyArtifacts {
    /// Trained stage-two parameters (val.*, mix.*, loc.*) plus the frozen
    /// stage-one bundle (enc.*, dec.*) for execution and reproducibility.
    pub params: ParamBundle,
    pub metrics: Vec<MetricRow>,
}

fn epsilon_at(t: u64, cfg: &PolicyConfig) -> f64 {
    if t >= cfg.eps_decay {
        cfg.eps_end
    } else {
        cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t as f64 / cfg.eps_decay as f64
    }
}

fn snapshot_target(policy: &ParamBundle) -> ParamBundle {
    let mut t = ParamBundle::new();
    for (name, tensor) in policy.iter() {
        if name.starts_with("val.") || name.starts_with("mix.") {
            t.insert(name, tensor.clone());
        }
    }
    t
}

/// Hybrid high-level policy training. Deterministic in `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_policy(
    data: &Dataset,
    source_tasks: &[String],
    tasks: &BTreeMap<String, TaskSpec>,
    dims: &NetDims,
    stage1: &ParamBundle,
    cfg: &PolicyConfig,
    flags: ModeFlags,
    seed: u64,
) -> Result<PolicyArtifacts> {
    dims.validate()?;
    if flags.collect_online && source_tasks.is_empty() {
        return Err(Error::Config("no source tasks to collect on".into()));
    }
    let mut init_rng = Rng::new(seed ^ 0x7a_9e3b);
    let mut policy = init_value(dims, Some(stage1), &mut init_rng);
    let loc = init_local_encoder(dims, &mut init_rng);
    policy.absorb(&loc, "");
    // The action decoder rides along in the trainable bundle: refined by
    // reconstruction when refinement is on, bit-frozen otherwise (its
    // gradients are exactly zero without the reconstruction term).
    policy.absorb(&stage1.extract("dec."), "dec.");
    let mut target = snapshot_target(&policy);
    let mut adam = AdamState::new(&policy);
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut buffer = OnlineBuffer::new(cfg.buffer_capacity);
    let mut aux = AuxCache::new();
    let mut rng = Rng::new(seed);
    let mut collect_rng = Rng::stream(seed, 0xc0_11ec);
    let mut metrics = Vec::new();

    for t in 0..cfg.steps {
        if t > 0 && t % cfg.target_sync == 0 {
            target = snapshot_target(&policy);
        }
        let epsilon = if flags.collect_online {
            epsilon_at(t, cfg)
        } else {
            0.0
        };
        if flags.collect_online {
            let task_name = &source_tasks[(t as usize) % source_tasks.len()];
            let task = &tasks[task_name];
            let actor = Actor::Skills { policy: &policy };
            let episode = collect_episode(
                &actor,
                task,
                dims,
                seed.wrapping_mul(2654435761).wrapping_add(t),
                epsilon,
                &mut collect_rng,
                "online",
            )?;
            buffer.push(episode)?;
        }
        let r_h = match flags.ratio {
            RatioMode::Dynamic => hybrid_ratio(t, cfg.r_start, cfg.r_end, cfg.decay_steps)?,
            RatioMode::Fixed(r) => r,
        };
        let batch = sample_hybrid(data, &buffer, cfg.batch_size, r_h, &mut rng)?;
        let mut batch_aux = Vec::with_capacity(batch.entries.len());
        for (ep, _) in &batch.entries {
            let task = tasks
                .get(&ep.task)
                .ok_or_else(|| Error::Data(format!("unknown task '{}'", ep.task)))?;
            batch_aux.push(aux.get_or_build(ep, stage1, task, dims)?);
        }
        let pb =
            PolicyBatch::build(&batch.entries, &batch_aux, tasks, dims, &target, cfg.gamma)?;
        let cql_weight = match flags.cql {
            CqlMode::Dynamic => Some(cfg.eta * r_h),
            CqlMode::Fixed => Some(cfg.eta),
            CqlMode::None => None,
        };
        let mut tape = Tape::new();
        let reg = policy.register_named(&mut tape, true);
        let losses = total_loss_on_tape(
            &mut tape,
            &reg,
            &pb,
            dims,
            cfg.alpha,
            cql_weight,
            flags.refine_decoder,
        )?;
        let l_total = tape.value(losses.total).item();
        if !l_total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss diverged at step {t}: td={} c={}",
                tape.value(losses.td).item(),
                tape.value(losses.consistency).item()
            )));
        }
        let row = MetricRow {
            step: t,
            r_h,
            epsilon,
            l_total,
            l_td: tape.value(losses.td).item(),
            l_c: tape.value(losses.consistency).item(),
            l_cql: losses.cql.map_or(0.0, |id| tape.value(id).item()),
            eval_task: None,
            eval_win_rate: None,
            eval_return: None,
        };
        tape.backward(losses.objective)?;
        let grads = policy.grads(&tape, &reg.ids);
        adam_step(&mut policy, &grads, &mut adam, hyper)?;
        metrics.push(row);

        if (t + 1) % cfg.eval_every == 0 {
            let actor = Actor::Skills { policy: &policy };
            for (k, task_name) in source_tasks.iter().enumerate() {
                let task = &tasks[task_name];
                let (wr, ret) = evaluate(
                    &actor,
                    task,
                    dims,
                    cfg.eval_episodes,
                    seed ^ (t + 1) ^ ((k as u64) << 32),
                )?;
                metrics.push(MetricRow {
                    step: t + 1,
                    r_h,
                    epsilon,
                    l_total,
                    l_td: 0.0,
                    l_c: 0.0,
                    l_cql: 0.0,
                    eval_task: Some(task_name.clone()),
                    eval_win_rate: Some(wr),
                    eval_return: Some(ret),
                });
            }
            aux.prune(data, &buffer);
        }
    }
    let mut params = policy;
    // Keep the frozen encoder in the artifact for reproducibility.
    params.absorb(&stage1.extract("enc."), "enc.");
    Ok(PolicyArtifacts { params, metrics })
}

/// Supervised behavior cloning with the decoder architecture and no skill
/// conditioning: the baseline the skill pipeline is measured against.
pub fn train_bc(
    data: &Dataset,
    source_tasks: &[String],
    tasks: &BTreeMap<String, TaskSpec>,
    dims: &NetDims,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<PolicyArtifacts> {
    if data.episodes.is_empty() {
        return Err(Error::Data("behavior cloning needs offline data".into()));
    }
    let mut init_rng = Rng::new(seed ^ 0xbc_bc_bc);
    let mut bundle = crate::nets::init_decoder(dims, &mut init_rng);
    let mut adam = AdamState::new(&bundle);
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut rng = Rng::new(seed);
    let mut metrics = Vec::new();
    let nz = dims.n_skills;
    for t in 0..cfg.steps {
        let entries: Vec<(Arc<EpisodeRecord>, Origin)> = (0..cfg.batch_size)
            .map(|_| {
                (
                    Arc::clone(&data.episodes[rng.below(data.episodes.len())]),
                    Origin::Offline,
                )
            })
            .collect();
        let (streams, active, meta) = bc_batch(&entries, tasks, dims)?;
        let mut tape = Tape::new();
        let reg = bundle.register_named(&mut tape, true);
        let streams_id = tape.constant(streams);
        let h_all =
            trunk_all_states_on_tape(&mut tape, &reg, "dec.trunk", streams_id, &active)?;
        let zeros = tape.constant(Tensor::zeros(&[meta.n_ts, nz]));
        let x = tape.concat_cols(&[h_all, zeros])?;
        let x = tape.matmul(x, reg.id("dec.head.w1"))?;
        let x = tape.add_row(x, reg.id("dec.head.b1"))?;
        let x = tape.relu(x);
        let x = tape.matmul(x, reg.id("dec.head.w2"))?;
        let logits = tape.add_row(x, reg.id("dec.head.b2"))?;
        let log_p = tape.masked_log_softmax_rows(logits, meta.masks)?;
        let picked = tape.select_col_per_row(log_p, meta.actions)?;
        let mean = tape.mean_weighted(picked, meta.alive.clone(), meta.n_alive)?;
        let loss = tape.scale(mean, -1.0);
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "cloning loss diverged at step {t}"
            )));
        }
        tape.backward(loss)?;
        let grads = bundle.grads(&tape, &reg.ids);
        adam_step(&mut bundle, &grads, &mut adam, hyper)?;
        metrics.push(MetricRow {
            step: t,
            r_h: 1.0,
            epsilon: 0.0,
            l_total: l,
            l_td: 0.0,
            l_c: 0.0,
            l_cql: 0.0,
            eval_task: None,
            eval_win_rate: None,
            eval_return: None,
        });
        if (t + 1) % cfg.eval_every == 0 {
            let actor = Actor::Cloning { decoder: &bundle };
            for (k, task_name) in source_tasks.iter().enumerate() {
                let task = &tasks[task_name];
                let (wr, ret) = evaluate(
                    &actor,
                    task,
                    dims,
                    cfg.eval_episodes,
                    seed ^ (t + 1) ^ ((k as u64) << 32),
                )?;
                metrics.push(MetricRow {
                    step: t + 1,
                    r_h: 1.0,
                    epsilon: 0.0,
                    l_total: l,
                    l_td: 0.0,
                    l_c: 0.0,
                    l_cql: 0.0,
                    eval_task: Some(task_name.clone()),
                    eval_win_rate: Some(wr),
                    eval_return: Some(ret),
                });
            }
        }
    }
    Ok(PolicyArtifacts {
        params: bundle,
        metrics,
    })
}

struct BcMeta {
    n_ts: usize,
    actions: Vec<usize>,
    masks: Vec<bool>,
    alive: Vec<f64>,
    n_alive: f64,
}

fn bc_batch(
    entries: &[(Arc<EpisodeRecord>, Origin)],
    tasks: &BTreeMap<String, TaskSpec>,
    dims: &NetDims,
) -> Result<(Tensor, Vec<usize>, BcMeta)> {
    let si = dims.stream_input();
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(entries[i].0.len()));
    let max_len = entries[order[0]].0.len();
    let mut row_episode = Vec::new();
    let mut row_agent = Vec::new();
    for &e in &order {
        for i in 0..entries[e].0.n_agents() {
            row_episode.push(e);
            row_agent.push(i);
        }
    }
    let mut active = Vec::with_capacity(max_len);
    for t in 0..max_len {
        let mut rows = 0;
        for &e in &order {
            if entries[e].0.len() > t {
                rows += entries[e].0.n_agents();
            }
        }
        active.push(rows);
    }
    let n_ts: usize = active.iter().sum();
    let mut streams = vec![0.0; n_ts * si];
    let mut actions = Vec::with_capacity(n_ts);
    let mut masks = Vec::with_capacity(n_ts * dims.max_actions());
    let mut alive = Vec::with_capacity(n_ts);
    let mut ts = 0;
    for t in 0..max_len {
        for r in 0..active[t] {
            let e = row_episode[r];
            let (ep, _) = &entries[e];
            let i = row_agent[r];
            let task = tasks
                .get(&ep.task)
                .ok_or_else(|| Error::Data(format!("unknown task '{}'", ep.task)))?;
            let prev = (t > 0).then(|| ep.steps[t - 1].actions[i]);
            stream_features(
                &ep.steps[t].obs[i],
                prev,
                task,
                dims,
                &mut streams[ts * si..(ts + 1) * si],
            );
            actions.push(ep.steps[t].actions[i]);
            masks.extend(pad_mask(&ep.steps[t].masks[i], dims));
            alive.push(if agent_alive(ep, t, i) { 1.0 } else { 0.0 });
            ts += 1;
        }
    }
    let n_alive: f64 = alive.iter().sum();
    Ok((
        Tensor::new(vec![n_ts, si], streams)?,
        active,
        BcMeta {
            n_ts,
            actions,
            masks,
            alive,
            n_alive,
        },
    ))
}

/// Zero-shot evaluation on a (possibly unseen) task: greedy rollouts with no
/// updates. Errors when the task exceeds the configured capacity.
pub fn zero_shot_eval(
    params: &ParamBundle,
    dims: &NetDims,
    task: &TaskSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let actor = Actor::Skills { policy: params };
    evaluate(&actor, task, dims, n_episodes, seed)
}
