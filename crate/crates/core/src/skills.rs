//! Stage one: unsupervised discovery of discrete skills from offline data.
//!
//! A multi-head attention encoder reads the entity decomposition of one
//! timestep's (state, joint action) and emits a categorical posterior over
//! skills for each agent. A recurrent action decoder reconstructs each
//! agent's executed action from its local stream and a skill. Both train
//! jointly on the beta-VAE objective: maximize the likelihood of the data
//! action under the skill mixture, minus beta times the KL from the
//! posterior to the uniform prior. The expectation over the discrete latent
//! is enumerated exactly, not sampled.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::arena::TaskSpec;
use crate::data::{Dataset, EpisodeRecord};
use crate::error::{Error, Result};
use crate::nets::{decompose_state, encoder_forward, pad_mask, stream_features, NetDims};
use crate::num::optim::TapeParams;
use crate::num::{adam_step, AdamHyper, AdamState, ParamBundle, Tape, Tensor, TensorId};
use crate::rng::Rng;

pub const DEFAULT_BETA: f64 = 0.001;
pub const DEFAULT_STAGE1_STEPS: u64 = 15_000;

const INIT_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug)]
pub struct SkillsConfig {
    pub beta: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: u64,
}

impl Default for SkillsConfig {
    fn default() -> Self {
        SkillsConfig {
            beta: DEFAULT_BETA,
            steps: DEFAULT_STAGE1_STEPS,
            batch_size: 32,
            lr: 0.0005,
            log_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SkillLogRow {
    pub step: u64,
    pub l_vae: f64,
    pub recon: f64,
    pub kl: f64,
}

/// One anchored timestep of one episode.
#[derive(Clone, Copy, Debug)]
pub struct Anchor<'a> {
    pub episode: &'a EpisodeRecord,
    pub t: usize,
}

pub(crate) fn agent_alive(ep: &EpisodeRecord, t: usize, agent: usize) -> bool {
    ep.steps[t].state[agent * 4 + 3] != 0.0
}

/// Host-side tensors for one VAE batch, ready to put on a tape.
pub struct VaeBatch {
    /// All samples' entity tokens stacked row-wise.
    tokens: Tensor,
    /// (row offset, token count) per sample into `tokens`.
    token_spans: Vec<(usize, usize)>,
    /// Token row of each living (sample, agent) pair, sample-major.
    agent_token_rows: Vec<usize>,
    /// Decoder stream stacked time-major over rows sorted by prefix length.
    streams: Tensor,
    /// Active row count at each time step.
    active: Vec<usize>,
    /// For each trunk exit row, the index into the sample-major agent list.
    exit_to_agent: Vec<usize>,
    /// Executed action per exit row.
    exit_actions: Vec<usize>,
    /// Capacity-padded action mask per exit row, row-major.
    exit_masks: Vec<bool>,
    pub n_rows: usize,
}

impl VaeBatch {
    pub fn build(
        anchors: &[Anchor<'_>],
        tasks: &BTreeMap<String, TaskSpec>,
        dims: &NetDims,
    ) -> Result<VaeBatch> {
        let tl = dims.token_len();
        let si = dims.stream_input();
        let mut token_rows: Vec<f64> = Vec::new();
        let mut token_spans = Vec::with_capacity(anchors.len());
        let mut agents: Vec<(usize, usize)> = Vec::new();
        let mut agent_token_rows = Vec::new();
        for (s, a) in anchors.iter().enumerate() {
            let task = tasks
                .get(&a.episode.task)
                .ok_or_else(|| Error::Data(format!("unknown task '{}'", a.episode.task)))?;
            dims.admits(task)?;
            let step = &a.episode.steps[a.t];
            let toks = decompose_state(&step.state, Some(&step.actions), task, dims)?;
            let off = token_rows.len() / tl;
            token_spans.push((off, task.n_entities()));
            token_rows.extend_from_slice(&toks);
            for i in 0..task.n_allies {
                if agent_alive(a.episode, a.t, i) {
                    agents.push((s, i));
                    agent_token_rows.push(off + i);
                }
            }
        }
        if agents.is_empty() {
            return Err(Error::Data("batch contains no living agents".into()));
        }
        // Decoder rows sorted by prefix length (anchor + 1), descending, so
        // the active set at each time step is a prefix.
        let mut order: Vec<usize> = (0..agents.len()).collect();
        order.sort_by_key(|&r| std::cmp::Reverse(anchors[agents[r].0].t));
        let max_len = anchors[agents[order[0]].0].t + 1;
        let mut active = Vec::with_capacity(max_len);
        let mut streams: Vec<f64> = Vec::new();
        let mut buf = vec![0.0; si];
        for j in 0..max_len {
            let n_active = order
                .iter()
                .take_while(|&&r| anchors[agents[r].0].t + 1 > j)
                .count();
            active.push(n_active);
            for &r in order.iter().take(n_active) {
                let (s, i) = agents[r];
                let a = &anchors[s];
                let task = &tasks[&a.episode.task];
                let prev = if j > 0 {
                    Some(a.episode.steps[j - 1].actions[i])
                } else {
                    None
                };
                stream_features(&a.episode.steps[j].obs[i], prev, task, dims, &mut buf);
                streams.extend_from_slice(&buf);
            }
        }
        // Rows leave the active set tail-first as j passes their anchor.
        let mut exit_to_agent = Vec::with_capacity(agents.len());
        let mut exit_actions = Vec::with_capacity(agents.len());
        let mut exit_masks = Vec::with_capacity(agents.len() * dims.max_actions());
        for j in 0..max_len {
            let next = if j + 1 < max_len { active[j + 1] } else { 0 };
            for &r in order.iter().skip(next).take(active[j] - next) {
                let (s, i) = agents[r];
                let a = &anchors[s];
                debug_assert_eq!(a.t, j);
                exit_to_agent.push(r);
                exit_actions.push(a.episode.steps[a.t].actions[i]);
                exit_masks.extend(pad_mask(&a.episode.steps[a.t].masks[i], dims));
            }
        }
        let n_tok_rows = token_rows.len() / tl;
        let n_stream_rows = streams.len() / si;
        Ok(VaeBatch {
            tokens: Tensor::new(vec![n_tok_rows, tl], token_rows)?,
            token_spans,
            agent_token_rows,
            streams: Tensor::new(vec![n_stream_rows, si], streams)?,
            active,
            exit_to_agent,
            exit_actions,
            exit_masks,
            n_rows: agents.len(),
        })
    }
}

/// Batched encoder on the tape: per-head q/k/v projections over all stacked
/// tokens, per-sample fused attention, embeddings concatenated across heads.
/// Returns per-entity embeddings aligned with the stacked token rows.
pub fn encoder_embeddings_on_tape(
    tape: &mut Tape,
    enc: &TapeParams,
    dims: &NetDims,
    tokens: TensorId,
    spans: &[(usize, usize)],
) -> Result<TensorId> {
    let scale = 1.0 / (dims.head_dim() as f64).sqrt();
    let mut head_outs = Vec::with_capacity(dims.n_heads);
    for h in 0..dims.n_heads {
        let proj = |tape: &mut Tape, p: &str| -> Result<TensorId> {
            let x = tape.matmul(tokens, enc.id(&format!("enc.h{h}.{p}.w1")))?;
            let x = tape.add_row(x, enc.id(&format!("enc.h{h}.{p}.b1")))?;
            let x = tape.relu(x);
            let x = tape.matmul(x, enc.id(&format!("enc.h{h}.{p}.w2")))?;
            tape.add_row(x, enc.id(&format!("enc.h{h}.{p}.b2")))
        };
        let q = proj(tape, "q")?;
        let k = proj(tape, "k")?;
        let v = proj(tape, "v")?;
        let mut sample_outs = Vec::with_capacity(spans.len());
        for &(off, len) in spans {
            let qs = tape.slice_rows(q, off, len)?;
            let ks = tape.slice_rows(k, off, len)?;
            let vs = tape.slice_rows(v, off, len)?;
            sample_outs.push(tape.attention_head(qs, ks, vs, scale)?);
        }
        head_outs.push(tape.concat_rows(&sample_outs)?);
    }
    tape.concat_cols(&head_outs)
}

/// Log posterior over skills for the given embedding rows.
pub fn skill_log_posteriors_on_tape(
    tape: &mut Tape,
    enc: &TapeParams,
    emb: TensorId,
    agent_rows: Vec<usize>,
    n_skills: usize,
) -> Result<TensorId> {
    let rows = agent_rows.len();
    let x = tape.gather_rows(emb, agent_rows)?;
    let x = tape.matmul(x, enc.id("enc.skill.w1"))?;
    let x = tape.add_row(x, enc.id("enc.skill.b1"))?;
    let x = tape.relu(x);
    let x = tape.matmul(x, enc.id("enc.skill.w2"))?;
    let logits = tape.add_row(x, enc.id("enc.skill.b2"))?;
    tape.masked_log_softmax_rows(logits, vec![true; rows * n_skills])
}

/// Recurrent trunk over time-major stacked streams with a shrinking active
/// set; returns each row's hidden state at its final step, in exit order.
pub fn trunk_exit_states_on_tape(
    tape: &mut Tape,
    params: &TapeParams,
    prefix: &str,
    streams: TensorId,
    active: &[usize],
) -> Result<TensorId> {
    let wh = params.id(&format!("{prefix}.wh"));
    let xp = tape.matmul(streams, params.id(&format!("{prefix}.wx")))?;
    let xp = tape.add_row(xp, params.id(&format!("{prefix}.b")))?;
    let mut exits = Vec::new();
    let mut h_prev: Option<TensorId> = None;
    let mut offset = 0;
    for (j, &n_active) in active.iter().enumerate() {
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
        let next = if j + 1 < active.len() { active[j + 1] } else { 0 };
        if n_active > next {
            exits.push(tape.slice_rows(hj, next, n_active - next)?);
        }
        h_prev = Some(hj);
    }
    tape.concat_rows(&exits)
}

/// The VAE objective on a tape. Returns (loss, mean reconstruction
/// negative log likelihood, mean KL), each scalar.
pub fn vae_loss_on_tape(
    tape: &mut Tape,
    enc: &TapeParams,
    dec: &TapeParams,
    batch: &VaeBatch,
    dims: &NetDims,
    beta: f64,
) -> Result<(TensorId, TensorId, TensorId)> {
    let nz = dims.n_skills;
    let rows = batch.n_rows;
    let tokens = tape.constant(batch.tokens.clone());
    let emb = encoder_embeddings_on_tape(tape, enc, dims, tokens, &batch.token_spans)?;
    let log_q =
        skill_log_posteriors_on_tape(tape, enc, emb, batch.agent_token_rows.clone(), nz)?;
    // Align posterior rows with trunk exit rows.
    let log_q = tape.gather_rows(log_q, batch.exit_to_agent.clone())?;
    let q = tape.exp(log_q);

    let streams = tape.constant(batch.streams.clone());
    let h_exit = trunk_exit_states_on_tape(tape, dec, "dec.trunk", streams, &batch.active)?;

    // Reconstruction: exact expectation over the discrete skill.
    let mut recon: Option<TensorId> = None;
    for z in 0..nz {
        let mut onehot = vec![0.0; rows * nz];
        for r in 0..rows {
            onehot[r * nz + z] = 1.0;
        }
        let zc = tape.constant(Tensor::new(vec![rows, nz], onehot)?);
        let x = tape.concat_cols(&[h_exit, zc])?;
        let x = tape.matmul(x, dec.id("dec.head.w1"))?;
        let x = tape.add_row(x, dec.id("dec.head.b1"))?;
        let x = tape.relu(x);
        let x = tape.matmul(x, dec.id("dec.head.w2"))?;
        let logits = tape.add_row(x, dec.id("dec.head.b2"))?;
        let log_p = tape.masked_log_softmax_rows(logits, batch.exit_masks.clone())?;
        let picked = tape.select_col_per_row(log_p, batch.exit_actions.clone())?;
        let qz = tape.slice_cols(q, z, 1)?;
        let term = tape.mul(qz, picked)?;
        recon = Some(match recon {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let recon = recon.unwrap();

    // KL to the uniform prior: sum q log q + log nz, always >= 0.
    let qlq = tape.mul(q, log_q)?;
    let neg_entropy = tape.sum_cols(qlq);
    let lognz = tape.constant(Tensor::full(&[rows, 1], (nz as f64).ln()));
    let kl = tape.add(neg_entropy, lognz)?;

    let per_row = tape.affine_combine(&[(recon, -1.0), (kl, beta)])?;
    let ones = vec![1.0; rows];
    let loss = tape.mean_weighted(per_row, ones.clone(), rows as f64)?;
    let recon_mean = tape.mean_weighted(recon, ones.clone(), rows as f64)?;
    let recon_mean = tape.scale(recon_mean, -1.0);
    let kl_mean = tape.mean_weighted(kl, ones, rows as f64)?;
    Ok((loss, recon_mean, kl_mean))
}

/// Draw batch anchors: episode uniform, then timestep uniform.
pub fn draw_anchors<'a>(
    episodes: &'a [Arc<EpisodeRecord>],
    batch_size: usize,
    rng: &mut Rng,
) -> Vec<Anchor<'a>> {
    (0..batch_size)
        .map(|_| {
            let ep = &episodes[rng.below(episodes.len())];
            let t = rng.below(ep.len());
            Anchor { episode: ep, t }
        })
        .collect()
}

/// Joint training of the trajectory encoder and action decoder.
/// Deterministic in `seed`; returns the trained bundle (prefixes `enc.` and
/// `dec.`) and the loss log.
pub fn train_skills(
    data: &Dataset,
    tasks: &BTreeMap<String, TaskSpec>,
    dims: &NetDims,
    cfg: &SkillsConfig,
    seed: u64,
) -> Result<(ParamBundle, Vec<SkillLogRow>)> {
    if data.episodes.is_empty() {
        return Err(Error::Data("cannot train skills on an empty dataset".into()));
    }
    dims.validate()?;
    let mut bundle = init_stage1(dims, seed);
    let mut adam = AdamState::new(&bundle);
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut rng = Rng::new(seed);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let anchors = draw_anchors(&data.episodes, cfg.batch_size, &mut rng);
        let batch = VaeBatch::build(&anchors, tasks, dims)?;
        let mut tape = Tape::new();
        let params = bundle.register_named(&mut tape, true);
        let (loss, recon, kl) =
            vae_loss_on_tape(&mut tape, &params, &params, &batch, dims, cfg.beta)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "skill training loss diverged at step {step}"
            )));
        }
        let (r, k) = (tape.value(recon).item(), tape.value(kl).item());
        tape.backward(loss)?;
        let grads = bundle.grads(&tape, &params.ids);
        adam_step(&mut bundle, &grads, &mut adam, hyper)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.push(SkillLogRow {
                step,
                l_vae: l,
                recon: r,
                kl: k,
            });
        }
    }
    Ok((bundle, log))
}

/// Fresh, untrained stage-one parameters (used directly by the purely
/// online baseline, which has no data to discover skills from).
pub fn init_stage1(dims: &NetDims, seed: u64) -> ParamBundle {
    let mut init_rng = Rng::new(seed ^ INIT_SEED_MIX);
    let mut bundle = crate::nets::init_encoder(dims, &mut init_rng);
    let dec = crate::nets::init_decoder(dims, &mut init_rng);
    bundle.absorb(&dec, "");
    bundle
}

/// Per-agent skill posteriors for one timestep under the frozen encoder.
pub fn encode_step(
    enc: &ParamBundle,
    dims: &NetDims,
    state: &[f64],
    actions: &[usize],
    task: &TaskSpec,
) -> Result<Vec<Vec<f64>>> {
    let toks = decompose_state(state, Some(actions), task, dims)?;
    let out = encoder_forward(enc, dims, &toks, task.n_entities(), task.n_allies);
    Ok(out
        .log_posteriors
        .iter()
        .map(|lp| lp.iter().map(|&x| x.exp()).collect())
        .collect())
}

/// Share of probe-set argmax skill assignments landing on each skill.
pub fn skill_usage(
    bundle: &ParamBundle,
    data: &Dataset,
    tasks: &BTreeMap<String, TaskSpec>,
    dims: &NetDims,
    n_probe: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = Rng::new(seed);
    let mut counts = vec![0usize; dims.n_skills];
    let mut total = 0usize;
    for _ in 0..n_probe {
        let ep = &data.episodes[rng.below(data.episodes.len())];
        let t = rng.below(ep.len());
        let task = &tasks[&ep.task];
        let step = &ep.steps[t];
        let posts = encode_step(bundle, dims, &step.state, &step.actions, task)?;
        for (i, p) in posts.iter().enumerate() {
            if agent_alive(ep, t, i) {
                counts[crate::nets::argmax(p)] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Data("probe set contained no living agents".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}
