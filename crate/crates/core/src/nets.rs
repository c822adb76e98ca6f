//! Network shapes, parameter initialization, and plain-array forward passes.
//!
//! Every network in the pipeline is built from the same few pieces: one
//! hidden-layer MLPs, a tanh recurrent cell over per-step local features,
//! and multi-head attention over entity tokens. Parameters live in named
//! bundles (prefixes: `enc.` trajectory encoder, `dec.` action decoder,
//! `loc.` local skill encoder, `val.` value trunk and heads, `mix.` mixer
//! hypernetworks) so stage two can copy stage-one weights by name.
//!
//! The plain forward functions here mirror the tape ops bit-for-bit and are
//! used where gradients are not needed: acting, evaluation, TD targets, and
//! the frozen-encoder caches.

use crate::arena::{TaskSpec, FIXED_ACTIONS, TOKEN_FEATURES};
use crate::error::{Error, Result};
use crate::num::tape::attention_forward;
use crate::num::tensor::{dgemm_into, elu, Tensor};
use crate::num::ParamBundle;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetDims {
    /// Number of discrete skills.
    pub n_skills: usize,
    /// Attention heads in the trajectory encoder.
    pub n_heads: usize,
    /// Attention embedding length (concatenated across heads).
    pub embed: usize,
    /// Hidden layer width everywhere.
    pub hidden: usize,
    /// Capacity: the largest team sizes any configured task may use.
    pub max_allies: usize,
    pub max_enemies: usize,
    /// First-layer width of the mixing network.
    pub mix_hidden: usize,
}

impl NetDims {
    pub fn validate(&self) -> Result<()> {
        if self.embed % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embedding length {} not divisible by {} heads",
                self.embed, self.n_heads
            )));
        }
        if self.n_skills < 1 || self.hidden < 1 || self.max_allies < 1 || self.max_enemies < 1 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.n_heads
    }

    pub fn max_entities(&self) -> usize {
        self.max_allies + self.max_enemies
    }

    /// Largest action space across configured tasks.
    pub fn max_actions(&self) -> usize {
        FIXED_ACTIONS + self.max_enemies
    }

    /// Entity token length: observation features plus the action slot.
    pub fn token_len(&self) -> usize {
        TOKEN_FEATURES + self.max_actions()
    }

    /// Per-step input of the recurrent trunks: all observation tokens padded
    /// to capacity slots, plus the agent's previous action one-hot.
    pub fn stream_input(&self) -> usize {
        TOKEN_FEATURES * self.max_entities() + self.max_actions()
    }

    /// Whether a task fits within this capacity.
    pub fn admits(&self, task: &TaskSpec) -> Result<()> {
        if task.n_allies > self.max_allies || task.n_enemies > self.max_enemies {
            return Err(Error::Config(format!(
                "task {} exceeds configured capacity {}v{}",
                task.name, self.max_allies, self.max_enemies
            )));
        }
        Ok(())
    }
}

fn mlp(bundle: &mut ParamBundle, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng) {
    bundle.insert(
        &format!("{prefix}.w1"),
        Tensor::uniform_init(&[d_in, d_hidden], d_in, rng),
    );
    bundle.insert(
        &format!("{prefix}.b1"),
        Tensor::uniform_init(&[d_hidden], d_in, rng),
    );
    bundle.insert(
        &format!("{prefix}.w2"),
        Tensor::uniform_init(&[d_hidden, d_out], d_hidden, rng),
    );
    bundle.insert(
        &format!("{prefix}.b2"),
        Tensor::uniform_init(&[d_out], d_hidden, rng),
    );
}

fn linear(bundle: &mut ParamBundle, prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
    bundle.insert(
        &format!("{prefix}.w"),
        Tensor::uniform_init(&[d_in, d_out], d_in, rng),
    );
    bundle.insert(
        &format!("{prefix}.b"),
        Tensor::uniform_init(&[d_out], d_in, rng),
    );
}

fn rnn(bundle: &mut ParamBundle, prefix: &str, d_in: usize, d_hidden: usize, rng: &mut Rng) {
    bundle.insert(
        &format!("{prefix}.wx"),
        Tensor::uniform_init(&[d_in, d_hidden], d_in, rng),
    );
    bundle.insert(
        &format!("{prefix}.wh"),
        Tensor::uniform_init(&[d_hidden, d_hidden], d_hidden, rng),
    );
    bundle.insert(
        &format!("{prefix}.b"),
        Tensor::uniform_init(&[d_hidden], d_hidden, rng),
    );
}

/// Global trajectory encoder: per-head q/k/v projection MLPs plus the skill
/// head mapping an agent's concatenated attention embedding to skill logits.
pub fn init_encoder(dims: &NetDims, rng: &mut Rng) -> ParamBundle {
    let mut b = ParamBundle::new();
    for h in 0..dims.n_heads {
        for proj in ["q", "k", "v"] {
            mlp(
                &mut b,
                &format!("enc.h{h}.{proj}"),
                dims.token_len(),
                dims.hidden,
                dims.head_dim(),
                rng,
            );
        }
    }
    mlp(&mut b, "enc.skill", dims.embed, dims.hidden, dims.n_skills, rng);
    b
}

/// Action decoder: recurrent trunk over the agent's local stream and a head
/// from (trunk state, skill one-hot) to action logits.
pub fn init_decoder(dims: &NetDims, rng: &mut Rng) -> ParamBundle {
    let mut b = ParamBundle::new();
    rnn(&mut b, "dec.trunk", dims.stream_input(), dims.hidden, rng);
    mlp(
        &mut b,
        "dec.head",
        dims.hidden + dims.n_skills,
        dims.hidden,
        dims.max_actions(),
        rng,
    );
    b
}

/// Local observation encoder: recurrent trunk plus a linear head emitting
/// skill posterior logits.
pub fn init_local_encoder(dims: &NetDims, rng: &mut Rng) -> ParamBundle {
    let mut b = ParamBundle::new();
    rnn(&mut b, "loc.trunk", dims.stream_input(), dims.hidden, rng);
    linear(&mut b, "loc.head", dims.hidden, dims.n_skills, rng);
    b
}

/// Value networks: shared recurrent trunk feeding the skill-value head and
/// the action-decoder head, plus the mixing hypernetworks. When stage-one
/// decoder parameters are given, the trunk and decoder head start from them.
pub fn init_value(dims: &NetDims, stage1_decoder: Option<&ParamBundle>, rng: &mut Rng) -> ParamBundle {
    let mut b = ParamBundle::new();
    rnn(&mut b, "val.trunk", dims.stream_input(), dims.hidden, rng);
    linear(&mut b, "val.qhead", dims.hidden, dims.n_skills, rng);
    mlp(
        &mut b,
        "val.dec",
        dims.hidden + dims.n_skills,
        dims.hidden,
        dims.max_actions(),
        rng,
    );
    linear(
        &mut b,
        "mix.w1",
        dims.embed,
        dims.max_allies * dims.mix_hidden,
        rng,
    );
    linear(&mut b, "mix.b1", dims.embed, dims.mix_hidden, rng);
    linear(&mut b, "mix.w2", dims.embed, dims.mix_hidden, rng);
    linear(&mut b, "mix.b2", dims.embed, 1, rng);
    if let Some(dec) = stage1_decoder {
        for part in ["wx", "wh", "b"] {
            b.insert(&format!("val.trunk.{part}"), dec.get(&format!("dec.trunk.{part}")).clone());
        }
        for part in ["w1", "b1", "w2", "b2"] {
            b.insert(&format!("val.dec.{part}"), dec.get(&format!("dec.head.{part}")).clone());
        }
    }
    b
}

// ── plain forward pieces ─────────────────────────────────────────────

/// y = x @ w + b for a single row.
pub fn linear_row(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), d_in);
    let mut y = b.data().to_vec();
    dgemm_into(x, w.data(), &mut y, 1, d_in, d_out, false, false, 1.0);
    y
}

/// Y = X @ w + b over `rows` stacked inputs, one GEMM.
pub fn batched_linear(w: &Tensor, b: &Tensor, x: &[f64], rows: usize) -> Vec<f64> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), rows * d_in);
    let mut y = vec![0.0; rows * d_out];
    for r in 0..rows {
        y[r * d_out..(r + 1) * d_out].copy_from_slice(b.data());
    }
    dgemm_into(x, w.data(), &mut y, rows, d_in, d_out, false, false, 1.0);
    y
}

/// One-hidden-layer MLP with relu, single row.
pub fn mlp_row(params: &ParamBundle, prefix: &str, x: &[f64]) -> Vec<f64> {
    let mut h = linear_row(
        params.get(&format!("{prefix}.w1")),
        params.get(&format!("{prefix}.b1")),
        x,
    );
    for v in h.iter_mut() {
        *v = v.max(0.0);
    }
    linear_row(
        params.get(&format!("{prefix}.w2")),
        params.get(&format!("{prefix}.b2")),
        &h,
    )
}

/// Recurrent cell h' = tanh(x @ Wx + h @ Wh + b), single row.
pub fn rnn_step_row(params: &ParamBundle, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let wx = params.get(&format!("{prefix}.wx"));
    let wh = params.get(&format!("{prefix}.wh"));
    let b = params.get(&format!("{prefix}.b"));
    let d_h = wh.shape()[1];
    let mut out = b.data().to_vec();
    dgemm_into(x, wx.data(), &mut out, 1, wx.shape()[0], d_h, false, false, 1.0);
    dgemm_into(h, wh.data(), &mut out, 1, d_h, d_h, false, false, 1.0);
    for v in out.iter_mut() {
        *v = v.tanh();
    }
    out
}

/// Batched trunk forward over time-major stacked streams with a shrinking
/// active prefix (rows sorted by sequence length, descending): the plain
/// twin of the tape version, for targets and other no-gradient passes.
/// Returns hidden states for every (t, row) in stream order.
pub fn trunk_states_plain(
    params: &ParamBundle,
    prefix: &str,
    streams: &[f64],
    active: &[usize],
    stream_input: usize,
    hidden: usize,
) -> Vec<f64> {
    let wx = params.get(&format!("{prefix}.wx"));
    let wh = params.get(&format!("{prefix}.wh"));
    let b = params.get(&format!("{prefix}.b"));
    let n_rows = streams.len() / stream_input;
    let mut xp = vec![0.0; n_rows * hidden];
    for r in 0..n_rows {
        xp[r * hidden..(r + 1) * hidden].copy_from_slice(b.data());
    }
    dgemm_into(streams, wx.data(), &mut xp, n_rows, stream_input, hidden, false, false, 1.0);
    let mut out = vec![0.0; n_rows * hidden];
    let mut h_prev: Vec<f64> = Vec::new();
    let mut offset = 0;
    for (j, &n_active) in active.iter().enumerate() {
        let mut h = xp[offset * hidden..(offset + n_active) * hidden].to_vec();
        if j > 0 {
            dgemm_into(&h_prev, wh.data(), &mut h, n_active, hidden, hidden, false, false, 1.0);
        }
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        out[offset * hidden..(offset + n_active) * hidden].copy_from_slice(&h);
        offset += n_active;
        h_prev = h;
    }
    out
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= denom;
    }
    out
}

/// Argmax with lowest-index tie-break.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Argmax over masked-in entries, lowest-index tie-break.
pub fn masked_argmax(xs: &[f64], mask: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in xs.iter().enumerate() {
        if mask[i] && best.map_or(true, |b| v > xs[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Contract("mask has no valid entry".into()))
}

/// Encoder forward over one timestep's entity tokens.
pub struct EncoderOut {
    /// Log posterior over skills, one row per agent (allies only).
    pub log_posteriors: Vec<Vec<f64>>,
    /// Mean-pooled entity embedding of length `embed`.
    pub pooled: Vec<f64>,
}

/// Run the frozen trajectory encoder on a token matrix. The attention
/// reduction is canonically ordered, so each agent's posterior is
/// bit-invariant under permutation of the other entities.
pub fn encoder_forward(
    params: &ParamBundle,
    dims: &NetDims,
    tokens: &[f64],
    n_tokens: usize,
    n_agents: usize,
) -> EncoderOut {
    let tl = dims.token_len();
    let hd = dims.head_dim();
    debug_assert_eq!(tokens.len(), n_tokens * tl);
    // Concatenated per-entity embeddings across heads.
    let mut emb = vec![0.0; n_tokens * dims.embed];
    let proj = |prefix: &str| -> Vec<f64> {
        let w1 = params.get(&format!("{prefix}.w1"));
        let b1 = params.get(&format!("{prefix}.b1"));
        let w2 = params.get(&format!("{prefix}.w2"));
        let b2 = params.get(&format!("{prefix}.b2"));
        let mut h = vec![0.0; n_tokens * dims.hidden];
        for r in 0..n_tokens {
            h[r * dims.hidden..(r + 1) * dims.hidden].copy_from_slice(b1.data());
        }
        dgemm_into(tokens, w1.data(), &mut h, n_tokens, tl, dims.hidden, false, false, 1.0);
        for v in h.iter_mut() {
            *v = v.max(0.0);
        }
        let mut o = vec![0.0; n_tokens * hd];
        for r in 0..n_tokens {
            o[r * hd..(r + 1) * hd].copy_from_slice(b2.data());
        }
        dgemm_into(&h, w2.data(), &mut o, n_tokens, dims.hidden, hd, false, false, 1.0);
        o
    };
    let scale = 1.0 / (hd as f64).sqrt();
    for head in 0..dims.n_heads {
        let q = proj(&format!("enc.h{head}.q"));
        let k = proj(&format!("enc.h{head}.k"));
        let v = proj(&format!("enc.h{head}.v"));
        let att = attention_forward(&q, &k, &v, n_tokens, hd, hd, scale);
        for r in 0..n_tokens {
            emb[r * dims.embed + head * hd..r * dims.embed + (head + 1) * hd]
                .copy_from_slice(&att[r * hd..(r + 1) * hd]);
        }
    }
    let mut pooled = vec![0.0; dims.embed];
    for r in 0..n_tokens {
        for c in 0..dims.embed {
            pooled[c] += emb[r * dims.embed + c];
        }
    }
    for v in pooled.iter_mut() {
        *v /= n_tokens as f64;
    }
    let log_posteriors = (0..n_agents)
        .map(|a| {
            let logits = mlp_row(params, "enc.skill", &emb[a * dims.embed..(a + 1) * dims.embed]);
            let lse = {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
            };
            logits.iter().map(|&x| x - lse).collect()
        })
        .collect();
    EncoderOut {
        log_posteriors,
        pooled,
    }
}

/// Build the global entity-token matrix from a recorded state vector.
/// Token layout per unit: the 8 observation features (absolute position in
/// the relative slots, flags, alive bit) plus the action one-hot slot —
/// executed action for allies, zeros for enemies. Dead units are all-zero.
/// With `zero_actions` the action slots stay empty (state-only view for the
/// mixer).
pub fn decompose_state(
    state: &[f64],
    actions: Option<&[usize]>,
    task: &TaskSpec,
    dims: &NetDims,
) -> Result<Vec<f64>> {
    let n_tok = task.n_entities();
    if state.len() != task.state_len() {
        return Err(Error::Contract(format!(
            "state length {} does not match task {} ({} expected)",
            state.len(),
            task.name,
            task.state_len()
        )));
    }
    if let Some(a) = actions {
        if a.len() != task.n_allies {
            return Err(Error::Contract(format!(
                "joint action length {} does not match {} allies",
                a.len(),
                task.n_allies
            )));
        }
    }
    let tl = dims.token_len();
    let mut out = vec![0.0; n_tok * tl];
    for u in 0..n_tok {
        let alive = state[u * 4 + 3] != 0.0;
        if !alive {
            continue;
        }
        let is_ally = u < task.n_allies;
        let t = &mut out[u * tl..(u + 1) * tl];
        t[0] = state[u * 4];
        t[1] = state[u * 4 + 1];
        t[2] = state[u * 4 + 2];
        t[3] = 0.0;
        t[4] = if is_ally { 1.0 } else { 0.0 };
        t[5] = if is_ally { 0.0 } else { 1.0 };
        t[6] = 0.0;
        t[7] = 1.0;
        if is_ally {
            if let Some(acts) = actions {
                let a = acts[u];
                if a >= dims.max_actions() {
                    return Err(Error::Contract(format!(
                        "action id {a} exceeds capacity {}",
                        dims.max_actions()
                    )));
                }
                t[TOKEN_FEATURES + a] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Pad a recorded per-agent observation into capacity slots and append the
/// previous-action one-hot: the per-step input of every recurrent trunk.
///
/// Slot layout: self, then `max_allies - 1` other-ally slots, then
/// `max_enemies` enemy slots; absent units stay zero.
pub fn stream_features(
    obs: &[f64],
    prev_action: Option<usize>,
    task: &TaskSpec,
    dims: &NetDims,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), dims.stream_input());
    for v in out.iter_mut() {
        *v = 0.0;
    }
    let n_real = task.n_entities();
    debug_assert_eq!(obs.len(), n_real * TOKEN_FEATURES);
    // Real token r maps to capacity slot: self and allies keep their index,
    // enemies shift up past the unused ally slots.
    for r in 0..n_real {
        let slot = if r < task.n_allies {
            r
        } else {
            dims.max_allies + (r - task.n_allies)
        };
        out[slot * TOKEN_FEATURES..(slot + 1) * TOKEN_FEATURES]
            .copy_from_slice(&obs[r * TOKEN_FEATURES..(r + 1) * TOKEN_FEATURES]);
    }
    if let Some(a) = prev_action {
        out[TOKEN_FEATURES * dims.max_entities() + a] = 1.0;
    }
}

/// Pad a task action mask to capacity length.
pub fn pad_mask(mask: &[bool], dims: &NetDims) -> Vec<bool> {
    let mut out = vec![false; dims.max_actions()];
    out[..mask.len()].copy_from_slice(mask);
    out
}

/// Monotone mixing network evaluated from raw hypernetwork outputs:
/// Q_tot = |w2| . elu(W1 q + b1) + b2 with W1 entries made non-negative.
/// `w1` is laid out agent-major: agent i owns w1[i*mix_hidden..(i+1)*..].
pub fn mix_with_weights(q: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: f64) -> f64 {
    let mh = b1.len();
    debug_assert!(w1.len() >= q.len() * mh);
    let mut hidden = b1.to_vec();
    for (i, &qi) in q.iter().enumerate() {
        for j in 0..mh {
            hidden[j] += w1[i * mh + j].abs() * qi;
        }
    }
    let mut out = b2;
    for j in 0..mh {
        out += w2[j].abs() * elu(hidden[j]);
    }
    out
}

/// Hypernetwork outputs for one pooled state embedding.
pub struct MixWeights {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

pub fn hyper_weights(params: &ParamBundle, state_emb: &[f64]) -> MixWeights {
    let w1 = linear_row(params.get("mix.w1.w"), params.get("mix.w1.b"), state_emb);
    let b1 = linear_row(params.get("mix.b1.w"), params.get("mix.b1.b"), state_emb);
    let w2 = linear_row(params.get("mix.w2.w"), params.get("mix.w2.b"), state_emb);
    let b2 = linear_row(params.get("mix.b2.w"), params.get("mix.b2.b"), state_emb)[0];
    MixWeights { w1, b1, w2, b2 }
}

/// Q_tot for one step given individual chosen values and the pooled state
/// embedding.
pub fn mix_plain(params: &ParamBundle, q: &[f64], state_emb: &[f64]) -> f64 {
    let w = hyper_weights(params, state_emb);
    mix_with_weights(q, &w.w1, &w.b1, &w.w2, w.b2)
}
