//! Named parameter bundles and the Adam optimizer.
//!
//! A `ParamBundle` is an ordered map of named tensors. Registration order is
//! fixed, which keeps runs reproducible and lets optimizer state line up by
//! index. Bundles serialize as NDJSON, one {name, shape, data} record per
//! line.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::tape::{Tape, TensorId};
use crate::num::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamBundle {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        if let Some(&i) = self.index.get(name) {
            self.entries[i].1 = t;
        } else {
            self.index.insert(name.to_string(), self.entries.len());
            self.entries.push((name.to_string(), t));
        }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy every tensor from `other` whose name exists here.
    pub fn copy_from(&mut self, other: &ParamBundle) {
        for (name, t) in other.iter() {
            if self.contains(name) {
                self.insert(name, t.clone());
            }
        }
    }

    /// Merge: insert every entry of `other` (prefixing optional).
    pub fn absorb(&mut self, other: &ParamBundle, prefix: &str) {
        for (name, t) in other.iter() {
            self.insert(&format!("{prefix}{name}"), t.clone());
        }
    }

    /// Extract the sub-bundle whose names start with `prefix`, stripping it.
    pub fn extract(&self, prefix: &str) -> ParamBundle {
        let mut out = ParamBundle::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Register every tensor as a tape parameter, in bundle order.
    pub fn register(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.entries.iter().map(|(_, t)| tape.param(t)).collect()
    }

    /// Register with name lookup, as trainable parameters or constants.
    pub fn register_named(&self, tape: &mut Tape, trainable: bool) -> TapeParams {
        let ids = if trainable {
            self.register(tape)
        } else {
            self.entries
                .iter()
                .map(|(_, t)| tape.constant(t.clone()))
                .collect()
        };
        TapeParams {
            ids,
            index: self.index.clone(),
        }
    }

    /// Collect gradients for previously registered ids, in bundle order.
    pub fn grads(&self, tape: &Tape, ids: &[TensorId]) -> Vec<Tensor> {
        ids.iter().map(|&id| tape.grad(id)).collect()
    }

    /// FNV-1a hash over names, shapes and value bits; used to verify that a
    /// set of parameters did not change.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                eat(*b);
            }
            for d in t.shape() {
                for b in d.to_le_bytes() {
                    eat(b);
                }
            }
            for x in t.data() {
                for b in x.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (name, t) in &self.entries {
            let rec = ParamRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            };
            serde_json::to_writer(&mut f, &rec)
                .map_err(|e| Error::Data(format!("serialize {name}: {e}")))?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut out = ParamBundle::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ParamRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("{}: line {}: {e}", path.display(), lineno + 1))
            })?;
            let t = Tensor::new(rec.shape, rec.data).map_err(|e| {
                Error::Data(format!("{}: line {}: {e}", path.display(), lineno + 1))
            })?;
            out.insert(&rec.name, t);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Tape ids for a registered bundle, addressable by parameter name.
pub struct TapeParams {
    pub ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl TapeParams {
    /// View over externally registered ids, ordered like the bundle whose
    /// names are given.
    pub fn from_ids<'a>(ids: &[TensorId], names: impl Iterator<Item = &'a str>) -> Self {
        TapeParams {
            ids: ids.to_vec(),
            index: names
                .enumerate()
                .map(|(i, n)| (n.to_string(), i))
                .collect(),
        }
    }

    pub fn id(&self, name: &str) -> TensorId {
        self.ids[self.index[name]]
    }
}

/// Adam moment estimates, kept in bundle order.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamBundle) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m, v, t: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Gradients must line up with the bundle
/// order (as produced by `ParamBundle::grads`).
pub fn adam_step(
    params: &mut ParamBundle,
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, (name, tensor)) in params.entries.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: tensor.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let _ = name;
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = tensor.data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f64>) -> ParamBundle {
        let mut b = ParamBundle::new();
        let n = v.len();
        b.insert("w", Tensor::new(vec![n], v).unwrap());
        b
    }

    #[test]
    fn zero_grad_leaves_params_unchanged_but_ticks() {
        let mut p = one_param(vec![1.0, -2.0, 3.0]);
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::zeros(&[3])];
        adam_step(&mut p, &g, &mut st, AdamHyper::default()).unwrap();
        assert_eq!(p.get("w").data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_approximates_signed_lr() {
        let lr = 0.01;
        let mut p = one_param(vec![0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::new(vec![2], vec![0.3, -7.0]).unwrap()];
        adam_step(
            &mut p,
            &g,
            &mut st,
            AdamHyper {
                lr,
                ..Default::default()
            },
        )
        .unwrap();
        // First bias-corrected step is -lr * g/(|g| + eps') ~ -lr * sign(g).
        assert!((p.get("w").data()[0] + lr).abs() < 1e-6);
        assert!((p.get("w").data()[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        // Independent scalar Adam oracle, hand-rolled.
        let (lr, b1, b2, eps) = (0.001, 0.9, 0.999, 1e-8);
        let mut w_ref = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1f64(b1, t));
            let vhat = v / (1.0 - b1f64(b2, t));
            w_ref -= lr * mhat / (vhat.sqrt() + eps);
        }
        fn b1f64(b: f64, t: i32) -> f64 {
            b.powi(t)
        }

        let mut p = one_param(vec![0.5]);
        let mut st = AdamState::new(&p);
        let hyper = AdamHyper {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        for _ in 0..2 {
            let g = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
            adam_step(&mut p, &g, &mut st, hyper).unwrap();
        }
        assert!((p.get("w").data()[0] - w_ref).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = one_param(vec![1.0, 2.0]);
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::zeros(&[3])];
        assert!(adam_step(&mut p, &g, &mut st, AdamHyper::default()).is_err());
    }

    #[test]
    fn bundle_roundtrip_preserves_bits() {
        let dir = std::env::temp_dir().join("hygen_bundle_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.ndjson");
        let mut b = ParamBundle::new();
        b.insert(
            "a.w",
            Tensor::new(vec![2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 2.5]).unwrap(),
        );
        b.insert("a.b", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, 7.0]).unwrap());
        b.save(&path).unwrap();
        let loaded = ParamBundle::load(&path).unwrap();
        assert_eq!(loaded.content_hash(), b.content_hash());
    }
}
