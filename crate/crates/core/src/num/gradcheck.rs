//! Finite-difference verification of tape gradients.
//!
//! Central differences with a configurable step, compared entry-by-entry
//! against the analytic gradients from one backward pass. Every entry is
//! probed up to a budget of 10^4; larger parameter sets are subsampled with a
//! fixed-seed RNG so the check stays deterministic.

use crate::error::{Error, Result};
use crate::num::optim::ParamBundle;
use crate::num::tape::{Tape, TensorId};
use crate::num::tensor::Tensor;
use crate::rng::Rng;

pub const DEFAULT_FD_STEP: f64 = 1e-5;
const PROBE_BUDGET: usize = 10_000;

/// Maximum relative error between analytic and central-difference gradients.
///
/// `loss_fn` must build the loss from the registered parameter ids and be
/// deterministic across calls; it is invoked once with gradients and twice
/// per probed entry for the differences.
pub fn grad_check<F>(loss_fn: F, params: &ParamBundle, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |bundle: &ParamBundle| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = bundle.register(&mut tape);
        let loss = loss_fn(&mut tape, &ids)?;
        let v = tape.value(loss);
        if v.numel() != 1 {
            return Err(Error::Contract(
                "grad_check: loss must be scalar".into(),
            ));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check: loss not finite".into()));
        }
        Ok(v.item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let loss = loss_fn(&mut tape, &ids)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite("grad_check: loss not finite".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = params.grads(&tape, &ids);

    // Entry list, subsampled above the budget.
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (pi, (_, t)) in params.iter().enumerate() {
        for j in 0..t.numel() {
            entries.push((pi, j));
        }
    }
    if entries.len() > PROBE_BUDGET {
        let mut rng = Rng::new(0x5eed_f00d);
        for i in 0..PROBE_BUDGET {
            let j = i + rng.below(entries.len() - i);
            entries.swap(i, j);
        }
        entries.truncate(PROBE_BUDGET);
    }

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut max_rel = 0.0f64;
    let mut work = params.clone();
    for (pi, j) in entries {
        let name = &names[pi];
        let orig = work.get(name).data()[j];
        work.get_mut(name).data_mut()[j] = orig + step;
        let up = eval(&work)?;
        work.get_mut(name).data_mut()[j] = orig - step;
        let down = eval(&work)?;
        work.get_mut(name).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[pi].data()[j];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
