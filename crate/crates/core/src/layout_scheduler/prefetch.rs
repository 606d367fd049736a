use std::sync::mpsc::sync_channel;
use std::thread;

use crate::error::{Error, Result};

use super::schedule::{BatchPlan, PlannedBatch};

/// Loads the plan's batches in order and hands each to `consume`.
///
/// With `depth > 0` a background thread loads ahead while the caller
/// consumes, holding at most `depth` finished batches. With `depth == 0`
/// loading and consumption alternate on the calling thread. A loader
/// failure on batch `k` is reported after batches `0..k` have been
/// consumed. Returns the number of batches consumed.
pub fn run_prefetch_pipeline<B, L, C>(plan: &BatchPlan, depth: usize, load: L, mut consume: C) -> Result<usize>
where
    B: Send,
    L: Fn(usize, &PlannedBatch) -> Result<B> + Sync,
    C: FnMut(usize, B) -> Result<()>,
{
    let wrap = |k: usize, e: Error| match e {
        e @ Error::Load { .. } => e,
        e => Error::Load {
            batch: k,
            message: e.to_string(),
        },
    };
    if depth == 0 {
        for (k, pb) in plan.batches.iter().enumerate() {
            let b = load(k, pb).map_err(|e| wrap(k, e))?;
            consume(k, b)?;
        }
        return Ok(plan.len());
    }
    thread::scope(|s| {
        let (tx, rx) = sync_channel::<(usize, Result<B>)>(depth);
        let load = &load;
        s.spawn(move || {
            for (k, pb) in plan.batches.iter().enumerate() {
                let r = load(k, pb);
                let failed = r.is_err();
                if tx.send((k, r)).is_err() || failed {
                    break;
                }
            }
        });
        let mut consumed = 0;
        for (k, r) in rx {
            let b = r.map_err(|e| wrap(k, e))?;
            consume(k, b)?;
            consumed += 1;
        }
        Ok(consumed)
    })
}
