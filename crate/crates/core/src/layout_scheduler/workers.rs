//! Logical-worker simulation of the layout broadcast. Each worker builds
//! the epoch plan from its own copy of the sampler seed; rank 0's plan is
//! the broadcast reference.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pretraining::{apply_update, batch_gradients, AdamW, Losses, PatchBatch, PretrainConfig, StepRecord};
use crate::scalar::Real;
use crate::tensor::Matrix;

use super::schedule::{make_epoch_schedule, BatchPlan, DatasetIndex};

#[derive(Clone, Debug)]
pub struct WorkerSim {
    index: Arc<DatasetIndex>,
    batch_size: usize,
    seeds: Vec<u64>,
    plans: Vec<BatchPlan>,
}

impl WorkerSim {
    pub fn new(index: Arc<DatasetIndex>, batch_size: usize, seed: u64, workers: usize) -> Self {
        assert!(workers >= 1, "at least one worker");
        let plan = make_epoch_schedule(&index, batch_size, seed);
        Self {
            index,
            batch_size,
            seeds: vec![seed; workers],
            plans: vec![plan; workers],
        }
    }

    pub fn worker_count(&self) -> usize {
        self.seeds.len()
    }

    /// Number of global steps in the epoch.
    pub fn steps(&self) -> usize {
        self.plans[0].len()
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plans[0]
    }

    /// Fault injection: gives `rank` a different sampler seed.
    pub fn corrupt_seed(&mut self, rank: usize, seed: u64) {
        self.seeds[rank] = seed;
        self.plans[rank] = make_epoch_schedule(&self.index, self.batch_size, seed);
    }

    /// Layout of global step `step` (1-based) after checking that every
    /// worker's sampler agrees with rank 0 on both layout and samples.
    pub fn sync_layout_index(&self, step: usize) -> Result<String> {
        assert!(step >= 1 && step <= self.steps(), "step {step} outside the epoch");
        let reference = &self.plans[0].batches[step - 1];
        for (rank, plan) in self.plans.iter().enumerate().skip(1) {
            if plan.batches.get(step - 1) != Some(reference) {
                return Err(Error::DesyncDetected { step, rank });
            }
        }
        Ok(reference.signature.clone())
    }

    /// Contiguous slice of step `step`'s samples owned by `rank`; the
    /// first `len % workers` ranks take one extra sample.
    pub fn shard(&self, step: usize, rank: usize) -> Vec<u64> {
        shard_range(&self.plans[rank].batches[step - 1].sample_ids, self.worker_count(), rank).to_vec()
    }
}

/// Contiguous split of `ids` over `workers`, remainder to the lowest ranks.
pub fn shard_range<X>(ids: &[X], workers: usize, rank: usize) -> &[X] {
    let base = ids.len() / workers;
    let extra = ids.len() % workers;
    let start = rank * base + rank.min(extra);
    let len = base + usize::from(rank < extra);
    &ids[start..start + len]
}

/// One data-parallel step: each of `workers` ranks computes the gradient of
/// its contiguous shard (normalized by the full batch size), the shard
/// gradients are summed in rank order and applied once.
pub fn data_parallel_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &PatchBatch<T>,
    config: &PretrainConfig,
    workers: usize,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len();
    let step = opt.step;
    let mut total: Option<Vec<Matrix<T>>> = None;
    let mut losses = Losses::default();
    for rank in 0..workers {
        let shard = shard_range(&batch.samples, workers, rank);
        let (l, g) = batch_gradients(model, batch, shard, config, step, n)?;
        losses.quantization += l.quantization;
        losses.spectrum += l.spectrum;
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let grads = total.expect("at least one worker");
    apply_update(model, opt, &grads, losses, &batch.signature)
}
