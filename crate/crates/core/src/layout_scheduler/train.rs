use crate::error::Result;
use crate::model::Model;
use crate::pretraining::{pretrain_step, AdamW, PretrainConfig, StepRecord};
use crate::scalar::Real;
use crate::signal::PreprocessConfig;

use super::dataset::Dataset;
use super::prefetch::run_prefetch_pipeline;
use super::schedule::{epoch_seed, make_epoch_schedule};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRun {
    pub steps: usize,
    pub batch_size: usize,
    pub prefetch_depth: usize,
    pub preprocess: PreprocessConfig,
    pub objective: PretrainConfig,
}

/// Runs `run.steps` pretraining steps over as many epochs as needed,
/// loading batches through the prefetch pipeline. `on_step` sees every
/// log record.
pub fn pretrain_on_dataset<T: Real>(
    model: &mut Model<T>,
    dataset: &Dataset,
    run: &PretrainRun,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let mut optim = run.objective.optim.clone();
    optim.total_steps = run.steps;
    let mut opt = AdamW::new(optim, &model.params);
    let mut records = Vec::with_capacity(run.steps);
    let max_steps = model.config.max_time_patches;
    let mut epoch = 0;
    while records.len() < run.steps && !dataset.is_empty() {
        let mut plan = make_epoch_schedule(&dataset.index, run.batch_size, epoch_seed(run.objective.seed, epoch));
        plan.batches.truncate(run.steps - records.len());
        run_prefetch_pipeline(
            &plan,
            run.prefetch_depth,
            |_, pb| dataset.load_batch::<T>(pb, &run.preprocess, max_steps),
            |_, batch| {
                let rec = pretrain_step(model, &mut opt, &batch, &run.objective)?;
                on_step(&rec);
                records.push(rec);
                Ok(())
            },
        )?;
        epoch += 1;
    }
    Ok(records)
}
