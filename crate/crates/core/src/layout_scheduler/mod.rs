//! Layout-homogeneous batching: dataset container, per-layout grouping,
//! epoch plans, background prefetch and the logical-worker simulation.

mod container;
mod dataset;
mod prefetch;
mod schedule;
mod train;
mod workers;

pub use container::{
    labels_path, manifest_text, parse_manifest, read_labels, read_sample, read_subset_header, subset_path,
    write_labels, write_subset, ManifestEntry, SubsetHeader, MANIFEST_FILE, SUBSET_MAGIC, SUBSET_VERSION,
};
pub use dataset::Dataset;
pub use prefetch::run_prefetch_pipeline;
pub use schedule::{
    epoch_seed, group_by_layout, make_epoch_schedule, BatchPlan, DatasetIndex, PlannedBatch, SampleRef,
};
pub use workers::{data_parallel_step, shard_range, WorkerSim};
pub use train::{pretrain_on_dataset, PretrainRun};
