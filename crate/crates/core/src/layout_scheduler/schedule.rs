use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::container::ManifestEntry;

/// Where one sample lives.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRef {
    pub sample_id: u64,
    pub signature: String,
    /// Position of the subset in the manifest.
    pub subset: usize,
    /// Sample position inside the subset file.
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    /// Indexed by sample id.
    pub samples: Vec<SampleRef>,
    /// Signature → sample ids, ordered by signature.
    pub groups: BTreeMap<String, Vec<u64>>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: u64) -> &SampleRef {
        &self.samples[id as usize]
    }
}

/// Sample ids are assigned in manifest order.
pub fn group_by_layout(manifest: &[ManifestEntry]) -> DatasetIndex {
    let mut index = DatasetIndex::default();
    for (subset, e) in manifest.iter().enumerate() {
        for offset in 0..e.num_samples {
            let id = index.samples.len() as u64;
            index.samples.push(SampleRef {
                sample_id: id,
                signature: e.signature.clone(),
                subset,
                offset,
            });
            index.groups.entry(e.signature.clone()).or_default().push(id);
        }
    }
    index
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedBatch {
    pub signature: String,
    pub sample_ids: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batches: Vec<PlannedBatch>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Shuffles each layout group, cuts it into batches (the last one may be
/// short), then interleaves groups by drawing each slot from the remaining
/// groups with probability proportional to their remaining batch count.
pub fn make_epoch_schedule(index: &DatasetIndex, batch_size: usize, seed: u64) -> BatchPlan {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<(String, Vec<Vec<u64>>)> = index
        .groups
        .iter()
        .map(|(sig, ids)| {
            let mut ids = ids.clone();
            ids.shuffle(&mut rng);
            let mut chunks: Vec<Vec<u64>> = ids.chunks(batch_size).map(<[u64]>::to_vec).collect();
            chunks.reverse();
            (sig.clone(), chunks)
        })
        .collect();
    let mut remaining: usize = queues.iter().map(|(_, q)| q.len()).sum();
    let mut batches = Vec::with_capacity(remaining);
    while remaining > 0 {
        let mut draw = rng.random_range(0..remaining);
        let (sig, queue) = queues
            .iter_mut()
            .find(|(_, q)| {
                if draw < q.len() {
                    true
                } else {
                    draw -= q.len();
                    false
                }
            })
            .expect("draw falls inside some group");
        batches.push(PlannedBatch {
            signature: sig.clone(),
            sample_ids: queue.pop().expect("non-empty queue"),
        });
        remaining -= 1;
    }
    BatchPlan { seed, batches }
}

/// Plans for consecutive epochs, seeded from `seed` and the epoch number.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(0xA076_1D64_78BD_642F)
}

impl DatasetIndex {
    /// The same index with groups limited to `ids` (sample ids unchanged).
    pub fn restrict(&self, ids: &[u64]) -> DatasetIndex {
        let keep: std::collections::HashSet<u64> = ids.iter().copied().collect();
        let groups = self
            .groups
            .iter()
            .filter_map(|(sig, members)| {
                let m: Vec<u64> = members.iter().copied().filter(|id| keep.contains(id)).collect();
                (!m.is_empty()).then(|| (sig.clone(), m))
            })
            .collect();
        DatasetIndex {
            samples: self.samples.clone(),
            groups,
        }
    }
}
