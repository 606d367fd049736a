//! Synthetic corpus with a planted, hemisphere-dependent class signal.
//!
//! Class `c` adds a `10 + 2c` Hz sinusoid of amplitude [`PLANT_AMPLITUDE`]
//! to every EEG channel on the left (`x < 0`, even `c`) or right (`x > 0`,
//! odd `c`) side of the head, over Gaussian noise of standard deviation
//! `noise_sigma`. The sinusoid's phase is random per sample and shared by
//! all planted channels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::channel_dictionary::GlobalDictionary;
use crate::error::{Error, Result};
use crate::layout_scheduler::{labels_path, manifest_text, subset_path, write_labels, write_subset, ManifestEntry, MANIFEST_FILE};
use crate::tensor::Matrix;

pub const PLANT_AMPLITUDE: f64 = 3.0;

pub fn planted_frequency(class: usize) -> f64 {
    10.0 + 2.0 * class as f64
}

/// Whether class `class` is planted on a channel at lateral position `x`.
pub fn planted_on(class: usize, x: f64) -> bool {
    if class % 2 == 0 {
        x < 0.0
    } else {
        x > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub layouts: Vec<Vec<String>>,
    pub samples_per_layout: usize,
    pub classes: usize,
    pub sample_rate: f64,
    /// Seconds per sample.
    pub duration: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Patch length the data must cover at least once.
    pub window_len: usize,
}

impl SynthSpec {
    pub fn samples_per_recording(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }
}

/// Two disjoint 10-10 layouts, each with channels on both hemispheres and
/// none on the midline.
pub fn default_layouts() -> Vec<Vec<String>> {
    let a = ["Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2"];
    let b = ["AF7", "AF8", "FC5", "FC6", "T7", "T8", "CP5", "CP6", "PO7", "PO8"];
    [a.as_slice(), b.as_slice()]
        .iter()
        .map(|l| l.iter().map(|s| s.to_string()).collect())
        .collect()
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            layouts: default_layouts(),
            samples_per_layout: 200,
            classes: 2,
            sample_rate: 200.0,
            duration: 4.0,
            noise_sigma: 1.0,
            seed: 0,
            window_len: 200,
        }
    }
}

fn layout_seed(seed: u64, layout: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(layout as u64 + 1)
}

/// Writes the dataset under `root` and returns its manifest.
pub fn generate(spec: &SynthSpec, dict: &GlobalDictionary, root: &Path) -> Result<Vec<ManifestEntry>> {
    let t = spec.samples_per_recording();
    if spec.classes == 0 || t < spec.window_len.max(1) || spec.noise_sigma.is_nan() || spec.noise_sigma < 0.0 {
        return Err(Error::ShapeMismatch(format!(
            "synthetic spec needs classes > 0 and at least {} samples per recording",
            spec.window_len
        )));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("non-negative sigma");
    let mut manifest = Vec::new();
    for (li, names) in spec.layouts.iter().enumerate() {
        let mapping = dict
            .map_layout(names, format!("layout{li}"))
            .map_err(|_| Error::UnresolvableLayout(li))?;
        if mapping.channel_count() < 2 {
            return Err(Error::UnresolvableLayout(li));
        }
        // x-coordinate per source channel, None when not a kept EEG channel.
        let mut lateral = vec![None; names.len()];
        for (k, &src) in mapping.kept_indices.iter().enumerate() {
            lateral[src] = Some(mapping.coordinates[k][0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(layout_seed(spec.seed, li));
        let mut labels: Vec<usize> = (0..spec.samples_per_layout).map(|s| s % spec.classes).collect();
        labels.shuffle(&mut rng);
        let mut samples = Vec::with_capacity(labels.len());
        for &class in &labels {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let w = std::f64::consts::TAU * planted_frequency(class) / spec.sample_rate;
            let m = Matrix::from_fn(names.len(), t, |ch, n| {
                let mut v = noise.sample(&mut rng);
                if lateral[ch].is_some_and(|x| planted_on(class, x)) {
                    v += PLANT_AMPLITUDE * (w * n as f64 + phase).sin();
                }
                v as f32
            });
            samples.push(m);
        }
        let subset_id = mapping.subset_id.clone();
        write_subset(&subset_path(root, &subset_id), names, spec.sample_rate, &samples)?;
        write_labels(&labels_path(root, &subset_id), &labels)?;
        manifest.push(ManifestEntry {
            subset_id,
            signature: mapping.signature(),
            channels: names.clone(),
            sample_rate: spec.sample_rate,
            num_samples: samples.len(),
        });
    }
    let mpath = root.join(MANIFEST_FILE);
    std::fs::write(&mpath, manifest_text(&manifest)).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}
