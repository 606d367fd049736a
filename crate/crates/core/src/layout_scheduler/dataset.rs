use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::channel_dictionary::{GlobalDictionary, LayoutMapping};
use crate::error::{Error, Result};
use crate::pretraining::PatchBatch;
use crate::scalar::Real;
use crate::signal::{preprocess, PreprocessConfig, Recording};
use crate::tensor::Matrix;

use super::container::{
    labels_path, parse_manifest, read_labels, read_sample, read_subset_header, subset_path, ManifestEntry,
    SubsetHeader, MANIFEST_FILE,
};
use super::schedule::{group_by_layout, DatasetIndex, PlannedBatch};

/// An opened dataset directory with every layout resolved.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Vec<ManifestEntry>,
    pub headers: Vec<SubsetHeader>,
    pub layouts: Vec<Arc<LayoutMapping>>,
    /// Per subset, when a labels file exists.
    pub labels: Vec<Option<Vec<usize>>>,
    pub index: Arc<DatasetIndex>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>, dict: &GlobalDictionary) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mpath = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = parse_manifest(&text)?;
        let mut headers = Vec::new();
        let mut layouts = Vec::new();
        let mut labels = Vec::new();
        for e in &manifest {
            let h = read_subset_header(&subset_path(&root, &e.subset_id))?;
            if h.channels != e.channels || h.num_samples != e.num_samples || h.sample_rate != e.sample_rate {
                return Err(Error::Manifest(format!(
                    "subset {} disagrees with its file header",
                    e.subset_id
                )));
            }
            let layout = dict.map_layout(&e.channels, e.subset_id.clone())?;
            if layout.signature() != e.signature {
                return Err(Error::Manifest(format!(
                    "subset {}: signature {} does not match its resolved layout {}",
                    e.subset_id,
                    e.signature,
                    layout.signature()
                )));
            }
            let lp = labels_path(&root, &e.subset_id);
            let l = if lp.exists() {
                let l = read_labels(&lp)?;
                if l.len() != e.num_samples {
                    return Err(Error::Manifest(format!(
                        "subset {}: {} labels for {} samples",
                        e.subset_id,
                        l.len(),
                        e.num_samples
                    )));
                }
                Some(l)
            } else {
                None
            };
            headers.push(h);
            layouts.push(Arc::new(layout));
            labels.push(l);
        }
        let index = Arc::new(group_by_layout(&manifest));
        Ok(Self {
            root,
            manifest,
            headers,
            layouts,
            labels,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn label(&self, id: u64) -> Option<usize> {
        let s = self.index.sample(id);
        self.labels[s.subset].as_ref().map(|l| l[s.offset])
    }

    pub fn layout_of(&self, id: u64) -> &Arc<LayoutMapping> {
        &self.layouts[self.index.sample(id).subset]
    }

    /// Raw `C × T` samples of the kept channels.
    pub fn raw_sample(&self, id: u64) -> Result<Recording<f32>> {
        let s = self.index.sample(id);
        let e = &self.manifest[s.subset];
        let m = read_sample(&subset_path(&self.root, &e.subset_id), &self.headers[s.subset], s.offset)?;
        let layout = &self.layouts[s.subset];
        let kept = m.gather_rows(&layout.kept_indices);
        Recording::new(kept, e.sample_rate).with_layout(Arc::clone(layout))
    }

    /// Preprocessed patches of one sample, keeping at most `max_steps`
    /// time patches.
    pub fn patches<T: Real>(&self, id: u64, pre: &PreprocessConfig, max_steps: usize) -> Result<(Matrix<T>, usize)> {
        let rec = self.raw_sample(id)?;
        let rec = Recording {
            data: rec.data.cast::<T>(),
            sample_rate: rec.sample_rate,
            layout: rec.layout,
        };
        let p = preprocess(&rec, pre)?;
        let steps = p.time_patches.min(max_steps);
        if steps == 0 {
            return Err(Error::ShapeMismatch(format!(
                "sample {id} is shorter than one {}-sample patch",
                pre.window_len
            )));
        }
        let rows: Vec<usize> = (0..p.channels)
            .flat_map(|e| (0..steps).map(move |t| e * p.time_patches + t))
            .collect();
        Ok((p.patches.gather_rows(&rows), steps))
    }

    /// Loads and preprocesses one planned batch.
    pub fn load_batch<T: Real>(&self, batch: &PlannedBatch, pre: &PreprocessConfig, max_steps: usize) -> Result<PatchBatch<T>> {
        let first = *batch.sample_ids.first().ok_or(Error::EmptyBatch)?;
        let layout = Arc::clone(self.layout_of(first));
        let mut samples = Vec::with_capacity(batch.sample_ids.len());
        let mut steps = 0;
        for &id in &batch.sample_ids {
            if self.layout_of(id).signature() != batch.signature {
                return Err(Error::Manifest(format!("sample {id} is not in layout {}", batch.signature)));
            }
            let (p, s) = self.patches(id, pre, max_steps)?;
            if steps != 0 && s != steps {
                return Err(Error::ShapeMismatch(format!(
                    "sample {id} has {s} time patches, batch has {steps}"
                )));
            }
            steps = s;
            samples.push((id, p));
        }
        Ok(PatchBatch {
            signature: batch.signature.clone(),
            coords: layout.coordinates.clone(),
            steps,
            samples,
        })
    }
}
