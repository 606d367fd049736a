//! Fine-tuning, the 3:1:1 split protocol over seeds, and classification
//! metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layout_scheduler::{epoch_seed, make_epoch_schedule, Dataset};
use crate::model::Model;
use crate::pretraining::{AdamW, OptimConfig};
use crate::scalar::Real;
use crate::signal::PreprocessConfig;
use crate::tensor::Matrix;

/// Seeded shuffle, then contiguous `⌊3n/5⌋ / ⌊n/5⌋ / rest` split.
pub fn split_dataset(ids: &[u64], seed: u64) -> Result<(Vec<u64>, Vec<u64>, Vec<u64>)> {
    let n = ids.len();
    if n < 5 {
        return Err(Error::TooFewSamples(n));
    }
    let mut v = ids.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = 3 * n / 5;
    let val = n / 5;
    let test = v.split_off(train + val);
    let valid = v.split_off(train);
    Ok((v, valid, test))
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        assert!(counts.iter().all(|r| r.len() == counts.len()), "square matrix");
        Self { counts }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Self {
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    fn f1(&self, c: usize) -> f64 {
        let tp = self.counts[c][c] as f64;
        let (s, p) = (self.support(c) as f64, self.predicted(c) as f64);
        if tp == 0.0 {
            return 0.0;
        }
        let (precision, recall) = (tp / p, tp / s);
        2.0 * precision * recall / (precision + recall)
    }

    fn check(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::EmptyMatrix)
        } else {
            Ok(())
        }
    }
}

/// Mean recall over classes with nonzero support.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check()?;
    let recalls: Vec<f64> = (0..cm.classes())
        .filter(|&c| cm.support(c) > 0)
        .map(|c| cm.counts[c][c] as f64 / cm.support(c) as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Unweighted mean F1 over classes with nonzero support.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check()?;
    let f: Vec<f64> = (0..cm.classes()).filter(|&c| cm.support(c) > 0).map(|c| cm.f1(c)).collect();
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

/// Support-weighted mean F1.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check()?;
    let total = cm.total() as f64;
    Ok((0..cm.classes()).map(|c| cm.support(c) as f64 * cm.f1(c)).sum::<f64>() / total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 3] = ["balanced_accuracy", "weighted_f1", "macro_f1"];

    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            balanced_accuracy: balanced_accuracy(cm)?,
            weighted_f1: weighted_f1(cm)?,
            macro_f1: macro_f1(cm)?,
        })
    }

    pub fn values(&self) -> [f64; 3] {
        [self.balanced_accuracy, self.weighted_f1, self.macro_f1]
    }
}

/// Mean and sample (n − 1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Train only the classifier head.
    pub linear_probe: bool,
    pub preprocess: PreprocessConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            optim: OptimConfig::default(),
            linear_probe: false,
            preprocess: PreprocessConfig::default(),
        }
    }
}

/// Preprocessed patches for a set of samples, computed once.
pub struct PatchCache<T> {
    entries: HashMap<u64, (Matrix<T>, usize)>,
}

impl<T: Real> PatchCache<T> {
    pub fn build(dataset: &Dataset, ids: &[u64], pre: &PreprocessConfig, max_steps: usize) -> Result<Self> {
        let mut entries = HashMap::with_capacity(ids.len());
        for &id in ids {
            if let std::collections::hash_map::Entry::Vacant(slot) = entries.entry(id) {
                slot.insert(dataset.patches(id, pre, max_steps)?);
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, id: u64) -> &(Matrix<T>, usize) {
        &self.entries[&id]
    }
}

fn labels_of(dataset: &Dataset, ids: &[u64]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&id| {
            dataset
                .label(id)
                .ok_or_else(|| Error::Manifest(format!("sample {id} has no label")))
        })
        .collect()
}

/// Class logits for one sample, `1 × L`.
pub fn sample_logits<T: Real>(model: &Model<T>, patches: &Matrix<T>, coords: &[[f64; 3]], steps: usize) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let s = Model::sample_vars(&mut g, patches, coords, steps);
    let enc = model.encode(&mut g, &s, None)?;
    let logits = model.classify(&mut g, &enc)?;
    Ok(g.value(logits).clone())
}

/// Logits for a layout-homogeneous batch, `B × L`.
pub fn finetune_forward<T: Real>(model: &Model<T>, batch: &[Matrix<T>], coords: &[[f64; 3]], steps: usize) -> Result<Matrix<T>> {
    let l = model
        .num_classes()
        .ok_or_else(|| Error::ShapeMismatch("model has no classifier head".into()))?;
    let mut out = Matrix::zeros(batch.len(), l);
    for (i, p) in batch.iter().enumerate() {
        out.row_mut(i).copy_from_slice(sample_logits(model, p, coords, steps)?.row(0));
    }
    Ok(out)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Real>(model: &Model<T>, dataset: &Dataset, cache: &PatchCache<T>, ids: &[u64]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&id| {
            let (p, steps) = cache.get(id);
            let logits = sample_logits(model, p, &dataset.layout_of(id).coordinates, *steps)?;
            Ok(argmax(logits.row(0)))
        })
        .collect()
}

pub fn evaluate<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    cache: &PatchCache<T>,
    ids: &[u64],
    classes: usize,
) -> Result<(Metrics, ConfusionMatrix)> {
    let truth = labels_of(dataset, ids)?;
    let pred = predict(model, dataset, cache, ids)?;
    let cm = ConfusionMatrix::from_predictions(classes, &truth, &pred);
    Ok((Metrics::from_confusion(&cm)?, cm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
}

/// Trains a classifier head (and, unless probing, the backbone) with
/// cross-entropy. Returns the weights from the epoch with the best
/// validation balanced accuracy (earliest on ties).
#[allow(clippy::too_many_arguments)]
pub fn finetune<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    cache: &PatchCache<T>,
    train: &[u64],
    val: &[u64],
    classes: usize,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(Model<T>, Vec<EpochRecord>)> {
    let mut model = model.clone();
    model.add_classifier(classes);
    let trainable: Vec<bool> = model
        .params
        .iter()
        .map(|(_, n, _)| !cfg.linear_probe || n.starts_with("classifier."))
        .collect();
    let train_index = dataset.index.restrict(train);
    let steps_per_epoch = make_epoch_schedule(&train_index, cfg.batch_size, seed).len();
    let mut optim = cfg.optim.clone();
    optim.total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::new(optim, &model.params);

    let mut best = (f64::NEG_INFINITY, model.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let plan = make_epoch_schedule(&train_index, cfg.batch_size, epoch_seed(seed, epoch));
        let mut loss_sum = 0.0;
        for pb in &plan.batches {
            let n = pb.sample_ids.len();
            let labels = labels_of(dataset, &pb.sample_ids)?;
            let coords = &dataset.layout_of(pb.sample_ids[0]).coordinates;
            let mut grads = model.params.zeros_like();
            let inv = T::one() / T::of_usize(n);
            for (&id, &y) in pb.sample_ids.iter().zip(&labels) {
                let (p, steps) = cache.get(id);
                let mut g = Graph::new();
                let s = Model::sample_vars(&mut g, p, coords, *steps);
                let enc = model.encode(&mut g, &s, None)?;
                let logits = model.classify(&mut g, &enc)?;
                let ce = g.cross_entropy(logits, vec![y]);
                let ce = g.scale(ce, inv);
                let v = g.scalar(ce);
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss(opt.step + 1));
                }
                loss_sum += v.as_f64() * n as f64;
                for (a, b) in grads.iter_mut().zip(g.backward(ce).param_grads(&g, &model.params)) {
                    a.add_assign(&b);
                }
            }
            opt.apply(&mut model.params, &grads, Some(&trainable));
        }
        let (m, _) = evaluate(&model, dataset, cache, val, classes)?;
        log::info!(
            "finetune seed {seed} epoch {}: train loss {:.4}, val balanced accuracy {:.4}",
            epoch + 1,
            loss_sum / train.len() as f64,
            m.balanced_accuracy
        );
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            val_balanced_accuracy: m.balanced_accuracy,
        });
        if m.balanced_accuracy > best.0 {
            best = (m.balanced_accuracy, model.clone());
        }
    }
    Ok((best.1, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub test: Metrics,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolResult {
    pub dataset: String,
    pub seeds: Vec<SeedResult>,
}

impl ProtocolResult {
    /// `(mean, std)` per metric, in [`Metrics::NAMES`] order.
    pub fn summary(&self) -> [(f64, f64); 3] {
        let per: Vec<[f64; 3]> = self.seeds.iter().map(|s| s.test.values()).collect();
        std::array::from_fn(|k| mean_std(&per.iter().map(|v| v[k]).collect::<Vec<_>>()))
    }

    /// Text table: `dataset, metric, mean, std, seed_values`.
    pub fn table(&self) -> String {
        let mut s = String::from("# dataset, metric, mean, std, seed_values\n");
        for (k, (mean, std)) in self.summary().iter().enumerate() {
            let vals: Vec<String> = self.seeds.iter().map(|r| format!("{:.6}", r.test.values()[k])).collect();
            let _ = writeln!(
                s,
                "{}, {}, {:.6}, {:.6}, {}",
                self.dataset,
                Metrics::NAMES[k],
                mean,
                std,
                vals.join(";")
            );
        }
        s
    }
}

/// For each seed: split 3:1:1, fine-tune, keep the best-validation
/// weights, score them on the test split.
pub fn run_protocol<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    ids: &[u64],
    name: &str,
    seeds: &[u64],
    classes: usize,
    cfg: &FinetuneConfig,
) -> Result<ProtocolResult> {
    let cache = PatchCache::build(dataset, ids, &cfg.preprocess, model.config.max_time_patches)?;
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (train, val, test) = split_dataset(ids, seed)?;
        let (best, history) = finetune(model, dataset, &cache, &train, &val, classes, cfg, seed)?;
        let (test_metrics, _) = evaluate(&best, dataset, &cache, &test, classes)?;
        log::info!("seed {seed}: test balanced accuracy {:.4}", test_metrics.balanced_accuracy);
        results.push(SeedResult {
            seed,
            test: test_metrics,
            history,
        });
    }
    Ok(ProtocolResult {
        dataset: name.to_string(),
        seeds: results,
    })
}
