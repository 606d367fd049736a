//! Masked self-supervised objective: codebook quantization loss on the
//! temporal encoder outputs plus Fourier amplitude/phase prediction for
//! masked patches.

mod mask;
mod optim;
mod quantize;
mod spectrum;
#[cfg(test)]
mod tests;

use std::fmt;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Real;
use crate::tensor::Matrix;

pub use mask::{mask_count, mask_patches, mask_seed, MaskPlan};
pub use optim::{AdamW, OptimConfig};
pub use quantize::{quantization_loss, quantize, quantize_rows};
pub use spectrum::{spectrum_loss, spectrum_matrices, spectrum_targets, SpectrumTarget, PHASE_FLOOR_ULPS};

/// Layout-homogeneous group of preprocessed samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch<T> {
    pub signature: String,
    /// One row per channel, meters.
    pub coords: Vec<[f64; 3]>,
    pub steps: usize,
    /// `(sample id, (C·N_t) × w patches)`.
    pub samples: Vec<(u64, Matrix<T>)>,
}

impl<T> PatchBatch<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.5,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

/// Losses for one sample or averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    pub quantization: f64,
    pub spectrum: f64,
}

impl Losses {
    pub fn total(&self) -> f64 {
        self.quantization + self.spectrum
    }
}

/// One line of the training log. Steps are numbered from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub losses: Losses,
    pub lr: f64,
    pub signature: String,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}, {:.6e}, {:.6e}, {:.6e}, {:.6e}, {}",
            self.step,
            self.losses.quantization,
            self.losses.spectrum,
            self.losses.total(),
            self.lr,
            self.signature
        )
    }
}

/// Builds both losses for one sample. `L_Q` covers every patch, `L_S` only
/// the masked ones.
pub fn sample_losses<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    patches: &Matrix<T>,
    coords: &[[f64; 3]],
    steps: usize,
    plan: &MaskPlan,
) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
    let s = Model::sample_vars(g, patches, coords, steps);
    let enc = model.encode(g, &s, Some(&plan.mask))?;

    let codebook = g.param_by_name(&model.params, "codebook");
    let indices = quantize_rows(g.value(enc.patch_emb), g.value(codebook));
    let l_q = quantization_loss(g, enc.patch_emb, codebook, &indices)?;

    let w = g.param_by_name(&model.params, "spectrum_head.w");
    let b = g.param_by_name(&model.params, "spectrum_head.b");
    let n = plan.mask.len();
    let h = g.gather(enc.hidden, (1..=n).collect());
    let pred = g.linear(h, w, b);
    let l_s = masked_spectrum_loss(g, pred, patches, plan)?;
    Ok((l_q, l_s))
}

/// `L_S` over the masked rows of `pred` (one row per patch, amplitude bins
/// then phase bins). Unmasked rows receive no gradient.
pub fn masked_spectrum_loss<T: Real>(
    g: &mut Graph<T>,
    pred: crate::autodiff::Var,
    patches: &Matrix<T>,
    plan: &MaskPlan,
) -> Result<crate::autodiff::Var> {
    let bins = patches.cols() / 2 + 1;
    if g.value(pred).shape() != (patches.rows(), 2 * bins) || plan.mask.len() != patches.rows() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {:?} for {} patches of {}",
            g.value(pred).shape(),
            patches.rows(),
            patches.cols()
        )));
    }
    let masked = plan.masked_indices();
    let sel = g.gather(pred, masked.clone());
    let pred_amp = g.slice_cols(sel, 0, bins);
    let pred_phase = g.slice_cols(sel, bins, bins);
    let (amp, phase) = spectrum_matrices(&patches.gather_rows(&masked));
    let amp = g.constant(amp);
    let phase = g.constant(phase);
    spectrum_loss(g, pred_amp, pred_phase, amp, phase)
}

/// Summed gradient of `Σ_samples (L_Q + L_S) / divisor` over the given
/// samples, with the loss parts divided the same way. Passing the full
/// batch size as `divisor` lets shards of one batch be summed.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &PatchBatch<T>,
    samples: &[(u64, Matrix<T>)],
    config: &PretrainConfig,
    step: usize,
    divisor: usize,
) -> Result<(Losses, Vec<Matrix<T>>)> {
    let mut grads = model.params.zeros_like();
    let mut losses = Losses::default();
    let inv = T::one() / T::of_usize(divisor.max(1));
    for (id, patches) in samples {
        let n = patches.rows();
        let plan = mask_patches(n, config.mask_ratio, mask_seed(config.seed, step, *id));
        let mut g = Graph::new();
        let (l_q, l_s) = sample_losses(model, &mut g, patches, &batch.coords, batch.steps, &plan)?;
        let total = g.add(l_q, l_s);
        let total = g.scale(total, inv);
        if !g.scalar(total).is_finite() {
            return Err(Error::NonFiniteLoss(step + 1));
        }
        losses.quantization += (g.scalar(l_q) * inv).as_f64();
        losses.spectrum += (g.scalar(l_s) * inv).as_f64();
        let sample_grads = g.backward(total).param_grads(&g, &model.params);
        for (acc, sg) in grads.iter_mut().zip(&sample_grads) {
            acc.add_assign(sg);
        }
    }
    Ok((losses, grads))
}

/// Losses on a batch with the step's masks, without a parameter update.
pub fn evaluate_batch<T: Real>(
    model: &Model<T>,
    batch: &PatchBatch<T>,
    config: &PretrainConfig,
    step: usize,
) -> Result<Losses> {
    let mut losses = Losses::default();
    let n = batch.len().max(1) as f64;
    for (id, patches) in &batch.samples {
        let plan = mask_patches(patches.rows(), config.mask_ratio, mask_seed(config.seed, step, *id));
        let mut g = Graph::new();
        let (l_q, l_s) = sample_losses(model, &mut g, patches, &batch.coords, batch.steps, &plan)?;
        losses.quantization += g.scalar(l_q).as_f64() / n;
        losses.spectrum += g.scalar(l_s).as_f64() / n;
    }
    Ok(losses)
}

/// Gradient step on the batch mean of `L_Q + L_S`. On a non-finite loss
/// or gradient nothing is updated.
pub fn pretrain_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &PatchBatch<T>,
    config: &PretrainConfig,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let step = opt.step;
    let (losses, grads) = batch_gradients(model, batch, &batch.samples, config, step, batch.len())?;
    apply_update(model, opt, &grads, losses, &batch.signature)
}

/// Applies already-reduced gradients (e.g. summed worker shards).
pub fn apply_update<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    grads: &[Matrix<T>],
    losses: Losses,
    signature: &str,
) -> Result<StepRecord> {
    if !losses.total().is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFiniteLoss(opt.step + 1));
    }
    let lr = opt.apply(&mut model.params, grads, None);
    debug_assert!(model.params.all_finite());
    Ok(StepRecord {
        step: opt.step,
        losses,
        lr,
        signature: signature.to_string(),
    })
}
