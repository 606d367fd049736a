//! Central finite-difference checks of the analytic gradients.
//!
//! The numeric side only ever evaluates the loss forward, so it does not
//! share any code path with the backward pass it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Variant};
use crate::params::Params;
use crate::pretraining::{
    mask_patches, quantization_loss, quantize_rows, sample_losses, spectrum_loss, spectrum_matrices,
};
use crate::tensor::Matrix;

pub const FD_STEP: f64 = 3e-5;
/// Denominator floor for the relative error, as a fraction of
/// `max(1, |loss|)`. Central differences carry rounding noise of about
/// `ε·|loss| / FD_STEP`; gradients that are exactly zero (e.g. a key bias,
/// which softmax ignores) would otherwise divide that noise by nothing.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, REL_FLOOR · loss_scale)`.
pub fn relative_error(analytic: f64, numeric: f64, loss_scale: f64) -> f64 {
    let floor = REL_FLOOR * loss_scale.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<CheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < TOLERANCE
    }

    pub fn extend(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

fn pick(len: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, limit).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks the gradient with respect to every parameter whose name passes
/// `select`, probing at most `per_tensor` entries of each.
pub fn check_params(
    params: &Params<f64>,
    select: impl Fn(&str) -> bool,
    per_tensor: usize,
    seed: u64,
    loss: impl Fn(&Params<f64>, &mut Graph<f64>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let numeric = |p: &Params<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(p, &mut g)?;
        Ok(g.scalar(l))
    };
    check_params_against(params, select, per_tensor, seed, &loss, numeric)
}

/// Like [`check_params`], but differentiates `numeric` by finite
/// differences. Needed where stop-gradients make the analytic gradient
/// differ from the derivative of the loss value.
pub fn check_params_against(
    params: &Params<f64>,
    select: impl Fn(&str) -> bool,
    per_tensor: usize,
    seed: u64,
    analytic: impl Fn(&Params<f64>, &mut Graph<f64>) -> Result<Var>,
    numeric: impl Fn(&Params<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let l = analytic(params, &mut g)?;
    let scale = g.scalar(l).abs().max(1.0);
    let grads = g.backward(l).param_grads(&g, params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (id, name, m) in params.iter() {
        if !select(name) {
            continue;
        }
        let mut worst: f64 = 0.0;
        let idx = pick(m.len(), per_tensor, &mut rng);
        for &i in &idx {
            let orig = m.data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = x;
                numeric(&work)
            };
            let num = (eval(orig + FD_STEP)? - eval(orig - FD_STEP)?) / (2.0 * FD_STEP);
            work.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(grads[id.0].data()[i], num, scale));
        }
        report.entries.push(CheckEntry {
            name: name.to_string(),
            checked: idx.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Checks the gradient with respect to a differentiable input matrix.
pub fn check_input(
    name: &str,
    x0: &Matrix<f64>,
    loss: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<CheckEntry> {
    let numeric = |xp: &Matrix<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(xp.clone());
        let l = loss(&mut g, x)?;
        Ok(g.scalar(l))
    };
    check_input_against(name, x0, &loss, numeric)
}

/// [`check_input`] with a separate function for the finite differences.
pub fn check_input_against(
    name: &str,
    x0: &Matrix<f64>,
    analytic: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
    numeric: impl Fn(&Matrix<f64>) -> Result<f64>,
) -> Result<CheckEntry> {
    let mut g = Graph::new();
    let x = g.input(x0.clone());
    let l = analytic(&mut g, x)?;
    let scale = g.scalar(l).abs().max(1.0);
    let grad = g
        .backward(l)
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x0.rows(), x0.cols()));
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let eval = |d: f64| -> Result<f64> {
            let mut xp = x0.clone();
            xp.data_mut()[i] += d;
            numeric(&xp)
        };
        let num = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grad.data()[i], num, scale));
    }
    Ok(CheckEntry {
        name: name.to_string(),
        checked: x0.len(),
        max_rel_error: worst,
    })
}

/// Small configuration used for the checks: every code path of the full
/// model, few enough scalars to probe exhaustively.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        window_len: 16,
        max_time_patches: 4,
        codebook_size: 16,
        variant: Variant::Custom,
        bias_hidden: 8,
        mlp_ratio: 2,
    }
}

/// A model whose weights are drawn at unit-ish scale rather than the
/// training init, so every gradient is well above rounding noise.
pub fn check_model(seed: u64) -> Model<f64> {
    let mut model = Model::init(check_config(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let normal = Normal::new(0.0, 0.4).expect("valid std");
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let gain = model.params.name(id).ends_with(".g");
        for v in model.params.get_mut(id).data_mut() {
            *v = normal.sample(&mut rng) + if gain { 1.0 } else { 0.0 };
        }
    }
    model
}

/// Random 3-channel, 2-patch sample for [`check_model`].
pub fn check_sample(seed: u64) -> (Matrix<f64>, Vec<[f64; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    let w = check_config().window_len;
    let patches = Matrix::randn(6, w, 1.0, &mut rng);
    let coords = vec![[-0.05, 0.02, 0.07], [0.04, 0.06, 0.05], [0.0, -0.08, 0.04]];
    (patches, coords)
}

fn projection(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    Matrix::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `Σ y ⊙ R` for a fixed random `R`.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let (r, c) = g.value(y).shape();
    let proj = g.constant(projection(r, c, seed));
    let p = g.mul(y, proj);
    g.sum(p)
}

fn unit_rows(m: &Matrix<f64>) -> Matrix<f64> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let n = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Plain-arithmetic `(Σ‖x̂ − v̂‖², Σ‖x̂ − v̂‖)` over paired rows, both sides
/// unit-normalized.
fn lq_terms(x: &Matrix<f64>, v: &Matrix<f64>) -> (f64, f64) {
    let (xn, vn) = (unit_rows(x), unit_rows(v));
    let mut sq = 0.0;
    let mut norm = 0.0;
    for r in 0..xn.rows() {
        let d: f64 = xn.row(r).iter().zip(vn.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
        sq += d;
        norm += d.sqrt();
    }
    (sq, norm)
}

fn prefixed<'a>(prefixes: &'a [&'a str]) -> impl Fn(&str) -> bool + 'a {
    move |name| prefixes.iter().any(|p| name.starts_with(p))
}

/// Runs every check on the full model at `seed`. `per_tensor` bounds the
/// number of probed entries per parameter tensor.
pub fn run_suite(seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let model = check_model(seed);
    let (patches, coords) = check_sample(seed);
    let steps = 2;
    let mut report = GradCheckReport::default();
    let rebuild = |p: &Params<f64>| Model {
        config: model.config.clone(),
        params: p.clone(),
    };

    // Spatial MLP: input coordinates, then its weights.
    let coords_m = crate::model::coords_matrix::<f64>(&coords);
    report.entries.push(check_input("spatial_embed/coordinates", &coords_m, |g, p| {
        let s = model.spatial_embed(g, p);
        Ok(project(g, s, seed))
    })?);
    report.extend(check_params(&model.params, prefixed(&["spatial."]), per_tensor, seed, |p, g| {
        let m = rebuild(p);
        let c = g.constant(coords_m.clone());
        let s = m.spatial_embed(g, c);
        Ok(project(g, s, seed))
    })?);

    // Bias MLP through the full biased transformer.
    report.extend(check_params(&model.params, prefixed(&["bias."]), per_tensor, seed, |p, g| {
        let m = rebuild(p);
        let s = Model::sample_vars(g, &patches, &coords, steps);
        let enc = m.encode(g, &s, None)?;
        Ok(project(g, enc.hidden, seed))
    })?);
    report.entries.push(check_input("spatial_bias/coordinates", &coords_m, |g, p| {
        let t = model.spatial_bias(g, p);
        Ok(project(g, t, seed))
    })?);

    // Channel-slice attention on its own input and parameters.
    let x0 = projection(6, 8, seed ^ 1);
    report.entries.push(check_input("channel_attention/input", &x0, |g, x| {
        let (y, _) = model.channel_slice_attention(g, x, 3, steps)?;
        Ok(project(g, y, seed))
    })?);
    report.extend(check_params(&model.params, prefixed(&["channel_attn."]), per_tensor, seed, |p, g| {
        let m = rebuild(p);
        let x = g.constant(x0.clone());
        let (y, _) = m.channel_slice_attention(g, x, 3, steps)?;
        Ok(project(g, y, seed))
    })?);

    // Temporal encoder.
    report.extend(check_params(&model.params, prefixed(&["temporal."]), per_tensor, seed, |p, g| {
        let m = rebuild(p);
        let x = g.constant(patches.clone());
        let y = m.temporal_encode(g, x)?;
        Ok(project(g, y, seed))
    })?);

    // Quantization loss against encoder outputs and codebook.
    let codebook = model.codebook().clone();
    let enc_out = projection(6, 8, seed ^ 2);
    let idx = quantize_rows(&enc_out, &codebook);
    // Each term of L_Q must move exactly one side: the encoder gradient is
    // the derivative of the commitment term alone, the codebook gradient
    // that of the codebook term alone.
    report.entries.push(check_input_against(
        "quantization_loss/encoder",
        &enc_out,
        |g, x| {
            let v = g.constant(codebook.clone());
            quantization_loss(g, x, v, &idx)
        },
        |x| Ok(lq_terms(x, &unit_rows(&codebook.gather_rows(&idx))).1),
    )?);
    let frozen_x = unit_rows(&enc_out);
    report.entries.push(check_input_against(
        "quantization_loss/codebook",
        &codebook,
        |g, v| {
            let x = g.constant(enc_out.clone());
            quantization_loss(g, x, v, &idx)
        },
        |v| Ok(lq_terms(&frozen_x, &v.gather_rows(&idx)).0),
    )?);

    // Spectrum loss against predictions. Predictions are drawn away from
    // the targets so no phase difference sits on the wrap boundary.
    let (amp, phase) = spectrum_matrices(&patches.gather_rows(&[0, 3, 4]));
    let pred_amp = projection(3, amp.cols(), seed ^ 3);
    let pred_phase = phase.zip_map(&projection(3, amp.cols(), seed ^ 4), |p, r| p + 0.5 * r.tanh());
    report.entries.push(check_input("spectrum_loss/amplitude", &pred_amp, |g, a| {
        let ph = g.constant(pred_phase.clone());
        let (ta, tp) = (g.constant(amp.clone()), g.constant(phase.clone()));
        spectrum_loss(g, a, ph, ta, tp)
    })?);
    report.entries.push(check_input("spectrum_loss/phase", &pred_phase, |g, ph| {
        let a = g.constant(pred_amp.clone());
        let (ta, tp) = (g.constant(amp.clone()), g.constant(phase.clone()));
        spectrum_loss(g, a, ph, ta, tp)
    })?);

    // Total pretraining loss against every parameter. The finite
    // differences see each stop-gradiented side frozen at its base value.
    let plan = mask_patches(patches.rows(), 0.5, seed);
    let base_x = {
        let mut g = Graph::new();
        let x = g.constant(patches.clone());
        let y = model.temporal_encode(&mut g, x)?;
        g.value(y).clone()
    };
    let base_idx = quantize_rows(&base_x, &codebook);
    let frozen_x = unit_rows(&base_x);
    let frozen_v = unit_rows(&codebook.gather_rows(&base_idx));
    let total = check_params_against(
        &model.params,
        |_| true,
        per_tensor,
        seed,
        |p, g| {
            let m = rebuild(p);
            let (l_q, l_s) = sample_losses(&m, g, &patches, &coords, steps, &plan)?;
            Ok(g.add(l_q, l_s))
        },
        |p| {
            let m = rebuild(p);
            let mut g = Graph::new();
            let (_, l_s) = sample_losses(&m, &mut g, &patches, &coords, steps, &plan)?;
            let x = g.constant(patches.clone());
            let y = m.temporal_encode(&mut g, x)?;
            let v = m.codebook().gather_rows(&base_idx);
            let commit = lq_terms(g.value(y), &frozen_v).1;
            let code = lq_terms(&frozen_x, &v).0;
            Ok(g.scalar(l_s) + commit + code)
        },
    )?;
    for mut e in total.entries {
        e.name = format!("total_loss/{}", e.name);
        report.entries.push(e);
    }
    Ok(report)
}
