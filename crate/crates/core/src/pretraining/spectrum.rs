use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Matrix;

/// Bins whose amplitude is at most this multiple of machine epsilon times
/// the patch's largest amplitude get phase 0.
pub const PHASE_FLOOR_ULPS: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumTarget<T> {
    /// `|X_k| / w` for `k = 0..=w/2`.
    pub amplitude: Vec<T>,
    /// Principal argument of `X_k` in (−π, π].
    pub phase: Vec<T>,
}

pub fn spectrum_targets<T: Real>(patch: &[T]) -> SpectrumTarget<T> {
    let w = patch.len();
    assert!(w >= 2, "patch must have at least two samples");
    let mut buf: Vec<Complex<T>> = patch.iter().map(|&v| Complex::new(v, T::zero())).collect();
    FftPlanner::new().plan_fft_forward(w).process(&mut buf);
    let bins = w / 2 + 1;
    let inv_w = T::one() / T::of_usize(w);
    let amplitude: Vec<T> = buf[..bins].iter().map(|c| c.norm() * inv_w).collect();
    let peak = amplitude.iter().copied().fold(T::zero(), T::max);
    let floor = T::of(PHASE_FLOOR_ULPS) * T::epsilon() * peak;
    let phase = buf[..bins]
        .iter()
        .zip(&amplitude)
        .map(|(c, &a)| {
            if a <= floor {
                T::zero()
            } else {
                let p = c.im.atan2(c.re);
                // atan2 returns [−π, π]; fold −π onto π.
                if p <= -T::PI() { T::PI() } else { p }
            }
        })
        .collect();
    SpectrumTarget { amplitude, phase }
}

/// Targets for every row, stacked as `(rows × bins)` amplitude and phase.
pub fn spectrum_matrices<T: Real>(patches: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    let bins = patches.cols() / 2 + 1;
    let mut amp = Matrix::zeros(patches.rows(), bins);
    let mut phase = Matrix::zeros(patches.rows(), bins);
    for r in 0..patches.rows() {
        let t = spectrum_targets(patches.row(r));
        amp.row_mut(r).copy_from_slice(&t.amplitude);
        phase.row_mut(r).copy_from_slice(&t.phase);
    }
    (amp, phase)
}

/// Sum over rows of `‖Ã − A‖² + ‖wrap(ψ̃ − ψ)‖`. Callers pass only the
/// masked rows.
pub fn spectrum_loss<T: Real>(
    g: &mut Graph<T>,
    pred_amp: Var,
    pred_phase: Var,
    amp: Var,
    phase: Var,
) -> Result<Var> {
    let shapes = [pred_amp, pred_phase, amp, phase].map(|v| g.value(v).shape());
    if shapes.iter().any(|&s| s != shapes[0]) {
        return Err(Error::ShapeMismatch(format!("spectrum shapes {shapes:?}")));
    }
    let da = g.sub(pred_amp, amp);
    let amp_term = g.sum_squares(da);
    let dp = g.sub(pred_phase, phase);
    let dp = g.wrap_phase(dp);
    let norms = g.row_norms(dp);
    let phase_term = g.sum(norms);
    Ok(g.add(amp_term, phase_term))
}
