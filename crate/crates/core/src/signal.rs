//! Preprocessing: average reference, rational resampling, zero-phase FIR
//! bandpass, amplitude scaling, and segmentation into fixed-length patches.
//!
//! The fixed order is reference → resample → filter → scale → segment.

use std::sync::Arc;

use crate::channel_dictionary::LayoutMapping;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Recording<T> {
    /// `C × T` samples, microvolts.
    pub data: Matrix<T>,
    pub sample_rate: f64,
    pub layout: Option<Arc<LayoutMapping>>,
}

impl<T: Real> Recording<T> {
    pub fn new(data: Matrix<T>, sample_rate: f64) -> Self {
        Self {
            data,
            sample_rate,
            layout: None,
        }
    }

    pub fn with_layout(mut self, layout: Arc<LayoutMapping>) -> Result<Self> {
        if layout.channel_count() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "layout has {} channels, data has {}",
                layout.channel_count(),
                self.channels()
            )));
        }
        self.layout = Some(layout);
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.data.rows()
    }

    pub fn samples(&self) -> usize {
        self.data.cols()
    }

    fn replace_data(&self, data: Matrix<T>, sample_rate: f64) -> Self {
        Self {
            data,
            sample_rate,
            layout: self.layout.clone(),
        }
    }
}

/// `C × N_t` patches of `w` samples each, stored channel-major: row
/// `e·N_t + t` holds samples `t·w .. (t+1)·w` of channel `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor<T> {
    pub patches: Matrix<T>,
    pub channels: usize,
    pub time_patches: usize,
    pub window_len: usize,
    pub layout: Option<Arc<LayoutMapping>>,
}

impl<T: Real> PatchTensor<T> {
    pub fn patch(&self, channel: usize, time: usize) -> &[T] {
        self.patches.row(channel * self.time_patches + time)
    }

    pub fn token_count(&self) -> usize {
        self.channels * self.time_patches
    }
}

/// Subtracts the across-channel mean from every sample.
pub fn average_reference<T: Real>(rec: &Recording<T>) -> Recording<T> {
    let (c, n) = rec.data.shape();
    let mut out = rec.data.clone();
    if c == 0 {
        return rec.clone();
    }
    let inv = T::one() / T::of_usize(c);
    for t in 0..n {
        let mean = (0..c).map(|e| rec.data.get(e, t)).sum::<T>() * inv;
        for e in 0..c {
            out.set(e, t, rec.data.get(e, t) - mean);
        }
    }
    rec.replace_data(out, rec.sample_rate)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase windowed-sinc rational resampler.
struct Resampler {
    up: u64,
    down: u64,
    half_width: i64,
    /// One row of `2·half_width + 1` taps per phase, each normalized to unit sum.
    table: Vec<Vec<f64>>,
}

const RESAMPLE_ZERO_CROSSINGS: f64 = 24.0;
const RESAMPLE_ROLLOFF: f64 = 0.9;
const RESAMPLE_KAISER_BETA: f64 = 10.0;

impl Resampler {
    fn new(source: f64, target: f64) -> Self {
        // Rates are matched to a millihertz grid.
        let s = (source * 1000.0).round() as u64;
        let t = (target * 1000.0).round() as u64;
        let g = gcd(s, t).max(1);
        let up = t / g;
        let down = s / g;
        // Cutoff in cycles per input sample.
        let fc = 0.5 * RESAMPLE_ROLLOFF * (up as f64 / down as f64).min(1.0);
        let half_width = (RESAMPLE_ZERO_CROSSINGS / (2.0 * fc)).ceil() as i64;
        let i0_beta = bessel_i0(RESAMPLE_KAISER_BETA);
        let table = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                let mut taps: Vec<f64> = (-half_width..=half_width)
                    .map(|j| {
                        let d = frac - j as f64;
                        let r = d / (half_width as f64 + 1.0);
                        if r.abs() >= 1.0 {
                            return 0.0;
                        }
                        let win = bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                        2.0 * fc * sinc(2.0 * fc * d) * win
                    })
                    .collect();
                let total: f64 = taps.iter().sum();
                for t in &mut taps {
                    *t /= total;
                }
                taps
            })
            .collect();
        Self {
            up,
            down,
            half_width,
            table,
        }
    }

    fn output_len(&self, input_len: usize) -> usize {
        ((input_len as u128 * self.up as u128) / self.down as u128) as usize
    }

    fn apply<T: Real>(&self, x: &[T], out: &mut [T]) {
        let n_in = x.len() as i64;
        for (n, o) in out.iter_mut().enumerate() {
            let pos = n as u128 * self.down as u128;
            let base = (pos / self.up as u128) as i64;
            let phase = (pos % self.up as u128) as usize;
            let taps = &self.table[phase];
            let mut acc = 0.0;
            for (j, &h) in (-self.half_width..=self.half_width).zip(taps) {
                let k = base + j;
                if (0..n_in).contains(&k) {
                    acc += h * x[k as usize].as_f64();
                }
            }
            *o = T::of(acc);
        }
    }
}

/// Resamples every channel to `target_rate`. Output length is
/// `⌊T · target / source⌋`; equal rates return the data unchanged.
pub fn resample<T: Real>(rec: &Recording<T>, target_rate: f64) -> Result<Recording<T>> {
    let source = rec.sample_rate;
    if !(source > 0.0 && target_rate > 0.0 && source.is_finite() && target_rate.is_finite()) {
        return Err(Error::InvalidRate {
            source_rate: source,
            target_rate,
        });
    }
    if source == target_rate {
        return Ok(rec.clone());
    }
    let rs = Resampler::new(source, target_rate);
    let c = rec.channels();
    let n_out = rs.output_len(rec.samples());
    let mut out = Matrix::zeros(c, n_out);
    for e in 0..c {
        rs.apply(rec.data.row(e), out.row_mut(e));
    }
    Ok(rec.replace_data(out, target_rate))
}

/// Number of taps used at `sample_rate`: odd, spanning one second.
pub fn fir_length(sample_rate: f64) -> usize {
    2 * ((sample_rate / 2.0).floor() as usize) + 1
}

/// Upper cutoff actually used: `min(hi, 0.999 · Nyquist)`.
pub fn effective_high_cutoff(hi: f64, sample_rate: f64) -> f64 {
    hi.min(0.999 * sample_rate / 2.0)
}

fn hamming_lowpass(cutoff: f64, sample_rate: f64, taps: usize) -> Vec<f64> {
    let m = (taps - 1) as f64 / 2.0;
    let f = cutoff / sample_rate;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let k = n as f64 - m;
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (taps - 1) as f64).cos();
            w * 2.0 * f * sinc(2.0 * f * k)
        })
        .collect();
    let dc: f64 = h.iter().sum();
    for v in &mut h {
        *v /= dc;
    }
    h
}

/// Linear-phase Hamming-window bandpass taps, unit gain at the band center.
pub fn design_bandpass(lo: f64, hi: f64, sample_rate: f64, taps: usize) -> Vec<f64> {
    let high = hamming_lowpass(hi, sample_rate, taps);
    let low = hamming_lowpass(lo, sample_rate, taps);
    let mut h: Vec<f64> = high.iter().zip(&low).map(|(a, b)| a - b).collect();
    let center = 0.5 * (lo + hi);
    let gain = frequency_response(&h, center, sample_rate);
    for v in &mut h {
        *v /= gain;
    }
    h
}

/// `|H(f)|` of an FIR at frequency `f`.
pub fn frequency_response(h: &[f64], f: f64, sample_rate: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f / sample_rate;
    let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &v)| {
        (re + v * (w * n as f64).cos(), im - v * (w * n as f64).sin())
    });
    (re * re + im * im).sqrt()
}

/// Centered ("same") convolution with a symmetric odd-length kernel.
fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let half = (h.len() / 2) as i64;
    let n = x.len() as i64;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, &hv) in h.iter().enumerate() {
                let k = i + half - j as i64;
                if (0..n).contains(&k) {
                    acc += hv * x[k as usize];
                }
            }
            acc
        })
        .collect()
}

/// Forward-backward FIR with odd reflection padding of `pad` samples per side.
fn filtfilt(x: &[f64], h: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let first = x[0];
    let last = x[n - 1];
    for k in (1..=pad).rev() {
        ext.push(2.0 * first - x[k]);
    }
    ext.extend_from_slice(x);
    for k in 1..=pad {
        ext.push(2.0 * last - x[n - 1 - k]);
    }
    let mut y = convolve_same(&ext, h);
    y.reverse();
    let mut z = convolve_same(&y, h);
    z.reverse();
    z[pad..pad + n].to_vec()
}

/// Zero-phase bandpass (`lo`..`hi` Hz) with a one-second Hamming FIR.
pub fn bandpass_filter<T: Real>(rec: &Recording<T>, lo: f64, hi: f64) -> Result<Recording<T>> {
    let fs = rec.sample_rate;
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::InvalidRate {
            source_rate: fs,
            target_rate: fs,
        });
    }
    let hi_eff = effective_high_cutoff(hi, fs);
    if !(lo > 0.0 && lo < hi_eff) {
        return Err(Error::InvalidBand { lo, hi: hi_eff });
    }
    let taps = fir_length(fs);
    let required = 3 * taps;
    if rec.samples() < required {
        return Err(Error::SignalTooShort {
            samples: rec.samples(),
            required,
        });
    }
    let h = design_bandpass(lo, hi_eff, fs, taps);
    let mut out = Matrix::zeros(rec.channels(), rec.samples());
    for e in 0..rec.channels() {
        let x: Vec<f64> = rec.data.row(e).iter().map(|v| v.as_f64()).collect();
        let y = filtfilt(&x, &h, taps);
        for (o, v) in out.row_mut(e).iter_mut().zip(y) {
            *o = T::of(v);
        }
    }
    Ok(rec.replace_data(out, fs))
}

pub fn scale<T: Real>(rec: &Recording<T>, factor: f64) -> Recording<T> {
    let f = T::of(factor);
    rec.replace_data(rec.data.map(|v| v * f), rec.sample_rate)
}

/// Cuts each channel into `⌊T/w⌋` non-overlapping windows; the remainder is
/// discarded.
pub fn segment_patches<T: Real>(rec: &Recording<T>, w: usize) -> PatchTensor<T> {
    assert!(w >= 1, "window length must be positive");
    let c = rec.channels();
    let nt = rec.samples() / w;
    let mut data = Vec::with_capacity(c * nt * w);
    for e in 0..c {
        data.extend_from_slice(&rec.data.row(e)[..nt * w]);
    }
    PatchTensor {
        patches: Matrix::from_vec(c * nt, w, data),
        channels: c,
        time_patches: nt,
        window_len: w,
        layout: rec.layout.clone(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub target_rate: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    /// Applied after filtering; 0.01 maps microvolts to units of 100 µV.
    pub amplitude_scale: f64,
    pub window_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_rate: 200.0,
            band_lo: 1.0,
            band_hi: 75.0,
            amplitude_scale: 0.01,
            window_len: 200,
        }
    }
}

/// Full pipeline from a raw recording to patches.
pub fn preprocess<T: Real>(rec: &Recording<T>, cfg: &PreprocessConfig) -> Result<PatchTensor<T>> {
    if !rec.data.all_finite() {
        return Err(Error::NonFiniteInput("recording samples"));
    }
    let r = average_reference(rec);
    let r = resample(&r, cfg.target_rate)?;
    let r = bandpass_filter(&r, cfg.band_lo, cfg.band_hi)?;
    let r = scale(&r, cfg.amplitude_scale);
    Ok(segment_patches(&r, cfg.window_len))
}
