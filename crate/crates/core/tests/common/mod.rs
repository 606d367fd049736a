//! Independent oracles shared by integration tests.

#![allow(dead_code)]

use hear_core::layout_scheduler::Dataset;
use hear_core::synthetic_data::{planted_frequency, planted_on};

/// Power of `x` at `freq` Hz by direct correlation.
pub fn tone_power(x: &[f32], freq: f64, sample_rate: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        let ang = std::f64::consts::TAU * freq * n as f64 / sample_rate;
        re += v as f64 * ang.cos();
        im -= v as f64 * ang.sin();
    }
    (re * re + im * im) / (x.len() as f64).powi(2)
}

/// Picks the class whose planted tone carries the most power on the
/// hemisphere it is planted on. Works on raw samples, no preprocessing.
pub fn bandpower_predict(ds: &Dataset, id: u64, classes: usize) -> usize {
    let rec = ds.raw_sample(id).expect("readable sample");
    let coords = &ds.layout_of(id).coordinates;
    let mut best = (f64::NEG_INFINITY, 0);
    for c in 0..classes {
        let chans: Vec<usize> = (0..coords.len()).filter(|&k| planted_on(c, coords[k][0])).collect();
        let p = chans
            .iter()
            .map(|&k| tone_power(rec.data.row(k), planted_frequency(c), rec.sample_rate))
            .sum::<f64>()
            / chans.len().max(1) as f64;
        if p > best.0 {
            best = (p, c);
        }
    }
    best.1
}

/// Mean per-class recall over classes present in `truth`.
pub fn balanced_accuracy(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let mut recalls = Vec::new();
    for c in 0..classes {
        let support = truth.iter().filter(|&&t| t == c).count();
        if support > 0 {
            let hit = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count();
            recalls.push(hit as f64 / support as f64);
        }
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}
