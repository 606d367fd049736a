use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Matrix;

use super::Model;

/// Per-channel attention mass from the channel-slice attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelActivation {
    /// Mean attention received per channel; sums to one.
    pub raw: Vec<f64>,
    /// `raw` min-max scaled to [0, 1]; all ones when every channel ties.
    pub normalized: Vec<f64>,
}

/// Averages, over samples, time slices, heads and query channels, the
/// attention each key channel receives in the channel-slice layer.
pub fn export_channel_activation<T: Real>(
    model: &Model<T>,
    samples: &[Matrix<T>],
    coords: &[[f64; 3]],
    steps: usize,
) -> Result<ChannelActivation> {
    if samples.is_empty() || coords.is_empty() || steps == 0 {
        return Err(Error::EmptyBatch);
    }
    let c = coords.len();
    let mut mass = vec![0.0f64; c];
    let mut slices = 0usize;
    for patches in samples {
        let fwd = model.forward(patches, coords, steps)?;
        for heads in &fwd.channel_attn {
            for p in heads {
                for q in 0..c {
                    for (m, &v) in mass.iter_mut().zip(p.row(q)) {
                        *m += v.as_f64() / c as f64;
                    }
                }
                slices += 1;
            }
        }
    }
    let raw: Vec<f64> = mass.iter().map(|m| m / slices as f64).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if hi - lo > 0.0 {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; c]
    };
    Ok(ChannelActivation { raw, normalized })
}
