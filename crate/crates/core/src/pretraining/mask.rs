use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which patches (channel-major, `C·N_t` of them) are replaced by the mask
/// token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// Number of masked patches: `ratio · n` rounded half up.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).min(n)
}

/// Uniform choice of `mask_count(n, ratio)` patches.
pub fn mask_patches(n: usize, ratio: f64, seed: u64) -> MaskPlan {
    assert!(ratio > 0.0 && ratio < 1.0, "mask ratio must lie in (0, 1)");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut mask = vec![false; n];
    for &i in &order[..mask_count(n, ratio)] {
        mask[i] = true;
    }
    MaskPlan { mask, ratio, seed }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mask seed for one sample at one step. Depends only on its arguments, so
/// any partition of a batch across workers draws the same masks.
pub fn mask_seed(run_seed: u64, step: usize, sample_id: u64) -> u64 {
    splitmix(splitmix(splitmix(run_seed) ^ step as u64) ^ sample_id)
}
