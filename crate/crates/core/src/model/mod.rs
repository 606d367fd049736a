//! Spatially-guided transformer over electrode patches.
//!
//! One parameter set serves any channel count and any number of time
//! patches up to `max_time_patches`: electrode identity enters only through
//! coordinate-derived embeddings and the pairwise attention bias.

mod activation;
mod checkpoint;
mod inference;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::Params;
use crate::scalar::Real;
use crate::tensor::Matrix;

pub use activation::{export_channel_activation, ChannelActivation};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use inference::{expand_bias, Forward};
pub use layers::{coords_matrix, Encoded, SampleVars};

/// Scale applied to head-frame coordinates (meters) before the spatial and
/// bias networks, bringing them to roughly unit range.
pub const COORD_SCALE: f64 = 10.0;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Tiny,
    Base,
    Custom,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Base => "base",
            Variant::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiny" => Some(Variant::Tiny),
            "base" => Some(Variant::Base),
            "custom" => Some(Variant::Custom),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub window_len: usize,
    pub max_time_patches: usize,
    pub codebook_size: usize,
    pub variant: Variant,
    /// Width of the pairwise bias network's hidden layer.
    pub bias_hidden: usize,
    /// Transformer feed-forward expansion factor.
    pub mlp_ratio: usize,
}

impl ModelConfig {
    fn preset(variant: Variant, num_layers: usize, num_heads: usize) -> Self {
        Self {
            hidden_dim: 200,
            num_layers,
            num_heads,
            window_len: 200,
            max_time_patches: 16,
            codebook_size: 2048,
            variant,
            bias_hidden: 32,
            mlp_ratio: 4,
        }
    }

    /// 6 layers, 4 heads.
    pub fn tiny() -> Self {
        Self::preset(Variant::Tiny, 6, 4)
    }

    /// 12 layers, 8 heads.
    pub fn base() -> Self {
        Self::preset(Variant::Base, 12, 8)
    }

    /// Small configuration used by tests and the synthetic end-to-end run.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 4,
            window_len: 200,
            max_time_patches: 16,
            codebook_size: 2048,
            variant: Variant::Custom,
            bias_hidden: 32,
            mlp_ratio: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Number of frequency bins per patch spectrum.
    pub fn spectrum_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| Err(crate::Error::ShapeMismatch(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.window_len < 2 || self.max_time_patches == 0 || self.codebook_size == 0 {
            return bad("window_len, max_time_patches and codebook_size must be positive".into());
        }
        match self.variant {
            Variant::Tiny if (self.num_layers, self.num_heads) != (6, 4) => {
                bad("tiny is 6 layers / 4 heads".into())
            }
            Variant::Base if (self.num_layers, self.num_heads) != (12, 8) => {
                bad("base is 12 layers / 8 heads".into())
            }
            _ => Ok(()),
        }
    }
}

/// Model weights. Besides the backbone this holds the codebook, the
/// spectrum prediction head, the mask token and (after
/// [`Model::add_classifier`]) a classification head.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Real> Model<T> {
    /// Weights ~ N(0, 0.02²), biases zero, norm gains one, codebook rows
    /// unit-normalized Gaussians.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let mut p = Params::new();
        let mut weight = |p: &mut Params<T>, name: &str, rows: usize, cols: usize| {
            p.insert(format!("{name}.w"), Matrix::randn(rows, cols, INIT_STD, &mut rng));
            p.insert(format!("{name}.b"), Matrix::zeros(1, cols));
        };
        let norm = |p: &mut Params<T>, name: &str| {
            p.insert(format!("{name}.g"), Matrix::filled(1, d, T::one()));
            p.insert(format!("{name}.b"), Matrix::zeros(1, d));
        };

        weight(&mut p, "temporal.proj", config.window_len, d);
        norm(&mut p, "temporal.norm");
        weight(&mut p, "temporal.out", d, d);

        weight(&mut p, "spatial.fc1", 3, 2 * d);
        weight(&mut p, "spatial.fc2", 2 * d, d);

        weight(&mut p, "bias.fc1", 3, config.bias_hidden);
        weight(&mut p, "bias.fc2", config.bias_hidden, config.num_heads);

        for part in ["q", "k", "v", "o"] {
            weight(&mut p, &format!("channel_attn.{part}"), d, d);
        }
        for layer in 0..config.num_layers {
            let pre = format!("blocks.{layer}");
            norm(&mut p, &format!("{pre}.ln1"));
            for part in ["q", "k", "v", "o"] {
                weight(&mut p, &format!("{pre}.attn.{part}"), d, d);
            }
            norm(&mut p, &format!("{pre}.ln2"));
            weight(&mut p, &format!("{pre}.mlp.fc1"), d, config.mlp_ratio * d);
            weight(&mut p, &format!("{pre}.mlp.fc2"), config.mlp_ratio * d, d);
        }
        norm(&mut p, "final_norm");
        weight(&mut p, "spectrum_head", d, 2 * config.spectrum_bins());

        p.insert(
            "temporal_embed",
            Matrix::randn(config.max_time_patches, d, INIT_STD, &mut rng),
        );
        p.insert("cls", Matrix::randn(1, d, INIT_STD, &mut rng));
        p.insert("mask_token", Matrix::randn(1, d, INIT_STD, &mut rng));

        let mut codebook: Matrix<T> = Matrix::randn(config.codebook_size, d, 1.0, &mut rng);
        for r in 0..codebook.rows() {
            let row = codebook.row_mut(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            for v in row {
                *v /= n;
            }
        }
        p.insert("codebook", codebook);

        Self { config, params: p }
    }

    /// Adds a zero-initialized linear head on the CLS state. Replaces an
    /// existing head of a different width.
    pub fn add_classifier(&mut self, num_classes: usize) {
        let d = self.config.hidden_dim;
        if let Some(w) = self.params.by_name("classifier.w") {
            if w.cols() == num_classes {
                *self.params.get_mut(self.params.id("classifier.w").unwrap()) =
                    Matrix::zeros(d, num_classes);
                *self.params.get_mut(self.params.id("classifier.b").unwrap()) =
                    Matrix::zeros(1, num_classes);
                return;
            }
            let mut fresh = Params::new();
            for (_, name, m) in self.params.iter() {
                if !name.starts_with("classifier.") {
                    fresh.insert(name, m.clone());
                }
            }
            self.params = fresh;
        }
        self.params.insert("classifier.w", Matrix::zeros(d, num_classes));
        self.params.insert("classifier.b", Matrix::zeros(1, num_classes));
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.params.by_name("classifier.w").map(Matrix::cols)
    }

    pub fn codebook(&self) -> &Matrix<T> {
        self.params.by_name("codebook").expect("codebook parameter")
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
