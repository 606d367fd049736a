use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Matrix;

use super::{Model, COORD_SCALE, LAYER_NORM_EPS};

/// Graph handles for one sample: `patches` is `(C·N_t) × w` channel-major,
/// `coords` is `C × 3` in meters.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub patches: Var,
    pub coords: Var,
    pub channels: usize,
    pub steps: usize,
}

/// Output of [`Model::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `(1 + C·N_t) × D` final hidden states, CLS first.
    pub hidden: Var,
    /// `(C·N_t) × D` temporal-encoder outputs before masking.
    pub patch_emb: Var,
    /// Channel-slice attention probabilities, `[time slice][head]`, each `C × C`.
    pub channel_attn: Vec<Vec<Var>>,
    /// Transformer attention probabilities, `[layer][head]`.
    pub attn: Vec<Vec<Var>>,
}

pub fn coords_matrix<T: Real>(coords: &[[f64; 3]]) -> Matrix<T> {
    Matrix::from_fn(coords.len(), 3, |r, c| T::of(coords[r][c]))
}

impl<T: Real> Model<T> {
    fn p(&self, g: &mut Graph<T>, name: &str) -> Var {
        g.param_by_name(&self.params, name)
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, name: &str) -> Var {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, name: &str) -> Var {
        let gamma = self.p(g, &format!("{name}.g"));
        let beta = self.p(g, &format!("{name}.b"));
        g.layer_norm(x, gamma, beta, T::of(LAYER_NORM_EPS))
    }

    /// Per-patch projection `w → D`, layer norm, then a GELU layer.
    pub fn temporal_encode(&self, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        let w = g.value(patches).cols();
        if w != self.config.window_len {
            return Err(Error::ShapeMismatch(format!(
                "patch length {w} != window_len {}",
                self.config.window_len
            )));
        }
        let h = self.dense(g, patches, "temporal.proj");
        let h = self.norm(g, h, "temporal.norm");
        let h = self.dense(g, h, "temporal.out");
        Ok(g.gelu(h))
    }

    /// Coordinate MLP: `C × 3` → `C × D`.
    pub fn spatial_embed(&self, g: &mut Graph<T>, coords: Var) -> Var {
        let x = g.scale(coords, T::of(COORD_SCALE));
        let h = self.dense(g, x, "spatial.fc1");
        let h = g.gelu(h);
        self.dense(g, h, "spatial.fc2")
    }

    /// Prepends CLS and adds `spatial[e] + temporal_embed[t]` to patch token
    /// `(e, t)`. CLS receives neither.
    pub fn assemble_tokens(
        &self,
        g: &mut Graph<T>,
        patch_emb: Var,
        spatial: Var,
        channels: usize,
        steps: usize,
    ) -> Result<Var> {
        if steps > self.config.max_time_patches {
            return Err(Error::TimeOverflow {
                time_patches: steps,
                max: self.config.max_time_patches,
            });
        }
        if g.value(patch_emb).rows() != channels * steps || g.value(spatial).rows() != channels {
            return Err(Error::ShapeMismatch(format!(
                "patch embeddings {:?} / spatial {:?} for C={channels}, N_t={steps}",
                g.value(patch_emb).shape(),
                g.value(spatial).shape()
            )));
        }
        let chan_idx: Vec<usize> = (0..channels)
            .flat_map(|e| std::iter::repeat_n(e, steps))
            .collect();
        let time_idx: Vec<usize> = (0..channels).flat_map(|_| 0..steps).collect();
        let table = self.p(g, "temporal_embed");
        let s = g.gather(spatial, chan_idx);
        let t = g.gather(table, time_idx);
        let x = g.add(patch_emb, s);
        let x = g.add(x, t);
        let cls = self.p(g, "cls");
        Ok(g.concat_rows(vec![cls, x]))
    }

    /// Multi-head attention over the rows of `x` with optional per-head
    /// additive logits. Returns the projected output and per-head
    /// probabilities.
    pub(crate) fn attention(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        x: Var,
        bias: Option<&[Var]>,
    ) -> (Var, Vec<Var>) {
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let q = self.dense(g, x, &format!("{prefix}.q"));
        let k = self.dense(g, x, &format!("{prefix}.k"));
        let v = self.dense(g, x, &format!("{prefix}.v"));
        let scale = T::one() / T::of_usize(dh).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let logits = g.matmul_t(qh, kh);
            let mut logits = g.scale(logits, scale);
            if let Some(b) = bias {
                logits = g.add(logits, b[h]);
            }
            let p = g.softmax_rows(logits);
            outs.push(g.matmul(p, vh));
            probs.push(p);
        }
        let merged = g.concat_cols(outs);
        (self.dense(g, merged, &format!("{prefix}.o")), probs)
    }

    /// Attention across channels within each time slice, with a residual
    /// connection. `x` is `(C·N_t) × D` channel-major (no CLS).
    pub fn channel_slice_attention(
        &self,
        g: &mut Graph<T>,
        x: Var,
        channels: usize,
        steps: usize,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        if channels == 0 || g.value(x).rows() != channels * steps {
            return Err(Error::ShapeMismatch(format!(
                "channel attention input {:?} for C={channels}, N_t={steps}",
                g.value(x).shape()
            )));
        }
        let mut slices = Vec::with_capacity(steps);
        let mut probs = Vec::with_capacity(steps);
        for t in 0..steps {
            let rows: Vec<usize> = (0..channels).map(|e| e * steps + t).collect();
            let xt = g.gather(x, rows);
            let (a, p) = self.attention(g, "channel_attn", xt, None);
            slices.push(g.add(xt, a));
            probs.push(p);
        }
        // Slices are time-major; restore channel-major order.
        let stacked = g.concat_rows(slices);
        let back: Vec<usize> = (0..channels)
            .flat_map(|e| (0..steps).map(move |t| t * channels + e))
            .collect();
        Ok((g.gather(stacked, back), probs))
    }

    /// Pairwise table `C² × H`: row `e1·C + e2` is the bias network applied
    /// to `P[e1] − P[e2]`.
    pub fn spatial_bias(&self, g: &mut Graph<T>, coords: Var) -> Var {
        let c = g.value(coords).rows();
        let first: Vec<usize> = (0..c).flat_map(|e| std::iter::repeat_n(e, c)).collect();
        let second: Vec<usize> = (0..c).flat_map(|_| 0..c).collect();
        let a = g.gather(coords, first);
        let b = g.gather(coords, second);
        let delta = g.sub(a, b);
        let delta = g.scale(delta, T::of(COORD_SCALE));
        let h = self.dense(g, delta, "bias.fc1");
        let h = g.gelu(h);
        self.dense(g, h, "bias.fc2")
    }

    /// Pre-norm transformer stack. `tokens` carries CLS in row 0; the
    /// pairwise table (if any) is tiled over time and applied to patch
    /// tokens only, in every layer.
    pub fn transformer(
        &self,
        g: &mut Graph<T>,
        tokens: Var,
        bias_table: Option<Var>,
        channels: usize,
        steps: usize,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let m = g.value(tokens).rows();
        if m != 1 + channels * steps {
            return Err(Error::ShapeMismatch(format!(
                "{m} tokens for C={channels}, N_t={steps}"
            )));
        }
        let expanded: Option<Vec<Var>> = bias_table.map(|table| {
            (0..self.config.num_heads)
                .map(|h| g.expand_bias(table, h, channels, steps, true))
                .collect()
        });
        let mut x = tokens;
        let mut maps = Vec::with_capacity(self.config.num_layers);
        for layer in 0..self.config.num_layers {
            let pre = format!("blocks.{layer}");
            let h = self.norm(g, x, &format!("{pre}.ln1"));
            let (a, probs) = self.attention(g, &format!("{pre}.attn"), h, expanded.as_deref());
            x = g.add(x, a);
            let h = self.norm(g, x, &format!("{pre}.ln2"));
            let h = self.dense(g, h, &format!("{pre}.mlp.fc1"));
            let h = g.gelu(h);
            let h = self.dense(g, h, &format!("{pre}.mlp.fc2"));
            x = g.add(x, h);
            maps.push(probs);
        }
        Ok((self.norm(g, x, "final_norm"), maps))
    }

    /// Full forward pass for one sample. Patch positions with `mask[i]` set
    /// are replaced by the mask token before positional terms are added.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        s: &SampleVars,
        mask: Option<&[bool]>,
    ) -> Result<Encoded> {
        if g.value(s.coords).rows() != s.channels || g.value(s.coords).cols() != 3 {
            return Err(Error::ShapeMismatch("coordinates must be C x 3".into()));
        }
        if !g.value(s.coords).all_finite() {
            return Err(Error::NonFiniteInput("electrode coordinates"));
        }
        let patch_emb = self.temporal_encode(g, s.patches)?;
        let n = s.channels * s.steps;
        let emb = match mask {
            Some(mask) => {
                if mask.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "mask of {} for {n} patches",
                        mask.len()
                    )));
                }
                let token = self.p(g, "mask_token");
                let pool = g.concat_rows(vec![patch_emb, token]);
                let idx = mask
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| if m { n } else { i })
                    .collect();
                g.gather(pool, idx)
            }
            None => patch_emb,
        };
        let spatial = self.spatial_embed(g, s.coords);
        let tokens = self.assemble_tokens(g, emb, spatial, s.channels, s.steps)?;
        let patch_rows: Vec<usize> = (1..=n).collect();
        let patches_only = g.gather(tokens, patch_rows);
        let (mixed, channel_attn) =
            self.channel_slice_attention(g, patches_only, s.channels, s.steps)?;
        let cls = g.gather(tokens, vec![0]);
        let tokens = g.concat_rows(vec![cls, mixed]);
        let table = self.spatial_bias(g, s.coords);
        let (hidden, attn) = self.transformer(g, tokens, Some(table), s.channels, s.steps)?;
        Ok(Encoded {
            hidden,
            patch_emb,
            channel_attn,
            attn,
        })
    }

    /// Registers one sample's inputs as graph constants.
    pub fn sample_vars(
        g: &mut Graph<T>,
        patches: &Matrix<T>,
        coords: &[[f64; 3]],
        steps: usize,
    ) -> SampleVars {
        let channels = coords.len();
        SampleVars {
            patches: g.constant(patches.clone()),
            coords: g.constant(coords_matrix(coords)),
            channels,
            steps,
        }
    }

    /// Class logits (`1 × L`) from the CLS hidden state.
    pub fn classify(&self, g: &mut Graph<T>, encoded: &Encoded) -> Result<Var> {
        if self.num_classes().is_none() {
            return Err(Error::ShapeMismatch("model has no classifier head".into()));
        }
        let cls = g.gather(encoded.hidden, vec![0]);
        Ok(self.dense(g, cls, "classifier"))
    }
}
