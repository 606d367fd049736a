//! Graph-free entry points for inspection and tests.

use crate::autodiff::Graph;
use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::Matrix;

use super::layers::coords_matrix;
use super::Model;

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub hidden: Matrix<T>,
    pub patch_emb: Matrix<T>,
    /// `[time slice][head]`, each `C × C`.
    pub channel_attn: Vec<Vec<Matrix<T>>>,
    /// `[layer][head]`, each `(1 + C·N_t)²`.
    pub attn: Vec<Vec<Matrix<T>>>,
}

impl<T: Real> Model<T> {
    /// Runs the full network on one sample (`patches`: `(C·N_t) × w`).
    pub fn forward(&self, patches: &Matrix<T>, coords: &[[f64; 3]], steps: usize) -> Result<Forward<T>> {
        let mut g = Graph::new();
        let s = Self::sample_vars(&mut g, patches, coords, steps);
        let enc = self.encode(&mut g, &s, None)?;
        let grab = |vs: &Vec<Vec<crate::autodiff::Var>>| {
            vs.iter()
                .map(|hs| hs.iter().map(|&v| g.value(v).clone()).collect())
                .collect()
        };
        Ok(Forward {
            hidden: g.value(enc.hidden).clone(),
            patch_emb: g.value(enc.patch_emb).clone(),
            channel_attn: grab(&enc.channel_attn),
            attn: grab(&enc.attn),
        })
    }

    /// Per-head pairwise bias, `H` matrices of `C × C`.
    pub fn compute_spatial_bias(&self, coords: &[[f64; 3]]) -> Result<Vec<Matrix<T>>> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFiniteInput("electrode coordinates"));
        }
        let c = coords.len();
        let mut g = Graph::new();
        let p = g.constant(coords_matrix(coords));
        let table = self.spatial_bias(&mut g, p);
        let t = g.value(table);
        Ok((0..self.config.num_heads)
            .map(|h| Matrix::from_fn(c, c, |e1, e2| t.get(e1 * c + e2, h)))
            .collect())
    }

    /// Spatial embedding rows, `C × D`.
    pub fn compute_spatial_embedding(&self, coords: &[[f64; 3]]) -> Result<Matrix<T>> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFiniteInput("electrode coordinates"));
        }
        let mut g = Graph::new();
        let p = g.constant(coords_matrix(coords));
        let s = self.spatial_embed(&mut g, p);
        Ok(g.value(s).clone())
    }
}

/// Tiles per-head `C × C` bias over `steps` time patches. Token `(e, t)`
/// sits at `cls + e·steps + t`; with `with_cls` row and column 0 are zero.
pub fn expand_bias<T: Real>(per_head: &[Matrix<T>], steps: usize, with_cls: bool) -> Vec<Matrix<T>> {
    let off = usize::from(with_cls);
    per_head
        .iter()
        .map(|b| {
            let c = b.rows();
            let m = off + c * steps;
            Matrix::from_fn(m, m, |i, j| {
                if with_cls && (i == 0 || j == 0) {
                    T::zero()
                } else {
                    b.get((i - off) / steps, (j - off) / steps)
                }
            })
        })
        .collect()
}
