use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Matrix;

fn unit<T: Real>(v: &[T]) -> Vec<T> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if n > T::zero() {
        v.iter().map(|&x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Index of the codeword nearest to `p` after unit-normalizing both sides.
/// Ties go to the lowest index. A zero `p` is compared unnormalized, so
/// every codeword is equidistant and index 0 wins.
pub fn quantize<T: Real>(p: &[T], codebook: &Matrix<T>) -> (usize, Vec<T>) {
    assert_eq!(p.len(), codebook.cols(), "representation width");
    let q = unit(p);
    let mut best = 0;
    let mut best_d = T::infinity();
    for k in 0..codebook.rows() {
        let v = unit(codebook.row(k));
        let d = q
            .iter()
            .zip(&v)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    if p.iter().all(|&v| v == T::zero()) {
        log::debug!("zero representation quantized to index 0");
    }
    (best, codebook.row(best).to_vec())
}

/// [`quantize`] applied to every row.
pub fn quantize_rows<T: Real>(x: &Matrix<T>, codebook: &Matrix<T>) -> Vec<usize> {
    (0..x.rows()).map(|r| quantize(x.row(r), codebook).0).collect()
}

/// Sum over rows of `‖sg[ℓ2(x)] − ℓ2(v_z)‖² + ‖ℓ2(x) − sg[ℓ2(v_z)]‖`.
///
/// The first term moves only the codebook, the second only the encoder.
pub fn quantization_loss<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    codebook: Var,
    indices: &[usize],
) -> Result<Var> {
    let k = g.value(codebook).rows();
    if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
        return Err(Error::IndexOutOfRange { index: bad, size: k });
    }
    if indices.len() != g.value(x).rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} indices for {} rows",
            indices.len(),
            g.value(x).rows()
        )));
    }
    let xn = g.l2_normalize_rows(x);
    let vz = g.gather(codebook, indices.to_vec());
    let vn = g.l2_normalize_rows(vz);

    let xs = g.stop_gradient(xn);
    let d1 = g.sub(xs, vn);
    let term1 = g.sum_squares(d1);

    let vs = g.stop_gradient(vn);
    let d2 = g.sub(xn, vs);
    let norms = g.row_norms(d2);
    let term2 = g.sum(norms);
    Ok(g.add(term1, term2))
}
