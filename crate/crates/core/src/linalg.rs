//! Singular value and QR decompositions (backed by `faer`).

use faer::{Mat, MatRef};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thin SVD `E = U · diag(s) · Vᵀ` with singular values in decreasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m × k`
    pub u: Tensor,
    pub s: Vec<f64>,
    /// `n × k` (columns are right singular vectors)
    pub v: Tensor,
}

fn to_mat(t: &Tensor, op: &'static str) -> Result<Mat<f64>> {
    let (m, n) = t.dims2(op)?;
    if m == 0 || n == 0 {
        return Err(Error::dim(op, "empty matrix"));
    }
    if !t.all_finite() {
        return Err(Error::domain(op, "non-finite entry"));
    }
    let d = t.data();
    Ok(Mat::from_fn(m, n, |i, j| d[i * n + j]))
}

fn from_mat(m: MatRef<'_, f64>) -> Tensor {
    let (r, c) = (m.nrows(), m.ncols());
    let data = (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect();
    Tensor::new(vec![r, c], data).expect("dense matrix shape")
}

fn no_convergence(op: &'static str) -> Error {
    Error::domain(op, "SVD did not converge")
}

pub fn svd(e: &Tensor) -> Result<Svd> {
    let dec = to_mat(e, "svd")?.thin_svd().map_err(|_| no_convergence("svd"))?;
    let k = dec.S().dim();
    let s: Vec<f64> = (0..k).map(|i| dec.S()[i]).collect();
    // Keep the ordering contract explicit rather than relying on the backend.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let pick = |m: MatRef<'_, f64>| {
        let rows = m.nrows();
        let data = (0..rows).flat_map(|i| order.iter().map(move |&j| m[(i, j)])).collect();
        Tensor::new(vec![rows, k], data).expect("factor shape")
    };
    Ok(Svd {
        u: pick(dec.U()),
        s: order.iter().map(|&j| s[j]).collect(),
        v: pick(dec.V()),
    })
}

/// Singular values only, decreasing.
pub fn singular_values(e: &Tensor) -> Result<Vec<f64>> {
    let mut s = to_mat(e, "svd")?
        .singular_values()
        .map_err(|_| no_convergence("svd"))?;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Balanced rank-`r` factors `(U_r·√Σ_r, V_r·√Σ_r)` of the best rank-`r`
/// approximation of `e`.
pub fn truncated_factors(e: &Tensor, r: usize) -> Result<(Tensor, Tensor)> {
    let (m, n) = e.dims2("truncated_svd")?;
    if r == 0 || r > m.min(n) {
        return Err(Error::Config(format!(
            "rank {r} outside 1..={} for a {m}×{n} matrix",
            m.min(n)
        )));
    }
    let dec = svd(e)?;
    let k = dec.s.len();
    let take = |t: &Tensor, rows: usize| {
        let mut out = Vec::with_capacity(rows * r);
        for i in 0..rows {
            for j in 0..r {
                out.push(t.data()[i * k + j] * dec.s[j].sqrt());
            }
        }
        Tensor::new(vec![rows, r], out).expect("factor shape")
    };
    Ok((take(&dec.u, m), take(&dec.v, n)))
}

/// `Σ_{i≥r} s_i²` for every `r` in `0..=k`: the squared Frobenius error of the
/// best rank-`r` approximation.
pub fn tail_energies(s: &[f64]) -> Vec<f64> {
    let mut tails = vec![0.0; s.len() + 1];
    for i in (0..s.len()).rev() {
        tails[i] = tails[i + 1] + s[i] * s[i];
    }
    tails
}

/// Thin QR of an `m × r` matrix (`m ≥ r`): returns `(Q m×r, R r×r)`.
pub fn thin_qr(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, r) = a.dims2("qr")?;
    if m < r {
        return Err(Error::dim("qr", format!("{m}×{r} has fewer rows than columns")));
    }
    let qr = to_mat(a, "qr")?.qr();
    Ok((from_mat(qr.compute_thin_Q().as_ref()), from_mat(qr.thin_R())))
}
