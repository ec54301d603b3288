//! Small dense complex linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn identity(d: usize) -> CMatrix {
    CMatrix::identity(d, d)
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn pauli_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, -I, I, ZERO])
}

pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

/// Computational basis vector `|i>` in dimension `d`.
pub fn ket(d: usize, i: usize) -> CVector {
    let mut v = CVector::zeros(d);
    v[i] = ONE;
    v
}

pub fn projector(v: &CVector) -> CMatrix {
    v * v.adjoint()
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

pub fn kron_vec(a: &CVector, b: &CVector) -> CVector {
    a.kronecker(b)
}

pub fn trace(m: &CMatrix) -> Complex64 {
    m.trace()
}

/// Largest entry of `|m - m^dagger|`.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * c(0.5, 0.0)
}

/// Hermitian eigendecomposition with eigenvalues in ascending order.
/// Columns of the returned matrix are the matching eigenvectors.
pub fn eigh(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = hermitize(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

pub fn eigvalsh(m: &CMatrix) -> Vec<f64> {
    eigh(m).0
}

/// Rebuilds `V diag(f(lambda)) V^dagger`.
pub fn spectral_map(values: &[f64], vectors: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let n = values.len();
    let mut out = CMatrix::zeros(n, n);
    for (k, &lam) in values.iter().enumerate() {
        let w = f(lam);
        if w == 0.0 {
            continue;
        }
        let col = vectors.column(k);
        out += (col * col.adjoint()) * c(w, 0.0);
    }
    out
}

/// Square root of a positive semidefinite matrix. Eigenvalues at the
/// round-off scale of the spectrum are treated as exact zeros.
pub fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let (values, vectors) = eigh(m);
    let cutoff = roundoff_floor(&values);
    spectral_map(&values, &vectors, |x| if x > cutoff { x.sqrt() } else { 0.0 })
}

/// Eigenvalue magnitude below which a PSD spectrum entry is numerically zero.
pub fn roundoff_floor(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    64.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE)
}

/// Trace norm of a Hermitian matrix.
pub fn trace_norm_hermitian(m: &CMatrix) -> f64 {
    eigvalsh(m).iter().map(|v| v.abs()).sum()
}

pub fn operator_norm_psd(m: &CMatrix) -> f64 {
    eigvalsh(m).last().copied().unwrap_or(0.0)
}

/// `A rho A^dagger`.
pub fn sandwich(a: &CMatrix, rho: &CMatrix) -> CMatrix {
    a * rho * a.adjoint()
}

/// Embeds `op` (acting on subsystem `index`) into the full tensor space,
/// padding the other factors with identities.
pub fn embed(op: &CMatrix, dims: &[usize], index: usize) -> CMatrix {
    let left: usize = dims[..index].iter().product();
    let right: usize = dims[index + 1..].iter().product();
    let mut out = op.clone();
    if left > 1 {
        out = kron(&identity(left), &out);
    }
    if right > 1 {
        out = kron(&out, &identity(right));
    }
    out
}

/// Partial trace keeping the listed subsystems (sorted, unique, in range).
pub fn partial_trace(m: &CMatrix, dims: &[usize], keep: &[usize]) -> CMatrix {
    let n = dims.len();
    let traced: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
    let mut strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let kept_dim: usize = keep.iter().map(|&i| dims[i]).product();
    let traced_dim: usize = traced.iter().map(|&i| dims[i]).product();

    let offsets = |subsystems: &[usize], mut flat: usize| -> usize {
        let mut off = 0;
        for &s in subsystems.iter().rev() {
            off += (flat % dims[s]) * strides[s];
            flat /= dims[s];
        }
        off
    };
    let kept_offsets: Vec<usize> = (0..kept_dim).map(|k| offsets(keep, k)).collect();
    let traced_offsets: Vec<usize> = (0..traced_dim).map(|t| offsets(&traced, t)).collect();

    CMatrix::from_fn(kept_dim, kept_dim, |i, j| {
        traced_offsets
            .iter()
            .map(|&t| m[(kept_offsets[i] + t, kept_offsets[j] + t)])
            .sum()
    })
}

/// Maximally entangled vector `(1/sqrt d) sum_i |ii>`.
pub fn max_entangled(d: usize) -> CVector {
    let mut v = CVector::zeros(d * d);
    let amp = c(1.0 / (d as f64).sqrt(), 0.0);
    for i in 0..d {
        v[i * d + i] = amp;
    }
    v
}

pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).iter().fold(0.0f64, |acc, z| acc.max(z.norm()))
}

/// Row-major `[re, im]` pairs, the JSON form used for matrices.
pub fn to_pairs(m: &CMatrix) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
        .collect()
}

/// Inverse of [`to_pairs`]; `None` for ragged rows.
pub fn from_pairs(rows: &[Vec<[f64; 2]>]) -> Option<CMatrix> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(CMatrix::from_fn(rows.len(), ncols, |i, j| {
        c(rows[i][j][0], rows[i][j][1])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigh_sorted_and_reconstructs() {
        let m = CMatrix::from_row_slice(2, 2, &[ONE, -I, I, ONE]);
        let (vals, vecs) = eigh(&m);
        assert!((vals[0] - 0.0).abs() < 1e-14 && (vals[1] - 2.0).abs() < 1e-14);
        let back = spectral_map(&vals, &vecs, |x| x);
        assert!(max_abs_diff(&back, &m) < 1e-14);
    }

    #[test]
    fn partial_trace_of_product() {
        let a = CMatrix::from_row_slice(2, 2, &[c(0.7, 0.0), c(0.1, 0.2), c(0.1, -0.2), c(0.3, 0.0)]);
        let b = CMatrix::from_row_slice(
            3,
            3,
            &[
                c(0.5, 0.0),
                ZERO,
                ZERO,
                ZERO,
                c(0.25, 0.0),
                ZERO,
                ZERO,
                ZERO,
                c(0.25, 0.0),
            ],
        );
        let ab = kron(&a, &b);
        assert!(max_abs_diff(&partial_trace(&ab, &[2, 3], &[0]), &a) < 1e-15);
        assert!(max_abs_diff(&partial_trace(&ab, &[2, 3], &[1]), &b) < 1e-15);
    }

    #[test]
    fn embed_matches_kron() {
        let x = pauli_x();
        let full = embed(&x, &[2, 2, 2], 1);
        let expect = kron(&kron(&identity(2), &x), &identity(2));
        assert_eq!(full, expect);
    }
}
