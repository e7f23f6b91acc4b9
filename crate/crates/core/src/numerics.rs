//! Dense complex linear algebra and spectral helpers.
//!
//! Everything here is a pure function of its inputs. Matrices are
//! `nalgebra::DMatrix<Complex64>`; decompositions are delegated to nalgebra
//! (SVD, Hermitian eigensolver) and FFTs to `rustfft`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

/// Dense complex matrix used throughout the crate.
pub type ComplexMatrix = DMatrix<Complex64>;
/// Dense complex column vector.
pub type ComplexVector = DVector<Complex64>;

/// Relative singular-value cutoff used for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension must be positive")]
    EmptyDimension,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is rank deficient: rank {rank} < {expected} columns")]
    RankDeficient { rank: usize, expected: usize },
}

#[inline]
pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Unit-modulus phasor `exp(j*angle)`.
#[inline]
pub fn cis(angle: f64) -> Complex64 {
    Complex64::from_polar(1.0, angle)
}

/// Normalized `n x n` DFT matrix with entry `(i, j) = exp(-j 2 pi i j / n) / sqrt(n)`.
pub fn dft_matrix(n: usize) -> Result<ComplexMatrix, NumericsError> {
    if n == 0 {
        return Err(NumericsError::EmptyDimension);
    }
    let scale = 1.0 / (n as f64).sqrt();
    Ok(ComplexMatrix::from_fn(n, n, |i, j| {
        // reduce the exponent modulo n to keep the angle small
        let k = (i * j) % n;
        cis(-2.0 * PI * k as f64 / n as f64) * scale
    }))
}

/// First `cols` columns of the normalized DFT matrix.
pub fn dft_columns(n: usize, cols: usize) -> Result<ComplexMatrix, NumericsError> {
    Ok(dft_matrix(n)?.columns(0, cols).into_owned())
}

/// Orthonormal basis `Q` of the column space of `b`, computed from the SVD.
///
/// Fails when `b` does not have full column rank under [`RANK_TOL`].
pub fn orthonormal_basis(b: &ComplexMatrix) -> Result<ComplexMatrix, NumericsError> {
    let cols = b.ncols();
    if cols == 0 || b.nrows() == 0 {
        return Err(NumericsError::EmptyDimension);
    }
    let svd = SVD::new(b.clone(), true, false);
    let smax = svd.singular_values.max();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > RANK_TOL * smax && smax > 0.0)
        .count();
    if rank < cols {
        return Err(NumericsError::RankDeficient { rank, expected: cols });
    }
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let mut q = ComplexMatrix::zeros(b.nrows(), cols);
    for (dst, &src) in order.iter().take(cols).enumerate() {
        q.set_column(dst, &u.column(src));
    }
    Ok(q)
}

/// Projector onto `Span(b)`: `Q Q^H`.
pub fn projector(b: &ComplexMatrix) -> Result<ComplexMatrix, NumericsError> {
    let q = orthonormal_basis(b)?;
    Ok(&q * q.adjoint())
}

/// Orthogonal-complement projector `I - B (B^H B)^-1 B^H`.
pub fn projector_complement(b: &ComplexMatrix) -> Result<ComplexMatrix, NumericsError> {
    let p = projector(b)?;
    Ok(ComplexMatrix::identity(b.nrows(), b.nrows()) - p)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors stored column-wise in the same order as `eigenvalues`.
    pub eigenvectors: ComplexMatrix,
}

impl EigenDecomposition {
    /// Reassemble `V diag(lambda) V^H`.
    pub fn reconstruct(&self) -> ComplexMatrix {
        let mut scaled = self.eigenvectors.clone();
        for (j, lambda) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*lambda);
        }
        &scaled * self.eigenvectors.adjoint()
    }
}

/// Hermitian eigensolver. The input is symmetrized as `(A + A^H)/2` first.
pub fn eig_hermitian(a: &ComplexMatrix) -> Result<EigenDecomposition, NumericsError> {
    if a.nrows() != a.ncols() {
        return Err(NumericsError::NotSquare { rows: a.nrows(), cols: a.ncols() });
    }
    if a.nrows() == 0 {
        return Err(NumericsError::EmptyDimension);
    }
    let sym = (a + a.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mut vectors = ComplexMatrix::zeros(a.nrows(), a.ncols());
    let mut values = Vec::with_capacity(order.len());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
        values.push(eig.eigenvalues[src]);
    }
    Ok(EigenDecomposition { eigenvalues: values, eigenvectors: vectors })
}

/// Moore-Penrose pseudo-inverse. Singular values below `RANK_TOL * sigma_max`
/// are treated as zero.
pub fn pseudo_inverse(a: &ComplexMatrix) -> ComplexMatrix {
    if a.is_empty() {
        return ComplexMatrix::zeros(a.ncols(), a.nrows());
    }
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.max();
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = ComplexMatrix::zeros(a.ncols(), a.nrows());
    if smax == 0.0 {
        return out;
    }
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > RANK_TOL * smax {
            // out += v_i * (1/s) * u_i^H
            let v = vt.row(i).adjoint();
            let uh = u.column(i).adjoint();
            out += (v * uh).scale(1.0 / s);
        }
    }
    out
}

/// Numerical rank under the relative [`RANK_TOL`] cutoff.
pub fn rank(a: &ComplexMatrix) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.max();
    sv.iter().filter(|&&s| smax > 0.0 && s > RANK_TOL * smax).count()
}

/// Frobenius norm squared.
#[inline]
pub fn fro2(a: &ComplexMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// Frobenius inner product `Tr(A^H B)`.
pub fn inner(a: &ComplexMatrix, b: &ComplexMatrix) -> Complex64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Scale row `n` of `m` by `d[n]` (left multiplication by a diagonal matrix).
pub fn scale_rows(m: &ComplexMatrix, d: &[Complex64]) -> ComplexMatrix {
    assert_eq!(m.nrows(), d.len());
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for (i, di) in d.iter().enumerate() {
            out[(i, j)] *= di;
        }
    }
    out
}

/// Build a diagonal matrix from its entries.
pub fn diag(d: &[Complex64]) -> ComplexMatrix {
    ComplexMatrix::from_diagonal(&ComplexVector::from_column_slice(d))
}

/// In-place forward FFT (unnormalized, `exp(-j...)` kernel).
pub fn fft_in_place(buf: &mut [Complex64]) {
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(buf.len()).process(buf);
}

/// In-place inverse FFT (unnormalized, `exp(+j...)` kernel).
pub fn ifft_in_place(buf: &mut [Complex64]) {
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_inverse(buf.len()).process(buf);
}

/// Normalized DFT (`F x`) applied to every column.
pub fn unitary_dft_columns(m: &ComplexMatrix) -> ComplexMatrix {
    let n = m.nrows();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        // columns of a DMatrix are contiguous
        let slice = col.as_mut_slice();
        fft.process(slice);
        slice.iter_mut().for_each(|z| *z *= scale);
    }
    out
}

/// Unnormalized forward DFT along the rows of `m`, zero-padded to `len`.
/// Column `i` of the result is `sum_c m[:, c] exp(-j 2 pi c i / len)`.
pub fn fft_rows_padded(m: &ComplexMatrix, len: usize) -> ComplexMatrix {
    assert!(len >= m.ncols(), "padding length shorter than row");
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(len);
    let mut out = ComplexMatrix::zeros(m.nrows(), len);
    let mut buf = vec![Complex64::default(); len];
    for r in 0..m.nrows() {
        buf.iter_mut().for_each(|z| *z = Complex64::default());
        for c in 0..m.ncols() {
            buf[c] = m[(r, c)];
        }
        fft.process(&mut buf);
        for (c, z) in buf.iter().enumerate() {
            out[(r, c)] = *z;
        }
    }
    out
}

/// Solve a small real linear system by Gaussian elimination with partial
/// pivoting. Returns `None` when a pivot falls below `1e-12` of the largest
/// absolute entry.
pub fn solve_real(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().map(|row| row.clone()).collect();
    let mut rhs = b.to_vec();
    let scale = m.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-12 * scale {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(rows, cols, |_, _| c64(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
    }

    fn max_abs(m: &ComplexMatrix) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn dft_small_cases() {
        let f1 = dft_matrix(1).unwrap();
        assert!((f1[(0, 0)] - c64(1.0, 0.0)).norm() < 1e-15);
        let f2 = dft_matrix(2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let want = [[s, s], [s, -s]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((f2[(i, j)] - c64(want[i][j], 0.0)).norm() < 1e-15);
            }
        }
        assert_eq!(dft_matrix(0), Err(NumericsError::EmptyDimension));
    }

    #[test]
    fn dft_is_unitary() {
        for n in [1usize, 2, 8, 64] {
            let f = dft_matrix(n).unwrap();
            let err = max_abs(&(&f * f.adjoint() - ComplexMatrix::identity(n, n)));
            assert!(err < 1e-12, "n={n} err={err}");
        }
    }

    #[test]
    fn basis_of_scaled_identity_columns() {
        let mut b = ComplexMatrix::zeros(4, 2);
        b[(0, 0)] = c64(3.0, 0.0);
        b[(1, 1)] = c64(3.0, 0.0);
        let q = orthonormal_basis(&b).unwrap();
        // equal up to a unit phase per column
        for j in 0..2 {
            for i in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((q[(i, j)].norm() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn basis_projector_matches_explicit_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_matrix(&mut rng, 64, 10);
        let q = orthonormal_basis(&b).unwrap();
        let qhq = q.adjoint() * &q;
        assert!(max_abs(&(qhq - ComplexMatrix::identity(10, 10))) < 1e-10);
        // oracle: B (B^H B)^-1 B^H via an explicit inverse of the Gram matrix
        let gram = b.adjoint() * &b;
        let inv = gram.try_inverse().unwrap();
        let p_oracle = &b * inv * b.adjoint();
        assert!(max_abs(&(&q * q.adjoint() - p_oracle)) < 1e-10);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = random_matrix(&mut rng, 8, 3);
        let c0 = b.column(0).into_owned();
        b.set_column(2, &c0);
        assert!(matches!(orthonormal_basis(&b), Err(NumericsError::RankDeficient { rank: 2, expected: 3 })));
        assert!(projector_complement(&b).is_err());
    }

    #[test]
    fn complement_projector_algebra() {
        let mut e1 = ComplexMatrix::zeros(2, 1);
        e1[(0, 0)] = c64(1.0, 0.0);
        let p = projector_complement(&e1).unwrap();
        let want = diag(&[c64(0.0, 0.0), c64(1.0, 0.0)]);
        assert!(max_abs(&(p - want)) < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_matrix(&mut rng, 16, 5);
        let pc = projector_complement(&b).unwrap();
        let pp = projector(&b).unwrap();
        assert!(max_abs(&(&pc * &pc - &pc)) < 1e-12);
        assert!(max_abs(&(&pc - pc.adjoint())) < 1e-12);
        assert!(max_abs(&(&pc * &b)) < 1e-10);
        assert!(max_abs(&(&pc + &pp - ComplexMatrix::identity(16, 16))) < 1e-12);
    }

    #[test]
    fn eig_diag_and_reconstruction() {
        let a = diag(&[c64(2.0, 0.0), c64(1.0, 0.0)]);
        let e = eig_hermitian(&a).unwrap();
        assert!((e.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 2.0).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in [32usize, 128] {
            let x = random_matrix(&mut rng, n, n);
            let h = &x + x.adjoint();
            let e = eig_hermitian(&h).unwrap();
            assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            let norm = fro2(&h).sqrt();
            let resid = fro2(&(e.reconstruct() - &h)).sqrt();
            assert!(resid < 1e-9 * norm, "n={n} resid={resid}");
            let vhv = e.eigenvectors.adjoint() * &e.eigenvectors;
            assert!(max_abs(&(vhv - ComplexMatrix::identity(n, n))) < 1e-10);
        }
        assert!(matches!(eig_hermitian(&ComplexMatrix::zeros(2, 3)), Err(NumericsError::NotSquare { .. })));
    }

    #[test]
    fn pinv_small_cases() {
        let i3 = ComplexMatrix::identity(3, 3);
        assert!(max_abs(&(pseudo_inverse(&i3) - &i3)) < 1e-14);
        let d = diag(&[c64(2.0, 0.0), c64(0.0, 0.0)]);
        let want = diag(&[c64(0.5, 0.0), c64(0.0, 0.0)]);
        assert!(max_abs(&(pseudo_inverse(&d) - want)) < 1e-14);
    }

    #[test]
    fn pinv_satisfies_moore_penrose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 40, 20);
        let p = pseudo_inverse(&a);
        assert!(max_abs(&(&p * &a - ComplexMatrix::identity(20, 20))) < 1e-9);
        let scale = max_abs(&a);
        assert!(max_abs(&(&a * &p * &a - &a)) < 1e-9 * scale);
        assert!(max_abs(&(&p * &a * &p - &p)) < 1e-9 * max_abs(&p));
        let ap = &a * &p;
        assert!(max_abs(&(&ap - ap.adjoint())) < 1e-9);
    }

    #[test]
    fn padded_row_fft_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_matrix(&mut rng, 3, 5);
        let out = fft_rows_padded(&m, 8);
        for r in 0..3 {
            for i in 0..8 {
                let direct: Complex64 =
                    (0..5).map(|c| m[(r, c)] * cis(-2.0 * PI * (c * i) as f64 / 8.0)).sum();
                assert!((direct - out[(r, i)]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn small_real_solver() {
        let a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let x = solve_real(&a, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
        assert!(solve_real(&[vec![1.0, 2.0], vec![2.0, 4.0]], &[1.0, 2.0]).is_none());
    }
}
