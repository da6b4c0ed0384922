//! Truncated eigenbasis of a (cotangent) Laplacian.
//!
//! Small matrices go through a dense symmetric eigensolver. Larger ones use
//! shift-invert subspace iteration: the shifted matrix `L + σI` is factored
//! once with an envelope Cholesky after reverse Cuthill–McKee reordering,
//! and each sweep is followed by a Rayleigh–Ritz projection onto `L`.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use super::SparseSymmetricMatrix;
use crate::error::{Error, Result};
use crate::util::{checksum64, push_f64s, stream_rng, ByteReader};

const CACHE_MAGIC: &[u8; 8] = b"ANEUGSB1";

/// Dense solve up to this dimension, iterative above.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EigenSolver {
    Auto,
    Dense,
    Iterative { tolerance: f64, max_iterations: usize },
}

impl EigenSolver {
    pub const DEFAULT_ITERATIVE: EigenSolver = EigenSolver::Iterative {
        tolerance: 1e-10,
        max_iterations: 500,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    eigenvalues: DVector<f64>,
    /// `N × n`, one orthonormal eigenvector per column.
    eigenvectors: DMatrix<f64>,
    checksum: u64,
}

impl SpectralBasis {
    pub fn from_parts(eigenvalues: DVector<f64>, eigenvectors: DMatrix<f64>) -> Result<Self> {
        if eigenvalues.len() != eigenvectors.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} eigenvalues for {} eigenvectors",
                eigenvalues.len(),
                eigenvectors.ncols()
            )));
        }
        let checksum = basis_checksum(&eigenvalues, &eigenvectors);
        Ok(SpectralBasis {
            eigenvalues,
            eigenvectors,
            checksum,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvectors.nrows()
    }

    pub fn mode_count(&self) -> usize {
        self.eigenvectors.ncols()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    /// The first `n` modes.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.mode_count() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate {} modes to {n}",
                self.mode_count()
            )));
        }
        Self::from_parts(
            self.eigenvalues.rows(0, n).into_owned(),
            self.eigenvectors.columns(0, n).into_owned(),
        )
    }

    /// Binary layout: magic `ANEUGSB1`, `N: u64`, `n: u64`, `n` eigenvalues,
    /// `N·n` eigenvector entries column-major, checksum `u64`; all
    /// little-endian, floats as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = CACHE_MAGIC.to_vec();
        buf.extend_from_slice(&payload(&self.eigenvalues, &self.eigenvectors));
        buf.extend_from_slice(&self.checksum.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != CACHE_MAGIC {
            return Err(Error::Format("not a spectral basis cache".into()));
        }
        let dim = r.u64()? as usize;
        let n = r.u64()? as usize;
        let lambda = DVector::from_vec(r.f64s(n)?);
        let u = DMatrix::from_vec(dim, n, r.f64s(dim * n)?);
        let stored = r.u64()?;
        let basis = Self::from_parts(lambda, u)?;
        if basis.checksum != stored {
            return Err(Error::Checksum {
                expected: stored,
                found: basis.checksum,
            });
        }
        Ok(basis)
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn payload(lambda: &DVector<f64>, u: &DMatrix<f64>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 8 * (lambda.len() + u.len()));
    buf.extend_from_slice(&(u.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(u.ncols() as u64).to_le_bytes());
    push_f64s(&mut buf, lambda.iter().copied());
    push_f64s(&mut buf, u.iter().copied());
    buf
}

fn basis_checksum(lambda: &DVector<f64>, u: &DMatrix<f64>) -> u64 {
    checksum64(&payload(lambda, u))
}

/// The `n` smallest eigenpairs of `l`, eigenvalues ascending, each
/// eigenvector signed so its first non-negligible entry is positive.
pub fn spectral_basis(l: &SparseSymmetricMatrix, n: usize) -> Result<SpectralBasis> {
    spectral_basis_with(l, n, EigenSolver::Auto)
}

pub fn spectral_basis_with(
    l: &SparseSymmetricMatrix,
    n: usize,
    solver: EigenSolver,
) -> Result<SpectralBasis> {
    let dim = l.dim();
    if n == 0 || n > dim {
        return Err(Error::InvalidArgument(format!(
            "mode count {n} not in 1..={dim}"
        )));
    }
    let solver = match solver {
        EigenSolver::Auto if dim <= DENSE_LIMIT => EigenSolver::Dense,
        EigenSolver::Auto => EigenSolver::DEFAULT_ITERATIVE,
        s => s,
    };
    let (lambda, mut u) = match solver {
        EigenSolver::Dense => dense_smallest(&l.to_dense(), n),
        EigenSolver::Iterative {
            tolerance,
            max_iterations,
        } => {
            if n + 2 > dim {
                dense_smallest(&l.to_dense(), n)
            } else {
                subspace_iteration(l, n, tolerance, max_iterations)?
            }
        }
        EigenSolver::Auto => unreachable!(),
    };
    for mut col in u.column_iter_mut() {
        let scale = col.amax();
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-10 * scale).copied() {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
    SpectralBasis::from_parts(lambda, u)
}

fn dense_smallest(a: &DMatrix<f64>, n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    sorted_pairs(&eig.eigenvalues, &eig.eigenvectors, n)
}

fn sorted_pairs(values: &DVector<f64>, vectors: &DMatrix<f64>, n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let lambda = DVector::from_iterator(n, order.iter().take(n).map(|&i| values[i]));
    let u = DMatrix::from_columns(
        &order
            .iter()
            .take(n)
            .map(|&i| vectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (lambda, u)
}

fn subspace_iteration(
    l: &SparseSymmetricMatrix,
    n: usize,
    tolerance: f64,
    max_iterations: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = l.dim();
    let block = (n + (n / 2).max(8)).min(dim);
    let mean_diag = l.diagonal().iter().sum::<f64>() / dim as f64;
    let shift = 1e-6 * mean_diag.abs().max(1e-300);
    let chol = EnvelopeCholesky::factor(l, shift)?;

    let mut rng = stream_rng(0x5eed, "subspace");
    let mut x = DMatrix::from_fn(dim, block, |_, _| rng.sample::<f64, _>(StandardNormal));
    x = x.qr().q();
    let mut worst = f64::INFINITY;
    for _ in 0..max_iterations {
        let mut y = DMatrix::zeros(dim, block);
        for c in 0..block {
            let sol = chol.solve(x.column(c).as_slice());
            y.set_column(c, &DVector::from_vec(sol));
        }
        let q = y.qr().q();
        let lq = l.mul_dense(&q);
        let h = q.transpose() * &lq;
        let h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let (theta, v) = sorted_pairs(&eig.eigenvalues, &eig.eigenvectors, block);
        x = &q * &v;
        let lx = &lq * &v;
        worst = (0..n)
            .map(|i| {
                let r = lx.column(i) - x.column(i) * theta[i];
                r.amax() / theta[i].abs().max(1.0)
            })
            .fold(0.0, f64::max);
        if worst <= tolerance {
            return Ok((
                theta.rows(0, n).into_owned(),
                x.columns(0, n).into_owned(),
            ));
        }
    }
    Err(Error::EigenNonConvergence {
        iterations: max_iterations,
        residual: worst,
    })
}

/// Reverse Cuthill–McKee ordering of the sparsity graph; `perm[new] = old`.
fn reverse_cuthill_mckee(a: &SparseSymmetricMatrix) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n).map(|i| a.neighbors(i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = a
                .neighbors(v)
                .map(|(j, _)| j)
                .filter(|&j| !visited[j])
                .collect();
            nb.sort_by_key(|&j| (degree[j], j));
            for j in nb {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order
}

/// Cholesky factor of a permuted SPD matrix stored by rows over its envelope.
struct EnvelopeCholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl EnvelopeCholesky {
    fn factor(a: &SparseSymmetricMatrix, shift: f64) -> Result<Self> {
        let n = a.dim();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first = vec![0; n];
        for i in 0..n {
            first[i] = a
                .row(perm[i])
                .map(|(j, _)| inv[j])
                .filter(|&j| j <= i)
                .min()
                .unwrap_or(i);
        }
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; i - first[i] + 1]).collect();
        for i in 0..n {
            for (j, v) in a.row(perm[i]) {
                let jn = inv[j];
                if jn <= i {
                    rows[i][jn - first[i]] += v;
                }
            }
            rows[i][i - first[i]] += shift;
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let mut s = rows[i][j - fi];
                for k in k0..j {
                    s -= rows[i][k - fi] * rows[j][k - fj];
                }
                if j < i {
                    rows[i][j - fi] = s / rows[j][j - fj];
                } else {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::Degenerate(format!(
                            "shifted Laplacian not positive definite at pivot {i}"
                        )));
                    }
                    rows[i][i - fi] = s.sqrt();
                }
            }
        }
        Ok(EnvelopeCholesky { perm, first, rows })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let mut s = y[i];
            for k in fi..i {
                s -= self.rows[i][k - fi] * y[k];
            }
            y[i] = s / self.rows[i][i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            y[i] /= self.rows[i][i - fi];
            let yi = y[i];
            for k in fi..i {
                y[k] -= self.rows[i][k - fi] * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{cotangent_laplacian, primitives};

    fn ortho_error(u: &DMatrix<f64>) -> f64 {
        let g = u.transpose() * u;
        (g - DMatrix::identity(u.ncols(), u.ncols())).amax()
    }

    #[test]
    fn closed_mesh_kernel_is_constant() {
        let m = primitives::icosphere(1.0, 2).unwrap();
        let b = spectral_basis(&cotangent_laplacian(&m).unwrap(), 10).unwrap();
        assert!(b.eigenvalues()[0].abs() < 1e-9);
        let c = 1.0 / (m.vertex_count() as f64).sqrt();
        assert!(b.eigenvectors().column(0).iter().all(|x| (x - c).abs() < 1e-8));
    }

    #[test]
    fn full_basis_is_orthonormal() {
        let m = primitives::icosphere(1.0, 1).unwrap();
        let l = cotangent_laplacian(&m).unwrap();
        let b = spectral_basis(&l, l.dim()).unwrap();
        assert!(ortho_error(b.eigenvectors()) < 1e-8);
    }

    #[test]
    fn envelope_cholesky_solves_shifted_system() {
        let m = primitives::cylinder(1.0, 3.0, 10, 7).unwrap();
        let l = cotangent_laplacian(&m).unwrap();
        let chol = EnvelopeCholesky::factor(&l, 0.1).unwrap();
        let b: Vec<f64> = (0..l.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = chol.solve(&b);
        let ax = l.mul_vec(&x);
        for i in 0..b.len() {
            assert!((ax[i] + 0.1 * x[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn iterative_matches_dense() {
        let m = primitives::icosphere(1.0, 3).unwrap();
        let l = cotangent_laplacian(&m).unwrap();
        let dense = spectral_basis_with(&l, 16, EigenSolver::Dense).unwrap();
        let iter = spectral_basis_with(&l, 16, EigenSolver::DEFAULT_ITERATIVE).unwrap();
        for i in 0..16 {
            let (a, b) = (dense.eigenvalues()[i], iter.eigenvalues()[i]);
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "mode {i}: {a} vs {b}");
        }
        assert!(ortho_error(iter.eigenvectors()) < 1e-8);
        let lu = l.mul_dense(iter.eigenvectors());
        for i in 0..16 {
            let r = lu.column(i) - iter.eigenvectors().column(i) * iter.eigenvalues()[i];
            assert!(r.amax() < 1e-6 * iter.eigenvalues()[i].max(1.0));
        }
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let m = primitives::icosphere(1.0, 2).unwrap();
        let l = cotangent_laplacian(&m).unwrap();
        let b = spectral_basis(&l, 6).unwrap();
        for col in b.eigenvectors().column_iter() {
            let scale = col.amax();
            let first = col.iter().find(|x| x.abs() > 1e-10 * scale).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn cache_round_trip_and_tamper_detection() {
        let m = primitives::icosphere(1.0, 1).unwrap();
        let b = spectral_basis(&cotangent_laplacian(&m).unwrap(), 5).unwrap();
        let bytes = b.to_bytes();
        assert_eq!(SpectralBasis::from_bytes(&bytes).unwrap(), b);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(
            SpectralBasis::from_bytes(&bad),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn too_many_modes_rejected() {
        let m = primitives::icosphere(1.0, 0).unwrap();
        let l = cotangent_laplacian(&m).unwrap();
        assert!(spectral_basis(&l, 13).is_err());
    }
}
