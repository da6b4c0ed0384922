//! Node-wise PCA shape model over registered vertex sets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mesh::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// Stacked `x₀ y₀ z₀ x₁ …` mean shape.
    pub mean: DVector<f64>,
    /// `3N × c`, orthonormal columns by decreasing variance.
    pub components: DMatrix<f64>,
    /// Sample (unbiased) variance along each component.
    pub variances: Vec<f64>,
}

fn stack(shape: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(shape.len() * 3, shape.iter().flat_map(|p| [p.x, p.y, p.z]))
}

fn unstack(x: &DVector<f64>) -> Vec<Vec3> {
    (0..x.len() / 3).map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])).collect()
}

impl PcaModel {
    pub fn fit(shapes: &[Vec<Vec3>], count: usize) -> Result<Self> {
        let k = shapes.len();
        if k < 2 {
            return Err(Error::InvalidArgument(format!("PCA needs at least 2 shapes, got {k}")));
        }
        if count == 0 || count > k - 1 {
            return Err(Error::InvalidArgument(format!("{count} components from {k} shapes (at most {})", k - 1)));
        }
        let n = shapes[0].len();
        if n == 0 || shapes.iter().any(|s| s.len() != n) {
            return Err(Error::DimensionMismatch("shapes are not registered to one vertex count".into()));
        }
        let rows: Vec<DVector<f64>> = shapes.iter().map(|s| stack(s)).collect();
        let mean = rows.iter().fold(DVector::zeros(3 * n), |a, r| a + r) / k as f64;
        let centered = DMatrix::from_fn(k, 3 * n, |r, c| rows[r][c] - mean[c]);
        let svd = centered.svd(false, true);
        let vt = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut components = DMatrix::zeros(3 * n, count);
        let mut variances = Vec::with_capacity(count);
        for (j, &i) in order.iter().take(count).enumerate() {
            let mut col: DVector<f64> = vt.row(i).transpose();
            // Deterministic sign: largest-magnitude entry positive.
            if col[col.iamax()] < 0.0 {
                col = -col;
            }
            components.set_column(j, &col);
            variances.push(svd.singular_values[i].powi(2) / (k - 1) as f64);
        }
        Ok(PcaModel {
            mean,
            components,
            variances,
        })
    }

    pub fn component_count(&self) -> usize {
        self.variances.len()
    }

    pub fn scores(&self, shape: &[Vec3]) -> Result<Vec<f64>> {
        if shape.len() * 3 != self.mean.len() {
            return Err(Error::DimensionMismatch(format!("{} vertices for a {}-vertex model", shape.len(), self.mean.len() / 3)));
        }
        let d = stack(shape) - &self.mean;
        Ok((self.components.transpose() * d).iter().copied().collect())
    }

    pub fn reconstruct(&self, scores: &[f64]) -> Result<Vec<Vec3>> {
        if scores.len() != self.component_count() {
            return Err(Error::DimensionMismatch(format!("{} scores for {} components", scores.len(), self.component_count())));
        }
        Ok(unstack(&(&self.mean + &self.components * DVector::from_column_slice(scores))))
    }

    /// Shapes with independent normal scores of the component variances.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec<Vec3>> {
        (0..count)
            .map(|_| {
                let s: Vec<f64> = self.variances.iter().map(|v| v.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
                self.reconstruct(&s).expect("matching score count")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_shapes(k: usize, n: usize, seed: u64) -> Vec<Vec<Vec3>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect())
            .collect()
    }

    #[test]
    fn one_component_on_two_shapes_samples_the_line() {
        let shapes = random_shapes(2, 5, 1);
        let pca = PcaModel::fit(&shapes, 1).unwrap();
        let (a, b) = (stack(&shapes[0]), stack(&shapes[1]));
        let dir = (&b - &a).normalize();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in pca.sample(20, &mut rng) {
            let d = stack(&s) - &a;
            let off = &d - &dir * dir.dot(&d);
            assert!(off.norm() < 1e-9);
        }
        assert!(PcaModel::fit(&shapes, 2).is_err());
    }

    #[test]
    fn full_rank_reconstruction_is_exact() {
        let shapes = random_shapes(6, 7, 3);
        let pca = PcaModel::fit(&shapes, 5).unwrap();
        for s in &shapes {
            let back = pca.reconstruct(&pca.scores(s).unwrap()).unwrap();
            for (p, q) in back.iter().zip(s) {
                assert!((p - q).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn variances_match_covariance_eigenvalues() {
        let shapes = random_shapes(10, 4, 5);
        let pca = PcaModel::fit(&shapes, 9).unwrap();
        let rows: Vec<DVector<f64>> = shapes.iter().map(|s| stack(s)).collect();
        let mean = rows.iter().fold(DVector::zeros(12), |a, r| a + r) / 10.0;
        let mut cov = DMatrix::zeros(12, 12);
        for r in &rows {
            let d = r - &mean;
            cov += &d * d.transpose();
        }
        cov /= 9.0;
        let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (v, e) in pca.variances.iter().zip(&eig) {
            assert!((v - e).abs() < 1e-10 * eig[0], "{v} vs {e}");
        }
        assert!(pca.variances.windows(2).all(|w| w[0] >= w[1]));
    }
}
