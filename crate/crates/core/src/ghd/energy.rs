use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::mesh::{SparseSymmetricMatrix, TriangleMesh, Vec3};

/// Rigidity (`e_r`) and Laplacian smoothness (`e_l`) morphing energies,
/// both normalized by vertex count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorphEnergies {
    pub e_r: f64,
    pub e_l: f64,
}

/// Energies measured relative to a fixed canonical mesh. Precomputes edge
/// weights, rest edges and rest Laplacian coordinates.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    rest: Vec<Vec3>,
    /// Per-vertex `(neighbour, weight)`; weights are cotangent weights
    /// clamped at zero so that the rigidity energy stays nonnegative.
    rings: Vec<Vec<(usize, f64)>>,
    laplacian: SparseSymmetricMatrix,
    rest_delta: Vec<Vec3>,
}

impl EnergyModel {
    pub fn new(canonical: &TriangleMesh, laplacian: &SparseSymmetricMatrix) -> Result<Self> {
        let n = canonical.vertex_count();
        if laplacian.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "Laplacian of dimension {} for a {n}-vertex mesh",
                laplacian.dim()
            )));
        }
        let rings = (0..n)
            .map(|i| laplacian.neighbors(i).map(|(j, w)| (j, (-w).max(0.0))).collect())
            .collect();
        let rest = canonical.vertices().to_vec();
        let rest_delta = apply(laplacian, &rest);
        Ok(EnergyModel {
            rest,
            rings,
            laplacian: laplacian.clone(),
            rest_delta,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.rest.len()
    }

    pub fn energies(&self, morphed: &[Vec3]) -> Result<MorphEnergies> {
        self.evaluate(morphed, false).map(|(e, _, _)| e)
    }

    /// Energies plus `(∂e_r/∂V′, ∂e_l/∂V′)`. The rigidity gradient holds the
    /// optimal per-vertex rotations fixed, which is exact at the optimum.
    pub fn energies_with_grad(&self, morphed: &[Vec3]) -> Result<(MorphEnergies, Vec<Vec3>, Vec<Vec3>)> {
        self.evaluate(morphed, true)
    }

    fn evaluate(&self, v: &[Vec3], want_grad: bool) -> Result<(MorphEnergies, Vec<Vec3>, Vec<Vec3>)> {
        let n = self.rest.len();
        if v.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} morphed vertices for a {n}-vertex canonical mesh",
                v.len()
            )));
        }
        let nf = n as f64;
        let mut e_r = 0.0;
        let mut g_r = if want_grad { vec![Vec3::zeros(); n] } else { Vec::new() };
        for i in 0..n {
            let r = self.rotation(i, v);
            for &(j, w) in &self.rings[i] {
                let res = (v[i] - v[j]) - r * (self.rest[i] - self.rest[j]);
                e_r += w * res.norm_squared();
                if want_grad {
                    let g = res * (2.0 * w / nf);
                    g_r[i] += g;
                    g_r[j] -= g;
                }
            }
        }
        let diff: Vec<Vec3> = apply(&self.laplacian, v)
            .into_iter()
            .zip(&self.rest_delta)
            .map(|(a, b)| a - b)
            .collect();
        let e_l = diff.iter().map(|d| d.norm_squared()).sum::<f64>() / nf;
        let g_l = if want_grad {
            apply(&self.laplacian, &diff).into_iter().map(|g| g * (2.0 / nf)).collect()
        } else {
            Vec::new()
        };
        let e = MorphEnergies { e_r: e_r / nf, e_l };
        if !e.e_r.is_finite() || !e.e_l.is_finite() {
            return Err(Error::NonFinite("morphing energy".into()));
        }
        Ok((e, g_r, g_l))
    }

    /// Orthogonal Procrustes rotation taking rest edges of vertex `i` onto
    /// morphed edges.
    fn rotation(&self, i: usize, v: &[Vec3]) -> Matrix3<f64> {
        let mut s = Matrix3::zeros();
        for &(j, w) in &self.rings[i] {
            s += (self.rest[i] - self.rest[j]) * (v[i] - v[j]).transpose() * w;
        }
        let svd = s.svd(true, true);
        let (mut u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = v_t.transpose() * u.transpose();
        if r.determinant() < 0.0 {
            let k = svd.singular_values.imin();
            u.column_mut(k).neg_mut();
            r = v_t.transpose() * u.transpose();
        }
        r
    }
}

fn apply(l: &SparseSymmetricMatrix, v: &[Vec3]) -> Vec<Vec3> {
    (0..v.len())
        .map(|i| l.row(i).fold(Vec3::zeros(), |acc, (j, w)| acc + v[j] * w))
        .collect()
}

pub fn morph_energies(
    canonical: &TriangleMesh,
    morphed: &[Vec3],
    laplacian: &SparseSymmetricMatrix,
) -> Result<MorphEnergies> {
    EnergyModel::new(canonical, laplacian)?.energies(morphed)
}
