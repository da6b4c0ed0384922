use super::{SparseSymmetricMatrix, TriangleMesh, Vec3};
use crate::error::{Error, Result};

/// Faces with area below this fraction of the mean face area are rejected.
const DEGENERATE_AREA_FRACTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceMeasure {
    pub area: f64,
    pub normal: Vec3,
}

fn face_cross(mesh: &TriangleMesh, f: &[usize; 3]) -> Vec3 {
    let v = mesh.vertices();
    (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]]))
}

fn check_degenerate(mesh: &TriangleMesh) -> Result<Vec<Vec3>> {
    let crosses: Vec<Vec3> = mesh.faces().iter().map(|f| face_cross(mesh, f)).collect();
    let mean = crosses.iter().map(|c| 0.5 * c.norm()).sum::<f64>() / crosses.len().max(1) as f64;
    for (i, c) in crosses.iter().enumerate() {
        let area = 0.5 * c.norm();
        if !area.is_finite() || area <= DEGENERATE_AREA_FRACTION * mean || area == 0.0 {
            return Err(Error::DegenerateFace { face: i, area });
        }
    }
    Ok(crosses)
}

/// Cotangent Laplacian: off-diagonal `(i, j)` is `−(cot α + cot β)/2` over the
/// angles opposite edge `ij`; the diagonal makes every row sum to zero.
/// Obtuse angles give negative cotangents and are kept.
pub fn cotangent_laplacian(mesh: &TriangleMesh) -> Result<SparseSymmetricMatrix> {
    check_degenerate(mesh)?;
    let v = mesh.vertices();
    let mut trip = Vec::with_capacity(mesh.face_count() * 12);
    for f in mesh.faces() {
        for k in 0..3 {
            let (i, j, o) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
            let a = v[i] - v[o];
            let b = v[j] - v[o];
            let half_cot = 0.5 * a.dot(&b) / a.cross(&b).norm();
            trip.push((i, j, -half_cot));
            trip.push((j, i, -half_cot));
            trip.push((i, i, half_cot));
            trip.push((j, j, half_cot));
        }
    }
    Ok(SparseSymmetricMatrix::from_triplets(mesh.vertex_count(), trip))
}

pub fn surface_measures(mesh: &TriangleMesh) -> Result<Vec<FaceMeasure>> {
    Ok(check_degenerate(mesh)?
        .into_iter()
        .map(|c| {
            let n = c.norm();
            FaceMeasure {
                area: 0.5 * n,
                normal: c / n,
            }
        })
        .collect())
}

/// Enclosed volume by the divergence theorem, `|Σ v₀·(v₁×v₂)| / 6`.
///
/// An open mesh with exactly one boundary ring is closed by a fan of
/// triangles to `apex`.
pub fn closed_volume(mesh: &TriangleMesh, apex: Option<Vec3>) -> Result<f64> {
    let v = mesh.vertices();
    let mut six_vol: f64 = mesh
        .faces()
        .iter()
        .map(|f| v[f[0]].dot(&v[f[1]].cross(&v[f[2]])))
        .sum();
    match (mesh.boundary_rings(), apex) {
        ([], _) => {}
        ([ring], Some(apex)) => {
            // ring follows face edge direction; the closing fan runs against it
            for k in 0..ring.len() {
                let a = v[ring[k]];
                let b = v[ring[(k + 1) % ring.len()]];
                six_vol += b.dot(&a.cross(&apex));
            }
        }
        ([_], None) => {
            return Err(Error::InvalidArgument(
                "open mesh needs a fan apex to close its boundary".into(),
            ))
        }
        (rings, _) => {
            return Err(Error::InvalidArgument(format!(
                "cannot close {} boundary rings with a single fan",
                rings.len()
            )))
        }
    }
    Ok(six_vol.abs() / 6.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;
    use std::f64::consts::PI;

    fn unit_square() -> TriangleMesh {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        TriangleMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()
    }

    #[test]
    fn unit_square_cotangent_weights() {
        // both angles opposite the diagonal are right angles (cot 90° = 0);
        // each boundary edge sees one 45° angle
        let l = cotangent_laplacian(&unit_square()).unwrap();
        assert!(l.get(0, 2).abs() < 1e-15);
        for (i, j) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
            assert!((l.get(i, j) + 0.5).abs() < 1e-15, "edge {i}-{j}");
        }
        for i in 0..4 {
            assert!((l.get(i, i) - 1.0).abs() < 1e-15);
        }
        assert_eq!(l.get(1, 3), 0.0);
    }

    #[test]
    fn regular_tetrahedron_weights_equal() {
        let s = 1.0 / 3f64.sqrt();
        let v = vec![
            Vec3::new(s, s, s),
            Vec3::new(s, -s, -s),
            Vec3::new(-s, s, -s),
            Vec3::new(-s, -s, s),
        ];
        let m = TriangleMesh::new(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]).unwrap();
        let l = cotangent_laplacian(&m).unwrap();
        let w = l.get(0, 1);
        for (i, j, x) in l.triplets() {
            if i != j {
                assert!((x - w).abs() < 1e-14);
            }
        }
        assert!((w + 1.0 / 3f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn rows_sum_to_zero_and_symmetric() {
        let m = primitives::icosphere(1.3, 2).unwrap();
        let l = cotangent_laplacian(&m).unwrap();
        for i in 0..l.dim() {
            assert!(l.row_sum(i).abs() < 1e-9);
        }
        assert!(l.asymmetry() < 1e-12);
    }

    #[test]
    fn degenerate_face_rejected() {
        let v = vec![
            Vec3::zeros(),
            Vec3::x(),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::y(),
        ];
        let m = TriangleMesh::new(v, vec![[0, 1, 2], [0, 3, 1]]).unwrap();
        assert!(matches!(
            cotangent_laplacian(&m),
            Err(Error::DegenerateFace { face: 0, .. })
        ));
    }

    #[test]
    fn right_triangle_area_and_flip() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let m = TriangleMesh::new(v.clone(), vec![[0, 1, 2]]).unwrap();
        let a = surface_measures(&m).unwrap()[0];
        assert_eq!(a.area, 0.5);
        assert_eq!(a.normal, Vec3::z());
        let f = TriangleMesh::new(v, vec![[0, 2, 1]]).unwrap();
        assert_eq!(surface_measures(&f).unwrap()[0].normal, -Vec3::z());
    }

    #[test]
    fn icosphere4_area_and_volume() {
        let m = primitives::icosphere(1.0, 4).unwrap();
        let area: f64 = surface_measures(&m).unwrap().iter().map(|f| f.area).sum();
        assert!((area - 4.0 * PI).abs() / (4.0 * PI) < 5e-3, "area {area}");
        for f in surface_measures(&m).unwrap() {
            assert!((f.normal.norm() - 1.0).abs() < 1e-12);
        }
        let vol = closed_volume(&m, None).unwrap();
        assert!((vol - 4.0 * PI / 3.0).abs() / (4.0 * PI / 3.0) < 5e-3, "vol {vol}");
    }

    #[test]
    fn unit_cube_volume() {
        let m = primitives::unit_cube();
        assert!((closed_volume(&m, None).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hemisphere_fan_closure() {
        let m = primitives::hemisphere(1.0, 48, 96).unwrap();
        let vol = closed_volume(&m, Some(Vec3::zeros())).unwrap();
        assert!((vol - 2.0 * PI / 3.0).abs() / (2.0 * PI / 3.0) < 1e-2, "vol {vol}");
        // fan apex anywhere in the equator plane gives the same volume
        let v2 = closed_volume(&m, Some(Vec3::new(0.3, -0.2, 0.0))).unwrap();
        assert!((vol - v2).abs() < 1e-12);
    }

    #[test]
    fn two_rings_without_closure_rejected() {
        let m = primitives::cylinder(1.0, 1.0, 8, 2).unwrap();
        assert!(closed_volume(&m, Some(Vec3::zeros())).is_err());
    }
}
