//! Simple reference surfaces: icosphere, open cylinder, hemisphere, cube.
//! All are outward-oriented.

use std::collections::HashMap;
use std::f64::consts::PI;

use super::{RegionLabel, TriangleMesh, Vec3};
use crate::error::{Error, Result};

/// Subdivided icosahedron projected to a sphere; level `L` has
/// `10·4^L + 2` vertices and `20·4^L` faces.
pub fn icosphere(radius: f64, level: u32) -> Result<TriangleMesh> {
    let (v, f) = icosphere_raw(level);
    TriangleMesh::new(v.into_iter().map(|p| p * radius).collect(), f)
}

pub(crate) fn icosphere_raw(level: u32) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Open cylinder along +z from `z = 0` to `z = length`, `rings` vertex
/// rings of `segments` vertices each.
pub fn cylinder(radius: f64, length: f64, segments: usize, rings: usize) -> Result<TriangleMesh> {
    if segments < 3 || rings < 2 {
        return Err(Error::InvalidArgument(format!(
            "cylinder needs ≥3 segments and ≥2 rings, got {segments}×{rings}"
        )));
    }
    let mut v = Vec::with_capacity(segments * rings);
    for i in 0..rings {
        let z = length * i as f64 / (rings - 1) as f64;
        for j in 0..segments {
            let a = 2.0 * PI * j as f64 / segments as f64;
            v.push(Vec3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    let idx = |i: usize, j: usize| i * segments + j % segments;
    let mut f = Vec::with_capacity(2 * segments * (rings - 1));
    for i in 0..rings - 1 {
        for j in 0..segments {
            let (a, b, c, d) = (idx(i, j), idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j));
            f.push([a, b, c]);
            f.push([a, c, d]);
        }
    }
    TriangleMesh::new(v, f)
}

/// Upper hemisphere centred at the origin, built from a pole and `rings`
/// latitude rings. The equator ring is labeled `neck_ring`, everything
/// above it `dome`.
pub fn hemisphere(radius: f64, rings: usize, segments: usize) -> Result<TriangleMesh> {
    if segments < 3 || rings < 1 {
        return Err(Error::InvalidArgument("hemisphere too coarse".into()));
    }
    let mut v = vec![Vec3::new(0.0, 0.0, radius)];
    let mut labels = vec![RegionLabel::Dome];
    for i in 1..=rings {
        let theta = 0.5 * PI * i as f64 / rings as f64;
        for j in 0..segments {
            let a = 2.0 * PI * j as f64 / segments as f64;
            // exact zero on the equator keeps the rim planar
            let z = if i == rings { 0.0 } else { radius * theta.cos() };
            v.push(Vec3::new(
                radius * theta.sin() * a.cos(),
                radius * theta.sin() * a.sin(),
                z,
            ));
            labels.push(if i == rings {
                RegionLabel::NeckRing
            } else {
                RegionLabel::Dome
            });
        }
    }
    let idx = |i: usize, j: usize| 1 + (i - 1) * segments + j % segments;
    let mut f = Vec::new();
    for j in 0..segments {
        f.push([0, idx(1, j), idx(1, j + 1)]);
    }
    for i in 1..rings {
        for j in 0..segments {
            let (u0, u1, l0, l1) = (idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1));
            f.push([u0, l0, l1]);
            f.push([u0, l1, u1]);
        }
    }
    TriangleMesh::with_labels(v, f, labels)
}

pub fn unit_cube() -> TriangleMesh {
    let v: Vec<Vec3> = (0..8)
        .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
        .collect();
    let f = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    TriangleMesh::new(v, f).expect("cube topology is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::surface_measures;

    #[test]
    fn icosphere_counts_follow_subdivision_formula() {
        for level in 0..4u32 {
            let m = icosphere(1.0, level).unwrap();
            assert_eq!(m.vertex_count(), 10 * 4usize.pow(level) + 2);
            assert_eq!(m.face_count(), 20 * 4usize.pow(level));
            assert!(m.is_closed());
        }
    }

    #[test]
    fn primitives_are_outward() {
        let cases: Vec<(TriangleMesh, fn(Vec3) -> Vec3)> = vec![
            (icosphere(1.0, 2).unwrap(), |c| c),
            (unit_cube(), |c| c - Vec3::repeat(0.5)),
            (cylinder(1.0, 2.0, 12, 4).unwrap(), |c| Vec3::new(c.x, c.y, 0.0)),
            (hemisphere(1.0, 6, 12).unwrap(), |c| c),
        ];
        for (m, outward) in cases {
            let v = m.vertices();
            for (f, fm) in m.faces().iter().zip(surface_measures(&m).unwrap()) {
                let fc = (v[f[0]] + v[f[1]] + v[f[2]]) / 3.0;
                assert!(fm.normal.dot(&outward(fc)) > 0.0);
            }
        }
    }

    #[test]
    fn cylinder_has_two_rings() {
        let m = cylinder(2.0, 5.0, 16, 6).unwrap();
        assert_eq!(m.boundary_rings().len(), 2);
        assert!(m.boundary_rings().iter().all(|r| r.len() == 16));
    }

    #[test]
    fn hemisphere_rim_is_the_neck() {
        let m = hemisphere(1.0, 8, 24).unwrap();
        assert_eq!(m.boundary_rings().len(), 1);
        let ring = &m.boundary_rings()[0];
        assert_eq!(ring.len(), 24);
        assert!(ring.iter().all(|&v| m.labels()[v] == RegionLabel::NeckRing));
    }
}
