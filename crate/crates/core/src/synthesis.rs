//! Vessel tubes swept along centerlines and welded onto the open rings of a
//! generated aneurysm complex.

use std::collections::HashSet;

use log::warn;
use nalgebra::{Matrix3, SymmetricEigen};

use crate::centerline::{rmf_frames_with_tangents, CenterlineBranch};
use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::mesh::{point_centroid, RegionLabel, TriangleMesh, Vec3};

/// An open ring of the complex where a vessel attaches.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    pub k: usize,
    /// Boundary loop in face-edge order.
    pub ring: Vec<usize>,
    pub center: Vec3,
    /// Unit plane normal pointing out of the complex.
    pub tangent: Vec3,
}

impl CrossSection {
    pub fn radius(&self, v: &[Vec3]) -> f64 {
        self.ring.iter().map(|&i| (v[i] - self.center).norm()).sum::<f64>() / self.ring.len() as f64
    }

    pub fn mean_edge(&self, v: &[Vec3]) -> f64 {
        let n = self.ring.len();
        (0..n).map(|i| (v[self.ring[i]] - v[self.ring[(i + 1) % n]]).norm()).sum::<f64>() / n as f64
    }
}

/// Labels every boundary ring `cross_section(k)` in ring order.
pub fn label_rings(mesh: &TriangleMesh) -> Result<TriangleMesh> {
    let mut labels = mesh.labels().to_vec();
    for (k, ring) in mesh.boundary_rings().iter().enumerate() {
        for &i in ring {
            labels[i] = RegionLabel::CrossSection(k);
        }
    }
    let mut out = mesh.clone();
    out.relabel(labels)?;
    Ok(out)
}

/// Largest out-of-plane excursion of a ring vertex, relative to the mean
/// ring radius, for the ring to count as a cross-section.
pub const MAX_WARP: f64 = 0.35;

pub fn extract_cross_sections(complex: &TriangleMesh) -> Result<Vec<CrossSection>> {
    let v = complex.vertices();
    let mesh_c = complex.centroid();
    complex
        .boundary_rings()
        .iter()
        .map(|ring| {
            let k = match complex.labels()[ring[0]] {
                RegionLabel::CrossSection(k) => k,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "boundary ring at vertex {} is labeled {other}, not a cross-section",
                        ring[0]
                    )))
                }
            };
            if ring.iter().any(|&i| complex.labels()[i] != RegionLabel::CrossSection(k)) {
                return Err(Error::InvalidArgument(format!("cross-section {k} has mixed labels")));
            }
            let pts: Vec<Vec3> = ring.iter().map(|&i| v[i]).collect();
            let center = point_centroid(&pts);
            let mut cov = Matrix3::zeros();
            for p in &pts {
                cov += (p - center) * (p - center).transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut t: Vec3 = eig.eigenvectors.column(eig.eigenvalues.imin()).into();
            if t.dot(&(center - mesh_c)) < 0.0 {
                t = -t;
            }
            let radius = pts.iter().map(|p| (p - center).norm()).sum::<f64>() / pts.len() as f64;
            let off_plane = pts.iter().map(|p| t.dot(&(p - center)).abs()).fold(0.0, f64::max);
            if off_plane > MAX_WARP * radius {
                return Err(Error::Degenerate(format!(
                    "cross-section {k} is not planar ({off_plane:.3e} off a plane, radius {radius:.3e})"
                )));
            }
            Ok(CrossSection {
                k,
                ring: ring.clone(),
                center,
                tangent: t,
            })
        })
        .collect()
}

/// A swept vessel: `stations × ring size` points, station 0 being the
/// source ring itself.
#[derive(Debug, Clone)]
pub struct TubeMesh {
    pub k: usize,
    pub ring: Vec<usize>,
    pub stations: usize,
    pub points: Vec<Vec3>,
    /// Triangles over local indices `station · ring size + j`.
    pub faces: Vec<[usize; 3]>,
}

impl TubeMesh {
    pub fn ring_size(&self) -> usize {
        self.ring.len()
    }

    pub fn station(&self, s: usize) -> &[Vec3] {
        let k = self.ring_size();
        &self.points[s * k..(s + 1) * k]
    }
}

const WARN_ANGLE: f64 = 30.0;
const FAIL_ANGLE: f64 = 60.0;

/// Sweeps the section's ring along `branch`, which must start at the
/// section center. The ring shape is carried rigidly by rotation-minimizing
/// frames started from the ring plane.
pub fn sweep_tube(section: &CrossSection, vertices: &[Vec3], branch: &CenterlineBranch, spacing: f64) -> Result<TubeMesh> {
    if !(spacing > 0.0) {
        return Err(Error::InvalidArgument(format!("ring spacing {spacing}")));
    }
    if (branch.origin - section.center).norm() > 1e-3 * branch.length {
        return Err(Error::InvalidArgument(format!(
            "branch {} starts {:.3e} away from its cross-section center",
            branch.k,
            (branch.origin - section.center).norm()
        )));
    }
    let t0 = branch.tangent(0.0)?;
    let angle = t0.dot(&section.tangent).clamp(-1.0, 1.0).acos().to_degrees();
    if angle > FAIL_ANGLE {
        return Err(Error::Degenerate(format!(
            "branch {} leaves its cross-section at {angle:.1}° (limit {FAIL_ANGLE}°)",
            branch.k
        )));
    }
    if angle > WARN_ANGLE {
        warn!("branch {} leaves its cross-section at {angle:.1}°", branch.k);
    }

    let stations = (branch.length / spacing).ceil() as usize + 1;
    let stations = stations.max(2);
    let xs: Vec<f64> = (0..stations).map(|s| branch.length * s as f64 / (stations - 1) as f64).collect();
    let mut centers = vec![section.center];
    let mut tangents = vec![section.tangent];
    for &x in &xs[1..] {
        centers.push(branch.point(x)?);
        tangents.push(branch.tangent(x)?);
    }

    let t = section.tangent;
    let first = vertices[section.ring[0]] - section.center;
    let n0 = first - t * t.dot(&first);
    if n0.norm() < 1e-12 {
        return Err(Error::Degenerate("ring vertex on the section axis".into()));
    }
    let n0 = n0.normalize();
    let b0 = t.cross(&n0);
    let offsets: Vec<(f64, f64)> = section
        .ring
        .iter()
        .map(|&i| {
            let d = vertices[i] - section.center;
            (d.dot(&n0), d.dot(&b0))
        })
        .collect();

    let frames = rmf_frames_with_tangents(&centers, &tangents, &n0)?;
    if let Some(s) = frames.windows(2).position(|w| w[0].normal.dot(&w[1].normal) < 0.0) {
        return Err(Error::Degenerate(format!("frame flip between stations {s} and {}", s + 1)));
    }

    let k = section.ring.len();
    let mut points: Vec<Vec3> = section.ring.iter().map(|&i| vertices[i]).collect();
    for (c, f) in centers.iter().zip(&frames).skip(1) {
        points.extend(offsets.iter().map(|&(a, b)| c + f.normal * a + f.binormal * b));
    }

    let idx = |s: usize, j: usize| s * k + j % k;
    let mut faces = Vec::with_capacity(2 * k * (stations - 1));
    for s in 0..stations - 1 {
        for j in 0..k {
            // the ring runs a→b along complex faces, so the tube uses b→a
            let (a, b, c, d) = (idx(s, j), idx(s, j + 1), idx(s + 1, j + 1), idx(s + 1, j));
            if (points[b] - points[d]).norm_squared() <= (points[a] - points[c]).norm_squared() {
                faces.push([b, a, d]);
                faces.push([b, d, c]);
            } else {
                faces.push([b, a, c]);
                faces.push([a, d, c]);
            }
        }
    }
    Ok(TubeMesh {
        k: section.k,
        ring: section.ring.clone(),
        stations,
        points,
        faces,
    })
}

/// Welds tubes onto the complex by index. Complex vertices come first and
/// unchanged; former attachment rings become vessel wall and each tube's
/// far ring is labeled with its cross-section index.
pub fn assemble(complex: &TriangleMesh, tubes: &[TubeMesh]) -> Result<TriangleMesh> {
    let mut vertices = complex.vertices().to_vec();
    let mut labels = complex.labels().to_vec();
    let mut faces = complex.faces().to_vec();
    let complex_edges: HashSet<(usize, usize)> =
        faces.iter().flat_map(|f| (0..3).map(move |i| (f[i], f[(i + 1) % 3]))).collect();
    let rings: HashSet<Vec<usize>> = complex.boundary_rings().iter().cloned().collect();

    let extent = {
        let (lo, hi) = vertices.iter().fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        (hi - lo).norm()
    };
    let tree = KdTree::new(&vertices);

    for tube in tubes {
        if !rings.contains(&tube.ring) {
            return Err(Error::InvalidArgument(format!(
                "tube {} does not start on a boundary ring of the complex",
                tube.k
            )));
        }
        for &i in &tube.ring {
            labels[i] = RegionLabel::VesselWall;
        }
        let k = tube.ring_size();
        let base = vertices.len();
        let map = |local: usize| if local < k { tube.ring[local] } else { base + local - k };
        for p in &tube.points[k..] {
            if tree.nearest(p).1.sqrt() < 1e-9 * extent {
                return Err(Error::Degenerate(format!("tube {} duplicates a complex vertex", tube.k)));
            }
        }
        vertices.extend_from_slice(&tube.points[k..]);
        let last = tube.stations - 1;
        for s in 1..tube.stations {
            let label = if s == last {
                RegionLabel::CrossSection(tube.k)
            } else {
                RegionLabel::VesselWall
            };
            labels.extend(std::iter::repeat_n(label, k));
        }
        let mut tf: Vec<[usize; 3]> = tube.faces.iter().map(|f| [map(f[0]), map(f[1]), map(f[2])]).collect();
        let clash = tf.iter().any(|f| (0..3).any(|i| complex_edges.contains(&(f[i], f[(i + 1) % 3]))));
        if clash {
            for f in &mut tf {
                f.swap(1, 2);
            }
        }
        faces.extend(tf);
    }
    TriangleMesh::with_labels(vertices, faces, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;

    fn open_cylinder() -> TriangleMesh {
        label_rings(&primitives::cylinder(1.0, 2.0, 24, 6).unwrap()).unwrap()
    }

    #[test]
    fn cylinder_sections_point_along_the_axis() {
        let m = open_cylinder();
        let cs = extract_cross_sections(&m).unwrap();
        assert_eq!(cs.len(), 2);
        assert!((cs[0].tangent + cs[1].tangent).norm() < 1e-6);
        assert!((cs[0].tangent.z.abs() - 1.0).abs() < 1e-6);
        let t = Vec3::new(1.0, 2.0, 3.0);
        let moved = extract_cross_sections(&m.translated(&t)).unwrap();
        for (a, b) in cs.iter().zip(&moved) {
            assert!((b.center - a.center - t).norm() < 1e-12);
            assert!((b.tangent - a.tangent).norm() < 1e-12);
        }
        assert!(extract_cross_sections(&primitives::cylinder(1.0, 2.0, 8, 3).unwrap()).is_err());
    }

    /// Area-weighted outward in-surface directions across ring edges.
    fn edge_outward(m: &TriangleMesh, cs: &CrossSection) -> Vec3 {
        let v = m.vertices();
        let n = cs.ring.len();
        let mut acc = Vec3::zeros();
        for i in 0..n {
            let (a, b) = (cs.ring[i], cs.ring[(i + 1) % n]);
            let f = m.faces().iter().find(|f| (0..3).any(|j| f[j] == a && f[(j + 1) % 3] == b)).unwrap();
            let nf = (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]]));
            acc += (v[b] - v[a]).cross(&nf.normalize()) * (0.5 * nf.norm());
        }
        acc.normalize()
    }

    #[test]
    fn tangent_agrees_with_adjacent_faces() {
        let m = open_cylinder();
        for cs in extract_cross_sections(&m).unwrap() {
            let d = edge_outward(&m, &cs);
            assert!(d.dot(&cs.tangent).acos().to_degrees() < 5.0);
        }
    }

    #[test]
    fn straight_sweep_is_a_right_cylinder() {
        let m = open_cylinder();
        let cs = &extract_cross_sections(&m).unwrap()[1];
        let b = CenterlineBranch::straight(cs.k, 3.0, cs.tangent, cs.center, 4).unwrap();
        let tube = sweep_tube(cs, m.vertices(), &b, cs.mean_edge(m.vertices())).unwrap();
        for s in 0..tube.stations {
            let c = cs.center + cs.tangent * (3.0 * s as f64 / (tube.stations - 1) as f64);
            assert!(tube.station(s).iter().all(|p| ((p - c).norm() - 1.0).abs() < 1e-9));
        }
        let end = tube.station(tube.stations - 1);
        assert!((point_centroid(end) - cs.center - cs.tangent * 3.0).norm() < 1e-9);
    }

    #[test]
    fn curved_sweep_keeps_planar_rings_with_little_twist() {
        let m = open_cylinder();
        let cs = &extract_cross_sections(&m).unwrap()[1];
        let mut b = CenterlineBranch::straight(cs.k, 10.0, cs.tangent, cs.center, 3).unwrap();
        b.phi_y = vec![0.8, 0.0, 0.1];
        b.phi_z = vec![0.0, 0.4, 0.0];
        // tilt stays under the warning threshold
        assert!(b.tangent(0.0).unwrap().dot(&cs.tangent).acos().to_degrees() < 30.0);
        let tube = sweep_tube(cs, m.vertices(), &b, 0.2).unwrap();
        for s in 1..tube.stations {
            let ring = tube.station(s);
            let c = point_centroid(ring);
            let x = s as f64 * b.length / (tube.stations - 1) as f64;
            let t = b.tangent(x).unwrap();
            assert!(ring.iter().all(|p| t.dot(&(p - c)).abs() < 1e-6));
        }
        // twist: first ring offset carried by the minimal rotation between
        // consecutive tangents, compared with the next station's offset
        for s in 1..tube.stations - 1 {
            let x = |s: usize| s as f64 * b.length / (tube.stations - 1) as f64;
            let (t0, t1) = (b.tangent(x(s)).unwrap(), b.tangent(x(s + 1)).unwrap());
            let u0 = tube.station(s)[0] - point_centroid(tube.station(s));
            let u1 = tube.station(s + 1)[0] - point_centroid(tube.station(s + 1));
            let k = t0.cross(&t1);
            let kx = k.cross_matrix();
            let r = Matrix3::identity() + kx + kx * kx / (1.0 + t0.dot(&t1));
            let carried = (r * u0).normalize();
            assert!(carried.dot(&u1.normalize()).clamp(-1.0, 1.0).acos().to_degrees() < 2.0);
        }
    }

    #[test]
    fn rejects_branches_leaving_at_steep_angles() {
        let m = open_cylinder();
        let cs = &extract_cross_sections(&m).unwrap()[1];
        let side = cs.tangent.cross(&Vec3::x()).normalize();
        let b = CenterlineBranch::straight(cs.k, 3.0, side, cs.center, 2).unwrap();
        assert!(sweep_tube(cs, m.vertices(), &b, 0.3).is_err());
    }

    #[test]
    fn assembly_welds_by_index() {
        let m = open_cylinder();
        let cs = extract_cross_sections(&m).unwrap();
        let tubes: Vec<TubeMesh> = cs
            .iter()
            .map(|c| {
                let b = CenterlineBranch::straight(c.k, 2.0, c.tangent, c.center, 2).unwrap();
                sweep_tube(c, m.vertices(), &b, 0.25).unwrap()
            })
            .collect();
        let out = assemble(&m, &tubes).unwrap();
        let expect = m.vertex_count() + tubes.iter().map(|t| t.points.len() - t.ring_size()).sum::<usize>();
        assert_eq!(out.vertex_count(), expect);
        assert_eq!(out.boundary_rings().len(), 2);
        assert_eq!(&out.vertices()[..m.vertex_count()], m.vertices());
        for (k, ring) in out.boundary_rings().iter().enumerate() {
            assert!(ring.iter().all(|&i| out.labels()[i] == RegionLabel::CrossSection(k)));
            assert!(ring.iter().all(|&i| i >= m.vertex_count()));
        }
        let referenced: HashSet<usize> = out.faces().iter().flatten().copied().collect();
        assert_eq!(referenced.len(), out.vertex_count());
    }

    #[test]
    fn reversed_tubes_are_flipped_once() {
        let m = open_cylinder();
        let cs = extract_cross_sections(&m).unwrap();
        let b = CenterlineBranch::straight(cs[0].k, 2.0, cs[0].tangent, cs[0].center, 2).unwrap();
        let mut tube = sweep_tube(&cs[0], m.vertices(), &b, 0.5).unwrap();
        for f in &mut tube.faces {
            f.swap(0, 1);
        }
        assert!(assemble(&m, &[tube]).is_ok());
    }
}
