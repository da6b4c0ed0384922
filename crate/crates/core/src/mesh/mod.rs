//! Indexed triangle meshes with per-vertex region labels.
//!
//! A [`TriangleMesh`] is validated on construction: indices in range,
//! manifold edges, consistent orientation, and boundary loops that are
//! simple cycles. Boundary loops are extracted once and cached as
//! `boundary_rings`, ordered so that a ring whose vertices carry the label
//! `cross_section(k)` comes k-th.

mod io;
mod ops;
pub mod primitives;
mod sparse;
pub mod spectral;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub use io::{
    label_sidecar_path, load_mesh, read_labels, read_obj, read_ply, save_mesh, write_labels,
    write_obj, write_ply, MeshFormat, PlyEncoding,
};
pub use ops::{closed_volume, cotangent_laplacian, surface_measures, FaceMeasure};
pub use sparse::SparseSymmetricMatrix;
pub use spectral::{spectral_basis, EigenSolver, SpectralBasis};

pub type Vec3 = Vector3<f64>;

/// Region tag carried by each vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionLabel {
    Dome,
    NeckRing,
    VesselWall,
    CrossSection(usize),
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionLabel::Dome => f.write_str("dome"),
            RegionLabel::NeckRing => f.write_str("neck_ring"),
            RegionLabel::VesselWall => f.write_str("vessel_wall"),
            RegionLabel::CrossSection(k) => write!(f, "cross_section({k})"),
        }
    }
}

impl FromStr for RegionLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "dome" => Ok(RegionLabel::Dome),
            "neck_ring" => Ok(RegionLabel::NeckRing),
            "vessel_wall" => Ok(RegionLabel::VesselWall),
            other => other
                .strip_prefix("cross_section(")
                .and_then(|rest| rest.strip_suffix(')'))
                .and_then(|k| k.parse().ok())
                .map(RegionLabel::CrossSection)
                .ok_or_else(|| format!("unknown region label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    labels: Vec<RegionLabel>,
    boundary_rings: Vec<Vec<usize>>,
}

impl TriangleMesh {
    /// Builds a mesh with every vertex labeled `vessel_wall`.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let labels = vec![RegionLabel::VesselWall; vertices.len()];
        Self::with_labels(vertices, faces, labels)
    }

    pub fn with_labels(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        labels: Vec<RegionLabel>,
    ) -> Result<Self> {
        if labels.len() != vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} vertices",
                labels.len(),
                vertices.len()
            )));
        }
        let loops = boundary_loops(vertices.len(), &faces)?;
        let boundary_rings = order_rings(loops, &labels);
        Ok(TriangleMesh {
            vertices,
            faces,
            labels,
            boundary_rings,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn labels(&self) -> &[RegionLabel] {
        &self.labels
    }

    pub fn boundary_rings(&self) -> &[Vec<usize>] {
        &self.boundary_rings
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn is_closed(&self) -> bool {
        self.boundary_rings.is_empty()
    }

    /// Same connectivity and labels, new positions. Registration is preserved.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} positions for a mesh with {} vertices",
                vertices.len(),
                self.vertices.len()
            )));
        }
        Ok(TriangleMesh {
            vertices,
            faces: self.faces.clone(),
            labels: self.labels.clone(),
            boundary_rings: self.boundary_rings.clone(),
        })
    }

    /// Replaces labels and re-derives ring ordering.
    pub fn relabel(&mut self, labels: Vec<RegionLabel>) -> Result<()> {
        if labels.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} vertices",
                labels.len(),
                self.vertices.len()
            )));
        }
        self.labels = labels;
        let rings = std::mem::take(&mut self.boundary_rings);
        self.boundary_rings = order_rings(rings, &self.labels);
        Ok(())
    }

    /// Reverses the winding of every face.
    pub fn flipped(&self) -> Self {
        let faces = self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect();
        let rings = self
            .boundary_rings
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.reverse();
                rotate_to_min(&mut r);
                r
            })
            .collect();
        TriangleMesh {
            vertices: self.vertices.clone(),
            faces,
            labels: self.labels.clone(),
            boundary_rings: rings,
        }
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        let mut out = self.clone();
        out.vertices.iter_mut().for_each(|v| *v += t);
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.vertices.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn centroid(&self) -> Vec3 {
        point_centroid(&self.vertices)
    }

    /// Vertices carrying `label`, in index order.
    pub fn vertices_labeled(&self, label: RegionLabel) -> Vec<usize> {
        (0..self.vertices.len())
            .filter(|&i| self.labels[i] == label)
            .collect()
    }

    /// The boundary ring whose vertices are labeled `cross_section(k)`.
    pub fn section_ring(&self, k: usize) -> Option<&[usize]> {
        self.boundary_rings
            .iter()
            .find(|r| ring_section(r, &self.labels) == Some(k))
            .map(|r| r.as_slice())
    }
}

pub fn point_centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().sum::<Vec3>() / points.len() as f64
}

fn ring_section(ring: &[usize], labels: &[RegionLabel]) -> Option<usize> {
    let first = match labels[ring[0]] {
        RegionLabel::CrossSection(k) => k,
        _ => return None,
    };
    ring.iter()
        .all(|&v| labels[v] == RegionLabel::CrossSection(first))
        .then_some(first)
}

fn order_rings(mut rings: Vec<Vec<usize>>, labels: &[RegionLabel]) -> Vec<Vec<usize>> {
    rings.sort_by_key(|r| {
        let min = *r.iter().min().unwrap_or(&0);
        match ring_section(r, labels) {
            Some(k) => (0, k, min),
            None => (1, 0, min),
        }
    });
    rings
}

fn rotate_to_min(ring: &mut [usize]) {
    if let Some(pos) = ring
        .iter()
        .enumerate()
        .min_by_key(|(_, &v)| v)
        .map(|(i, _)| i)
    {
        ring.rotate_left(pos);
    }
}

/// Validates face topology and returns the boundary loops. Each loop follows
/// the direction its edges have in their owning face and starts at its
/// smallest vertex index.
pub(crate) fn boundary_loops(vertex_count: usize, faces: &[[usize; 3]]) -> Result<Vec<Vec<usize>>> {
    let mut undirected: HashMap<(usize, usize), u8> = HashMap::with_capacity(faces.len() * 2);
    let mut directed: HashMap<(usize, usize), usize> = HashMap::with_capacity(faces.len() * 3);
    for (fi, face) in faces.iter().enumerate() {
        for &idx in face {
            if idx >= vertex_count {
                return Err(Error::IndexOutOfRange {
                    face: fi,
                    index: idx,
                    count: vertex_count,
                });
            }
        }
        if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
            return Err(Error::DegenerateFace { face: fi, area: 0.0 });
        }
        for e in 0..3 {
            let (a, b) = (face[e], face[(e + 1) % 3]);
            let count = undirected.entry((a.min(b), a.max(b))).or_insert(0);
            *count += 1;
            if *count > 2 {
                return Err(Error::NonManifoldEdge(a.min(b), a.max(b)));
            }
            if directed.insert((a, b), fi).is_some() {
                return Err(Error::InconsistentOrientation(a, b));
            }
        }
    }

    let mut next: HashMap<usize, usize> = HashMap::new();
    let mut incoming: HashMap<usize, usize> = HashMap::new();
    for &(a, b) in directed.keys() {
        if directed.contains_key(&(b, a)) {
            continue;
        }
        if next.insert(a, b).is_some() {
            return Err(Error::NonSimpleBoundary(a));
        }
        if incoming.insert(b, a).is_some() {
            return Err(Error::NonSimpleBoundary(b));
        }
    }

    let mut starts: Vec<usize> = next.keys().copied().collect();
    starts.sort_unstable();
    let mut visited = vec![false; vertex_count];
    let mut loops = Vec::new();
    for start in starts {
        if visited[start] {
            continue;
        }
        let mut ring = vec![start];
        visited[start] = true;
        let mut cur = start;
        loop {
            let nxt = *next.get(&cur).ok_or(Error::NonSimpleBoundary(cur))?;
            if nxt == start {
                break;
            }
            if visited[nxt] {
                return Err(Error::NonSimpleBoundary(nxt));
            }
            visited[nxt] = true;
            ring.push(nxt);
            cur = nxt;
        }
        loops.push(ring);
    }
    Ok(loops)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let f = vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]];
        (v, f)
    }

    #[test]
    fn tetrahedron_is_closed() {
        let (v, f) = tetra();
        let m = TriangleMesh::new(v, f).unwrap();
        assert!(m.is_closed());
        assert_eq!(m.face_count(), 4);
    }

    #[test]
    fn single_triangle_has_one_ring_of_three() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let m = TriangleMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert_eq!(m.boundary_rings(), &[vec![0, 1, 2]]);
    }

    #[test]
    fn flipped_face_is_rejected() {
        let (v, mut f) = tetra();
        f[1] = [0, 3, 1];
        assert!(matches!(
            TriangleMesh::new(v, f),
            Err(Error::InconsistentOrientation(..))
        ));
    }

    #[test]
    fn three_faces_on_one_edge_are_rejected() {
        let v = vec![
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
            Vec3::z(),
            Vec3::new(1.0, 1.0, 1.0),
        ];
        let f = vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]];
        let err = TriangleMesh::new(v, f).unwrap_err();
        assert!(matches!(
            err,
            Error::NonManifoldEdge(0, 1) | Error::InconsistentOrientation(..)
        ));
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(matches!(
            TriangleMesh::new(v, vec![[0, 1, 3]]),
            Err(Error::IndexOutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn bowtie_boundary_is_rejected() {
        // two triangles sharing only vertex 0
        let v = vec![
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
            -Vec3::x(),
            -Vec3::y(),
        ];
        let f = vec![[0, 1, 2], [0, 3, 4]];
        assert!(matches!(
            TriangleMesh::new(v, f),
            Err(Error::NonSimpleBoundary(0))
        ));
    }

    #[test]
    fn label_round_trip_through_text() {
        for l in [
            RegionLabel::Dome,
            RegionLabel::NeckRing,
            RegionLabel::VesselWall,
            RegionLabel::CrossSection(12),
        ] {
            assert_eq!(l.to_string().parse::<RegionLabel>().unwrap(), l);
        }
        assert!("cross_section(x)".parse::<RegionLabel>().is_err());
    }

    #[test]
    fn rings_sorted_by_section_label() {
        let m = primitives::cylinder(1.0, 2.0, 8, 3).unwrap();
        let mut labels = m.labels().to_vec();
        // label the ring containing vertex 0 as section 1, the other as 0
        let r0 = m.boundary_rings()[0].clone();
        let r1 = m.boundary_rings()[1].clone();
        r0.iter().for_each(|&v| labels[v] = RegionLabel::CrossSection(1));
        r1.iter().for_each(|&v| labels[v] = RegionLabel::CrossSection(0));
        let mut m = m;
        m.relabel(labels).unwrap();
        assert_eq!(m.boundary_rings()[0], r1);
        assert_eq!(m.section_ring(1).unwrap(), r0.as_slice());
    }
}
