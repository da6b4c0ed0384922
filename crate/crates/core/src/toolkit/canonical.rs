//! Canonical template meshes.
//!
//! The bifurcation template starts from an icosphere "junction" body. Three
//! spherical caps are cut out where the vessels attach and their rims are
//! pulled onto exact circles; a polar cap becomes a hemispherical dome
//! above a planar neck ring; short straight stubs are swept from each rim.

use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::centerline::CenterlineBranch;
use crate::error::{Error, Result};
use crate::markers::MarkerTopology;
use crate::mesh::primitives::{self, icosphere_raw};
use crate::mesh::{RegionLabel, TriangleMesh, Vec3};
use crate::synthesis::{assemble, extract_cross_sections, label_rings, sweep_tube};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalKind {
    SphereCapBifurcation,
    Icosphere,
    Cylinder,
}

impl FromStr for CanonicalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere_cap_bifurcation" => Ok(CanonicalKind::SphereCapBifurcation),
            "icosphere" => Ok(CanonicalKind::Icosphere),
            "cylinder" => Ok(CanonicalKind::Cylinder),
            _ => Err(Error::InvalidArgument(format!(
                "unknown canonical kind `{s}` (sphere_cap_bifurcation, icosphere, cylinder)"
            ))),
        }
    }
}

/// Junction body radius of the bifurcation template, mm.
pub const BODY_RADIUS: f64 = 2.5;
/// Polar angle of the neck ring on the body.
const NECK_ANGLE: f64 = 40.0;
/// Half-angle of each vessel opening.
const HOLE_ANGLE: f64 = 28.0;
/// Stub length as a fraction of the body radius.
const STUB_LENGTH: f64 = 0.5;

/// Unit directions of the three vessel openings: the parent vessel below,
/// two daughters slightly under the equator.
pub fn vessel_directions() -> [Vec3; 3] {
    let d = |polar: f64, azimuth: f64| {
        let (p, a) = (polar.to_radians(), azimuth.to_radians());
        Vec3::new(p.sin() * a.cos(), p.sin() * a.sin(), p.cos())
    };
    [d(180.0, 0.0), d(105.0, 0.0), d(105.0, 180.0)]
}

/// `resolution` is the icosphere subdivision level for the bifurcation and
/// the icosphere (radius 1), and the segment count for the cylinder
/// (radius 1, length 4, rings spaced about one edge apart).
pub fn make_canonical(kind: CanonicalKind, resolution: u32) -> Result<TriangleMesh> {
    match kind {
        CanonicalKind::SphereCapBifurcation => bifurcation(resolution),
        CanonicalKind::Icosphere => primitives::icosphere(1.0, resolution),
        CanonicalKind::Cylinder => {
            let segments = resolution as usize;
            if segments < 3 {
                return Err(Error::InvalidArgument(format!("cylinder needs ≥ 3 segments, got {segments}")));
            }
            let edge = 2.0 * (std::f64::consts::PI / segments as f64).sin();
            let rings = ((4.0 / edge).round() as usize).max(2) + 1;
            label_rings(&primitives::cylinder(1.0, 4.0, segments, rings)?)
        }
    }
}

fn bifurcation(level: u32) -> Result<TriangleMesh> {
    if level < 2 {
        return Err(Error::InvalidArgument(format!(
            "icosphere level {level} is too coarse for three distinct vessel rings (need ≥ 2)"
        )));
    }
    let (mut v, faces) = icosphere_raw(level);
    let apex = Vec3::z();
    let dirs = vessel_directions();
    let (cos_hole, cos_neck) = (HOLE_ANGLE.to_radians().cos(), NECK_ANGLE.to_radians().cos());

    // Cut the vessel openings.
    let hole_of = |p: &Vec3| dirs.iter().position(|d| p.dot(d) > cos_hole);
    let removed: Vec<bool> = v.iter().map(|p| hole_of(p).is_some()).collect();
    let mut keep_faces: Vec<[usize; 3]> = faces.iter().copied().filter(|f| f.iter().all(|&i| !removed[i])).collect();
    let mut remap = vec![usize::MAX; v.len()];
    let mut kept = Vec::new();
    for (i, p) in v.iter().enumerate() {
        if !removed[i] {
            remap[i] = kept.len();
            kept.push(*p);
        }
    }
    for f in &mut keep_faces {
        *f = f.map(|i| remap[i]);
    }
    v = kept;
    let before: Vec<Vec3> = keep_faces.iter().map(|f| face_normal(&v, f)).collect();

    let mut labels = vec![RegionLabel::VesselWall; v.len()];
    let dome: Vec<bool> = v.iter().map(|p| p.dot(&apex) > cos_neck).collect();
    for (i, l) in labels.iter_mut().enumerate() {
        if dome[i] {
            *l = RegionLabel::Dome;
        }
    }
    for f in &keep_faces {
        if f.iter().any(|&i| dome[i]) {
            for &i in f {
                if !dome[i] {
                    labels[i] = RegionLabel::NeckRing;
                }
            }
        }
    }

    // Rims onto exact circles. Rings come out of the mesh in face order.
    let open = TriangleMesh::with_labels(v.clone(), keep_faces.clone(), labels.clone())?;
    if open.boundary_rings().len() != 3 {
        return Err(Error::Degenerate(format!(
            "level {level} gives {} vessel openings instead of 3",
            open.boundary_rings().len()
        )));
    }
    let mut rim_of = vec![None; v.len()];
    for ring in open.boundary_rings() {
        let c = ring.iter().map(|&i| v[i]).sum::<Vec3>();
        let k = dirs.iter().enumerate().max_by(|a, b| a.1.dot(&c).total_cmp(&b.1.dot(&c))).unwrap().0;
        for &i in ring {
            if labels[i] != RegionLabel::VesselWall {
                return Err(Error::Degenerate(format!("vessel opening {k} touches the neck")));
            }
            rim_of[i] = Some(k);
        }
    }
    for (i, p) in v.iter_mut().enumerate() {
        if let Some(k) = rim_of[i] {
            *p = onto_circle(p, &dirs[k], cos_hole);
        } else if labels[i] == RegionLabel::NeckRing {
            *p = onto_circle(p, &apex, cos_neck);
        } else if dome[i] {
            // polar angle θ ∈ [0, θₙ] → hemisphere angle ψ ∈ [0, π/2]
            let theta = p.dot(&apex).clamp(-1.0, 1.0).acos();
            let psi = theta / NECK_ANGLE.to_radians() * FRAC_PI_2;
            let rho = NECK_ANGLE.to_radians().sin();
            let radial = *p - apex * p.dot(&apex);
            let u = if radial.norm() > 1e-12 { radial.normalize() } else { Vec3::x() };
            *p = apex * cos_neck + (u * psi.sin() + apex * psi.cos()) * rho;
        }
    }
    for (f, n0) in keep_faces.iter().zip(&before) {
        if face_normal(&v, f).dot(n0) <= 0.0 {
            return Err(Error::Degenerate(format!("template face {f:?} folds over at level {level}")));
        }
    }

    let mut complex_labels = labels;
    for (i, k) in rim_of.iter().enumerate() {
        if let Some(k) = k {
            complex_labels[i] = RegionLabel::CrossSection(*k);
        }
    }
    let scaled: Vec<Vec3> = v.iter().map(|p| p * BODY_RADIUS).collect();
    let complex = TriangleMesh::with_labels(scaled, keep_faces, complex_labels)?;
    let sections = extract_cross_sections(&complex)?;
    let edge = sections.iter().map(|s| s.mean_edge(complex.vertices())).sum::<f64>() / 3.0;
    let tubes = sections
        .iter()
        .map(|s| {
            let branch = CenterlineBranch::straight(s.k, STUB_LENGTH * BODY_RADIUS, s.tangent, s.center, 1)?;
            sweep_tube(s, complex.vertices(), &branch, edge)
        })
        .collect::<Result<Vec<_>>>()?;
    let mesh = assemble(&complex, &tubes)?;
    MarkerTopology::new(&mesh)?;
    Ok(mesh)
}

fn face_normal(v: &[Vec3], f: &[usize; 3]) -> Vec3 {
    (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]]))
}

/// Moves a unit-sphere point along its azimuth about `axis` onto the circle
/// at height `h` (radius `√(1 − h²)`).
fn onto_circle(p: &Vec3, axis: &Vec3, h: f64) -> Vec3 {
    let radial = p - axis * p.dot(axis);
    axis * h + radial.normalize() * (1.0 - h * h).sqrt()
}

/// Euler characteristic `V − E + F`.
pub fn euler_characteristic(mesh: &TriangleMesh) -> i64 {
    let edges: HashSet<(usize, usize)> = mesh
        .faces()
        .iter()
        .flat_map(|f| (0..3).map(move |i| (f[i].min(f[(i + 1) % 3]), f[i].max(f[(i + 1) % 3]))))
        .collect();
    mesh.vertex_count() as i64 - edges.len() as i64 + mesh.face_count() as i64
}
