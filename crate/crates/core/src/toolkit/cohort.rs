//! Synthetic cohorts with known tokens and centerlines.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::centerline::{rotation_from_direction, CenterlineBranch, Polyline};
use crate::error::{Error, Result};
use crate::genmodel::BranchSet;
use crate::ghd::{GhdSpace, GhdTokens};
use crate::markers::{Marker, MarkerTopology};
use crate::mesh::{load_mesh, save_mesh, MeshFormat, TriangleMesh, Vec3};
use crate::synthesis::{extract_cross_sections, CrossSection};
use crate::util::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// Per-coordinate RMS vertex displacement relative to the RMS radius of
    /// the canonical mesh.
    pub scale: f64,
    /// Median vessel length, mm.
    pub vessel_length: f64,
    /// Log-normal spread of vessel length.
    pub length_spread: f64,
    /// Standard deviation of the angle between the chord and the section
    /// tangent, degrees.
    pub tilt_degrees: f64,
    /// Peak transverse deflection relative to vessel length.
    pub bend: f64,
    pub fourier_modes: usize,
    pub polyline_samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 64,
            scale: 0.04,
            vessel_length: 8.0,
            length_spread: 0.15,
            tilt_degrees: 8.0,
            bend: 0.08,
            fourier_modes: 8,
            polyline_samples: 65,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.count > 0
            && self.scale >= 0.0
            && self.vessel_length > 0.0
            && self.length_spread >= 0.0
            && (0.0..45.0).contains(&self.tilt_degrees)
            && self.bend >= 0.0
            && self.fourier_modes >= 2
            && self.polyline_samples >= 2 * self.fourier_modes + 2;
        if !ok {
            return Err(Error::Config(format!("synthetic cohort settings out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CohortShape {
    pub id: String,
    pub mesh: TriangleMesh,
    pub tokens: GhdTokens,
    pub branches: BranchSet,
}

impl CohortShape {
    pub fn polylines(&self, samples: usize) -> Result<Vec<Polyline>> {
        self.branches.iter().map(|b| Polyline::new(b.sample(samples))).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub shapes: Vec<CohortShape>,
    /// Draws discarded before `shapes` was filled.
    pub rejected: usize,
}

pub fn shape_id(i: usize) -> String {
    format!("shape_{i:04}")
}

/// Per-mode token standard deviation: variance `∝ 1/(1 + λᵢ)`, normalized
/// so that the per-coordinate RMS vertex displacement is `scale · r`.
pub fn token_std(space: &GhdSpace, scale: f64) -> Vec<f64> {
    let canon = space.canonical().vertices();
    let c = canon.iter().sum::<Vec3>() / canon.len() as f64;
    let r = (canon.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / canon.len() as f64).sqrt();
    let lam = space.basis().eigenvalues();
    let total: f64 = lam.iter().map(|l| 1.0 / (1.0 + l.max(0.0))).sum();
    let c2 = (scale * r).powi(2) * space.vertex_count() as f64 / total;
    lam.iter().map(|l| (c2 / (1.0 + l.max(0.0))).sqrt()).collect()
}

/// Draws `cfg.count` valid shapes. A draw is rejected when its decoded mesh
/// folds a face relative to the canonical decode, its cross-sections cannot
/// be extracted, or a marker fails or is not positive.
pub fn synth_cohort(space: &GhdSpace, cfg: &SynthConfig, seed: u64) -> Result<Cohort> {
    cfg.validate()?;
    let topo = MarkerTopology::new(space.canonical())?;
    let base = space.project(space.canonical())?;
    let std = token_std(space, cfg.scale);
    let base_v = space.decode_positions(base.coeffs());
    let faces = space.canonical().faces();
    let base_n: Vec<Vec3> = faces.iter().map(|f| normal(&base_v, f)).collect();
    let mut rng = stream_rng(seed, "synth");
    let mut shapes = Vec::with_capacity(cfg.count);
    let mut rejected = 0;
    while shapes.len() < cfg.count {
        if rejected > cfg.count {
            return Err(Error::Degenerate(format!(
                "{rejected} of {} draws rejected; perturbation scale {} is too large",
                rejected + shapes.len(),
                cfg.scale
            )));
        }
        let mut c = base.coeffs().clone();
        for (i, s) in std.iter().enumerate() {
            for k in 0..3 {
                c[(i, k)] += s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let tokens = space.tokens(c)?;
        let v = space.decode_positions(tokens.coeffs());
        let folded = faces.iter().zip(&base_n).any(|(f, n)| normal(&v, f).dot(n) <= 0.0);
        let markers = topo.evaluate(&v, None).ok().map(|(m, _)| m);
        let markers_ok = markers.is_some_and(|m| Marker::ALL.iter().all(|&k| m.get(k) > 0.0 && m.get(k).is_finite()));
        let mesh = space.decode(&tokens)?;
        let sections = extract_cross_sections(&mesh).ok();
        let (false, true, Some(mut sections)) = (folded, markers_ok, sections) else {
            rejected += 1;
            continue;
        };
        sections.sort_by_key(|s| s.k);
        let branches = sections.iter().map(|s| random_branch(s, cfg, &mut rng)).collect::<Result<BranchSet>>()?;
        shapes.push(CohortShape {
            id: shape_id(shapes.len()),
            mesh,
            tokens,
            branches,
        });
    }
    if 2 * rejected > rejected + shapes.len() {
        return Err(Error::Degenerate(format!("rejection rate above 50% at scale {}", cfg.scale)));
    }
    Ok(Cohort { shapes, rejected })
}

fn normal(v: &[Vec3], f: &[usize; 3]) -> Vec3 {
    (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]]))
}

/// A bent branch from the section center whose tangent at the root is the
/// section tangent: the chord is tilted, and the first sine modes absorb
/// the tilt.
fn random_branch<R: Rng + ?Sized>(s: &CrossSection, cfg: &SynthConfig, rng: &mut R) -> Result<CenterlineBranch> {
    let l = cfg.vessel_length * (cfg.length_spread * rng.sample::<f64, _>(StandardNormal)).exp();
    let tilt = (cfg.tilt_degrees * rng.sample::<f64, _>(StandardNormal)).to_radians().clamp(-1.0, 1.0);
    let roll: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let rot = rotation_from_direction(&s.tangent)?;
    let v = (rot * Vec3::new(tilt.cos(), tilt.sin() * roll.cos(), tilt.sin() * roll.sin())).normalize();
    let m = cfg.fourier_modes;
    let mut py = vec![0.0; m];
    let mut pz = vec![0.0; m];
    for j in 1..m {
        let a = cfg.bend * l / ((j + 1) * (j + 1)) as f64;
        py[j] = a * rng.sample::<f64, _>(StandardNormal);
        pz[j] = a * rng.sample::<f64, _>(StandardNormal);
    }
    // y'(0) = Σ φⱼ·jπ/l must equal the slope of t_c in the chord frame.
    let lt = rotation_from_direction(&v)?.transpose() * s.tangent;
    let w = std::f64::consts::PI / l;
    py[0] = lt.y / lt.x / w - (1..m).map(|j| (j + 1) as f64 * py[j]).sum::<f64>();
    pz[0] = lt.z / lt.x / w - (1..m).map(|j| (j + 1) as f64 * pz[j]).sum::<f64>();
    CenterlineBranch::new(s.k, l, v, s.center, py, pz)
}

pub fn mesh_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.obj"))
}

pub fn tokens_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.tokens.toml"))
}

pub fn polyline_path(dir: &Path, id: &str, k: usize) -> PathBuf {
    dir.join(format!("{id}.cl{k}.txt"))
}

/// Writes each shape as `<id>.obj` (with labels), `<id>.tokens.toml` (the
/// ground-truth tokens) and `<id>.cl<k>.txt` polylines.
pub fn write_cohort(cohort: &Cohort, dir: &Path, samples: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &cohort.shapes {
        save_mesh(&s.mesh, &mesh_path(dir, &s.id), MeshFormat::Obj)?;
        s.tokens.write(&tokens_path(dir, &s.id))?;
        for (p, b) in s.polylines(samples)?.iter().zip(&s.branches) {
            p.write(&polyline_path(dir, &s.id, b.k))?;
        }
    }
    Ok(())
}

/// Shape ids of a dataset directory, sorted.
pub fn dataset_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "obj") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_dataset_mesh(dir: &Path, id: &str) -> Result<TriangleMesh> {
    load_mesh(&mesh_path(dir, id), MeshFormat::Obj)
}
