//! Warped-beam encoding of vessel centerlines.
//!
//! A branch is a straight segment from `c` along `v` of length `l`, deflected
//! transversally by sine modes that vanish at both ends:
//!
//! `p(x) = R(v)·[x, Σᵢ φʸᵢ sin(iπx/l), Σᵢ φᶻᵢ sin(iπx/l)]ᵀ + c`, `x ∈ [0, l]`,
//!
//! where `R(v)` is the minimal rotation taking `e₁` to `v`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vec3;

/// Minimal rotation taking unit `a` onto unit `b`, `I + [k]ₓ + [k]ₓ²/(1+c)`.
fn rotation_between(a: &Vec3, b: &Vec3) -> Matrix3<f64> {
    let k = a.cross(b);
    let c = a.dot(b);
    let kx = k.cross_matrix();
    Matrix3::identity() + kx + kx * kx / (1.0 + c)
}

/// Rotation with `R·e₁ = v` and no roll about `v` beyond the minimal one.
/// Directions nearly opposite `e₁` turn half-way round `e₂` first.
pub fn rotation_from_direction(v: &Vec3) -> Result<Matrix3<f64>> {
    if (v.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("direction has norm {}", v.norm())));
    }
    let e1 = Vec3::x();
    if v.x < -1.0 + 1e-6 {
        let half_turn = Matrix3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0));
        return Ok(rotation_between(&-e1, v) * half_turn);
    }
    Ok(rotation_between(&e1, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterlineBranch {
    pub k: usize,
    #[serde(rename = "l")]
    pub length: f64,
    #[serde(rename = "v")]
    pub direction: Vec3,
    #[serde(rename = "c")]
    pub origin: Vec3,
    pub phi_y: Vec<f64>,
    pub phi_z: Vec<f64>,
}

impl CenterlineBranch {
    pub fn new(k: usize, length: f64, direction: Vec3, origin: Vec3, phi_y: Vec<f64>, phi_z: Vec<f64>) -> Result<Self> {
        let b = CenterlineBranch {
            k,
            length,
            direction,
            origin,
            phi_y,
            phi_z,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn straight(k: usize, length: f64, direction: Vec3, origin: Vec3, modes: usize) -> Result<Self> {
        Self::new(k, length, direction, origin, vec![0.0; modes], vec![0.0; modes])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::InvalidArgument(format!("branch length {}", self.length)));
        }
        if (self.direction.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "branch direction has norm {}",
                self.direction.norm()
            )));
        }
        if self.phi_y.len() != self.phi_z.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} y-modes and {} z-modes",
                self.phi_y.len(),
                self.phi_z.len()
            )));
        }
        let finite = self.origin.iter().chain(&self.phi_y).chain(&self.phi_z).all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("branch parameter".into()));
        }
        Ok(())
    }

    pub fn mode_count(&self) -> usize {
        self.phi_y.len()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_direction(&self.direction).expect("validated direction")
    }

    pub fn end(&self) -> Vec3 {
        self.origin + self.direction * self.length
    }

    fn check(&self, x: f64) -> Result<()> {
        let slack = 1e-12 * self.length;
        if !(x >= -slack && x <= self.length + slack) {
            return Err(Error::InvalidArgument(format!(
                "sample {x} outside [0, {}]",
                self.length
            )));
        }
        Ok(())
    }

    fn local(&self, x: f64) -> Vec3 {
        let (mut y, mut z) = (0.0, 0.0);
        for i in 0..self.mode_count() {
            let s = ((i + 1) as f64 * PI * x / self.length).sin();
            y += self.phi_y[i] * s;
            z += self.phi_z[i] * s;
        }
        Vec3::new(x, y, z)
    }

    fn local_derivative(&self, x: f64) -> Vec3 {
        let (mut y, mut z) = (0.0, 0.0);
        for i in 0..self.mode_count() {
            let w = (i + 1) as f64 * PI / self.length;
            let c = w * (w * x).cos();
            y += self.phi_y[i] * c;
            z += self.phi_z[i] * c;
        }
        Vec3::new(1.0, y, z)
    }

    pub fn point(&self, x: f64) -> Result<Vec3> {
        self.check(x)?;
        Ok(self.rotation() * self.local(x) + self.origin)
    }

    pub fn tangent(&self, x: f64) -> Result<Vec3> {
        self.check(x)?;
        Ok((self.rotation() * self.local_derivative(x)).normalize())
    }

    /// `count ≥ 2` points at evenly spaced `x`, endpoints included.
    pub fn sample(&self, count: usize) -> Vec<Vec3> {
        let r = self.rotation();
        (0..count)
            .map(|i| {
                let x = self.length * i as f64 / (count.max(2) - 1) as f64;
                r * self.local(x) + self.origin
            })
            .collect()
    }
}

pub fn eval_branch(branch: &CenterlineBranch, xs: &[f64]) -> Result<Vec<Vec3>> {
    xs.iter().map(|&x| branch.point(x)).collect()
}

pub fn branch_tangent(branch: &CenterlineBranch, x: f64) -> Result<Vec3> {
    branch.tangent(x)
}

/// Ordered centerline samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline(Vec<Vec3>);

impl Polyline {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "polyline needs at least 4 points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::Degenerate(format!("polyline points {i} and {} coincide", i + 1)));
        }
        Ok(Polyline(points))
    }

    pub fn points(&self) -> &[Vec3] {
        &self.0
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// One `x y z` triple per line; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let xs: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(n + 1, format!("bad number `{t}`"))))
                .collect::<Result<_>>()?;
            if xs.len() != 3 {
                return Err(Error::parse(n + 1, format!("expected 3 values, got {}", xs.len())));
            }
            pts.push(Vec3::new(xs[0], xs[1], xs[2]));
        }
        Self::new(pts)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text: String = self.0.iter().map(|p| format!("{:?} {:?} {:?}\n", p.x, p.y, p.z)).collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Least-squares fit of an `m`-mode branch; returns the branch and the RMS
/// transverse residual.
pub fn fit_branch(poly: &Polyline, m: usize, k: usize) -> Result<(CenterlineBranch, f64)> {
    let pts = poly.points();
    if pts.len() < m + 2 {
        return Err(Error::InvalidArgument(format!(
            "{} points cannot determine {m} modes",
            pts.len()
        )));
    }
    let (first, last) = (pts[0], pts[pts.len() - 1]);
    let chord = last - first;
    let l = chord.norm();
    if l < 1e-9 {
        return Err(Error::Degenerate("polyline endpoints coincide".into()));
    }
    let v = chord / l;
    let rt = rotation_from_direction(&v)?.transpose();
    let local: Vec<Vec3> = pts.iter().map(|p| rt * (p - first)).collect();
    let a = DMatrix::from_fn(local.len(), m, |r, i| ((i + 1) as f64 * PI * local[r].x / l).sin());
    let (phi_y, phi_z) = if m == 0 {
        (Vec::new(), Vec::new())
    } else {
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        if svd.singular_values.min() <= 1e-10 * smax {
            return Err(Error::Degenerate("rank-deficient sine basis on these samples".into()));
        }
        let solve = |b: DVector<f64>| -> Vec<f64> { svd.solve(&b, 0.0).expect("u and v computed").iter().copied().collect() };
        (
            solve(DVector::from_iterator(local.len(), local.iter().map(|p| p.y))),
            solve(DVector::from_iterator(local.len(), local.iter().map(|p| p.z))),
        )
    };
    let branch = CenterlineBranch::new(k, l, v, first, phi_y, phi_z)?;
    let sq: f64 = local
        .iter()
        .map(|p| {
            let q = branch.local(p.x);
            (p.y - q.y).powi(2) + (p.z - q.z).powi(2)
        })
        .sum();
    Ok((branch, (sq / local.len() as f64).sqrt()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchFile {
    branch: Vec<CenterlineBranch>,
}

pub fn write_branches(branches: &[CenterlineBranch], path: &Path) -> Result<()> {
    let text = toml::to_string(&BranchFile {
        branch: branches.to_vec(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_branches(path: &Path) -> Result<Vec<CenterlineBranch>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: BranchFile = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for b in &file.branch {
        b.validate()?;
    }
    Ok(file.branch)
}

/// Orthonormal moving frame: `tangent`, `normal`, `binormal = tangent × normal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub tangent: Vec3,
    pub normal: Vec3,
    pub binormal: Vec3,
}

/// Unit tangents by central differences, one-sided at the ends.
pub fn polyline_tangents(points: &[Vec3]) -> Result<Vec<Vec3>> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let n = points.len();
    (0..n)
        .map(|i| {
            let d = points[(i + 1).min(n - 1)] - points[i.saturating_sub(1)];
            if d.norm() < 1e-12 {
                Err(Error::Degenerate(format!("coincident samples near {i}")))
            } else {
                Ok(d.normalize())
            }
        })
        .collect()
}

/// Rotation-minimizing frames by double reflection, tangents estimated
/// from the samples.
pub fn rmf_frames(points: &[Vec3], initial_normal: &Vec3) -> Result<Vec<Frame>> {
    let t = polyline_tangents(points)?;
    rmf_frames_with_tangents(points, &t, initial_normal)
}

/// Double-reflection frames for prescribed unit tangents.
pub fn rmf_frames_with_tangents(points: &[Vec3], tangents: &[Vec3], initial_normal: &Vec3) -> Result<Vec<Frame>> {
    if points.len() < 2 || tangents.len() != points.len() {
        return Err(Error::InvalidArgument("need ≥2 samples with one tangent each".into()));
    }
    if initial_normal.dot(&tangents[0]).abs() > 1e-6 || (initial_normal.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument("initial normal must be unit and ⟂ first tangent".into()));
    }
    let mut r = *initial_normal;
    let mut frames = Vec::with_capacity(points.len());
    frames.push(Frame {
        tangent: tangents[0],
        normal: r,
        binormal: tangents[0].cross(&r),
    });
    for i in 0..points.len() - 1 {
        let v1 = points[i + 1] - points[i];
        let c1 = v1.norm_squared();
        if c1 < 1e-24 {
            return Err(Error::Degenerate(format!("samples {i} and {} coincide", i + 1)));
        }
        let rl = r - v1 * (2.0 / c1 * v1.dot(&r));
        let tl = tangents[i] - v1 * (2.0 / c1 * v1.dot(&tangents[i]));
        let v2 = tangents[i + 1] - tl;
        let c2 = v2.norm_squared();
        r = if c2 < 1e-30 { rl } else { rl - v2 * (2.0 / c2 * v2.dot(&rl)) };
        // keep exact orthonormality against accumulated rounding
        let t = tangents[i + 1];
        r = (r - t * t.dot(&r)).normalize();
        frames.push(Frame {
            tangent: t,
            normal: r,
            binormal: t.cross(&r),
        });
    }
    Ok(frames)
}
