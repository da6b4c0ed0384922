//! Differentiable morphological markers of the aneurysm dome and the
//! log-normal model of their joint distribution.
//!
//! The neck plane passes through the neck-ring centroid with the normal of
//! least ring variance, oriented toward the dome. Gradients treat that
//! normal as constant.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{point_centroid, RegionLabel, TriangleMesh, Vec3};
use crate::util::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Marker {
    #[serde(rename = "NW")]
    NeckWidth,
    #[serde(rename = "AR")]
    AspectRatio,
    #[serde(rename = "LI")]
    LobulationIndex,
    #[serde(rename = "V")]
    Volume,
}

impl Marker {
    pub const ALL: [Marker; 4] = [Marker::NeckWidth, Marker::AspectRatio, Marker::LobulationIndex, Marker::Volume];
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Marker::NeckWidth => "NW",
            Marker::AspectRatio => "AR",
            Marker::LobulationIndex => "LI",
            Marker::Volume => "V",
        })
    }
}

impl FromStr for Marker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NW" => Ok(Marker::NeckWidth),
            "AR" => Ok(Marker::AspectRatio),
            "LI" => Ok(Marker::LobulationIndex),
            "V" => Ok(Marker::Volume),
            _ => Err(Error::InvalidArgument(format!("unknown marker `{s}` (NW, AR, LI, V)"))),
        }
    }
}

/// Marker values. `height` (dome height, mm) and `dome_area` (mm²) are the
/// intermediate quantities behind AR and LI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorphMarkers {
    pub nw: f64,
    pub ar: f64,
    pub li: f64,
    pub v: f64,
    pub height: f64,
    pub dome_area: f64,
}

impl MorphMarkers {
    pub fn get(&self, m: Marker) -> f64 {
        match m {
            Marker::NeckWidth => self.nw,
            Marker::AspectRatio => self.ar,
            Marker::LobulationIndex => self.li,
            Marker::Volume => self.v,
        }
    }
}

/// Per-vertex gradients of each marker.
#[derive(Debug, Clone)]
pub struct MarkerGradients {
    pub nw: Vec<Vec3>,
    pub ar: Vec<Vec3>,
    pub li: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub height: Vec<Vec3>,
}

impl MarkerGradients {
    pub fn get(&self, m: Marker) -> &[Vec3] {
        match m {
            Marker::NeckWidth => &self.nw,
            Marker::AspectRatio => &self.ar,
            Marker::LobulationIndex => &self.li,
            Marker::Volume => &self.v,
        }
    }
}

/// Label-derived index sets of a registered mesh family; built once from
/// the canonical mesh and reused for every decoded shape.
#[derive(Debug, Clone)]
pub struct MarkerTopology {
    vertex_count: usize,
    ring: Vec<usize>,
    dome: Vec<usize>,
    patch: Vec<[usize; 3]>,
    /// Patch boundary edges, reversed so that with the apex they close the
    /// patch consistently.
    fan: Vec<[usize; 2]>,
}

impl MarkerTopology {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        let labels = mesh.labels();
        let ring = mesh.vertices_labeled(RegionLabel::NeckRing);
        let dome = mesh.vertices_labeled(RegionLabel::Dome);
        if ring.len() < 3 || dome.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "markers need a neck ring and a dome ({} ring, {} dome vertices)",
                ring.len(),
                dome.len()
            )));
        }
        let in_patch = |v: usize| matches!(labels[v], RegionLabel::Dome | RegionLabel::NeckRing);
        let patch: Vec<[usize; 3]> = mesh.faces().iter().copied().filter(|f| f.iter().all(|&v| in_patch(v))).collect();
        let directed: HashSet<(usize, usize)> =
            patch.iter().flat_map(|f| (0..3).map(move |i| (f[i], f[(i + 1) % 3]))).collect();
        let mut fan: Vec<[usize; 2]> = directed
            .iter()
            .filter(|&&(a, b)| !directed.contains(&(b, a)))
            .map(|&(a, b)| [b, a])
            .collect();
        fan.sort_unstable();
        let ring_set: HashSet<usize> = ring.iter().copied().collect();
        let on_ring: HashSet<usize> = fan.iter().flatten().copied().collect();
        if on_ring != ring_set {
            return Err(Error::InvalidArgument(
                "the dome patch boundary is not the labeled neck ring".into(),
            ));
        }
        if fan.len() != ring.len() {
            return Err(Error::InvalidArgument("neck ring is not a single closed loop".into()));
        }
        Ok(MarkerTopology {
            vertex_count: mesh.vertex_count(),
            ring,
            dome,
            patch,
            fan,
        })
    }

    pub fn ring(&self) -> &[usize] {
        &self.ring
    }

    pub fn dome(&self) -> &[usize] {
        &self.dome
    }

    /// Faces counted toward dome area.
    pub fn patch(&self) -> &[[usize; 3]] {
        &self.patch
    }

    pub fn mean_ring_edge(&self, v: &[Vec3]) -> f64 {
        self.fan.iter().map(|&[a, b]| (v[a] - v[b]).norm()).sum::<f64>() / self.fan.len() as f64
    }

    /// Default smooth-max temperature, `20 / mean ring edge length`.
    pub fn default_tau(&self, v: &[Vec3]) -> f64 {
        20.0 / self.mean_ring_edge(v)
    }

    /// Neck-plane centroid and dome-facing unit normal.
    pub fn neck_plane(&self, v: &[Vec3]) -> Result<(Vec3, Vec3)> {
        let pts: Vec<Vec3> = self.ring.iter().map(|&i| v[i]).collect();
        let c = point_centroid(&pts);
        let mut cov = Matrix3::zeros();
        for p in &pts {
            let d = p - c;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        if eig.eigenvalues[order[1]] <= 1e-12 * eig.eigenvalues[order[2]].max(f64::MIN_POSITIVE) {
            return Err(Error::Degenerate("neck ring is collinear".into()));
        }
        let mut n: Vec3 = eig.eigenvectors.column(order[0]).into();
        let dome_c = point_centroid(&self.dome.iter().map(|&i| v[i]).collect::<Vec<_>>());
        if n.dot(&(dome_c - c)) < 0.0 {
            n = -n;
        }
        Ok((c, n))
    }

    pub fn evaluate(&self, v: &[Vec3], tau: Option<f64>) -> Result<(MorphMarkers, MarkerGradients)> {
        if v.len() != self.vertex_count {
            return Err(Error::DimensionMismatch(format!(
                "{} vertices for a {}-vertex marker topology",
                v.len(),
                self.vertex_count
            )));
        }
        let (c, n) = self.neck_plane(v)?;
        self.evaluate_with_plane(v, tau, c, n)
    }

    /// Markers for a given plane normal; `c` must be the ring centroid.
    pub fn evaluate_with_normal(&self, v: &[Vec3], tau: f64, n: Vec3) -> Result<(MorphMarkers, MarkerGradients)> {
        let c = point_centroid(&self.ring.iter().map(|&i| v[i]).collect::<Vec<_>>());
        self.evaluate_with_plane(v, Some(tau), c, n)
    }

    fn evaluate_with_plane(
        &self,
        v: &[Vec3],
        tau: Option<f64>,
        c: Vec3,
        n: Vec3,
    ) -> Result<(MorphMarkers, MarkerGradients)> {
        let tau = tau.unwrap_or_else(|| self.default_tau(v));
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("smooth-max temperature {tau}")));
        }
        let nv = v.len();
        let k = self.ring.len() as f64;

        // neck width: smooth max of in-plane pairwise ring distances
        let project = |d: Vec3| d - n * n.dot(&d);
        let mut pairs = Vec::with_capacity(self.ring.len() * (self.ring.len() - 1) / 2);
        for (a, &i) in self.ring.iter().enumerate() {
            for &j in &self.ring[a + 1..] {
                let d = project(v[i] - v[j]);
                pairs.push((i, j, d.norm(), d));
            }
        }
        let (nw, w_nw) = smooth_max(pairs.iter().map(|p| p.2), tau);
        let mut g_nw = vec![Vec3::zeros(); nv];
        for ((i, j, dist, d), w) in pairs.iter().zip(&w_nw) {
            if *dist > 0.0 {
                let g = d * (w / dist);
                g_nw[*i] += g;
                g_nw[*j] -= g;
            }
        }

        // dome height above the plane
        let heights: Vec<f64> = self.dome.iter().map(|&i| n.dot(&(v[i] - c)).max(0.0)).collect();
        let (h, w_h) = smooth_max(heights.iter().copied(), tau);
        let mut g_h = vec![Vec3::zeros(); nv];
        let mut pull = 0.0;
        for ((&i, &hi), w) in self.dome.iter().zip(&heights).zip(&w_h) {
            if hi > 0.0 {
                g_h[i] += n * *w;
                pull += w;
            }
        }
        for &r in &self.ring {
            g_h[r] -= n * (pull / k);
        }

        // open dome area and fan-closed volume
        let mut area = 0.0;
        let mut g_a = vec![Vec3::zeros(); nv];
        let mut six_v = 0.0;
        let mut g_6v = vec![Vec3::zeros(); nv];
        for &[a, b, cc] in &self.patch {
            let (pa, pb, pc) = (v[a], v[b], v[cc]);
            let cr = (pb - pa).cross(&(pc - pa));
            let len = cr.norm();
            if len <= 0.0 {
                return Err(Error::Degenerate("zero-area dome face".into()));
            }
            let nh = cr / len;
            area += 0.5 * len;
            g_a[a] += 0.5 * (pb - pc).cross(&nh);
            g_a[b] += 0.5 * (pc - pa).cross(&nh);
            g_a[cc] += 0.5 * (pa - pb).cross(&nh);
            six_v += pa.dot(&pb.cross(&pc));
            g_6v[a] += pb.cross(&pc);
            g_6v[b] += pc.cross(&pa);
            g_6v[cc] += pa.cross(&pb);
        }
        let mut g_apex = Vec3::zeros();
        for &[a, b] in &self.fan {
            let (pa, pb) = (v[a], v[b]);
            six_v += pa.dot(&pb.cross(&c));
            g_6v[a] += pb.cross(&c);
            g_6v[b] += c.cross(&pa);
            g_apex += pa.cross(&pb);
        }
        for &r in &self.ring {
            g_6v[r] += g_apex / k;
        }
        let sign = six_v.signum();
        let vol = six_v.abs() / 6.0;
        if !(vol > 1e-15) {
            return Err(Error::Degenerate("zero dome volume".into()));
        }
        let g_v: Vec<Vec3> = g_6v.iter().map(|g| g * (sign / 6.0)).collect();

        let ar = h / nw;
        let li = area / vol;
        let g_ar = (0..nv).map(|i| g_h[i] / nw - g_nw[i] * (h / (nw * nw))).collect();
        let g_li = (0..nv).map(|i| g_a[i] / vol - g_v[i] * (area / (vol * vol))).collect();
        let m = MorphMarkers {
            nw,
            ar,
            li,
            v: vol,
            height: h,
            dome_area: area,
        };
        if ![nw, ar, li, vol].iter().all(|x| x.is_finite() && *x > 0.0) {
            return Err(Error::Degenerate(format!("invalid markers {m:?}")));
        }
        Ok((
            m,
            MarkerGradients {
                nw: g_nw,
                ar: g_ar,
                li: g_li,
                v: g_v,
                height: g_h,
            },
        ))
    }
}

/// `(1/τ)·log Σ exp(τ xᵢ)` and its softmax weights.
pub fn smooth_max(xs: impl Iterator<Item = f64>, tau: f64) -> (f64, Vec<f64>) {
    let xs: Vec<f64> = xs.collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (tau * (x - m)).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln() / tau, e.into_iter().map(|x| x / s).collect())
}

/// Markers of a labeled mesh, with gradients.
pub fn compute_markers(mesh: &TriangleMesh, tau: Option<f64>) -> Result<(MorphMarkers, MarkerGradients)> {
    MarkerTopology::new(mesh)?.evaluate(mesh.vertices(), tau)
}

/// `id,NW,AR,LI,V` rows.
pub fn write_marker_csv(rows: &[(String, MorphMarkers)], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "id,NW,AR,LI,V").unwrap();
    for (id, m) in rows {
        writeln!(out, "{id},{:?},{:?},{:?},{:?}", m.nw, m.ar, m.li, m.v).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

const STD_FLOOR: f64 = 1e-8;

/// Joint log-normal model of selected markers. Markers are log-transformed,
/// standardized per marker, and modeled by a multivariate normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionModel {
    pub markers: Vec<Marker>,
    /// Standardization: `z = (log x − log_mean) / log_std`.
    pub log_mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Mean and covariance of `z`.
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl ConditionModel {
    pub fn fit(samples: &[MorphMarkers], markers: &[Marker]) -> Result<Self> {
        let d = markers.len();
        if d == 0 {
            return Err(Error::InvalidArgument("empty marker subset".into()));
        }
        if samples.len() < (d + 1).max(10) {
            return Err(Error::InvalidArgument(format!(
                "{} samples cannot fit a {d}-marker distribution (need ≥ {})",
                samples.len(),
                (d + 1).max(10)
            )));
        }
        let mut logs = DMatrix::zeros(samples.len(), d);
        for (r, s) in samples.iter().enumerate() {
            for (c, &m) in markers.iter().enumerate() {
                let x = s.get(m);
                if !(x > 0.0 && x.is_finite()) {
                    return Err(Error::InvalidArgument(format!("marker {m} = {x} is not positive")));
                }
                logs[(r, c)] = x.ln();
            }
        }
        let (log_mean, cov) = mean_cov(&logs);
        let log_std: Vec<f64> = (0..d).map(|i| cov[(i, i)].sqrt().max(STD_FLOOR)).collect();
        let z = DMatrix::from_fn(samples.len(), d, |r, c| (logs[(r, c)] - log_mean[c]) / log_std[c]);
        let (mean, mut zc) = mean_cov(&z);
        for i in 0..d {
            zc[(i, i)] += 1e-6;
        }
        Ok(ConditionModel {
            markers: markers.to_vec(),
            log_mean,
            log_std,
            mean,
            covariance: (0..d).map(|i| zc.row(i).iter().copied().collect()).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.markers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let ok = d > 0
            && self.log_mean.len() == d
            && self.log_std.len() == d
            && self.mean.len() == d
            && self.covariance.len() == d
            && self.covariance.iter().all(|r| r.len() == d)
            && self.log_std.iter().all(|s| *s > 0.0);
        if !ok {
            return Err(Error::Format("inconsistent condition model dimensions".into()));
        }
        self.cholesky().map(|_| ())
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.covariance[i][j])
    }

    fn cholesky(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.cov_matrix()).ok_or_else(|| Error::Degenerate("condition covariance is not positive definite".into()))
    }

    /// Standardized log-space coordinates of marker values.
    pub fn standardize(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, x)| (x.ln() - self.log_mean[i]) / self.log_std[i])
            .collect()
    }

    /// Derivative of each standardized coordinate with respect to its value.
    pub fn standardize_slope(&self, values: &[f64]) -> Vec<f64> {
        values.iter().enumerate().map(|(i, x)| 1.0 / (x * self.log_std[i])).collect()
    }

    pub fn select(&self, m: &MorphMarkers) -> Vec<f64> {
        self.markers.iter().map(|&k| m.get(k)).collect()
    }

    /// Mean and covariance of the log markers in natural log units.
    pub fn log_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let s = DVector::from_column_slice(&self.log_std);
        let mean = DVector::from_fn(d, |i, _| self.log_mean[i] + self.log_std[i] * self.mean[i]);
        let cov = DMatrix::from_fn(d, d, |i, j| self.covariance[i][j] * s[i] * s[j]);
        (mean, cov)
    }

    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.sample_with(&mut stream_rng(seed, "conditions"), count)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<Vec<f64>>> {
        let chol = self.cholesky()?;
        let l = chol.l();
        let d = self.dim();
        Ok((0..count)
            .map(|_| {
                let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let z = &l * e;
                (0..d)
                    .map(|i| (self.log_mean[i] + self.log_std[i] * (self.mean[i] + z[i])).exp())
                    .collect()
            })
            .collect())
    }

    /// Log density of the standardized normal at the standardized point.
    pub fn log_density_standardized(&self, values: &[f64]) -> Result<f64> {
        let chol = self.cholesky()?;
        let z = self.standardize(values);
        let r = DVector::from_fn(self.dim(), |i, _| z[i] - self.mean[i]);
        let sol = chol.solve(&r);
        let logdet: f64 = chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        Ok(-0.5 * (r.dot(&sol) + logdet + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ConditionModel = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }
}

/// Column means and the unbiased covariance of the rows of `x`.
fn mean_cov(x: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean: Vec<f64> = (0..x.ncols()).map(|c| x.column(c).sum() / n).collect();
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (n - 1.0).max(1.0);
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;
    use nalgebra::{Rotation3, Unit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn perturbed_hemisphere(seed: u64) -> TriangleMesh {
        let m = primitives::hemisphere(1.0, 8, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = m
            .vertices()
            .iter()
            .map(|p| p + Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)))
            .collect();
        m.with_vertices(v).unwrap()
    }

    #[test]
    fn hemisphere_converges_to_analytic_markers() {
        let mut errs = Vec::new();
        for (rings, segs) in [(16, 64), (32, 128), (64, 256)] {
            let m = primitives::hemisphere(1.0, rings, segs).unwrap();
            let (mk, _) = compute_markers(&m, Some(1e4)).unwrap();
            errs.push([
                (mk.nw / 2.0 - 1.0).abs(),
                (mk.ar / 0.5 - 1.0).abs(),
                (mk.v / (2.0 * PI / 3.0) - 1.0).abs(),
                (mk.li / 3.0 - 1.0).abs(),
            ]);
        }
        assert!(errs.last().unwrap().iter().all(|e| *e < 0.01), "{errs:?}");
        assert!(errs[2][2] < errs[0][2] && errs[2][3] < errs[0][3]);
    }

    #[test]
    fn smooth_max_bounds() {
        let xs = [0.3, 1.2, 1.19, -4.0, 0.0];
        for tau in [0.5, 3.0, 50.0] {
            let (s, w) = smooth_max(xs.iter().copied(), tau);
            assert!(s >= 1.2 && s <= 1.2 + (xs.len() as f64).ln() / tau);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn scaling_follows_homogeneity() {
        let m = perturbed_hemisphere(1);
        let (a, _) = compute_markers(&m, None).unwrap();
        let s = 2.5;
        let (b, _) = compute_markers(&m.scaled(s), None).unwrap();
        assert!((b.nw / (s * a.nw) - 1.0).abs() < 1e-6);
        assert!((b.height / (s * a.height) - 1.0).abs() < 1e-6);
        assert!((b.v / (s.powi(3) * a.v) - 1.0).abs() < 1e-6);
        assert!((b.li * s / a.li - 1.0).abs() < 1e-6);
        assert!((b.ar / a.ar - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rigid_invariance_and_area_identity() {
        let m = perturbed_hemisphere(2);
        let (a, _) = compute_markers(&m, None).unwrap();
        assert!((a.li * a.v - a.dome_area).abs() < 1e-10 * a.dome_area);
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::new(0.3, -1.0, 0.4)), 2.1);
        let v = m.vertices().iter().map(|p| rot * p + Vec3::new(5.0, -3.0, 1.0)).collect();
        let (b, _) = compute_markers(&m.with_vertices(v).unwrap(), None).unwrap();
        for mk in Marker::ALL {
            assert!((a.get(mk) - b.get(mk)).abs() < 1e-9 * a.get(mk).max(1.0), "{mk}");
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let m = perturbed_hemisphere(3);
        let topo = MarkerTopology::new(&m).unwrap();
        let v = m.vertices().to_vec();
        let tau = topo.default_tau(&v);
        let (_, n) = topo.neck_plane(&v).unwrap();
        let (_, g) = topo.evaluate_with_normal(&v, tau, n).unwrap();
        let h = 1e-5;
        let probe: Vec<usize> = topo.ring().iter().take(3).chain(topo.dome().iter().take(3)).copied().chain([0]).collect();
        for mk in Marker::ALL {
            let scale = g.get(mk).iter().map(|x| x.amax()).fold(0.0, f64::max);
            for &i in &probe {
                for k in 0..3 {
                    let (mut p, mut q) = (v.clone(), v.clone());
                    p[i][k] += h;
                    q[i][k] -= h;
                    let fp = topo.evaluate_with_normal(&p, tau, n).unwrap().0.get(mk);
                    let fq = topo.evaluate_with_normal(&q, tau, n).unwrap().0.get(mk);
                    let fd = (fp - fq) / (2.0 * h);
                    let an = g.get(mk)[i][k];
                    assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-3 * scale), "{mk} v{i} {k}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn gradients_vanish_off_the_dome() {
        // hemisphere plus an attached collar: collar vertices get no gradient
        let h = primitives::hemisphere(1.0, 4, 12).unwrap();
        let mut v = h.vertices().to_vec();
        let mut f = h.faces().to_vec();
        let mut lab = h.labels().to_vec();
        let rim = h.boundary_rings()[0].clone();
        let base = v.len();
        for &r in &rim {
            v.push(v[r] - Vec3::new(0.0, 0.0, 0.5));
            lab.push(RegionLabel::VesselWall);
        }
        for (j, w) in rim.iter().enumerate() {
            let nx = rim[(j + 1) % rim.len()];
            let (a, b) = (base + j, base + (j + 1) % rim.len());
            f.push([*w, a, b]);
            f.push([*w, b, nx]);
        }
        let collared = TriangleMesh::with_labels(v, f, lab).unwrap();
        let (mk, g) = compute_markers(&collared, None).unwrap();
        let (plain, _) = compute_markers(&h, None).unwrap();
        assert!((mk.v - plain.v).abs() < 1e-12 && (mk.li - plain.li).abs() < 1e-12);
        for m in Marker::ALL {
            assert!(g.get(m)[base..].iter().all(|x| *x == Vec3::zeros()));
        }
    }

    fn marker_samples(ar: &[f64], nw: &[f64]) -> Vec<MorphMarkers> {
        ar.iter()
            .zip(nw)
            .map(|(&a, &n)| MorphMarkers {
                nw: n,
                ar: a,
                li: 1.0,
                v: 1.0,
                height: a * n,
                dome_area: 1.0,
            })
            .collect()
    }

    #[test]
    fn recovers_known_log_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mu, sd, rho) = ([0.2, 1.0], [0.3, 0.5], 0.6);
        let mut ar = Vec::new();
        let mut nw = Vec::new();
        for _ in 0..1000 {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            ar.push((mu[0] + sd[0] * e1).exp());
            nw.push((mu[1] + sd[1] * (rho * e1 + (1.0f64 - rho * rho).sqrt() * e2)).exp());
        }
        let model = ConditionModel::fit(&marker_samples(&ar, &nw), &[Marker::AspectRatio, Marker::NeckWidth]).unwrap();
        let (m, c) = model.log_moments();
        let truth = [[sd[0] * sd[0], rho * sd[0] * sd[1]], [rho * sd[0] * sd[1], sd[1] * sd[1]]];
        for i in 0..2 {
            assert!((m[i] - mu[i]).abs() < 0.1 * mu[i].abs());
            for j in 0..2 {
                assert!((c[(i, j)] - truth[i][j]).abs() < 0.1 * truth[i][j].abs(), "{c}");
            }
        }
    }

    #[test]
    fn independent_markers_stay_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ar: Vec<f64> = (0..1000).map(|_| rng.random_range(0.5..2.0)).collect();
        let nw: Vec<f64> = (0..1000).map(|_| rng.random_range(2.0..6.0)).collect();
        let model = ConditionModel::fit(&marker_samples(&ar, &nw), &[Marker::AspectRatio, Marker::NeckWidth]).unwrap();
        let c = &model.covariance;
        assert!((c[0][1] / (c[0][0] * c[1][1]).sqrt()).abs() < 0.1);
    }

    #[test]
    fn identical_samples_sample_constant() {
        let s = marker_samples(&[1.3; 12], &[4.0; 12]);
        let model = ConditionModel::fit(&s, &[Marker::AspectRatio]).unwrap();
        let xs = model.sample(100, 1).unwrap();
        assert!(xs.iter().all(|x| (x[0] - 1.3).abs() < 1e-6));
        assert!(ConditionModel::fit(&s[..5], &[Marker::AspectRatio]).is_err());
    }

    #[test]
    fn sampling_is_repeatable_and_matches_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ar: Vec<f64> = (0..200).map(|_| rng.random_range(0.5..2.0)).collect();
        let nw: Vec<f64> = ar.iter().map(|a| a * 2.0 + rng.random_range(0.0..1.0)).collect();
        let model = ConditionModel::fit(&marker_samples(&ar, &nw), &[Marker::AspectRatio, Marker::NeckWidth]).unwrap();
        let a = model.sample(10_000, 3).unwrap();
        assert_eq!(a, model.sample(10_000, 3).unwrap());
        assert!(a.iter().flatten().all(|x| *x > 0.0));
        let logs = DMatrix::from_fn(a.len(), 2, |r, c| a[r][c].ln());
        let (m, c) = mean_cov(&logs);
        let (mm, mc) = model.log_moments();
        for i in 0..2 {
            assert!((m[i] - mm[i]).abs() < 0.05 * mm[i].abs().max(mc[(i, i)].sqrt()));
            for j in 0..2 {
                assert!((c[(i, j)] - mc[(i, j)]).abs() < 0.05 * (mc[(i, i)] * mc[(j, j)]).sqrt());
            }
        }
        assert!(model.log_density_standardized(&a[0]).unwrap().is_finite());
    }

    #[test]
    fn model_file_round_trip() {
        let s = marker_samples(&(0..20).map(|i| 1.0 + i as f64 * 0.1).collect::<Vec<_>>(), &[3.0; 20]);
        let model = ConditionModel::fit(&s, &[Marker::AspectRatio]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        model.write(&p).unwrap();
        assert_eq!(ConditionModel::read(&p).unwrap(), model);
    }
}
