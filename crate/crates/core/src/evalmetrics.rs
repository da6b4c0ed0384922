//! Cohort quality metrics: vertex Chamfer (CD_v), face-normal Chamfer
//! (CD_n), total mutual difference (TMD) and condition accuracy (CA).
//!
//! Shapes are normalized to zero centroid and unit RMS radius before any
//! comparison. Reports carry the scale factors applied to each column.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ghd::chamfer;
use crate::knn::KdTree;
use crate::mesh::{point_centroid, surface_measures, TriangleMesh, Vec3};

pub const CD_V_SCALE: f64 = 1e4;
pub const CD_N_SCALE: f64 = 1e2;
pub const NORMALIZATION: &str = "centroid at origin, unit RMS vertex radius";

/// Translation and scale that bring `points` to zero centroid and unit RMS
/// radius.
pub fn normalization(points: &[Vec3]) -> Result<(Vec3, f64)> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty mesh".into()));
    }
    let c = point_centroid(points);
    let rms = (points.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / points.len() as f64).sqrt();
    if !(rms > 0.0) {
        return Err(Error::Degenerate("mesh has zero extent".into()));
    }
    Ok((c, 1.0 / rms))
}

pub fn normalized_vertices(mesh: &TriangleMesh) -> Result<Vec<Vec3>> {
    let (c, s) = normalization(mesh.vertices())?;
    Ok(mesh.vertices().iter().map(|p| (p - c) * s).collect())
}

pub fn cd_v(a: &TriangleMesh, b: &TriangleMesh) -> Result<f64> {
    Ok(chamfer(&normalized_vertices(a)?, &normalized_vertices(b)?)?.value)
}

fn face_samples(mesh: &TriangleMesh) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if mesh.face_count() == 0 {
        return Err(Error::InvalidArgument("mesh has no faces".into()));
    }
    let v = normalized_vertices(mesh)?;
    let centroids = mesh.faces().iter().map(|f| (v[f[0]] + v[f[1]] + v[f[2]]) / 3.0).collect();
    let normals = surface_measures(mesh)?.into_iter().map(|m| m.normal).collect();
    Ok((centroids, normals))
}

/// Each face is paired with the face of the other mesh whose centroid is
/// nearest; the metric averages `‖nₐ − n_b‖²` over both directions.
pub fn cd_n(a: &TriangleMesh, b: &TriangleMesh) -> Result<f64> {
    let (ca, na) = face_samples(a)?;
    let (cb, nb) = face_samples(b)?;
    let one_way = |c: &[Vec3], n: &[Vec3], tree: &KdTree, other: &[Vec3]| {
        c.iter().zip(n).map(|(p, ni)| (ni - other[tree.nearest(p).0]).norm_squared()).sum::<f64>() / c.len() as f64
    };
    let (ta, tb) = (KdTree::new(&ca), KdTree::new(&cb));
    Ok(0.5 * (one_way(&ca, &na, &tb, &nb) + one_way(&cb, &nb, &ta, &na)))
}

/// Mean over shapes of the mean CD_v to every other shape.
pub fn tmd(cohort: &[TriangleMesh]) -> Result<f64> {
    let k = cohort.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("TMD needs at least 2 shapes, got {k}")));
    }
    let norm: Vec<Vec<Vec3>> = cohort.iter().map(normalized_vertices).collect::<Result<_>>()?;
    let mut total = 0.0;
    for i in 0..k {
        let mut row = 0.0;
        for j in 0..k {
            if i != j {
                row += chamfer(&norm[i], &norm[j])?.value;
            }
        }
        total += row / (k - 1) as f64;
    }
    Ok(total / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionAccuracy {
    /// Mean relative L2 error in percent.
    pub percent: f64,
    pub evaluated: usize,
    /// Pairs skipped because the requested vector is zero after scaling.
    pub excluded: usize,
}

/// Mean of `‖(recalled − requested)/s‖ / ‖requested/s‖ · 100` with
/// per-marker scales `s`.
pub fn condition_accuracy(requested: &[Vec<f64>], recalled: &[Vec<f64>], scales: &[f64]) -> Result<ConditionAccuracy> {
    if requested.len() != recalled.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} requested vs {} recalled condition vectors",
            requested.len(),
            recalled.len()
        )));
    }
    if scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("condition scales must be positive".into()));
    }
    let (mut sum, mut evaluated, mut excluded) = (0.0, 0, 0);
    for (q, r) in requested.iter().zip(recalled) {
        if q.len() != scales.len() || r.len() != scales.len() {
            return Err(Error::DimensionMismatch("condition vector length".into()));
        }
        let den: f64 = q.iter().zip(scales).map(|(x, s)| (x / s).powi(2)).sum::<f64>().sqrt();
        if den == 0.0 {
            excluded += 1;
            continue;
        }
        let num: f64 = q.iter().zip(r).zip(scales).map(|((x, y), s)| ((y - x) / s).powi(2)).sum::<f64>().sqrt();
        sum += num / den;
        evaluated += 1;
    }
    Ok(ConditionAccuracy {
        percent: if evaluated == 0 { 0.0 } else { 100.0 * sum / evaluated as f64 },
        evaluated,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMetrics {
    pub a: String,
    pub b: String,
    /// Scaled by [`CD_V_SCALE`].
    pub cd_v: f64,
    /// Scaled by [`CD_N_SCALE`].
    pub cd_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub cohort_a: String,
    pub cohort_b: String,
    pub normalization: String,
    pub cd_v_scale: f64,
    pub cd_n_scale: f64,
    pub tmd_scale: f64,
    pub cd_v: f64,
    pub cd_n: f64,
    /// TMD of cohort b.
    pub tmd: f64,
    pub ca_percent: Option<f64>,
    pub ca_excluded: usize,
    pub pairs: Vec<PairMetrics>,
}

impl MetricReport {
    /// Aggregates the given pairings; `ca` is optional because it needs
    /// requested conditions.
    pub fn build(
        cohort_a: &str,
        cohort_b: &str,
        a: &[(String, TriangleMesh)],
        b: &[(String, TriangleMesh)],
        pairing: &[(usize, usize)],
        ca: Option<ConditionAccuracy>,
    ) -> Result<Self> {
        if pairing.is_empty() {
            return Err(Error::InvalidArgument("no shape pairs to evaluate".into()));
        }
        let mut pairs = Vec::with_capacity(pairing.len());
        for &(i, j) in pairing {
            pairs.push(PairMetrics {
                a: a[i].0.clone(),
                b: b[j].0.clone(),
                cd_v: cd_v(&a[i].1, &b[j].1)? * CD_V_SCALE,
                cd_n: cd_n(&a[i].1, &b[j].1)? * CD_N_SCALE,
            });
        }
        let mean = |f: fn(&PairMetrics) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
        let meshes: Vec<TriangleMesh> = b.iter().map(|(_, m)| m.clone()).collect();
        Ok(MetricReport {
            cohort_a: cohort_a.into(),
            cohort_b: cohort_b.into(),
            normalization: NORMALIZATION.into(),
            cd_v_scale: CD_V_SCALE,
            cd_n_scale: CD_N_SCALE,
            tmd_scale: CD_V_SCALE,
            cd_v: mean(|p| p.cd_v),
            cd_n: mean(|p| p.cd_n),
            tmd: tmd(&meshes)? * CD_V_SCALE,
            ca_percent: ca.map(|c| c.percent),
            ca_excluded: ca.map_or(0, |c| c.excluded),
            pairs,
        })
    }

    /// Writes `<stem>.csv` (summary row), `<stem>_pairs.csv` and
    /// `<stem>.toml`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut csv = Vec::new();
        writeln!(csv, "cohort_a,cohort_b,CD_v,CD_n,TMD,CA").unwrap();
        let ca = self.ca_percent.map_or(String::new(), |c| format!("{c:?}"));
        writeln!(csv, "{},{},{:?},{:?},{:?},{ca}", self.cohort_a, self.cohort_b, self.cd_v, self.cd_n, self.tmd).unwrap();
        let p = dir.join(format!("{stem}.csv"));
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;

        let mut rows = Vec::new();
        writeln!(rows, "a,b,CD_v,CD_n").unwrap();
        for r in &self.pairs {
            writeln!(rows, "{},{},{:?},{:?}", r.a, r.b, r.cd_v, r.cd_n).unwrap();
        }
        let p = dir.join(format!("{stem}_pairs.csv"));
        std::fs::write(&p, rows).map_err(|e| Error::io(&p, e))?;

        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        let p = dir.join(format!("{stem}.toml"));
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn jittered(seed: u64) -> TriangleMesh {
        let m = primitives::icosphere(1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = m
            .vertices()
            .iter()
            .map(|p| p * rng.random_range(0.8..1.2) + Vec3::new(rng.random_range(-0.1..0.1), 0.0, 0.0))
            .collect();
        m.with_vertices(v).unwrap()
    }

    #[test]
    fn identical_and_shifted_meshes() {
        let a = jittered(1);
        assert_eq!(cd_v(&a, &a).unwrap(), 0.0);
        assert_eq!(cd_n(&a, &a).unwrap(), 0.0);
        let shifted = a.translated(&Vec3::new(4.0, -2.0, 7.0)).scaled(3.0);
        assert!(cd_v(&a, &shifted).unwrap() < 1e-12);
    }

    #[test]
    fn flipped_orientation_gives_four() {
        let a = jittered(2);
        assert!((cd_n(&a, &a.flipped()).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let (a, b) = (jittered(3), jittered(4));
        assert_eq!(cd_v(&a, &b).unwrap(), cd_v(&b, &a).unwrap());
        assert!(cd_n(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn tmd_edge_cases() {
        let a = jittered(5);
        assert_eq!(tmd(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        let b = jittered(6);
        assert_eq!(tmd(&[a.clone(), b.clone()]).unwrap(), cd_v(&a, &b).unwrap());
        assert!(tmd(&[a]).is_err());
    }

    #[test]
    fn condition_accuracy_cases() {
        let q = vec![vec![2.0], vec![0.0]];
        let r = vec![vec![2.2], vec![1.0]];
        let ca = condition_accuracy(&q, &r, &[0.5]).unwrap();
        assert!((ca.percent - 10.0).abs() < 1e-12);
        assert_eq!((ca.evaluated, ca.excluded), (1, 1));
        assert_eq!(condition_accuracy(&q[..1], &q[..1], &[1.0]).unwrap().percent, 0.0);
    }

    #[test]
    fn report_files() {
        let cohort: Vec<(String, TriangleMesh)> = (0..3).map(|i| (format!("s{i}"), jittered(i))).collect();
        let r = MetricReport::build("real", "gen", &cohort, &cohort, &[(0, 1), (1, 2), (2, 0)], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), "eval").unwrap();
        let text = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert!(text.starts_with("cohort_a,cohort_b,CD_v,CD_n,TMD,CA\n"));
        assert!(dir.path().join("eval.toml").exists());
    }
}
