//! Training losses in closed form, and the hand-differentiated geometry terms
//! that enter the tape as scalar nodes.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ghd::MorphEnergies;
use crate::knn::KdTree;
use crate::mesh::Vec3;

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 4.0;

/// `½ Σ (μ² + σ² − log σ² − 1)` against the standard normal.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::DimensionMismatch(format!("{} means vs {} log-variances", mu.len(), logvar.len())));
    }
    Ok(0.5 * mu.iter().zip(logvar).map(|(m, l)| m * m + l.exp() - l - 1.0).sum::<f64>())
}

/// `z = μ + exp(½ log σ²)·ε` with the log-variance clamped to its safe range.
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, l), e)| m + (0.5 * l.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp() * e)
        .collect()
}

pub fn reparameterized_sample<R: Rng + ?Sized>(mu: &[f64], logvar: &[f64], rng: &mut R) -> Vec<f64> {
    let eps: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize(mu, logvar, &eps)
}

/// Population mean and variance of the two morphing energies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyStats {
    /// `[E_r, E_l]`
    pub mean: [f64; 2],
    pub var: [f64; 2],
}

impl EnergyStats {
    pub fn new(mean: [f64; 2], var: [f64; 2]) -> Result<Self> {
        if var.iter().any(|v| !(*v > 0.0 && v.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(format!("energy variance must be positive and finite, got {var:?}")));
        }
        Ok(EnergyStats { mean, var })
    }

    /// Population (biased) statistics; `var_floor` guards a collapsed batch.
    pub fn of(energies: &[MorphEnergies], var_floor: f64) -> Result<Self> {
        if energies.is_empty() {
            return Err(Error::InvalidArgument("energy statistics of an empty population".into()));
        }
        let n = energies.len() as f64;
        let pick = |e: &MorphEnergies, i: usize| if i == 0 { e.e_r } else { e.e_l };
        let mut mean = [0.0; 2];
        let mut var = [0.0; 2];
        for i in 0..2 {
            mean[i] = energies.iter().map(|e| pick(e, i)).sum::<f64>() / n;
            var[i] = energies.iter().map(|e| (pick(e, i) - mean[i]).powi(2)).sum::<f64>() / n + var_floor;
        }
        Self::new(mean, var)
    }
}

/// `Σ_i KL(N(μʳ, σʳ²) ‖ N(μˢ, σˢ²))` over both energies.
pub fn mea_loss(real: &EnergyStats, synthetic: &EnergyStats) -> f64 {
    (0..2)
        .map(|i| {
            let (vr, vs) = (real.var[i], synthetic.var[i]);
            let dm = real.mean[i] - synthetic.mean[i];
            0.5 * (vs / vr).ln() + (vr + dm * dm) / (2.0 * vs) - 0.5
        })
        .sum()
}

/// `(∂/∂μˢ, ∂/∂σˢ²)` of [`mea_loss`] per energy.
pub fn mea_loss_grad(real: &EnergyStats, synthetic: &EnergyStats) -> [(f64, f64); 2] {
    let mut out = [(0.0, 0.0); 2];
    for (i, o) in out.iter_mut().enumerate() {
        let (vr, vs) = (real.var[i], synthetic.var[i]);
        let dm = real.mean[i] - synthetic.mean[i];
        *o = (-dm / vs, 0.5 / vs - (vr + dm * dm) / (2.0 * vs * vs));
    }
    out
}

/// MSE between standardized requested and recalled conditions.
pub fn cond_loss(requested: &[Vec<f64>], recalled: &[Vec<f64>]) -> Result<f64> {
    if requested.len() != recalled.len() || requested.iter().zip(recalled).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::DimensionMismatch("requested and recalled conditions differ in shape".into()));
    }
    let count: usize = requested.iter().map(Vec::len).sum();
    if count == 0 {
        return Ok(0.0);
    }
    let s: f64 = requested.iter().zip(recalled).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2))).sum();
    Ok(s / count as f64)
}

/// `Σ_k (1 − ⟨t_k, t_c,k⟩)`.
pub fn treg_loss(tangents: &[Vec3], tc: &[Vec3]) -> Result<f64> {
    if tangents.len() != tc.len() {
        return Err(Error::DimensionMismatch(format!("{} tangents vs {} sections", tangents.len(), tc.len())));
    }
    for t in tangents.iter().chain(tc) {
        if (t.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("tangent of length {} is not unit", t.norm())));
        }
    }
    Ok(tangents.iter().zip(tc).map(|(t, c)| 1.0 - t.dot(c)).sum())
}

/// Precomputed geometry of a reconstruction target.
#[derive(Debug)]
pub struct ChamferTarget {
    vertices: Vec<Vec3>,
    vertex_tree: KdTree,
    centroids: Vec<Vec3>,
    normals: Vec<Vec3>,
    centroid_tree: KdTree,
}

impl ChamferTarget {
    pub fn new(vertices: Vec<Vec3>, faces: &[[usize; 3]]) -> Self {
        let (centroids, normals, _) = face_geometry(&vertices, faces);
        ChamferTarget {
            vertex_tree: KdTree::new(&vertices),
            centroid_tree: KdTree::new(&centroids),
            vertices,
            centroids,
            normals,
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }
}

/// Nearest-neighbour pairings used by [`reconstruction_chamfer`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChamferPairs {
    v_ab: Vec<usize>,
    v_ba: Vec<usize>,
    f_ab: Vec<usize>,
    f_ba: Vec<usize>,
}

/// `(centroids, unit normals, |cross|)` per face.
fn face_geometry(v: &[Vec3], faces: &[[usize; 3]]) -> (Vec<Vec3>, Vec<Vec3>, Vec<f64>) {
    let mut c = Vec::with_capacity(faces.len());
    let mut n = Vec::with_capacity(faces.len());
    let mut len = Vec::with_capacity(faces.len());
    for f in faces {
        let (a, b, d) = (v[f[0]], v[f[1]], v[f[2]]);
        c.push((a + b + d) / 3.0);
        let x = (b - a).cross(&(d - a));
        let l = x.norm();
        n.push(if l > 0.0 { x / l } else { Vec3::zeros() });
        len.push(l);
    }
    (c, n, len)
}

/// `CD_v + CD_n` between decoded vertices (sharing the target's faces) and
/// the target, in the units of the input, with the gradient with respect to
/// the decoded vertices. Pairings are recomputed unless `frozen` is given;
/// the pairings used are returned either way.
pub fn reconstruction_chamfer(
    decoded: &[Vec3],
    faces: &[[usize; 3]],
    target: &ChamferTarget,
    frozen: Option<&ChamferPairs>,
) -> (f64, Vec<Vec3>, ChamferPairs) {
    let (centroids, normals, cross_len) = face_geometry(decoded, faces);
    let pairs = match frozen {
        Some(p) => p.clone(),
        None => {
            let vt = KdTree::new(decoded);
            let ct = KdTree::new(&centroids);
            ChamferPairs {
                v_ab: decoded.iter().map(|p| target.vertex_tree.nearest(p).0).collect(),
                v_ba: target.vertices.iter().map(|p| vt.nearest(p).0).collect(),
                f_ab: centroids.iter().map(|p| target.centroid_tree.nearest(p).0).collect(),
                f_ba: target.centroids.iter().map(|p| ct.nearest(p).0).collect(),
            }
        }
    };
    let mut grad = vec![Vec3::zeros(); decoded.len()];

    let (na, nb) = (decoded.len() as f64, target.vertices.len() as f64);
    let (mut sa, mut sb) = (0.0, 0.0);
    for (i, &j) in pairs.v_ab.iter().enumerate() {
        let d = decoded[i] - target.vertices[j];
        sa += d.norm_squared();
        grad[i] += d / na;
    }
    for (j, &i) in pairs.v_ba.iter().enumerate() {
        let d = decoded[i] - target.vertices[j];
        sb += d.norm_squared();
        grad[i] += d / nb;
    }
    let cd_v = 0.5 * (sa / na + sb / nb);

    let (fa, fb) = (faces.len() as f64, target.normals.len() as f64);
    let mut gn = vec![Vec3::zeros(); faces.len()];
    let (mut ta, mut tb) = (0.0, 0.0);
    for (i, &j) in pairs.f_ab.iter().enumerate() {
        let d = normals[i] - target.normals[j];
        ta += d.norm_squared();
        gn[i] += d / fa;
    }
    for (j, &i) in pairs.f_ba.iter().enumerate() {
        let d = normals[i] - target.normals[j];
        tb += d.norm_squared();
        gn[i] += d / fb;
    }
    let cd_n = 0.5 * (ta / fa + tb / fb);

    // n = x/|x| with x = (p1 − p0) × (p2 − p0)
    for (f, face) in faces.iter().enumerate() {
        if cross_len[f] == 0.0 {
            continue;
        }
        let n = normals[f];
        let gx = (gn[f] - n * n.dot(&gn[f])) / cross_len[f];
        let (p0, p1, p2) = (decoded[face[0]], decoded[face[1]], decoded[face[2]]);
        let (e1, e2) = (p1 - p0, p2 - p0);
        let g1 = e2.cross(&gx);
        let g2 = gx.cross(&e1);
        grad[face[1]] += g1;
        grad[face[2]] += g2;
        grad[face[0]] -= g1 + g2;
    }
    (cd_v + cd_n, grad, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalmetrics;
    use crate::mesh::primitives::icosphere;
    use crate::mesh::TriangleMesh;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_standard_normal(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
        assert_eq!(kl_standard_normal(&[1.0], &[0.0]).unwrap(), 0.5);
        assert!(kl_standard_normal(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn mea_closed_forms() {
        let unit = EnergyStats::new([0.0, 3.0], [1.0, 2.0]).unwrap();
        assert_eq!(mea_loss(&unit, &unit), 0.0);
        let real = EnergyStats::new([0.0, 0.0], [1.0, 1.0]).unwrap();
        let shifted = EnergyStats::new([1.0, 0.0], [1.0, 1.0]).unwrap();
        assert!((mea_loss(&real, &shifted) - 0.5).abs() < 1e-15);
        // σˢ doubled: variance ×4.
        let wide = EnergyStats::new([0.0, 0.0], [4.0, 1.0]).unwrap();
        let want = 2f64.ln() + 0.125 - 0.5;
        assert!((mea_loss(&real, &wide) - want).abs() < 1e-15);
        assert!(EnergyStats::new([0.0, 0.0], [0.0, 1.0]).is_err());
    }

    #[test]
    fn mea_gradient_matches_differences() {
        let real = EnergyStats::new([0.3, 2.0], [0.5, 1.5]).unwrap();
        let syn = EnergyStats::new([0.7, 1.2], [0.9, 0.4]).unwrap();
        let g = mea_loss_grad(&real, &syn);
        let h = 1e-6;
        for i in 0..2 {
            let (mut p, mut m) = (syn, syn);
            p.mean[i] += h;
            m.mean[i] -= h;
            assert!(((mea_loss(&real, &p) - mea_loss(&real, &m)) / (2.0 * h) - g[i].0).abs() < 1e-8);
            let (mut p, mut m) = (syn, syn);
            p.var[i] += h;
            m.var[i] -= h;
            assert!(((mea_loss(&real, &p) - mea_loss(&real, &m)) / (2.0 * h) - g[i].1).abs() < 1e-8);
        }
    }

    #[test]
    fn cond_and_treg_closed_forms() {
        assert_eq!(cond_loss(&[vec![0.4, -1.0]], &[vec![0.4, -1.0]]).unwrap(), 0.0);
        assert_eq!(cond_loss(&[vec![0.0]], &[vec![1.0]]).unwrap(), 1.0);
        let x = Vec3::x();
        assert_eq!(treg_loss(&[x], &[x]).unwrap(), 0.0);
        assert_eq!(treg_loss(&[Vec3::y()], &[x]).unwrap(), 1.0);
        assert_eq!(treg_loss(&[-x, -x], &[x, x]).unwrap(), 4.0);
        assert!(treg_loss(&[x * 2.0], &[x]).is_err());
    }

    #[test]
    fn reparameterization_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| reparameterized_sample(&[0.0], &[0.0], &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.02);
        // −∞ is clamped at −20: the noise scale is e^(−10).
        let z = reparameterize(&[1.5], &[-1e9], &[3.0]);
        assert_eq!(z[0], 1.5 + (-10f64).exp() * 3.0);
        let a = reparameterized_sample(&[0.2; 3], &[0.1; 3], &mut ChaCha8Rng::seed_from_u64(3));
        let b = reparameterized_sample(&[0.2; 3], &[0.1; 3], &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    fn bumpy(mesh: &TriangleMesh, amp: f64) -> Vec<Vec3> {
        mesh.vertices().iter().map(|p| p * (1.0 + amp * (3.0 * p.x).sin() * p.y.cos())).collect()
    }

    #[test]
    fn reconstruction_chamfer_matches_metrics_and_differences() {
        let sphere = icosphere(1.0, 1).unwrap();
        let target_v = bumpy(&sphere, 0.2);
        let target = ChamferTarget::new(target_v.clone(), sphere.faces());
        let decoded = bumpy(&sphere, -0.1);
        let (value, grad, pairs) = reconstruction_chamfer(&decoded, sphere.faces(), &target, None);

        // Brute-force oracle for both terms.
        let brute = |a: &[Vec3], b: &[Vec3]| {
            let one = |x: &[Vec3], y: &[Vec3]| {
                x.iter().map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
            };
            0.5 * (one(a, b) + one(b, a))
        };
        let normals = |v: &[Vec3]| -> (Vec<Vec3>, Vec<Vec3>) {
            sphere
                .faces()
                .iter()
                .map(|f| {
                    let n = (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]])).normalize();
                    ((v[f[0]] + v[f[1]] + v[f[2]]) / 3.0, n)
                })
                .unzip()
        };
        let (ca, na) = normals(&decoded);
        let (cb, nb) = normals(&target_v);
        let pair_term = |c1: &[Vec3], n1: &[Vec3], c2: &[Vec3], n2: &[Vec3]| {
            c1.iter()
                .zip(n1)
                .map(|(c, n)| {
                    let j = (0..c2.len()).min_by(|&x, &y| (c - c2[x]).norm_squared().total_cmp(&(c - c2[y]).norm_squared())).unwrap();
                    (n - n2[j]).norm_squared()
                })
                .sum::<f64>()
                / c1.len() as f64
        };
        let want = brute(&decoded, &target_v) + 0.5 * (pair_term(&ca, &na, &cb, &nb) + pair_term(&cb, &nb, &ca, &na));
        assert!((value - want).abs() < 1e-12, "{value} vs {want}");

        let h = 1e-6;
        for i in [0, 5, 17, 33] {
            for c in 0..3 {
                let (mut p, mut m) = (decoded.clone(), decoded.clone());
                p[i][c] += h;
                m[i][c] -= h;
                let fp = reconstruction_chamfer(&p, sphere.faces(), &target, Some(&pairs)).0;
                let fm = reconstruction_chamfer(&m, sphere.faces(), &target, Some(&pairs)).0;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - grad[i][c]).abs() < 1e-6 * grad[i][c].abs().max(1e-3), "{fd} vs {}", grad[i][c]);
            }
        }

        // Same tessellation and normalization: agrees with the metric module.
        let self_target = ChamferTarget::new(decoded.clone(), sphere.faces());
        assert_eq!(reconstruction_chamfer(&decoded, sphere.faces(), &self_target, None).0, 0.0);
        let ma = sphere.with_vertices(decoded.clone()).unwrap();
        let mb = sphere.with_vertices(target_v.clone()).unwrap();
        let (va, vb) = (evalmetrics::normalized_vertices(&ma).unwrap(), evalmetrics::normalized_vertices(&mb).unwrap());
        let tn = ChamferTarget::new(vb, sphere.faces());
        let v = reconstruction_chamfer(&va, sphere.faces(), &tn, None).0;
        let want = evalmetrics::cd_v(&ma, &mb).unwrap() + evalmetrics::cd_n(&ma, &mb).unwrap();
        assert!((v - want).abs() < 1e-12);
    }
}
