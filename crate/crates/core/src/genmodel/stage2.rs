//! Stage-II VAE over centerline parameters, conditioned on stage-I tokens.
//!
//! Each branch is encoded as `[v_local (3), ln l, φ_y (m), φ_z (m)]`, where
//! `v_local = R(t_c)ᵀ·v` expresses the branch direction relative to its
//! cross-section tangent. Decoded directions are re-normalized and lengths
//! pass through `exp`.

use nalgebra::{DMatrix, Matrix3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dual::{jacobian, Real};
use super::losses::{LOGVAR_MAX, LOGVAR_MIN};
use super::nn::{Adam, AdamConfig, Mlp};
use super::tape::{Tape, Var};
use super::{from_toml, to_toml, Checkpoint, Scaler, TrainingLog};
use crate::centerline::{rotation_from_direction, CenterlineBranch};
use crate::error::{Error, Result};
use crate::ghd::{GhdSpace, GhdTokens};
use crate::mesh::Vec3;
use crate::synthesis::{extract_cross_sections, CrossSection};
use crate::util::stream_rng;

/// One centerline per cross-section, ordered by section index.
pub type BranchSet = Vec<CenterlineBranch>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub warmup: f64,
    /// Weight of the resampled centerline-point MSE.
    pub w_points: f64,
    pub w_t: f64,
    /// Points per branch for the point MSE.
    pub samples: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            latent_dim: 8,
            hidden: 256,
            epochs: 2000,
            batch_size: 16,
            lr: 1e-3,
            beta: 1e-3,
            warmup: 0.2,
            w_points: 1.0,
            w_t: 1.0,
            samples: 16,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage2: {m}")));
        if self.latent_dim == 0 || self.hidden == 0 || self.batch_size == 0 {
            return bad("latent_dim, hidden and batch_size must be positive");
        }
        if self.samples < 2 {
            return bad("samples must be at least 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return bad("warmup must lie in [0, 1]");
        }
        for (name, w) in [("beta", self.beta), ("w_points", self.w_points), ("w_t", self.w_t)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(&format!("{name} must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn beta_at(&self, epoch: usize) -> f64 {
        let ramp = self.warmup * self.epochs as f64;
        if ramp <= 0.0 {
            self.beta
        } else {
            self.beta * ((epoch + 1) as f64 / ramp).min(1.0)
        }
    }
}

/// Cross sections of a decoded complex, sorted by index.
pub fn sections_for(space: &GhdSpace, tokens: &GhdTokens) -> Result<Vec<CrossSection>> {
    let mut s = extract_cross_sections(&space.decode(tokens)?)?;
    s.sort_by_key(|c| c.k);
    Ok(s)
}

fn features_per_branch(m: usize) -> usize {
    4 + 2 * m
}

/// Per-branch features `[R(t_c)ᵀv (3), ln l, a_y, φ_y,2.., a_z, φ_z,2..]`.
/// The first sine modes are replaced by the root-tangent slopes in the
/// section frame, `R(t_c)ᵀ t(0) ∝ (1, a_y, a_z)`; the map is invertible
/// while the branch leaves its section forwards.
fn branch_features(b: &CenterlineBranch, section: &CrossSection) -> Result<Vec<f64>> {
    features_in_frame(b, &rotation_from_direction(&section.tangent.normalize())?)
}

fn features_in_frame(b: &CenterlineBranch, r: &Matrix3<f64>) -> Result<Vec<f64>> {
    let v = r.transpose() * b.direction;
    let u = r.transpose() * b.tangent(0.0)?;
    if !(u.x > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "branch {} leaves its cross-section backwards",
            b.k
        )));
    }
    let mut f = vec![v.x, v.y, v.z, b.length.ln(), u.y / u.x];
    f.extend(&b.phi_y[1..]);
    f.push(u.z / u.x);
    f.extend(&b.phi_z[1..]);
    Ok(f)
}

/// `R(v)·x` for the minimal rotation taking `e₁` to unit `v`, with the same
/// half-turn fallback as [`rotation_from_direction`].
fn rotate_from_e1<T: Real>(v: [T; 3], x: [T; 3]) -> [T; 3] {
    let one = T::cst(1.0);
    let (a, x) = if v[0].re() < -1.0 + 1e-6 {
        ([-one, T::cst(0.0), T::cst(0.0)], [-x[0], x[1], -x[2]])
    } else {
        ([one, T::cst(0.0), T::cst(0.0)], x)
    };
    let k = cross(a, v);
    let c = dot(a, v);
    let kx = cross(k, x);
    let s = dot(k, x) / (one + c);
    [c * x[0] + kx[0] + s * k[0], c * x[1] + kx[1] + s * k[1], c * x[2] + kx[2] + s * k[2]]
}

/// `R(v)ᵀ·x`, the inverse of [`rotate_from_e1`].
fn rotate_to_e1<T: Real>(v: [T; 3], x: [T; 3]) -> [T; 3] {
    let one = T::cst(1.0);
    let flip = v[0].re() < -1.0 + 1e-6;
    let a = if flip { [-one, T::cst(0.0), T::cst(0.0)] } else { [one, T::cst(0.0), T::cst(0.0)] };
    let k = cross(a, v);
    let c = dot(a, v);
    let kx = cross(k, x);
    let s = dot(k, x) / (one + c);
    let y = [c * x[0] - kx[0] + s * k[0], c * x[1] - kx[1] + s * k[1], c * x[2] - kx[2] + s * k[2]];
    if flip {
        [-y[0], y[1], -y[2]]
    } else {
        y
    }
}

fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Raw branch features to `(v, l, φ_y, φ_z)`.
fn branch_params<T: Real>(f: &[T], m: usize, rot_tc: &Matrix3<f64>) -> ([T; 3], T, Vec<T>, Vec<T>) {
    let r = |i: usize, j: usize| T::cst(rot_tc[(i, j)]);
    let in_world = |x: [T; 3]| -> [T; 3] { std::array::from_fn(|i| r(i, 0) * x[0] + r(i, 1) * x[1] + r(i, 2) * x[2]) };
    let n = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
    let v = in_world([f[0] / n, f[1] / n, f[2] / n]);
    let l = f[3].exp();
    let t = rotate_to_e1(v, in_world([T::cst(1.0), f[4], f[4 + m]]));
    let w = T::cst(std::f64::consts::PI) / l;
    let first = |slope: T, rest: &[T]| {
        let mut p = slope / t[0] / w;
        for (i, x) in rest.iter().enumerate() {
            p = p - T::cst((i + 2) as f64) * *x;
        }
        p
    };
    let mut py = vec![first(t[1], &f[5..4 + m])];
    py.extend_from_slice(&f[5..4 + m]);
    let mut pz = vec![first(t[2], &f[5 + m..4 + 2 * m])];
    pz.extend_from_slice(&f[5 + m..4 + 2 * m]);
    (v, l, py, pz)
}

/// Raw (unstandardized) branch features to `[points (samples × 3), unit
/// tangent at 0 (3)]`.
fn branch_geometry<T: Real>(f: &[T], m: usize, rot_tc: &Matrix3<f64>, origin: &Vec3, samples: usize) -> Vec<T> {
    let (v, l, py, pz) = branch_params(f, m, rot_tc);
    let mut out = Vec::with_capacity(3 * samples + 3);
    for j in 0..samples {
        let s = j as f64 / (samples - 1) as f64;
        let (mut y, mut z) = (T::cst(0.0), T::cst(0.0));
        for i in 0..m {
            let w = T::cst(((i + 1) as f64 * std::f64::consts::PI * s).sin());
            y = y + py[i] * w;
            z = z + pz[i] * w;
        }
        let p = rotate_from_e1(v, [l * T::cst(s), y, z]);
        for c in 0..3 {
            out.push(p[c] + T::cst(origin[c]));
        }
    }
    let (mut y, mut z) = (T::cst(0.0), T::cst(0.0));
    for i in 0..m {
        let w = T::cst((i + 1) as f64 * std::f64::consts::PI) / l;
        y = y + py[i] * w;
        z = z + pz[i] * w;
    }
    let t = rotate_from_e1(v, [T::cst(1.0), y, z]);
    let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
    out.extend([t[0] / tn, t[1] / tn, t[2] / tn]);
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stage2Meta {
    latent_dim: usize,
    branch_count: usize,
    fourier_modes: usize,
    basis_checksum: String,
    features: Scaler,
    tokens: Scaler,
}

/// Encoder `[y, φ] → [μ, log σ²]`, decoder `[z, φ] → ŷ` over standardized
/// branch features `y` and standardized stage-I tokens `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeStage2 {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub branch_count: usize,
    pub fourier_modes: usize,
    pub basis_checksum: u64,
    pub features: Scaler,
    pub tokens: Scaler,
    pub config: Stage2Config,
}

impl VaeStage2 {
    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    fn per_branch(&self) -> usize {
        features_per_branch(self.fourier_modes)
    }

    fn token_row(&self, tokens: &GhdTokens) -> Result<Vec<f64>> {
        if tokens.basis_checksum() != self.basis_checksum {
            return Err(Error::Checksum {
                expected: self.basis_checksum,
                found: tokens.basis_checksum(),
            });
        }
        let flat = tokens.to_flat();
        if flat.len() != self.tokens.dim() {
            return Err(Error::DimensionMismatch(format!("{} token values for a {}-value model", flat.len(), self.tokens.dim())));
        }
        Ok(self.tokens.forward(&flat))
    }

    /// Branches for latent `z`, attached to `sections` of the complex
    /// decoded from `tokens`; pure.
    pub fn decode(&self, z: &[f64], tokens: &GhdTokens, sections: &[CrossSection]) -> Result<BranchSet> {
        if z.len() != self.latent_dim {
            return Err(Error::DimensionMismatch(format!("latent of length {} for d₂ = {}", z.len(), self.latent_dim)));
        }
        if sections.len() != self.branch_count {
            return Err(Error::DimensionMismatch(format!("{} sections for {} branches", sections.len(), self.branch_count)));
        }
        let mut row = z.to_vec();
        row.extend(self.token_row(tokens)?);
        let y = self.decoder.apply(&DMatrix::from_row_slice(1, row.len(), &row));
        let raw = self.features.inverse(&y.row(0).iter().copied().collect::<Vec<_>>());
        let f = self.per_branch();
        let m = self.fourier_modes;
        sections
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let b = &raw[k * f..(k + 1) * f];
                if !(Vec3::new(b[0], b[1], b[2]).norm() > 1e-12) || b.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("decoded branch {k}")));
                }
                let r = rotation_from_direction(&s.tangent.normalize())?;
                let (v, l, py, pz) = branch_params(b, m, &r);
                CenterlineBranch::new(s.k, l, Vec3::from(v).normalize(), s.center, py, pz)
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, tokens: &GhdTokens, sections: &[CrossSection], rng: &mut R) -> Result<BranchSet> {
        let z: Vec<f64> = (0..self.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        self.decode(&z, tokens, sections)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Stage2Meta {
            latent_dim: self.latent_dim,
            branch_count: self.branch_count,
            fourier_modes: self.fourier_modes,
            basis_checksum: format!("{:016x}", self.basis_checksum),
            features: self.features.clone(),
            tokens: self.tokens.clone(),
        };
        Ok(Checkpoint {
            kind: 2,
            config: to_toml(&self.config)?,
            meta: to_toml(&meta)?,
            networks: vec![self.encoder.clone(), self.decoder.clone()],
        }
        .to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::from_bytes(bytes)?;
        if ck.kind != 2 || ck.networks.len() != 2 {
            return Err(Error::Format("not a stage-II checkpoint".into()));
        }
        let config: Stage2Config = from_toml(&ck.config, "stage-II config")?;
        let meta: Stage2Meta = from_toml(&ck.meta, "stage-II metadata")?;
        let basis_checksum = u64::from_str_radix(&meta.basis_checksum, 16)
            .map_err(|_| Error::Format(format!("bad basis checksum {:?}", meta.basis_checksum)))?;
        let [encoder, decoder]: [Mlp; 2] = ck.networks.try_into().unwrap();
        let (y, t, d) = (meta.features.dim(), meta.tokens.dim(), meta.latent_dim);
        if y != meta.branch_count * features_per_branch(meta.fourier_modes)
            || encoder.inputs() != y + t
            || encoder.outputs() != 2 * d
            || decoder.inputs() != d + t
            || decoder.outputs() != y
        {
            return Err(Error::Format("stage-II network shapes disagree with metadata".into()));
        }
        Ok(VaeStage2 {
            encoder,
            decoder,
            latent_dim: d,
            branch_count: meta.branch_count,
            fourier_modes: meta.fourier_modes,
            basis_checksum,
            features: meta.features,
            tokens: meta.tokens,
            config,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ShapeFrame {
    rotations: Vec<Matrix3<f64>>,
    centers: Vec<Vec3>,
    tangents: Vec<Vec3>,
    /// Real centerline points, `branch × samples`.
    points: Vec<Vec<Vec3>>,
}

/// Standardized features, token conditions and per-shape section frames.
pub struct Stage2Data {
    y: DMatrix<f64>,
    phi: DMatrix<f64>,
    frames: Vec<ShapeFrame>,
}

impl Stage2Data {
    pub fn new(space: &GhdSpace, tokens: &[GhdTokens], branches: &[BranchSet], model: &VaeStage2) -> Result<Self> {
        let (rows, frames) = raw_rows(space, tokens, branches, model.fourier_modes, model.config.samples)?;
        let flat: Vec<Vec<f64>> = tokens.iter().map(|t| model.token_row(t)).collect::<Result<_>>()?;
        let phi = DMatrix::from_fn(flat.len(), model.tokens.dim(), |r, c| flat[r][c]);
        if rows[0].len() != model.features.dim() {
            return Err(Error::DimensionMismatch("branch features do not match the model".into()));
        }
        Ok(Stage2Data {
            y: model.features.matrix(&rows),
            phi,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn raw_rows(
    space: &GhdSpace,
    tokens: &[GhdTokens],
    branches: &[BranchSet],
    m: usize,
    samples: usize,
) -> Result<(Vec<Vec<f64>>, Vec<ShapeFrame>)> {
    if tokens.len() != branches.len() || tokens.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} token sets vs {} branch sets", tokens.len(), branches.len())));
    }
    tokens
        .par_iter()
        .zip(branches)
        .map(|(t, bs)| {
            let sections = sections_for(space, t)?;
            if bs.len() != sections.len() {
                return Err(Error::DimensionMismatch(format!("{} branches for {} cross-sections", bs.len(), sections.len())));
            }
            let mut row = Vec::new();
            let mut frame = ShapeFrame {
                rotations: Vec::new(),
                centers: Vec::new(),
                tangents: Vec::new(),
                points: Vec::new(),
            };
            for (b, s) in bs.iter().zip(&sections) {
                if b.k != s.k || b.mode_count() != m {
                    return Err(Error::DimensionMismatch(format!("branch {} does not fit section {} with {m} modes", b.k, s.k)));
                }
                row.extend(branch_features(b, s)?);
                frame.rotations.push(rotation_from_direction(&s.tangent.normalize())?);
                frame.centers.push(s.center);
                frame.tangents.push(s.tangent);
                frame.points.push(b.sample(samples));
            }
            Ok((row, frame))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

#[derive(Debug, Clone)]
pub struct Stage2Batch {
    pub rows: Vec<usize>,
    pub eps: DMatrix<f64>,
    /// Prior latents decoded against the same complexes for the tangent
    /// regularizer.
    pub prior_z: DMatrix<f64>,
    pub beta: f64,
}

impl Stage2Batch {
    pub fn draw<R: Rng + ?Sized>(model: &VaeStage2, rows: Vec<usize>, beta: f64, rng: &mut R) -> Self {
        let eps = DMatrix::from_fn(rows.len(), model.latent_dim, |_, _| rng.sample(StandardNormal));
        let prior_z = DMatrix::from_fn(rows.len(), model.latent_dim, |_, _| rng.sample(StandardNormal));
        Stage2Batch { rows, eps, prior_z, beta }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stage2Terms {
    pub total: f64,
    pub feature_mse: f64,
    pub point_mse: f64,
    pub kl: f64,
    pub treg: f64,
}

fn rows_of(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Loss and gradients (encoder then decoder parameters).
pub fn stage2_objective(model: &VaeStage2, data: &Stage2Data, batch: &Stage2Batch) -> Result<(Stage2Terms, Vec<DMatrix<f64>>)> {
    let cfg = &model.config;
    let d = model.latent_dim;
    let b = batch.rows.len();
    let mut t = Tape::new();
    let enc = model.encoder.bind(&mut t);
    let dec = model.decoder.bind(&mut t);
    let y = t.leaf(rows_of(&data.y, &batch.rows));
    let phi = t.leaf(rows_of(&data.phi, &batch.rows));
    let enc_in = t.concat_cols(&[y, phi]);
    let h = model.encoder.forward(&mut t, &enc, enc_in);
    let mu = t.slice_cols(h, 0, d);
    let lv = t.slice_cols(h, d, d);
    let lv = t.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    let half = t.scale(lv, 0.5);
    let sd = t.exp(half);
    let eps = t.leaf(batch.eps.clone());
    let noise = t.mul(sd, eps);
    let z = t.add(mu, noise);
    let dec_in = t.concat_cols(&[z, phi]);
    let yh = model.decoder.forward(&mut t, &dec, dec_in);

    let diff = t.sub(yh, y);
    let sq = t.square(diff);
    let mse = t.mean(sq);

    let geo = geometry_terms(model, data, &batch.rows, t.value(yh));
    let (pts_val, pts_grad, treg_rec, treg_grad) = geo?;
    let pts = t.scalar_fn(yh, pts_val, pts_grad);

    // The tangent term covers reconstructions and prior draws alike; the
    // latter are what generation decodes.
    let zp = t.leaf(batch.prior_z.clone());
    let dec_in = t.concat_cols(&[zp, phi]);
    let yp = model.decoder.forward(&mut t, &dec, dec_in);
    let (_, _, treg_prior, prior_grad) = geometry_terms(model, data, &batch.rows, t.value(yp))?;
    let treg_val = 0.5 * (treg_rec + treg_prior);
    let tr = t.scalar_fn(yh, treg_rec, treg_grad);
    let tp = t.scalar_fn(yp, treg_prior, prior_grad);
    let treg = t.add(tr, tp);
    let treg = t.scale(treg, 0.5);

    let mu2 = t.square(mu);
    let elv = t.exp(lv);
    let kl = t.add(mu2, elv);
    let kl = t.sub(kl, lv);
    let kl = t.sum(kl);
    let kl = t.add_const(kl, -((d * b) as f64));
    let kl = t.scale(kl, 0.5 / b as f64);

    let mut total: Option<Var> = None;
    for (node, w) in [(mse, 1.0), (pts, cfg.w_points), (kl, batch.beta), (treg, cfg.w_t)] {
        let s = t.scale(node, w);
        total = Some(match total {
            None => s,
            Some(acc) => t.add(acc, s),
        });
    }
    let total = total.unwrap();
    let terms = Stage2Terms {
        total: t.scalar(total),
        feature_mse: t.scalar(mse),
        point_mse: pts_val,
        kl: t.scalar(kl),
        treg: treg_val,
    };
    let g = t.backward(total);
    let mut grads = model.encoder.grads(&g, &enc);
    grads.extend(model.decoder.grads(&g, &dec));
    Ok((terms, grads))
}

/// Point MSE (mean over batch, branches, samples and coordinates) and
/// batch-mean tangent regularizer, with gradients in standardized features.
fn geometry_terms(
    model: &VaeStage2,
    data: &Stage2Data,
    rows: &[usize],
    yh: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>, f64, DMatrix<f64>)> {
    let f = model.per_branch();
    let m = model.fourier_modes;
    let samples = model.config.samples;
    let nb = model.branch_count;
    let b = rows.len();
    let pts_count = (b * nb * samples * 3) as f64;
    let per_row: Vec<(f64, Vec<f64>, f64, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|r| {
            let frame = &data.frames[rows[r]];
            let std_row: Vec<f64> = yh.row(r).iter().copied().collect();
            let raw = model.features.inverse(&std_row);
            let (mut pv, mut tv) = (0.0, 0.0);
            let mut pg = vec![0.0; nb * f];
            let mut tg = vec![0.0; nb * f];
            for k in 0..nb {
                let x = &raw[k * f..(k + 1) * f];
                let (val, jac) = jacobian(x, |xd| branch_geometry(xd, m, &frame.rotations[k], &frame.centers[k], samples));
                let mut gout = vec![0.0; val.len()];
                for j in 0..samples {
                    for c in 0..3 {
                        let e = val[3 * j + c] - frame.points[k][j][c];
                        pv += e * e / pts_count;
                        gout[3 * j + c] = 2.0 * e / pts_count;
                    }
                }
                let tc = frame.tangents[k];
                let mut tgo = vec![0.0; val.len()];
                for c in 0..3 {
                    tv += -val[3 * samples + c] * tc[c] / b as f64;
                    tgo[3 * samples + c] = -tc[c] / b as f64;
                }
                tv += 1.0 / b as f64;
                for i in 0..f {
                    let s = model.features.scale[k * f + i];
                    pg[k * f + i] = (0..val.len()).map(|o| gout[o] * jac[o][i]).sum::<f64>() * s;
                    tg[k * f + i] = (0..val.len()).map(|o| tgo[o] * jac[o][i]).sum::<f64>() * s;
                }
            }
            (pv, pg, tv, tg)
        })
        .collect();
    let width = nb * f;
    let pts_val = per_row.iter().map(|p| p.0).sum();
    let treg_val = per_row.iter().map(|p| p.2).sum();
    if !f64::is_finite(pts_val) || !f64::is_finite(treg_val) {
        return Err(Error::NonFinite("stage-II geometry terms".into()));
    }
    let pg = DMatrix::from_fn(b, width, |r, c| per_row[r].1[c]);
    let tg = DMatrix::from_fn(b, width, |r, c| per_row[r].3[c]);
    Ok((pts_val, pg, treg_val, tg))
}

pub const STAGE2_LOG_COLUMNS: [&str; 5] = ["total", "feature_mse", "point_mse", "kl", "treg"];

pub fn train_stage2(space: &GhdSpace, tokens: &[GhdTokens], branches: &[BranchSet], cfg: &Stage2Config) -> Result<(VaeStage2, TrainingLog)> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty stage-II dataset".into()));
    }
    let m = branches
        .first()
        .and_then(|bs| bs.first())
        .map(CenterlineBranch::mode_count)
        .ok_or_else(|| Error::InvalidArgument("stage-II dataset has no branches".into()))?;
    let (rows, _) = raw_rows(space, tokens, branches, m, cfg.samples)?;
    let nb = branches[0].len();
    let flat: Vec<Vec<f64>> = tokens.iter().map(GhdTokens::to_flat).collect();
    let features = Scaler::fit_per_feature(&rows)?;
    let token_scaler = Scaler::fit_shared(&flat)?;
    let mut rng = stream_rng(cfg.seed, "train2");
    let (y, tdim, h, d) = (features.dim(), token_scaler.dim(), cfg.hidden, cfg.latent_dim);
    let mut model = VaeStage2 {
        encoder: Mlp::new(&[y + tdim, h, h, 2 * d], &mut rng),
        decoder: Mlp::new(&[d + tdim, h, h, y], &mut rng),
        latent_dim: d,
        branch_count: nb,
        fourier_modes: m,
        basis_checksum: space.basis().checksum(),
        features,
        tokens: token_scaler,
        config: cfg.clone(),
    };
    let data = Stage2Data::new(space, tokens, branches, &model)?;
    let mut opt = Adam::new(AdamConfig::new(cfg.lr), &model.params());
    let mut log = TrainingLog::new(STAGE2_LOG_COLUMNS.to_vec());
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let beta = cfg.beta_at(epoch);
        let mut acc = [0.0; 5];
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Stage2Batch::draw(&model, chunk.to_vec(), beta, &mut rng);
            let (terms, grads) = stage2_objective(&model, &data, &batch)?;
            if !terms.total.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite(format!("stage-II loss at epoch {}: {terms:?}", epoch + 1)));
            }
            opt.step(model.params_mut(), &grads);
            let w = chunk.len() as f64 / tokens.len() as f64;
            for (a, v) in acc.iter_mut().zip([terms.total, terms.feature_mse, terms.point_mse, terms.kl, terms.treg]) {
                *a += w * v;
            }
        }
        log::debug!("stage2 epoch {} total {:.6e}", epoch + 1, acc[0]);
        log.rows.push(acc.to_vec());
    }
    Ok((model, log))
}
