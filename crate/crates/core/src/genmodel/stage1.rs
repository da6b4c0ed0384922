//! Stage-I VAE over GHD tokens, optionally conditioned on markers.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{mea_loss, mea_loss_grad, reconstruction_chamfer, ChamferPairs, ChamferTarget, EnergyStats, LOGVAR_MAX, LOGVAR_MIN};
use super::nn::{Adam, AdamConfig, Mlp};
use super::tape::{Tape, Var};
use super::{from_toml, to_toml, Checkpoint, Scaler, TrainingLog};
use crate::error::{Error, Result};
use crate::ghd::{EnergyModel, GhdSpace, GhdTokens, MorphEnergies};
use crate::markers::{ConditionModel, Marker, MarkerTopology, MorphMarkers};
use crate::mesh::Vec3;
use crate::util::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Prior samples per step feeding MEA and the condition loss.
    pub prior_batch: usize,
    pub lr: f64,
    pub beta: f64,
    /// Fraction of epochs over which β ramps linearly from 0.
    pub warmup: f64,
    pub w_cd: f64,
    pub w_mea: f64,
    pub w_cond: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            latent_dim: 16,
            hidden: 256,
            epochs: 2000,
            batch_size: 16,
            prior_batch: 16,
            lr: 1e-3,
            beta: 1e-3,
            warmup: 0.2,
            w_cd: 1.0,
            w_mea: 0.1,
            w_cond: 1.0,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage1: {m}")));
        if self.latent_dim == 0 || self.hidden == 0 || self.batch_size == 0 {
            return bad("latent_dim, hidden and batch_size must be positive");
        }
        if self.prior_batch < 16 {
            return bad("prior_batch must be at least 16");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return bad("warmup must lie in [0, 1]");
        }
        for (name, w) in [("beta", self.beta), ("w_cd", self.w_cd), ("w_mea", self.w_mea), ("w_cond", self.w_cond)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(&format!("{name} must be nonnegative"));
            }
        }
        Ok(())
    }

    /// β after linear warm-up, for a zero-based epoch.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        let ramp = self.warmup * self.epochs as f64;
        if ramp <= 0.0 {
            self.beta
        } else {
            self.beta * ((epoch + 1) as f64 / ramp).min(1.0)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stage1Meta {
    latent_dim: usize,
    mode_count: usize,
    basis_checksum: String,
    scaler: Scaler,
    condition: Option<ConditionModel>,
}

/// Encoder `[x, λ] → [μ, log σ²]`, decoder `[z, λ] → x̂`, where `x` are
/// centered, scaled row-major tokens and `λ` standardized log markers.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeStage1 {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub mode_count: usize,
    pub basis_checksum: u64,
    pub scaler: Scaler,
    pub condition: Option<ConditionModel>,
    pub config: Stage1Config,
}

impl VaeStage1 {
    pub fn new<R: Rng + ?Sized>(cfg: &Stage1Config, scaler: Scaler, basis_checksum: u64, rng: &mut R) -> Self {
        let dim = scaler.dim();
        let (h, d) = (cfg.hidden, cfg.latent_dim);
        VaeStage1 {
            encoder: Mlp::new(&[dim, h, h, 2 * d], rng),
            decoder: Mlp::new(&[d, h, h, dim], rng),
            latent_dim: d,
            mode_count: dim / 3,
            basis_checksum,
            scaler,
            condition: None,
            config: cfg.clone(),
        }
    }

    /// Conditional copy whose λ input columns start at zero, so it computes
    /// exactly what `self` does until trained.
    pub fn with_condition(&self, condition: ConditionModel) -> Result<Self> {
        if self.condition.is_some() {
            return Err(Error::InvalidArgument("model is already conditional".into()));
        }
        condition.validate()?;
        let c = condition.dim();
        let widen = |net: &Mlp| {
            let mut net = net.clone();
            let w = &net.layers[0].w;
            let mut wide = DMatrix::zeros(w.nrows() + c, w.ncols());
            wide.rows_mut(0, w.nrows()).copy_from(w);
            net.layers[0].w = wide;
            net
        };
        Ok(VaeStage1 {
            encoder: widen(&self.encoder),
            decoder: widen(&self.decoder),
            condition: Some(condition),
            ..self.clone()
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.condition.as_ref().map_or(0, ConditionModel::dim)
    }

    pub fn token_dim(&self) -> usize {
        self.scaler.dim()
    }

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

    fn standardized_condition(&self, lambda: Option<&[f64]>) -> Result<Vec<f64>> {
        match (&self.condition, lambda) {
            (None, None) => Ok(Vec::new()),
            (None, Some(_)) => Err(Error::InvalidArgument("unconditional model given a condition".into())),
            (Some(_), None) => Err(Error::InvalidArgument("conditional model needs a condition".into())),
            (Some(cm), Some(l)) => {
                if l.len() != cm.dim() || l.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                    return Err(Error::InvalidArgument(format!("condition {l:?} must hold {} positive markers", cm.dim())));
                }
                Ok(cm.standardize(l))
            }
        }
    }

    /// Posterior mean and log-variance for registered tokens.
    pub fn encode(&self, tokens: &GhdTokens, lambda: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_tokens(tokens)?;
        let mut row = self.scaler.forward(&tokens.to_flat());
        row.extend(self.standardized_condition(lambda)?);
        let out = self.encoder.apply(&DMatrix::from_row_slice(1, row.len(), &row));
        let d = self.latent_dim;
        Ok((
            (0..d).map(|i| out[(0, i)]).collect(),
            (0..d).map(|i| out[(0, d + i)].clamp(LOGVAR_MIN, LOGVAR_MAX)).collect(),
        ))
    }

    /// Tokens for a latent code; pure.
    pub fn decode(&self, z: &[f64], lambda: Option<&[f64]>) -> Result<GhdTokens> {
        if z.len() != self.latent_dim {
            return Err(Error::DimensionMismatch(format!("latent of length {} for d = {}", z.len(), self.latent_dim)));
        }
        let mut row = z.to_vec();
        row.extend(self.standardized_condition(lambda)?);
        let out = self.decoder.apply(&DMatrix::from_row_slice(1, row.len(), &row));
        self.tokens_from_row(out.row(0).iter().copied().collect::<Vec<_>>().as_slice())
    }

    fn tokens_from_row(&self, row: &[f64]) -> Result<GhdTokens> {
        let flat = self.scaler.inverse(row);
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("decoded tokens".into()));
        }
        GhdTokens::from_flat(&flat, self.basis_checksum)
    }

    fn check_tokens(&self, tokens: &GhdTokens) -> Result<()> {
        if tokens.basis_checksum() != self.basis_checksum {
            return Err(Error::Checksum {
                expected: self.basis_checksum,
                found: tokens.basis_checksum(),
            });
        }
        if tokens.mode_count() != self.mode_count {
            return Err(Error::DimensionMismatch(format!("{} tokens for a {}-mode model", tokens.mode_count(), self.mode_count)));
        }
        Ok(())
    }

    /// Prior samples `(tokens, condition)`. Conditional models draw λ from
    /// their condition model unless `lambda` fixes it.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, lambda: Option<&[f64]>, rng: &mut R) -> Result<Vec<(GhdTokens, Option<Vec<f64>>)>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let z: Vec<f64> = (0..self.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
            let l = match (&self.condition, lambda) {
                (Some(cm), None) => Some(cm.sample_with(rng, 1)?.remove(0)),
                (_, l) => l.map(<[f64]>::to_vec),
            };
            out.push((self.decode(&z, l.as_deref())?, l));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Stage1Meta {
            latent_dim: self.latent_dim,
            mode_count: self.mode_count,
            basis_checksum: format!("{:016x}", self.basis_checksum),
            scaler: self.scaler.clone(),
            condition: self.condition.clone(),
        };
        Ok(Checkpoint {
            kind: 1,
            config: to_toml(&self.config)?,
            meta: to_toml(&meta)?,
            networks: vec![self.encoder.clone(), self.decoder.clone()],
        }
        .to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::from_bytes(bytes)?;
        if ck.kind != 1 || ck.networks.len() != 2 {
            return Err(Error::Format("not a stage-I checkpoint".into()));
        }
        let config: Stage1Config = from_toml(&ck.config, "stage-I config")?;
        let meta: Stage1Meta = from_toml(&ck.meta, "stage-I metadata")?;
        let basis_checksum = u64::from_str_radix(&meta.basis_checksum, 16)
            .map_err(|_| Error::Format(format!("bad basis checksum {:?}", meta.basis_checksum)))?;
        let [encoder, decoder]: [Mlp; 2] = ck.networks.try_into().unwrap();
        let c = meta.condition.as_ref().map_or(0, ConditionModel::dim);
        let (t, d) = (meta.scaler.dim(), meta.latent_dim);
        if encoder.inputs() != t + c || encoder.outputs() != 2 * d || decoder.inputs() != d + c || decoder.outputs() != t || t != 3 * meta.mode_count {
            return Err(Error::Format("stage-I network shapes disagree with metadata".into()));
        }
        Ok(VaeStage1 {
            encoder,
            decoder,
            latent_dim: d,
            mode_count: meta.mode_count,
            basis_checksum,
            scaler: meta.scaler,
            condition: meta.condition,
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

/// Everything the objective needs besides the network: decoded real shapes,
/// their markers, and precomputed geometry.
pub struct Stage1Data<'a> {
    space: &'a GhdSpace,
    x: DMatrix<f64>,
    lambda: Option<DMatrix<f64>>,
    targets: Vec<ChamferTarget>,
    energy: EnergyModel,
    topology: Option<MarkerTopology>,
    real_stats: Option<EnergyStats>,
}

impl<'a> Stage1Data<'a> {
    /// `model` supplies the scaler and condition model. Real energy
    /// statistics are needed only when `need_mea`.
    pub fn new(space: &'a GhdSpace, dataset: &[GhdTokens], model: &VaeStage1, need_mea: bool) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty stage-I dataset".into()));
        }
        for t in dataset {
            model.check_tokens(t)?;
        }
        if space.basis().checksum() != model.basis_checksum {
            return Err(Error::Checksum {
                expected: model.basis_checksum,
                found: space.basis().checksum(),
            });
        }
        let flat: Vec<Vec<f64>> = dataset.iter().map(GhdTokens::to_flat).collect();
        let x = model.scaler.matrix(&flat);
        let decoded: Vec<Vec<Vec3>> = dataset.iter().map(|t| space.decode_positions(t.coeffs())).collect();
        let faces = space.canonical().faces();
        let targets = decoded.par_iter().map(|v| ChamferTarget::new(v.clone(), faces)).collect();
        let energy = EnergyModel::new(space.canonical(), space.laplacian())?;
        let (topology, lambda) = match &model.condition {
            None => (None, None),
            Some(cm) => {
                let topo = MarkerTopology::new(space.canonical())?;
                let rows = decoded
                    .par_iter()
                    .map(|v| topo.evaluate(v, None).map(|(m, _)| cm.standardize(&cm.select(&m))))
                    .collect::<Result<Vec<_>>>()?;
                if rows.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidArgument("a training shape has non-positive condition markers".into()));
                }
                let m = DMatrix::from_fn(rows.len(), cm.dim(), |r, c| rows[r][c]);
                (Some(topo), Some(m))
            }
        };
        let real_stats = if need_mea {
            let e = decoded.par_iter().map(|v| energy.energies(v)).collect::<Result<Vec<_>>>()?;
            Some(EnergyStats::of(&e, 0.0)?)
        } else {
            None
        };
        Ok(Stage1Data {
            space,
            x,
            lambda,
            targets,
            energy,
            topology,
            real_stats,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn real_stats(&self) -> Option<&EnergyStats> {
        self.real_stats.as_ref()
    }

    /// Energy statistics of decoded token sets.
    pub fn energy_stats(&self, tokens: &[GhdTokens]) -> Result<EnergyStats> {
        let e = tokens
            .par_iter()
            .map(|t| self.energy.energies(&self.space.decode_positions(t.coeffs())))
            .collect::<Result<Vec<MorphEnergies>>>()?;
        EnergyStats::of(&e, 0.0)
    }
}

/// Randomness of one optimization step, drawn up front so the objective is a
/// deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct Stage1Batch {
    pub rows: Vec<usize>,
    pub eps: DMatrix<f64>,
    pub prior_z: DMatrix<f64>,
    /// Standardized requested conditions of the prior samples.
    pub prior_lambda: Option<DMatrix<f64>>,
    pub beta: f64,
}

impl Stage1Batch {
    pub fn draw<R: Rng + ?Sized>(model: &VaeStage1, rows: Vec<usize>, beta: f64, rng: &mut R) -> Result<Self> {
        let d = model.latent_dim;
        let p = model.config.prior_batch;
        let eps = DMatrix::from_fn(rows.len(), d, |_, _| rng.sample(StandardNormal));
        let prior_z = DMatrix::from_fn(p, d, |_, _| rng.sample(StandardNormal));
        let prior_lambda = match &model.condition {
            None => None,
            Some(cm) => {
                let raw = cm.sample_with(rng, p)?;
                let std: Vec<Vec<f64>> = raw.iter().map(|l| cm.standardize(l)).collect();
                Some(DMatrix::from_fn(p, cm.dim(), |r, c| std[r][c]))
            }
        };
        Ok(Stage1Batch {
            rows,
            eps,
            prior_z,
            prior_lambda,
            beta,
        })
    }
}

/// Pairings and plane normals held fixed across evaluations, so that finite
/// differences see the same piecewise-smooth branch as the gradient.
#[derive(Debug, Clone, Default)]
pub struct Freeze {
    replay: bool,
    pairs: Vec<ChamferPairs>,
    planes: Vec<Option<(f64, Vec3)>>,
}

impl Freeze {
    /// Record on the next evaluation, replay on later ones.
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stage1Terms {
    pub total: f64,
    pub token_mse: f64,
    pub cd: f64,
    pub kl: f64,
    pub mea: f64,
    pub cond: f64,
    /// Prior samples dropped from the condition loss.
    pub excluded: usize,
}

fn rows_of(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

fn coeffs_of(model: &VaeStage1, row: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(model.mode_count, 3, &model.scaler.inverse(row))
}

/// Chains a vertex gradient to one standardized token row.
fn token_row_grad(space: &GhdSpace, model: &VaeStage1, g: &[Vec3]) -> Vec<f64> {
    let gc = space.pull_back(g);
    (0..model.mode_count).flat_map(|i| (0..3).map(move |c| (i, c))).map(|(i, c)| gc[(i, c)] * model.scaler.scale[3 * i + c]).collect()
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Loss and parameter gradients (encoder then decoder, as in
/// [`VaeStage1::params`]).
pub fn stage1_objective(
    model: &VaeStage1,
    data: &Stage1Data,
    batch: &Stage1Batch,
    freeze: Option<&mut Freeze>,
) -> Result<(Stage1Terms, Vec<DMatrix<f64>>)> {
    let cfg = &model.config;
    let d = model.latent_dim;
    let b = batch.rows.len();
    let space = data.space;
    let faces = space.canonical().faces();
    let mut scratch = Freeze::default();
    let freeze = freeze.unwrap_or(&mut scratch);

    let mut t = Tape::new();
    let enc = model.encoder.bind(&mut t);
    let dec = model.decoder.bind(&mut t);
    let x = t.leaf(rows_of(&data.x, &batch.rows));
    let lam = data.lambda.as_ref().map(|l| t.leaf(rows_of(l, &batch.rows)));
    let with_cond = |t: &mut Tape, v: Var, c: Option<Var>| match c {
        Some(c) => t.concat_cols(&[v, c]),
        None => v,
    };
    let enc_in = with_cond(&mut t, x, lam);
    let h = model.encoder.forward(&mut t, &enc, enc_in);
    let mu = t.slice_cols(h, 0, d);
    let lv = t.slice_cols(h, d, d);
    let lv = t.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    let half = t.scale(lv, 0.5);
    let sd = t.exp(half);
    let eps = t.leaf(batch.eps.clone());
    let noise = t.mul(sd, eps);
    let z = t.add(mu, noise);
    let dec_in = with_cond(&mut t, z, lam);
    let xh = model.decoder.forward(&mut t, &dec, dec_in);

    let diff = t.sub(xh, x);
    let sq = t.square(diff);
    let mse = t.mean(sq);

    // Reconstruction Chamfer against the real shapes.
    let recon_rows = matrix_rows(t.value(xh));
    let replay = freeze.replay;
    let recon: Vec<(f64, Vec<f64>, ChamferPairs)> = recon_rows
        .par_iter()
        .enumerate()
        .map(|(r, row)| {
            let v = space.decode_positions(&coeffs_of(model, row));
            let frozen = replay.then(|| &freeze.pairs[r]);
            let (val, g, pairs) = reconstruction_chamfer(&v, faces, &data.targets[batch.rows[r]], frozen);
            (val, token_row_grad(space, model, &g), pairs)
        })
        .collect();
    let cd_value = recon.iter().map(|r| r.0).sum::<f64>() / b as f64;
    let cd_grad = DMatrix::from_fn(b, model.token_dim(), |r, c| recon[r].1[c] / b as f64);
    let cd = t.scalar_fn(xh, cd_value, cd_grad);
    if !replay {
        freeze.pairs = recon.into_iter().map(|r| r.2).collect();
    }

    // KL to the prior, averaged over the batch.
    let mu2 = t.square(mu);
    let elv = t.exp(lv);
    let kl = t.add(mu2, elv);
    let kl = t.sub(kl, lv);
    let kl = t.sum(kl);
    let kl = t.add_const(kl, -((d * b) as f64));
    let kl = t.scale(kl, 0.5 / b as f64);

    let mut terms = vec![(mse, 1.0), (cd, cfg.w_cd), (kl, batch.beta)];
    let mut mea_value = 0.0;
    let mut cond_value = 0.0;
    let mut excluded = 0;
    let want_mea = cfg.w_mea > 0.0;
    let want_cond = cfg.w_cond > 0.0 && model.condition.is_some();
    if want_mea || want_cond {
        let p = batch.prior_z.nrows();
        let zp = t.leaf(batch.prior_z.clone());
        let lp = batch.prior_lambda.as_ref().map(|l| t.leaf(l.clone()));
        if model.condition.is_some() != lp.is_some() {
            return Err(Error::InvalidArgument("prior conditions do not match the model".into()));
        }
        let dec_in = with_cond(&mut t, zp, lp);
        let xp = model.decoder.forward(&mut t, &dec, dec_in);
        let prior_rows = matrix_rows(t.value(xp));
        let verts: Vec<Vec<Vec3>> = prior_rows.par_iter().map(|row| space.decode_positions(&coeffs_of(model, row))).collect();

        if want_mea {
            let real = data
                .real_stats
                .ok_or_else(|| Error::InvalidArgument("MEA enabled without real energy statistics".into()))?;
            let eg = verts.par_iter().map(|v| data.energy.energies_with_grad(v)).collect::<Result<Vec<_>>>()?;
            let energies: Vec<MorphEnergies> = eg.iter().map(|e| e.0).collect();
            let floor = 1e-12 * (real.var[0].min(real.var[1]));
            let syn = EnergyStats::of(&energies, floor)?;
            mea_value = mea_loss(&real, &syn);
            let dg = mea_loss_grad(&real, &syn);
            let pf = p as f64;
            let grads: Vec<Vec<f64>> = eg
                .par_iter()
                .map(|(e, gr, gl)| {
                    let wr = dg[0].0 / pf + dg[0].1 * 2.0 * (e.e_r - syn.mean[0]) / pf;
                    let wl = dg[1].0 / pf + dg[1].1 * 2.0 * (e.e_l - syn.mean[1]) / pf;
                    let g: Vec<Vec3> = gr.iter().zip(gl).map(|(a, b)| a * wr + b * wl).collect();
                    token_row_grad(space, model, &g)
                })
                .collect();
            let gm = DMatrix::from_fn(p, model.token_dim(), |r, c| grads[r][c]);
            let node = t.scalar_fn(xp, mea_value, gm);
            terms.push((node, cfg.w_mea));
        }

        if want_cond {
            let cm = model.condition.as_ref().unwrap();
            let topo = data.topology.as_ref().ok_or_else(|| Error::InvalidArgument("conditional data without marker topology".into()))?;
            let req = matrix_rows(batch.prior_lambda.as_ref().unwrap());
            let planes: Vec<Option<(f64, Vec3)>> = if replay {
                freeze.planes.clone()
            } else {
                verts.par_iter().map(|v| topo.neck_plane(v).ok().map(|(_, n)| (topo.default_tau(v), n))).collect()
            };
            let per: Vec<Option<(Vec<f64>, Vec<Vec3>, Vec<f64>)>> = verts
                .par_iter()
                .zip(&planes)
                .zip(&req)
                .map(|((v, plane), r)| {
                    let (tau, n) = (*plane)?;
                    let (m, g) = topo.evaluate_with_normal(v, tau, n).ok()?;
                    let recalled = cm.select(&m);
                    if recalled.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                        return None;
                    }
                    let s = cm.standardize(&recalled);
                    let slope = cm.standardize_slope(&recalled);
                    let mut gv = vec![Vec3::zeros(); v.len()];
                    let mut res = Vec::with_capacity(s.len());
                    for (j, &mk) in cm.markers.iter().enumerate() {
                        let e = s[j] - r[j];
                        res.push(e);
                        for (a, gm) in gv.iter_mut().zip(marker_grad(&g, mk)) {
                            *a += gm * (2.0 * e * slope[j]);
                        }
                    }
                    Some((res, gv, s))
                })
                .collect();
            if !replay {
                freeze.planes = planes;
            }
            let kept: Vec<usize> = (0..p).filter(|&i| per[i].is_some()).collect();
            excluded = p - kept.len();
            let count = (kept.len() * cm.dim()) as f64;
            let mut gm = DMatrix::zeros(p, model.token_dim());
            if count > 0.0 {
                for &i in &kept {
                    let (res, gv, _) = per[i].as_ref().unwrap();
                    cond_value += res.iter().map(|e| e * e).sum::<f64>() / count;
                    let gv: Vec<Vec3> = gv.iter().map(|g| g / count).collect();
                    for (c, v) in token_row_grad(space, model, &gv).into_iter().enumerate() {
                        gm[(i, c)] = v;
                    }
                }
            }
            let node = t.scalar_fn(xp, cond_value, gm);
            terms.push((node, cfg.w_cond));
        }
    }
    freeze.replay = true;

    let mut total = None;
    for (node, w) in terms {
        let s = t.scale(node, w);
        total = Some(match total {
            None => s,
            Some(acc) => t.add(acc, s),
        });
    }
    let total = total.unwrap();
    let out = Stage1Terms {
        total: t.scalar(total),
        token_mse: t.scalar(mse),
        cd: cd_value,
        kl: t.scalar(kl),
        mea: mea_value,
        cond: cond_value,
        excluded,
    };
    let g = t.backward(total);
    let mut grads = model.encoder.grads(&g, &enc);
    grads.extend(model.decoder.grads(&g, &dec));
    Ok((out, grads))
}

fn marker_grad(g: &crate::markers::MarkerGradients, m: Marker) -> &[Vec3] {
    g.get(m)
}

pub enum Stage1Init<'a> {
    Unconditional,
    /// Warm start from unconditional weights.
    Conditional {
        pretrained: &'a VaeStage1,
        condition: &'a ConditionModel,
    },
}

pub const STAGE1_LOG_COLUMNS: [&str; 7] = ["total", "token_mse", "cd", "kl", "mea", "cond", "excluded"];

pub fn train_stage1(space: &GhdSpace, dataset: &[GhdTokens], cfg: &Stage1Config, init: Stage1Init) -> Result<(VaeStage1, TrainingLog)> {
    cfg.validate()?;
    // Energy statistics need a population; plain reconstruction does not.
    let need = if cfg.w_mea > 0.0 { 8 } else { 1 };
    if dataset.len() < need {
        return Err(Error::InvalidArgument(format!("stage-I training needs at least {need} shapes, got {}", dataset.len())));
    }
    let mut rng = stream_rng(cfg.seed, "train1");
    let mut model = match init {
        Stage1Init::Unconditional => {
            let flat: Vec<Vec<f64>> = dataset.iter().map(GhdTokens::to_flat).collect();
            VaeStage1::new(cfg, Scaler::fit_shared(&flat)?, space.basis().checksum(), &mut rng)
        }
        Stage1Init::Conditional { pretrained, condition } => {
            if pretrained.latent_dim != cfg.latent_dim || pretrained.encoder.layers[0].outputs() != cfg.hidden {
                return Err(Error::Config("conditional config must match the pretrained network shape".into()));
            }
            let mut m = pretrained.with_condition(condition.clone())?;
            m.config = cfg.clone();
            m
        }
    };
    let data = Stage1Data::new(space, dataset, &model, cfg.w_mea > 0.0)?;
    let mut opt = Adam::new(AdamConfig::new(cfg.lr), &model.params());
    let mut log = TrainingLog::new(STAGE1_LOG_COLUMNS.to_vec());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let beta = cfg.beta_at(epoch);
        let mut acc = [0.0; 7];
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Stage1Batch::draw(&model, chunk.to_vec(), beta, &mut rng)?;
            let (terms, grads) = stage1_objective(&model, &data, &batch, None)?;
            if !terms.total.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite(format!("stage-I loss at epoch {}: {terms:?}", epoch + 1)));
            }
            opt.step(model.params_mut(), &grads);
            let w = chunk.len() as f64 / dataset.len() as f64;
            let vals = [terms.total, terms.token_mse, terms.cd, terms.kl, terms.mea, terms.cond];
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += w * v;
            }
            acc[6] += terms.excluded as f64;
        }
        log::debug!("stage1 epoch {} total {:.6e}", epoch + 1, acc[0]);
        log.rows.push(acc.to_vec());
    }
    Ok((model, log))
}

/// Fits a [`ConditionModel`] to markers of `pool` unconditional prior
/// samples; samples whose markers fail are skipped.
pub fn estimate_condition_model(model: &VaeStage1, space: &GhdSpace, markers: &[Marker], pool: usize, seed: u64) -> Result<(ConditionModel, usize)> {
    if model.condition.is_some() {
        return Err(Error::InvalidArgument("condition estimation needs the unconditional model".into()));
    }
    let topo = MarkerTopology::new(space.canonical())?;
    let mut rng = stream_rng(seed, "conditions");
    let samples = model.sample(pool, None, &mut rng)?;
    let found: Vec<Option<MorphMarkers>> = samples
        .par_iter()
        .map(|(tok, _)| topo.evaluate(&space.decode_positions(tok.coeffs()), None).ok().map(|(m, _)| m))
        .collect();
    let ok: Vec<MorphMarkers> = found
        .into_iter()
        .flatten()
        .filter(|m| markers.iter().all(|&k| m.get(k) > 0.0 && m.get(k).is_finite()))
        .collect();
    let skipped = pool - ok.len();
    Ok((ConditionModel::fit(&ok, markers)?, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{primitives, RegionLabel, TriangleMesh};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Icosphere whose upper cap is a dome bounded by a neck ring.
    fn capped_sphere() -> TriangleMesh {
        let s = primitives::icosphere(1.5, 2).unwrap();
        let v = s.vertices().to_vec();
        let mut labels = vec![RegionLabel::VesselWall; v.len()];
        for (i, p) in v.iter().enumerate() {
            if p.z > 0.5 {
                labels[i] = RegionLabel::Dome;
            }
        }
        // Ring: non-dome vertices adjacent to the dome.
        for f in s.faces() {
            let dome = f.iter().filter(|&&i| labels[i] == RegionLabel::Dome).count();
            if dome > 0 {
                for &i in f {
                    if labels[i] == RegionLabel::VesselWall {
                        labels[i] = RegionLabel::NeckRing;
                    }
                }
            }
        }
        TriangleMesh::with_labels(v, s.faces().to_vec(), labels).unwrap()
    }

    fn cohort(space: &GhdSpace, count: usize, amp: f64, seed: u64) -> Vec<GhdTokens> {
        let base = space.project(space.canonical()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut c = base.coeffs().clone();
                for i in 1..space.mode_count() {
                    let s = amp / (1.0 + space.basis().eigenvalues()[i]);
                    for k in 0..3 {
                        c[(i, k)] += s * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                space.tokens(c).unwrap()
            })
            .collect()
    }

    fn small_cfg() -> Stage1Config {
        Stage1Config {
            latent_dim: 3,
            hidden: 8,
            epochs: 1,
            batch_size: 4,
            prior_batch: 16,
            beta: 0.3,
            w_cd: 1.0,
            w_mea: 0.7,
            w_cond: 1.3,
            ..Stage1Config::default()
        }
    }

    fn fd_check(model: &mut VaeStage1, data: &Stage1Data, batch: &Stage1Batch) {
        let mut freeze = Freeze::new();
        let (terms, grads) = stage1_objective(model, data, batch, Some(&mut freeze)).unwrap();
        assert!(terms.total.is_finite());
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let n_params = model.params().len();
        for p in 0..n_params {
            let len = model.params()[p].len();
            for i in [0, len / 2, len - 1] {
                let orig = model.params()[p][i];
                model.params_mut()[p][i] = orig + h;
                let fp = stage1_objective(model, data, batch, Some(&mut freeze)).unwrap().0.total;
                model.params_mut()[p][i] = orig - h;
                let fm = stage1_objective(model, data, batch, Some(&mut freeze)).unwrap().0.total;
                model.params_mut()[p][i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads[p][i];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn unconditional_loss_gradient_matches_differences() {
        let space = GhdSpace::from_canonical(capped_sphere(), 6).unwrap();
        let data_tokens = cohort(&space, 8, 0.3, 1);
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let flat: Vec<Vec<f64>> = data_tokens.iter().map(GhdTokens::to_flat).collect();
        let mut model = VaeStage1::new(&cfg, Scaler::fit_shared(&flat).unwrap(), space.basis().checksum(), &mut rng);
        let data = Stage1Data::new(&space, &data_tokens, &model, true).unwrap();
        let batch = Stage1Batch::draw(&model, vec![0, 3, 5], cfg.beta, &mut rng).unwrap();
        fd_check(&mut model, &data, &batch);
    }

    #[test]
    fn conditional_loss_gradient_matches_differences() {
        let space = GhdSpace::from_canonical(capped_sphere(), 6).unwrap();
        let data_tokens = cohort(&space, 12, 0.3, 3);
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flat: Vec<Vec<f64>> = data_tokens.iter().map(GhdTokens::to_flat).collect();
        let base = VaeStage1::new(&cfg, Scaler::fit_shared(&flat).unwrap(), space.basis().checksum(), &mut rng);
        let topo = MarkerTopology::new(space.canonical()).unwrap();
        let markers: Vec<MorphMarkers> = data_tokens.iter().map(|t| topo.evaluate(&space.decode_positions(t.coeffs()), None).unwrap().0).collect();
        let cm = ConditionModel::fit(&markers, &[Marker::AspectRatio, Marker::Volume]).unwrap();
        let mut model = base.with_condition(cm).unwrap();
        // Nonzero condition weights so the λ paths carry gradient.
        for net in [&mut model.encoder, &mut model.decoder] {
            let w = &mut net.layers[0].w;
            let r = w.nrows();
            for c in 0..w.ncols() {
                w[(r - 1, c)] = 0.05 * (c as f64 + 1.0).sin();
                w[(r - 2, c)] = -0.03 * (c as f64).cos();
            }
        }
        let data = Stage1Data::new(&space, &data_tokens, &model, true).unwrap();
        let batch = Stage1Batch::draw(&model, vec![1, 2, 7, 11], cfg.beta, &mut rng).unwrap();
        let (terms, _) = stage1_objective(&model, &data, &batch, None).unwrap();
        assert!(terms.cond > 0.0 && terms.mea > 0.0 && terms.excluded == 0, "{terms:?}");
        fd_check(&mut model, &data, &batch);
    }

    #[test]
    fn zero_condition_columns_preserve_outputs() {
        let space = GhdSpace::from_canonical(capped_sphere(), 6).unwrap();
        let toks = cohort(&space, 12, 0.3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flat: Vec<Vec<f64>> = toks.iter().map(GhdTokens::to_flat).collect();
        let base = VaeStage1::new(&small_cfg(), Scaler::fit_shared(&flat).unwrap(), space.basis().checksum(), &mut rng);
        let topo = MarkerTopology::new(space.canonical()).unwrap();
        let markers: Vec<MorphMarkers> = toks.iter().map(|t| topo.evaluate(&space.decode_positions(t.coeffs()), None).unwrap().0).collect();
        let cond = base.with_condition(ConditionModel::fit(&markers, &[Marker::AspectRatio]).unwrap()).unwrap();
        let z = [0.3, -0.2, 0.9];
        let a = base.decode(&z, None).unwrap();
        let b = cond.decode(&z, Some(&[0.8])).unwrap();
        assert_eq!(a, b);
        assert_eq!(cond.decode(&z, Some(&[0.8])).unwrap(), b);
        assert!(cond.decode(&z, None).is_err());
        let (m1, _) = base.encode(&toks[0], None).unwrap();
        let (m2, _) = cond.encode(&toks[0], Some(&[1.7])).unwrap();
        assert_eq!(m1, m2);

        let bytes = cond.to_bytes().unwrap();
        assert_eq!(VaeStage1::from_bytes(&bytes).unwrap(), cond);
    }

    #[test]
    fn memorizes_a_single_shape_without_kl() {
        let space = GhdSpace::from_canonical(capped_sphere(), 8).unwrap();
        let toks = cohort(&space, 1, 0.5, 6);
        let cfg = Stage1Config {
            latent_dim: 4,
            hidden: 32,
            epochs: 400,
            batch_size: 1,
            beta: 0.0,
            w_mea: 0.0,
            w_cond: 0.0,
            lr: 3e-3,
            ..Stage1Config::default()
        };
        let (model, log) = train_stage1(&space, &toks, &cfg, Stage1Init::Unconditional).unwrap();
        let mse = log.column("token_mse").unwrap();
        assert!(*mse.last().unwrap() < 1e-4, "final token MSE {}", mse.last().unwrap());
        let (mu, _) = model.encode(&toks[0], None).unwrap();
        let back = model.decode(&mu, None).unwrap();
        let err = (back.coeffs() - toks[0].coeffs()).abs().max();
        assert!(err < 1e-2 * toks[0].coeffs().abs().max(), "{err}");
    }

    #[test]
    fn training_is_deterministic_and_reduces_token_error() {
        let space = GhdSpace::from_canonical(capped_sphere(), 8).unwrap();
        let toks = cohort(&space, 16, 0.4, 7);
        let cfg = Stage1Config {
            latent_dim: 16,
            hidden: 32,
            epochs: 200,
            batch_size: 8,
            lr: 3e-3,
            seed: 9,
            ..Stage1Config::default()
        };
        let (m1, l1) = train_stage1(&space, &toks, &cfg, Stage1Init::Unconditional).unwrap();
        let (m2, l2) = train_stage1(&space, &toks, &cfg, Stage1Init::Unconditional).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        let mse = l1.column("token_mse").unwrap();
        assert!(mse.last().unwrap() < &(0.5 * mse[0]), "{} → {}", mse[0], mse.last().unwrap());
        assert!(l1.column("mea").unwrap().iter().all(|v| *v >= 0.0));
        assert!(l1.column("kl").unwrap().iter().all(|v| *v >= 0.0));

        let a = m1.sample(3, None, &mut stream_rng(1, "generate")).unwrap();
        let b = m1.sample(3, None, &mut stream_rng(1, "generate")).unwrap();
        assert_eq!(a, b);

        let (cm, skipped) = estimate_condition_model(&m1, &space, &[Marker::AspectRatio], 64, 3).unwrap();
        assert_eq!(cm.dim(), 1);
        assert!(skipped < 32);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(Stage1Config::default().validate().is_ok());
        assert!(Stage1Config { prior_batch: 8, ..Default::default() }.validate().is_err());
        assert!(Stage1Config { beta: -1.0, ..Default::default() }.validate().is_err());
        let err = toml::from_str::<Stage1Config>("epochs = 3\nbogus = 1\n");
        assert!(err.is_err());
        let c = Stage1Config { epochs: 10, warmup: 0.2, beta: 1.0, ..Default::default() };
        assert_eq!(c.beta_at(0), 0.5);
        assert_eq!(c.beta_at(5), 1.0);
    }
}
