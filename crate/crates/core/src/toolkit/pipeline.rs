//! Artifact-level commands. Each reads what earlier commands wrote under
//! the output directory and writes its own artifacts there:
//!
//! ```text
//! canonical.obj, basis.bin          any command needing the GHD space
//! data/<id>.obj, .tokens.toml,      synth-data (unless paths.dataset is set)
//!      .cl<k>.txt
//! tokens/<id>.toml, fit.csv         fit-ghd
//! branches/<id>.toml, fit.csv       fit-centerline
//! stage1.bin, stage1_log.csv        train-stage1
//! conditions.toml                   estimate-conditions
//! stage1_conditional.bin, _log.csv  train-stage1-conditional
//! stage2.bin, stage2_log.csv        train-stage2
//! generated/                        generate
//! morph/                            morph
//! markers.csv                       markers
//! eval/metrics.csv, …               eval
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use super::cohort::{dataset_ids, load_dataset_mesh, polyline_path, synth_cohort, write_cohort};
use super::config::PipelineConfig;
use super::make_canonical;
use crate::centerline::{fit_branch, read_branches, write_branches, CenterlineBranch, Polyline};
use crate::error::{Error, Result};
use crate::evalmetrics::{cd_v, condition_accuracy, MetricReport};
use crate::genmodel::{
    estimate_condition_model, generate, morph, sweep, train_stage1, train_stage2, BranchSet, Stage1Init,
    TrainingLog, VaeStage1, VaeStage2,
};
use crate::ghd::{fit, GhdSpace, GhdTokens};
use crate::markers::{compute_markers, write_marker_csv, ConditionModel, Marker, MorphMarkers};
use crate::mesh::{cotangent_laplacian, load_mesh, save_mesh, MeshFormat, SpectralBasis, TriangleMesh, Vec3};
use crate::synthesis::{assemble, extract_cross_sections, sweep_tube};

/// Worker-pool size variable.
pub const WORKERS_ENV: &str = "ANEUG_WORKERS";

/// Pool sized by [`WORKERS_ENV`], or rayon's default when unset.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn require(p: PathBuf, producer: &'static str) -> Result<PathBuf> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact { path: p, producer })
    }
}

fn mesh_format(p: &Path) -> Result<MeshFormat> {
    MeshFormat::from_path(p)
}

/// Complex plus swept vessels for one generated or real shape.
#[derive(Debug, Clone)]
pub struct VesselMesh {
    pub complex: TriangleMesh,
    pub full: TriangleMesh,
    /// Largest angle between a branch root tangent and its section tangent.
    pub weld_degrees: f64,
}

/// Decodes `tokens`, sweeps each branch from its cross-section and welds
/// the tubes on. Ring spacing defaults to each section's mean edge.
pub fn vessel_mesh(space: &GhdSpace, tokens: &GhdTokens, branches: &[CenterlineBranch], spacing: Option<f64>) -> Result<VesselMesh> {
    let complex = space.decode(tokens)?;
    let mut sections = extract_cross_sections(&complex)?;
    sections.sort_by_key(|s| s.k);
    if sections.len() != branches.len() {
        return Err(Error::DimensionMismatch(format!("{} sections for {} branches", sections.len(), branches.len())));
    }
    let mut weld: f64 = 0.0;
    let mut tubes = Vec::with_capacity(branches.len());
    for (s, b) in sections.iter().zip(branches) {
        if b.k != s.k {
            return Err(Error::InvalidArgument(format!("branch {} paired with section {}", b.k, s.k)));
        }
        weld = weld.max(b.tangent(0.0)?.dot(&s.tangent).clamp(-1.0, 1.0).acos().to_degrees());
        let h = spacing.unwrap_or_else(|| s.mean_edge(complex.vertices()));
        tubes.push(sweep_tube(s, complex.vertices(), b, h)?);
    }
    let full = assemble(&complex, &tubes)?;
    Ok(VesselMesh {
        complex,
        full,
        weld_degrees: weld,
    })
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub count: usize,
    pub seed: u64,
    /// Fixed condition values, in the order of the model's markers.
    pub condition: Option<Vec<f64>>,
    /// Use the unconditional stage-I model even if a conditional one exists.
    pub unconditional: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedShape {
    pub id: String,
    pub requested: Option<Vec<f64>>,
    pub recalled: Option<MorphMarkers>,
    pub weld_degrees: f64,
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct MorphArgs {
    pub marker: Marker,
    pub from: f64,
    pub to: f64,
    pub steps: usize,
    /// Dataset shape to encode; the first one when absent.
    pub shape: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphStep {
    pub requested: f64,
    pub recalled: MorphMarkers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRow {
    pub id: String,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        Pipeline { cfg }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output().join(name)
    }

    pub fn tokens_dir(&self) -> PathBuf {
        self.out("tokens")
    }

    pub fn branches_dir(&self) -> PathBuf {
        self.out("branches")
    }

    pub fn stage1_path(&self) -> PathBuf {
        self.out("stage1.bin")
    }

    pub fn conditional_path(&self) -> PathBuf {
        self.out("stage1_conditional.bin")
    }

    pub fn stage2_path(&self) -> PathBuf {
        self.out("stage2.bin")
    }

    pub fn conditions_path(&self) -> PathBuf {
        self.out("conditions.toml")
    }

    /// The canonical mesh and its basis. The basis is cached in the output
    /// directory and recomputed when the cache does not match.
    pub fn space(&self) -> Result<GhdSpace> {
        create_dir(self.cfg.output())?;
        let canonical = match &self.cfg.paths.canonical {
            Some(p) => load_mesh(p, mesh_format(p)?)?,
            None => make_canonical(self.cfg.canonical.kind, self.cfg.canonical.resolution)?,
        };
        let cpath = self.out("canonical.obj");
        if !cpath.exists() {
            save_mesh(&canonical, &cpath, MeshFormat::Obj)?;
        }
        let bpath = self.out("basis.bin");
        if let Ok(basis) = SpectralBasis::read_cache(&bpath) {
            if basis.dim() == canonical.vertex_count() && basis.mode_count() == self.cfg.ghd.modes && basis_fits(&canonical, &basis)? {
                return GhdSpace::new(canonical, basis);
            }
        }
        let space = GhdSpace::from_canonical(canonical, self.cfg.ghd.modes)?;
        space.basis().write_cache(&bpath)?;
        Ok(space)
    }

    pub fn synth_data(&self) -> Result<usize> {
        let space = self.space()?;
        let cohort = synth_cohort(&space, &self.cfg.synth, self.cfg.seed)?;
        let dir = self.cfg.dataset_dir();
        write_cohort(&cohort, &dir, self.cfg.synth.polyline_samples)?;
        info!("wrote {} shapes to {} ({} draws rejected)", cohort.shapes.len(), dir.display(), cohort.rejected);
        Ok(cohort.rejected)
    }

    fn dataset(&self) -> Result<(PathBuf, Vec<String>)> {
        let dir = require(self.cfg.dataset_dir(), "synth-data")?;
        let ids = dataset_ids(&dir)?;
        if ids.is_empty() {
            return Err(Error::MissingArtifact { path: dir, producer: "synth-data" });
        }
        Ok((dir, ids))
    }

    pub fn fit_ghd(&self) -> Result<Vec<FitRow>> {
        let space = self.space()?;
        let (dir, ids) = self.dataset()?;
        let out = self.tokens_dir();
        create_dir(&out)?;
        let rows = ids
            .par_iter()
            .map(|id| {
                let mesh = load_dataset_mesh(&dir, id)?;
                let rings: Vec<Vec<Vec3>> =
                    mesh.boundary_rings().iter().map(|r| r.iter().map(|&i| mesh.vertices()[i]).collect()).collect();
                let r = fit(&space, mesh.vertices(), &rings, &self.cfg.ghd.fit)?;
                r.tokens.write(&out.join(format!("{id}.toml")))?;
                Ok(FitRow {
                    id: id.clone(),
                    loss: r.loss(),
                    iterations: r.iterations,
                    converged: r.converged,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut csv = String::from("id,loss,iterations,converged\n");
        for r in &rows {
            writeln!(csv, "{},{:e},{},{}", r.id, r.loss, r.iterations, r.converged).unwrap();
        }
        write_text(&out.join("fit.csv"), &csv)?;
        Ok(rows)
    }

    pub fn fit_centerline(&self) -> Result<Vec<(String, f64)>> {
        let (dir, ids) = self.dataset()?;
        let out = self.branches_dir();
        create_dir(&out)?;
        let m = self.cfg.centerline.modes;
        let rows = ids
            .par_iter()
            .map(|id| {
                let mut branches = Vec::new();
                let mut worst: f64 = 0.0;
                for k in 0.. {
                    let p = polyline_path(&dir, id, k);
                    if !p.exists() {
                        break;
                    }
                    let (b, rms) = fit_branch(&Polyline::read(&p)?, m, k)?;
                    worst = worst.max(rms);
                    branches.push(b);
                }
                if branches.is_empty() {
                    return Err(Error::MissingArtifact { path: polyline_path(&dir, id, 0), producer: "synth-data" });
                }
                write_branches(&branches, &out.join(format!("{id}.toml")))?;
                Ok((id.clone(), worst))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut csv = String::from("id,max_rms\n");
        for (id, r) in &rows {
            writeln!(csv, "{id},{r:e}").unwrap();
        }
        write_text(&out.join("fit.csv"), &csv)?;
        Ok(rows)
    }

    pub fn fitted_tokens(&self) -> Result<Vec<(String, GhdTokens)>> {
        let (_, ids) = self.dataset()?;
        let dir = require(self.tokens_dir(), "fit-ghd")?;
        ids.iter()
            .map(|id| Ok((id.clone(), GhdTokens::read(&require(dir.join(format!("{id}.toml")), "fit-ghd")?)?)))
            .collect()
    }

    fn fitted_branches(&self, ids: &[String]) -> Result<Vec<BranchSet>> {
        let dir = require(self.branches_dir(), "fit-centerline")?;
        ids.iter()
            .map(|id| read_branches(&require(dir.join(format!("{id}.toml")), "fit-centerline")?))
            .collect()
    }

    pub fn train_stage1(&self) -> Result<TrainingLog> {
        let space = self.space()?;
        let tokens: Vec<GhdTokens> = self.fitted_tokens()?.into_iter().map(|(_, t)| t).collect();
        let (model, log) = train_stage1(&space, &tokens, &self.cfg.stage1, Stage1Init::Unconditional)?;
        model.save(&self.stage1_path())?;
        log.write_csv(&self.out("stage1_log.csv"))?;
        Ok(log)
    }

    pub fn estimate_conditions(&self) -> Result<(ConditionModel, usize)> {
        let space = self.space()?;
        let model = VaeStage1::load(&require(self.stage1_path(), "train-stage1")?)?;
        let c = &self.cfg.conditions;
        let (cm, skipped) = estimate_condition_model(&model, &space, &c.markers, c.pool, self.cfg.seed)?;
        cm.write(&self.conditions_path())?;
        info!("condition model from {} samples ({skipped} skipped)", c.pool - skipped);
        Ok((cm, skipped))
    }

    pub fn train_stage1_conditional(&self) -> Result<TrainingLog> {
        let space = self.space()?;
        let tokens: Vec<GhdTokens> = self.fitted_tokens()?.into_iter().map(|(_, t)| t).collect();
        let pretrained = VaeStage1::load(&require(self.stage1_path(), "train-stage1")?)?;
        let condition = ConditionModel::read(&require(self.conditions_path(), "estimate-conditions")?)?;
        let init = Stage1Init::Conditional {
            pretrained: &pretrained,
            condition: &condition,
        };
        let (model, log) = train_stage1(&space, &tokens, &self.cfg.stage1, init)?;
        model.save(&self.conditional_path())?;
        log.write_csv(&self.out("stage1_conditional_log.csv"))?;
        Ok(log)
    }

    pub fn train_stage2(&self) -> Result<TrainingLog> {
        let space = self.space()?;
        let (ids, tokens): (Vec<String>, Vec<GhdTokens>) = self.fitted_tokens()?.into_iter().unzip();
        let branches = self.fitted_branches(&ids)?;
        let (model, log) = train_stage2(&space, &tokens, &branches, &self.cfg.stage2)?;
        model.save(&self.stage2_path())?;
        log.write_csv(&self.out("stage2_log.csv"))?;
        Ok(log)
    }

    /// The conditional stage-I model when present (unless `unconditional`),
    /// else the unconditional one.
    fn stage1_for_sampling(&self, unconditional: bool) -> Result<VaeStage1> {
        let c = self.conditional_path();
        if !unconditional && c.exists() {
            return VaeStage1::load(&c);
        }
        VaeStage1::load(&require(self.stage1_path(), "train-stage1")?)
    }

    /// Writes `gen_<i>.obj` (complex), `gen_<i>.full.obj` (with vessels),
    /// their tokens and branches, and `conditions.csv` with requested and
    /// recalled markers.
    pub fn generate(&self, args: &GenerateArgs) -> Result<Vec<GeneratedShape>> {
        let space = self.space()?;
        let s1 = self.stage1_for_sampling(args.unconditional)?;
        let s2 = VaeStage2::load(&require(self.stage2_path(), "train-stage2")?)?;
        let out = args.out.clone().unwrap_or_else(|| self.out("generated"));
        create_dir(&out)?;
        let drawn = generate(&space, &s1, &s2, args.count, args.seed, args.condition.as_deref())?;
        let spacing = self.cfg.generate.spacing;
        let shapes = drawn
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let id = format!("gen_{i:04}");
                g.tokens.write(&out.join(format!("{id}.tokens.toml")))?;
                write_branches(&g.branches, &out.join(format!("{id}.branches.toml")))?;
                let complex = space.decode(&g.tokens)?;
                save_mesh(&complex, &out.join(format!("{id}.obj")), MeshFormat::Obj)?;
                let recalled = compute_markers(&complex, None).ok().map(|(m, _)| m);
                let (weld, valid) = match vessel_mesh(&space, &g.tokens, &g.branches, spacing) {
                    Ok(vm) => {
                        save_mesh(&vm.full, &out.join(format!("{id}.full.obj")), MeshFormat::Obj)?;
                        (vm.weld_degrees, vm.full.boundary_rings().len() == g.branches.len())
                    }
                    Err(e) => {
                        log::warn!("{id}: vessels not assembled: {e}");
                        (f64::NAN, false)
                    }
                };
                Ok(GeneratedShape {
                    id,
                    requested: g.condition.clone(),
                    recalled,
                    weld_degrees: weld,
                    valid,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let markers: Vec<Marker> = s1.condition.as_ref().map_or_else(Vec::new, |c| c.markers.clone());
        write_text(&out.join("conditions.csv"), &generated_csv(&shapes, &markers))?;
        Ok(shapes)
    }

    /// Encodes a dataset shape under its own markers and decodes it with
    /// `marker` swept; writes `morph_<i>.obj` and `morph.csv`.
    pub fn morph(&self, args: &MorphArgs) -> Result<Vec<MorphStep>> {
        let space = self.space()?;
        let s1 = VaeStage1::load(&require(self.conditional_path(), "train-stage1-conditional")?)?;
        let cm = s1.condition.clone().expect("conditional checkpoint");
        let tokens = self.fitted_tokens()?;
        let (id, tok) = match &args.shape {
            Some(s) => tokens
                .iter()
                .find(|(id, _)| id == s)
                .ok_or_else(|| Error::InvalidArgument(format!("no fitted shape `{s}`")))?,
            None => &tokens[0],
        };
        let (own, _) = compute_markers(&space.decode(tok)?, None)?;
        let base = cm.select(&own);
        let values = sweep(args.from, args.to, args.steps);
        let decoded = morph(&s1, tok, &base, args.marker, &values)?;
        let out = args.out.clone().unwrap_or_else(|| self.out("morph"));
        create_dir(&out)?;
        let mut steps = Vec::with_capacity(values.len());
        let mut csv = String::from("step,requested,NW,AR,LI,V,height\n");
        for (i, (t, v)) in decoded.iter().zip(&values).enumerate() {
            let mesh = space.decode(t)?;
            save_mesh(&mesh, &out.join(format!("morph_{i:02}.obj")), MeshFormat::Obj)?;
            let (m, _) = compute_markers(&mesh, None)?;
            writeln!(csv, "{i},{v:?},{:?},{:?},{:?},{:?},{:?}", m.nw, m.ar, m.li, m.v, m.height).unwrap();
            steps.push(MorphStep { requested: *v, recalled: m });
        }
        write_text(&out.join("morph.csv"), &csv)?;
        info!("morphed {id} over {} {} values", values.len(), args.marker);
        Ok(steps)
    }

    /// Markers of every mesh in `dir` (default: the dataset).
    pub fn markers(&self, dir: Option<&Path>, out: Option<&Path>) -> Result<Vec<(String, MorphMarkers)>> {
        let dir = match dir {
            Some(d) => d.to_path_buf(),
            None => self.dataset()?.0,
        };
        let cohort = load_cohort(&dir)?;
        let rows = cohort
            .par_iter()
            .map(|(id, m)| Ok((id.clone(), compute_markers(m, None)?.0)))
            .collect::<Result<Vec<_>>>()?;
        let path = out.map_or_else(|| self.out("markers.csv"), Path::to_path_buf);
        write_marker_csv(&rows, &path)?;
        Ok(rows)
    }

    /// CD_v and CD_n between cohorts, TMD of `b`, and CA when `b` carries
    /// requested conditions. Shapes pair by id when every id of `b` is in
    /// `a`, else each `b` shape pairs with its nearest `a` shape by CD_v.
    pub fn eval(&self, a: &Path, b: &Path, out: Option<&Path>) -> Result<MetricReport> {
        let ca_cohort = load_cohort(a)?;
        let cb_cohort = load_cohort(b)?;
        let index: HashMap<&str, usize> = ca_cohort.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
        let pairing: Vec<(usize, usize)> = if cb_cohort.iter().all(|(id, _)| index.contains_key(id.as_str())) {
            cb_cohort.iter().enumerate().map(|(j, (id, _))| (index[id.as_str()], j)).collect()
        } else {
            cb_cohort
                .par_iter()
                .enumerate()
                .map(|(j, (_, mb))| {
                    let d = ca_cohort.iter().map(|(_, ma)| cd_v(ma, mb)).collect::<Result<Vec<_>>>()?;
                    let i = (0..d.len()).min_by(|&x, &y| d[x].total_cmp(&d[y])).expect("non-empty cohort");
                    Ok((i, j))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let ca = match read_requested(&b.join("conditions.csv"))? {
            Some((markers, requested)) => {
                let cm = ConditionModel::read(&require(self.conditions_path(), "estimate-conditions")?)?;
                let by_id: HashMap<&str, &TriangleMesh> = cb_cohort.iter().map(|(id, m)| (id.as_str(), m)).collect();
                let mut req = Vec::new();
                let mut rec = Vec::new();
                for (id, q) in &requested {
                    let Some(mesh) = by_id.get(id.as_str()) else { continue };
                    if let Ok((m, _)) = compute_markers(mesh, None) {
                        req.push(q.clone());
                        rec.push(markers.iter().map(|&k| m.get(k)).collect());
                    }
                }
                let scales: Vec<f64> = markers
                    .iter()
                    .map(|k| {
                        cm.markers
                            .iter()
                            .position(|m| m == k)
                            .map(|i| cm.log_mean[i].exp())
                            .ok_or_else(|| Error::InvalidArgument(format!("marker {k} is not in the condition model")))
                    })
                    .collect::<Result<_>>()?;
                Some(condition_accuracy(&req, &rec, &scales)?)
            }
            None => None,
        };
        let name = |p: &Path| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        let report = MetricReport::build(&name(a), &name(b), &ca_cohort, &cb_cohort, &pairing, ca)?;
        let dir = out.map_or_else(|| self.out("eval"), Path::to_path_buf);
        create_dir(&dir)?;
        report.write(&dir, "metrics")?;
        Ok(report)
    }
}

/// Checks the cached eigenpairs against the canonical Laplacian.
fn basis_fits(canonical: &TriangleMesh, basis: &SpectralBasis) -> Result<bool> {
    let l = cotangent_laplacian(canonical)?;
    let u = basis.eigenvectors();
    let lu = l.mul_dense(u);
    let scale = l.diagonal().iter().fold(0.0f64, |a, d| a.max(d.abs())).max(1.0);
    for (j, lam) in basis.eigenvalues().iter().enumerate() {
        let r = (lu.column(j) - u.column(j) * *lam).norm();
        if r > 1e-6 * scale {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `(id, mesh)` for every `<id>.obj` in `dir` whose stem has no dot.
pub fn load_cohort(dir: &Path) -> Result<Vec<(String, TriangleMesh)>> {
    let ids: Vec<String> = dataset_ids(dir)?.into_iter().filter(|id| !id.contains('.')).collect();
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!("no meshes in {}", dir.display())));
    }
    ids.par_iter().map(|id| Ok((id.clone(), load_dataset_mesh(dir, id)?))).collect()
}

fn generated_csv(shapes: &[GeneratedShape], markers: &[Marker]) -> String {
    let mut s = String::from("id");
    for m in markers {
        write!(s, ",requested_{m}").unwrap();
    }
    s.push_str(",NW,AR,LI,V,weld_degrees,valid\n");
    for g in shapes {
        s.push_str(&g.id);
        for i in 0..markers.len() {
            let v = g.requested.as_ref().map_or(f64::NAN, |r| r[i]);
            write!(s, ",{v:?}").unwrap();
        }
        match &g.recalled {
            Some(m) => write!(s, ",{:?},{:?},{:?},{:?}", m.nw, m.ar, m.li, m.v).unwrap(),
            None => s.push_str(",NaN,NaN,NaN,NaN"),
        }
        writeln!(s, ",{:?},{}", g.weld_degrees, g.valid).unwrap();
    }
    s
}

type Requested = (Vec<Marker>, Vec<(String, Vec<f64>)>);

/// Requested-condition columns of a `conditions.csv`, if it has any.
fn read_requested(path: &Path) -> Result<Option<Requested>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let cols: Vec<(usize, Marker)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("requested_").map(|m| m.parse().map(|m| (i, m))))
        .collect::<Result<_>>()?;
    if cols.is_empty() {
        return Ok(None);
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let vals = cols
            .iter()
            .map(|&(i, _)| {
                f.get(i)
                    .and_then(|x| x.parse::<f64>().ok())
                    .ok_or_else(|| Error::parse(n + 2, format!("bad requested value in {}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((f[0].to_string(), vals));
    }
    Ok(Some((cols.into_iter().map(|(_, m)| m).collect(), rows)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_csv_round_trips_requested_values() {
        let shapes = vec![GeneratedShape {
            id: "gen_0000".into(),
            requested: Some(vec![0.7]),
            recalled: None,
            weld_degrees: 1.5,
            valid: true,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("conditions.csv");
        std::fs::write(&p, generated_csv(&shapes, &[Marker::AspectRatio])).unwrap();
        let (m, rows) = read_requested(&p).unwrap().unwrap();
        assert_eq!(m, vec![Marker::AspectRatio]);
        assert_eq!(rows, vec![("gen_0000".to_string(), vec![0.7])]);
    }

    #[test]
    fn unconditional_csv_has_no_requested_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("conditions.csv");
        std::fs::write(&p, generated_csv(&[], &[])).unwrap();
        assert!(read_requested(&p).unwrap().is_none());
        assert!(read_requested(&dir.path().join("absent.csv")).unwrap().is_none());
    }

    #[test]
    fn worker_variable_is_validated() {
        // Only this test touches the variable.
        std::env::set_var(WORKERS_ENV, "0");
        assert!(worker_pool().is_err());
        std::env::set_var(WORKERS_ENV, "2");
        assert_eq!(worker_pool().unwrap().current_num_threads(), 2);
        std::env::remove_var(WORKERS_ENV);
    }

    #[test]
    fn missing_upstream_names_its_producer() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::parse("[canonical]\nkind = \"cylinder\"\nresolution = 8\n[ghd]\nmodes = 6\n").unwrap();
        cfg.paths.output = dir.path().to_path_buf();
        let p = Pipeline::new(cfg);
        match p.train_stage1() {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "synth-data"),
            other => panic!("{other:?}"),
        }
        std::fs::create_dir_all(dir.path().join("data")).unwrap();
        std::fs::write(dir.path().join("data/shape_0000.obj"), "").unwrap();
        match p.train_stage2() {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "fit-ghd"),
            other => panic!("{other:?}"),
        }
    }
}
