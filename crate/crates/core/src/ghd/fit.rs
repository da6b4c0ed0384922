use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::chamfer::{chamfer_frozen, correspondences, Correspondence};
use super::{GhdSpace, GhdTokens};
use crate::error::{Error, Result};
use crate::mesh::{point_centroid, Vec3};
use crate::util::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub step_size: f64,
    /// Targets with more points than this are subsampled (seeded).
    pub sample_count: usize,
    pub w_cs: f64,
    /// Relative loss decrease over `window` accepted steps below which the
    /// fit counts as converged.
    pub tolerance: f64,
    pub window: usize,
    /// Absolute loss at or below which the fit stops immediately.
    pub loss_floor: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iterations: 2000,
            step_size: 1e-2,
            sample_count: 4096,
            w_cs: 1.0,
            tolerance: 1e-6,
            window: 20,
            loss_floor: 1e-14,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_iterations > 0
            && self.step_size > 0.0
            && self.sample_count > 0
            && self.w_cs >= 0.0
            && self.tolerance > 0.0
            && self.window > 0
            && self.loss_floor >= 0.0;
        if !positive {
            return Err(Error::Config(format!("fit settings out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub tokens: GhdTokens,
    /// Loss at the start and after every accepted step.
    pub trace: Vec<f64>,
    /// Attempted steps, accepted or not.
    pub iterations: usize,
    /// False when the iteration cap was hit first; tokens are then the best
    /// seen.
    pub converged: bool,
}

impl FitResult {
    pub fn loss(&self) -> f64 {
        *self.trace.last().expect("trace starts with the initial loss")
    }
}

/// The fitting objective for one target with its pairing machinery.
#[derive(Debug, Clone)]
pub struct FitProblem<'a> {
    space: &'a GhdSpace,
    target: Vec<Vec3>,
    rings: Vec<(Vec<usize>, Vec<Vec3>)>,
    w_cs: f64,
}

/// Pairings for the whole-shape term followed by one per ring.
#[derive(Debug, Clone)]
pub struct FrozenPairs {
    shape: Correspondence,
    rings: Vec<Correspondence>,
}

impl<'a> FitProblem<'a> {
    pub fn new(space: &'a GhdSpace, target: &[Vec3], target_rings: &[Vec<Vec3>], cfg: &FitConfig) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty fit target".into()));
        }
        let canonical_rings = space.canonical().boundary_rings();
        if canonical_rings.len() != target_rings.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} target rings for a canonical mesh with {} cross-sections",
                target_rings.len(),
                canonical_rings.len()
            )));
        }
        if target_rings.iter().any(|r| r.is_empty()) {
            return Err(Error::InvalidArgument("empty target ring".into()));
        }
        let target = if target.len() > cfg.sample_count {
            let mut rng = stream_rng(cfg.seed, "fit");
            let mut idx = sample(&mut rng, target.len(), cfg.sample_count).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| target[i]).collect()
        } else {
            target.to_vec()
        };
        Ok(FitProblem {
            space,
            target,
            rings: canonical_rings.iter().cloned().zip(target_rings.iter().cloned()).collect(),
            w_cs: cfg.w_cs,
        })
    }

    pub fn pairs(&self, coeffs: &DMatrix<f64>) -> Result<FrozenPairs> {
        let v = self.space.decode_positions(coeffs);
        Ok(FrozenPairs {
            shape: correspondences(&v, &self.target)?,
            rings: self
                .rings
                .iter()
                .map(|(idx, t)| correspondences(&gather(&v, idx), t))
                .collect::<Result<_>>()?,
        })
    }

    /// Loss and token gradient with pairings held fixed.
    pub fn loss_frozen(&self, coeffs: &DMatrix<f64>, pairs: &FrozenPairs) -> Result<(f64, DMatrix<f64>)> {
        let v = self.space.decode_positions(coeffs);
        let c = chamfer_frozen(&v, &self.target, &pairs.shape)?;
        let mut loss = c.value;
        let mut grad = c.grad;
        for ((idx, t), corr) in self.rings.iter().zip(&pairs.rings) {
            let c = chamfer_frozen(&gather(&v, idx), t, corr)?;
            loss += self.w_cs * c.value;
            for (&i, g) in idx.iter().zip(&c.grad) {
                grad[i] += g * self.w_cs;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("fit loss".into()));
        }
        Ok((loss, self.space.pull_back(&grad)))
    }

    pub fn loss(&self, coeffs: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let pairs = self.pairs(coeffs)?;
        self.loss_frozen(coeffs, &pairs)
    }

    /// Least-squares projection of the canonical mesh, shifted along the
    /// constant mode so the decoded centroid lands on the target centroid.
    pub fn initial_coeffs(&self, target_centroid: &Vec3) -> DMatrix<f64> {
        let mut c = self.space.project_positions(self.space.canonical().vertices());
        let decoded = point_centroid(&self.space.decode_positions(&c));
        if let Some(shift) = self.space.centroid_shift(&(target_centroid - decoded)) {
            for k in 0..3 {
                c[(0, k)] += shift[k];
            }
        }
        c
    }
}

fn gather(v: &[Vec3], idx: &[usize]) -> Vec<Vec3> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Fits tokens to a target point set by Adam with step rejection: a step
/// that raises the loss is discarded and the step size halved, so the
/// recorded trace never increases.
///
/// With cross-section rings the start point is first registered to the
/// whole-shape term alone (up to half the iteration budget); the ring terms
/// otherwise tend to pin the openings early and trap the rest of the surface.
/// The trace covers the full objective from that start point, and
/// `iterations` counts both phases.
pub fn fit(space: &GhdSpace, target: &[Vec3], target_rings: &[Vec<Vec3>], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let problem = FitProblem::new(space, target, target_rings, cfg)?;
    let mut x = problem.initial_coeffs(&point_centroid(target));
    let mut spent = 0;
    if !problem.rings.is_empty() && problem.w_cs > 0.0 {
        let shape_only = FitProblem { w_cs: 0.0, ..problem.clone() };
        let pre = descend(&shape_only, x, cfg, cfg.max_iterations / 2)?;
        x = pre.x;
        spent = pre.iterations;
    }
    let run = descend(&problem, x, cfg, cfg.max_iterations - spent)?;
    Ok(FitResult {
        tokens: space.tokens(run.x)?,
        trace: run.trace,
        iterations: spent + run.iterations,
        converged: run.converged,
    })
}

struct Descent {
    x: DMatrix<f64>,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn descend(problem: &FitProblem, mut x: DMatrix<f64>, cfg: &FitConfig, budget: usize) -> Result<Descent> {
    let (mut loss, mut grad) = problem.loss(&x)?;
    let mut trace = vec![loss];
    let (b1, b2, eps) = (0.9, 0.999, 1e-12);
    let mut m = DMatrix::zeros(x.nrows(), 3);
    let mut s = DMatrix::zeros(x.nrows(), 3);
    let mut lr = cfg.step_size;
    let mut t = 0i32;
    let mut iterations = 0;
    let mut converged = loss <= cfg.loss_floor;
    while !converged && iterations < budget {
        iterations += 1;
        t += 1;
        let m_new = &m * b1 + &grad * (1.0 - b1);
        let s_new = &s * b2 + grad.map(|g| g * g) * (1.0 - b2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let step = m_new.zip_map(&s_new, |mi, si| (mi / c1) / ((si / c2).sqrt() + eps));
        let candidate = &x - step * lr;
        let (l_new, g_new) = problem.loss(&candidate)?;
        if l_new <= loss {
            x = candidate;
            loss = l_new;
            grad = g_new;
            m = m_new;
            s = s_new;
            trace.push(loss);
            let w = cfg.window;
            converged = loss <= cfg.loss_floor
                || (trace.len() > w && (trace[trace.len() - 1 - w] - loss) <= cfg.tolerance * trace[trace.len() - 1 - w]);
        } else {
            t -= 1;
            lr *= 0.5;
            // no representable descent left at this step size
            converged = lr < cfg.step_size * 1e-12;
        }
    }
    Ok(Descent {
        x,
        trace,
        iterations,
        converged,
    })
}

/// `iteration,loss` rows for the accepted-step trace.
pub fn write_trace_csv(trace: &[f64], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,loss").unwrap();
    for (i, l) in trace.iter().enumerate() {
        writeln!(out, "{i},{l:e}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
