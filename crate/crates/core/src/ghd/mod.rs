//! Spectral shape encoding over a canonical mesh.
//!
//! A shape registered to the canonical mesh is represented by tokens
//! `φ ∈ ℝ^{n×3}`: vertex `k` sits at `Σᵢ Uᵢ[k]·φᵢ`, where `Uᵢ` are the `n`
//! lowest eigenvectors of the canonical cotangent Laplacian. Decoding is
//! linear, so any vertex-space gradient pulls back to tokens as `Uᵀ·G`.

mod chamfer;
mod energy;
mod fit;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{cotangent_laplacian, spectral_basis, SparseSymmetricMatrix, SpectralBasis, TriangleMesh, Vec3};

pub use chamfer::{chamfer, chamfer_frozen, correspondences, Chamfer, Correspondence};
pub use energy::{morph_energies, EnergyModel, MorphEnergies};
pub use fit::{fit, write_trace_csv, FitConfig, FitProblem, FitResult, FrozenPairs};

/// Per-mode `(φx, φy, φz)` coefficients tied to one spectral basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GhdTokens {
    /// `n × 3`.
    coeffs: DMatrix<f64>,
    basis_checksum: u64,
}

impl GhdTokens {
    pub fn new(coeffs: DMatrix<f64>, basis_checksum: u64) -> Result<Self> {
        if coeffs.ncols() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "token matrix must be n×3, got {}×{}",
                coeffs.nrows(),
                coeffs.ncols()
            )));
        }
        if coeffs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("token coefficient".into()));
        }
        Ok(GhdTokens {
            coeffs,
            basis_checksum,
        })
    }

    pub fn zeros(n: usize, basis_checksum: u64) -> Self {
        GhdTokens {
            coeffs: DMatrix::zeros(n, 3),
            basis_checksum,
        }
    }

    pub fn mode_count(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn basis_checksum(&self) -> u64 {
        self.basis_checksum
    }

    /// Row-major flattening `φ₁x, φ₁y, φ₁z, φ₂x, …`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.coeffs.len());
        for r in 0..self.coeffs.nrows() {
            for c in 0..3 {
                out.push(self.coeffs[(r, c)]);
            }
        }
        out
    }

    pub fn from_flat(flat: &[f64], basis_checksum: u64) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "flat token vector of length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(flat.len() / 3, 3, flat), basis_checksum)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = TokenFile {
            basis_checksum: format!("{:016x}", self.basis_checksum),
            n: self.mode_count(),
            rows: (0..self.mode_count())
                .map(|r| [self.coeffs[(r, 0)], self.coeffs[(r, 1)], self.coeffs[(r, 2)]])
                .collect(),
        };
        let text = toml::to_string(&file).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: TokenFile = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.rows.len() != file.n {
            return Err(Error::Format(format!(
                "token file declares n = {} but has {} rows",
                file.n,
                file.rows.len()
            )));
        }
        let checksum = u64::from_str_radix(&file.basis_checksum, 16)
            .map_err(|_| Error::Format(format!("bad basis checksum `{}`", file.basis_checksum)))?;
        let flat: Vec<f64> = file.rows.iter().flatten().copied().collect();
        Self::from_flat(&flat, checksum)
    }
}

/// On-disk token schema.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenFile {
    basis_checksum: String,
    n: usize,
    rows: Vec<[f64; 3]>,
}

/// Canonical mesh, its Laplacian, and the truncated eigenbasis: everything
/// needed to move between tokens and registered meshes.
#[derive(Debug, Clone)]
pub struct GhdSpace {
    canonical: TriangleMesh,
    laplacian: SparseSymmetricMatrix,
    basis: SpectralBasis,
}

impl GhdSpace {
    pub fn new(canonical: TriangleMesh, basis: SpectralBasis) -> Result<Self> {
        if basis.dim() != canonical.vertex_count() {
            return Err(Error::DimensionMismatch(format!(
                "basis over {} vertices, canonical mesh has {}",
                basis.dim(),
                canonical.vertex_count()
            )));
        }
        let laplacian = cotangent_laplacian(&canonical)?;
        Ok(GhdSpace {
            canonical,
            laplacian,
            basis,
        })
    }

    pub fn from_canonical(canonical: TriangleMesh, modes: usize) -> Result<Self> {
        let laplacian = cotangent_laplacian(&canonical)?;
        let basis = spectral_basis(&laplacian, modes)?;
        Ok(GhdSpace {
            canonical,
            laplacian,
            basis,
        })
    }

    pub fn canonical(&self) -> &TriangleMesh {
        &self.canonical
    }

    pub fn laplacian(&self) -> &SparseSymmetricMatrix {
        &self.laplacian
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn mode_count(&self) -> usize {
        self.basis.mode_count()
    }

    pub fn vertex_count(&self) -> usize {
        self.basis.dim()
    }

    pub fn tokens(&self, coeffs: DMatrix<f64>) -> Result<GhdTokens> {
        if coeffs.nrows() != self.mode_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} token rows for a {}-mode basis",
                coeffs.nrows(),
                self.mode_count()
            )));
        }
        GhdTokens::new(coeffs, self.basis.checksum())
    }

    fn check(&self, tokens: &GhdTokens) -> Result<()> {
        if tokens.basis_checksum() != self.basis.checksum() {
            return Err(Error::Checksum {
                expected: self.basis.checksum(),
                found: tokens.basis_checksum(),
            });
        }
        if tokens.mode_count() != self.mode_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens for a {}-mode basis",
                tokens.mode_count(),
                self.mode_count()
            )));
        }
        Ok(())
    }

    /// `V = U·Φ` for an `n × 3` coefficient matrix.
    pub fn decode_positions(&self, coeffs: &DMatrix<f64>) -> Vec<Vec3> {
        let v = self.basis.eigenvectors() * coeffs;
        (0..v.nrows())
            .map(|k| Vec3::new(v[(k, 0)], v[(k, 1)], v[(k, 2)]))
            .collect()
    }

    /// Registered mesh for `tokens`; faces, labels and rings come from the
    /// canonical mesh.
    pub fn decode(&self, tokens: &GhdTokens) -> Result<TriangleMesh> {
        self.check(tokens)?;
        let v = self.decode_positions(tokens.coeffs());
        if v.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("decoded vertex".into()));
        }
        self.canonical.with_vertices(v)
    }

    /// Least-squares tokens for a registered vertex set, `Φ = Uᵀ·V`.
    pub fn project_positions(&self, vertices: &[Vec3]) -> DMatrix<f64> {
        let v = DMatrix::from_fn(vertices.len(), 3, |k, c| vertices[k][c]);
        self.basis.eigenvectors().transpose() * v
    }

    pub fn project(&self, mesh: &TriangleMesh) -> Result<GhdTokens> {
        if mesh.vertex_count() != self.vertex_count() || mesh.faces() != self.canonical.faces() {
            return Err(Error::DimensionMismatch(
                "mesh connectivity differs from the canonical mesh".into(),
            ));
        }
        self.tokens(self.project_positions(mesh.vertices()))
    }

    /// Chains a per-vertex gradient to token space: `Uᵀ·G`.
    pub fn pull_back(&self, grad: &[Vec3]) -> DMatrix<f64> {
        self.project_positions(grad)
    }

    /// Change to mode-1 coefficients that moves the decoded centroid by `delta`.
    pub(crate) fn centroid_shift(&self, delta: &Vec3) -> Option<Vec3> {
        let s: f64 = self.basis.eigenvectors().column(0).sum();
        if s.abs() < 1e-12 {
            return None;
        }
        Some(delta * (self.vertex_count() as f64 / s))
    }
}
