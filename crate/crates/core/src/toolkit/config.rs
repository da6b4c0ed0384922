//! Pipeline configuration.
//!
//! A TOML document; unknown keys anywhere are rejected. Every section is
//! optional and defaults as below.
//!
//! ```toml
//! seed = 0                       # feeds every named random stream
//!
//! [paths]
//! output = "run"                 # all artifacts are written here
//! # canonical = "template.obj"   # external canonical mesh (OBJ/PLY, .labels sidecar)
//! # dataset = "meshes"           # external dataset (default <output>/data)
//!
//! [canonical]                    # used when paths.canonical is absent
//! kind = "sphere_cap_bifurcation"
//! resolution = 3
//!
//! [ghd]
//! modes = 48
//! [ghd.fit]                      # see ghd::FitConfig
//!
//! [centerline]
//! modes = 8
//!
//! [synth]                        # see toolkit::SynthConfig
//! [stage1]                       # see genmodel::Stage1Config
//! [stage2]                       # see genmodel::Stage2Config
//!
//! [conditions]
//! markers = ["AR"]
//! pool = 512
//!
//! [generate]
//! count = 16
//! ```
//!
//! The `seed` keys inside `[ghd.fit]`, `[stage1]` and `[stage2]` are
//! overwritten by the top-level seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::canonical::CanonicalKind;
use super::cohort::SynthConfig;
use crate::error::{Error, Result};
use crate::genmodel::{Stage1Config, Stage2Config};
use crate::ghd::FitConfig;
use crate::markers::Marker;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub output: PathBuf,
    pub canonical: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            output: PathBuf::from("run"),
            canonical: None,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CanonicalConfig {
    pub kind: CanonicalKind,
    pub resolution: u32,
}

impl Default for CanonicalConfig {
    fn default() -> Self {
        CanonicalConfig {
            kind: CanonicalKind::SphereCapBifurcation,
            resolution: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GhdConfig {
    pub modes: usize,
    pub fit: FitConfig,
}

impl Default for GhdConfig {
    fn default() -> Self {
        GhdConfig {
            modes: 48,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CenterlineConfig {
    pub modes: usize,
}

impl Default for CenterlineConfig {
    fn default() -> Self {
        CenterlineConfig { modes: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionsConfig {
    pub markers: Vec<Marker>,
    /// Unconditional prior samples feeding the condition distribution.
    pub pool: usize,
}

impl Default for ConditionsConfig {
    fn default() -> Self {
        ConditionsConfig {
            markers: vec![Marker::AspectRatio],
            pool: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub count: usize,
    /// Tube ring spacing in mm; the mean cross-section edge when absent.
    pub spacing: Option<f64>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { count: 16, spacing: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub canonical: CanonicalConfig,
    pub ghd: GhdConfig,
    pub centerline: CenterlineConfig,
    pub synth: SynthConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub conditions: ConditionsConfig,
    pub generate: GenerateConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.apply_seed();
        Ok(cfg)
    }

    /// Reads and validates; relative paths resolve against the file's
    /// directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.output);
        if let Some(p) = cfg.paths.canonical.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.paths.dataset.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    fn apply_seed(&mut self) {
        self.ghd.fit.seed = self.seed;
        self.stage1.seed = self.seed;
        self.stage2.seed = self.seed;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.apply_seed();
        self
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.paths.canonical, &self.paths.dataset].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("path {} does not exist", p.display())));
            }
        }
        if self.ghd.modes == 0 {
            return Err(Error::Config("ghd.modes must be positive".into()));
        }
        if self.centerline.modes == 0 {
            return Err(Error::Config("centerline.modes must be positive".into()));
        }
        if self.conditions.markers.is_empty() || self.conditions.pool < 16 {
            return Err(Error::Config("conditions need ≥ 1 marker and a pool of ≥ 16 samples".into()));
        }
        let mut seen = self.conditions.markers.clone();
        seen.sort_by_key(|m| m.to_string());
        seen.dedup();
        if seen.len() != self.conditions.markers.len() {
            return Err(Error::Config("repeated condition marker".into()));
        }
        if self.generate.count == 0 || self.generate.spacing.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("generate.count must be positive and spacing positive".into()));
        }
        self.ghd.fit.validate()?;
        self.synth.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        Ok(())
    }

    pub fn output(&self) -> &Path {
        &self.paths.output
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.dataset.clone().unwrap_or_else(|| self.paths.output.join("data"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = PipelineConfig::parse("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in ["bogus = 1", "[paths]\nbogus = 1", "[stage1]\nwidth = 3", "[ghd.fit]\nrate = 1", "[extra]\n"] {
            assert!(PipelineConfig::parse(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn top_seed_reaches_every_stream() {
        let c = PipelineConfig::parse("seed = 9\n[stage1]\nseed = 3\n").unwrap();
        assert_eq!((c.stage1.seed, c.stage2.seed, c.ghd.fit.seed), (9, 9, 9));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = PipelineConfig::parse("seed = 4\n[conditions]\nmarkers = [\"AR\", \"NW\"]\n").unwrap();
        assert_eq!(PipelineConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn ranges_and_paths_are_checked() {
        let bad = [
            "[ghd]\nmodes = 0",
            "[conditions]\nmarkers = []",
            "[conditions]\nmarkers = [\"AR\", \"AR\"]",
            "[generate]\ncount = 0",
            "[stage1]\nprior_batch = 4",
            "[paths]\ncanonical = \"/definitely/not/here.obj\"",
        ];
        for doc in bad {
            assert!(PipelineConfig::parse(doc).and_then(|c| c.validate()).is_err(), "{doc}");
        }
    }

    #[test]
    fn relative_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[paths]\noutput = \"out\"\n").unwrap();
        let c = PipelineConfig::read(&p).unwrap();
        assert_eq!(c.output(), dir.path().join("out"));
        assert_eq!(c.dataset_dir(), dir.path().join("out").join("data"));
    }
}
