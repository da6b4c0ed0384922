//! Generative models: the stage-I VAE over GHD tokens, the stage-II VAE over
//! centerline parameters, their training losses, and a PCA baseline.
//!
//! Networks are trained with a small reverse-mode tape ([`tape`]). Geometry
//! terms (Chamfer, morphing energies, markers, centerline points) are
//! differentiated by hand or by forward-mode duals and enter the tape as
//! scalar nodes with known input gradients.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "ANEUGVAE"
//! version    u32      1
//! kind       u32      1 = stage I, 2 = stage II
//! config     u64 length + UTF-8 TOML (training config echo)
//! meta       u64 length + UTF-8 TOML (dimensions, standardization, conditions)
//! networks   u32 count, then per network:
//!              u32 width count, u32 widths…,
//!              per layer: weights (in × out, row-major f64), bias (out f64)
//! checksum   u64      checksum64 of every preceding byte
//! ```

pub mod dual;
mod generate;
pub mod losses;
pub mod nn;
pub mod pca;
pub mod stage1;
pub mod stage2;
pub mod tape;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::util::{checksum64, push_f64s, ByteReader};
use nn::{Linear, Mlp};

pub use generate::{generate, morph, sweep, Generated};
pub use losses::{
    cond_loss, kl_standard_normal, mea_loss, reparameterize, reparameterized_sample, treg_loss, EnergyStats,
};
pub use pca::PcaModel;
pub use stage1::{
    estimate_condition_model, train_stage1, Stage1Batch, Stage1Config, Stage1Data, Stage1Init, Stage1Terms, VaeStage1,
};
pub use stage2::{sections_for, stage2_objective, train_stage2, BranchSet, Stage2Batch, Stage2Config, Stage2Data, Stage2Terms, VaeStage2};

/// Affine standardization `y = (x − mean) / scale` per feature.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Scales below this are replaced by 1 (the feature is constant).
const SCALE_FLOOR: f64 = 1e-12;

fn column_means(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = rows.first() else {
        return Err(Error::InvalidArgument("cannot standardize an empty dataset".into()));
    };
    if rows.iter().any(|r| r.len() != first.len()) {
        return Err(Error::DimensionMismatch("rows of different lengths".into()));
    }
    let n = rows.len() as f64;
    Ok((0..first.len()).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect())
}

impl Scaler {
    /// Per-feature centering with one shared scale (the RMS deviation over
    /// all features), so relative feature magnitudes survive.
    pub fn fit_shared(rows: &[Vec<f64>]) -> Result<Self> {
        let mean = column_means(rows)?;
        let count = (rows.len() * mean.len()) as f64;
        let var = rows.iter().flat_map(|r| r.iter().zip(&mean).map(|(x, m)| (x - m).powi(2))).sum::<f64>() / count;
        let s = if var.sqrt() > SCALE_FLOOR { var.sqrt() } else { 1.0 };
        Ok(Scaler {
            scale: vec![s; mean.len()],
            mean,
        })
    }

    /// Per-feature centering and scaling by the population deviation.
    pub fn fit_per_feature(rows: &[Vec<f64>]) -> Result<Self> {
        let mean = column_means(rows)?;
        let n = rows.len() as f64;
        let scale = (0..mean.len())
            .map(|c| {
                let s = (rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
                if s > SCALE_FLOOR { s } else { 1.0 }
            })
            .collect();
        Ok(Scaler { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.mean).zip(&self.scale).map(|((y, m), s)| y * s + m).collect()
    }

    pub fn matrix(&self, rows: &[Vec<f64>]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows.len(), self.dim());
        for (r, x) in rows.iter().enumerate() {
            for (c, v) in self.forward(x).into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        m
    }
}

/// Per-epoch loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl TrainingLog {
    pub fn new(columns: Vec<&'static str>) -> Self {
        TrainingLog { columns, rows: Vec::new() }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| *c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("epoch,{}\n", self.columns.join(","));
        for (e, r) in self.rows.iter().enumerate() {
            write!(s, "{}", e + 1).unwrap();
            for v in r {
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

const MAGIC: &[u8; 8] = b"ANEUGVAE";
const VERSION: u32 = 1;

/// Decoded checkpoint container; see the module docs for the layout.
pub(crate) struct Checkpoint {
    pub kind: u32,
    pub config: String,
    pub meta: String,
    pub networks: Vec<Mlp>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.kind.to_le_bytes());
        for text in [&self.config, &self.meta] {
            b.extend_from_slice(&(text.len() as u64).to_le_bytes());
            b.extend_from_slice(text.as_bytes());
        }
        b.extend_from_slice(&(self.networks.len() as u32).to_le_bytes());
        for net in &self.networks {
            let widths = net.widths();
            b.extend_from_slice(&(widths.len() as u32).to_le_bytes());
            for w in widths {
                b.extend_from_slice(&(w as u32).to_le_bytes());
            }
            for l in &net.layers {
                push_f64s(&mut b, l.w.transpose().iter().copied());
                push_f64s(&mut b, l.b.iter().copied());
            }
        }
        let sum = checksum64(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let found = checksum64(body);
        let expected = u64::from_le_bytes(tail.try_into().unwrap());
        if found != expected {
            return Err(Error::Checksum { expected, found });
        }
        let mut r = ByteReader::new(&body[8..]);
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.u32()?;
        let mut text = || -> Result<String> {
            let n = r.u64()? as usize;
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
        };
        let config = text()?;
        let meta = text()?;
        let count = r.u32()? as usize;
        let mut networks = Vec::with_capacity(count);
        for _ in 0..count {
            let nw = r.u32()? as usize;
            if nw < 2 {
                return Err(Error::Format("network with fewer than two widths".into()));
            }
            let widths: Vec<usize> = (0..nw).map(|_| r.u32().map(|w| w as usize)).collect::<Result<_>>()?;
            let mut layers = Vec::with_capacity(nw - 1);
            for w in widths.windows(2) {
                let (i, o) = (w[0], w[1]);
                let weights = r.f64s(i * o)?;
                let bias = r.f64s(o)?;
                layers.push(Linear {
                    w: DMatrix::from_row_slice(i, o, &weights),
                    b: DMatrix::from_row_slice(1, o, &bias),
                });
            }
            networks.push(Mlp { layers });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.remaining())));
        }
        Ok(Checkpoint {
            kind,
            config,
            meta,
            networks,
        })
    }
}

pub(crate) fn to_toml<T: serde::Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn from_toml<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Format(format!("{what}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ck = Checkpoint {
            kind: 2,
            config: "a = 1\n".into(),
            meta: "b = [0.5]\n".into(),
            networks: vec![Mlp::new(&[3, 4, 2], &mut rng), Mlp::new(&[2, 5], &mut rng)],
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind, 2);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.networks, ck.networks);
        // First weight is stored row-major right after the width table.
        let first = 8 + 4 + 4 + 8 + 6 + 8 + 10 + 4 + 4 + 3 * 4;
        assert_eq!(f64::from_le_bytes(bytes[first..first + 8].try_into().unwrap()), ck.networks[0].layers[0].w[(0, 0)]);
        let second = f64::from_le_bytes(bytes[first + 8..first + 16].try_into().unwrap());
        assert_eq!(second, ck.networks[0].layers[0].w[(0, 1)]);

        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn scalers_invert() {
        let rows = vec![vec![1.0, 10.0], vec![3.0, 14.0], vec![2.0, 12.0]];
        let shared = Scaler::fit_shared(&rows).unwrap();
        let per = Scaler::fit_per_feature(&rows).unwrap();
        assert_eq!(shared.mean, vec![2.0, 12.0]);
        assert_eq!(shared.scale[0], shared.scale[1]);
        assert!((per.scale[1] / per.scale[0] - 2.0).abs() < 1e-12);
        for s in [&shared, &per] {
            for r in &rows {
                let back = s.inverse(&s.forward(r));
                assert!(back.iter().zip(r).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
        assert_eq!(Scaler::fit_shared(&[vec![5.0], vec![5.0]]).unwrap().scale, vec![1.0]);
        assert_eq!(Scaler::fit_per_feature(&[vec![5.0, 1.0], vec![5.0, 2.0]]).unwrap().scale[0], 1.0);
    }

    #[test]
    fn training_log_csv() {
        let mut log = TrainingLog::new(vec!["total", "kl"]);
        log.rows.push(vec![1.5, 0.25]);
        log.rows.push(vec![1.0, 0.5]);
        assert_eq!(log.to_csv(), "epoch,total,kl\n1,1.5,0.25\n2,1.0,0.5\n");
        assert_eq!(log.column("kl"), Some(vec![0.25, 0.5]));
    }
}
