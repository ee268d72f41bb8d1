//! Checkpoint files: one JSON header line, a newline, then a binary blob
//! `"LAE1" | u64 W_s | W_s f64 means | [W_s f64 precisions]`, all
//! little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curvature::HessianMode;
use crate::error::{Error, Result};
use crate::net::{ArchSpec, Network};
use crate::posterior::DiagGaussianPosterior;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LAE1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// `map`, `posthoc` or `online`.
    pub kind: String,
    pub crate_version: String,
    pub arch: ArchSpec,
    pub config: TrainConfig,
    pub has_precision: bool,
    pub hessian_mode: Option<HessianMode>,
    pub step: u64,
    /// Mean per-image NLL on the training set, for typicality scores.
    pub train_nll_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub mean: Vec<f64>,
    pub precision: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(kind: &str, arch: ArchSpec, config: TrainConfig, mean: Vec<f64>, precision: Option<Vec<f64>>) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                kind: kind.into(),
                crate_version: env!("CARGO_PKG_VERSION").into(),
                arch,
                config,
                has_precision: precision.is_some(),
                hessian_mode: None,
                step: 0,
                train_nll_mean: None,
            },
            mean,
            precision,
        }
    }

    pub fn from_posterior(kind: &str, arch: ArchSpec, config: TrainConfig, post: &DiagGaussianPosterior) -> Self {
        let mut c = Self::new(kind, arch, config, post.mean.clone(), Some(post.precision.clone()));
        c.header.hessian_mode = post.mode;
        c.header.step = post.step;
        c
    }

    pub fn network(&self) -> Result<Network> {
        let net = Network::new(self.header.arch.clone())?;
        if net.num_params() != self.mean.len() {
            return Err(Error::Checkpoint(format!(
                "architecture has {} parameters but checkpoint stores {}",
                net.num_params(),
                self.mean.len()
            )));
        }
        Ok(net)
    }

    pub fn posterior(&self) -> Result<DiagGaussianPosterior> {
        let prec = self.precision.clone().ok_or(Error::MissingPrecision)?;
        let mut p = DiagGaussianPosterior::new(self.mean.clone(), prec)?;
        p.step = self.header.step;
        p.mode = self.header.hessian_mode;
        Ok(p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(p) = &self.precision {
            if p.len() != self.mean.len() {
                return Err(Error::Checkpoint("precision and mean lengths differ".into()));
            }
            if p.iter().any(|h| h.is_nan() || *h <= 0.0) {
                return Err(Error::Checkpoint("precision entries must be positive".into()));
            }
        }
        let mut header = self.header.clone();
        header.has_precision = self.precision.is_some();
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.mean.len() as u64).to_le_bytes());
        for v in self.mean.iter().chain(self.precision.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let blob = &bytes[nl + 1..];
        if blob.len() < 12 || &blob[..4] != MAGIC {
            return Err(Error::Checkpoint("bad blob magic".into()));
        }
        let w = u64::from_le_bytes(blob[4..12].try_into().unwrap()) as usize;
        let copies = if header.has_precision { 2 } else { 1 };
        let expected = 12 + 8 * w * copies;
        if blob.len() != expected {
            return Err(Error::Checkpoint(format!(
                "blob length {} does not match expected {expected}",
                blob.len()
            )));
        }
        let vals: Vec<f64> = blob[12..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (mean, precision) = if header.has_precision {
            let p = vals[w..].to_vec();
            if p.iter().any(|h| h.is_nan() || *h <= 0.0) {
                return Err(Error::Checkpoint("precision entries must be positive".into()));
            }
            (vals[..w].to_vec(), Some(p))
        } else {
            (vals, None)
        };
        Ok(Self {
            header,
            mean,
            precision,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerSpec;

    fn sample() -> Checkpoint {
        let arch = ArchSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::linear(4, 2), LayerSpec::Tanh, LayerSpec::linear(2, 4)],
            latent_index: 0,
        };
        let mean: Vec<f64> = (0..22).map(|i| (i as f64 * 0.77).sin() * 1e-3).collect();
        let prec: Vec<f64> = (0..22).map(|i| 1.0 + (i as f64).powi(3) / 7.0).collect();
        Checkpoint::new("online", arch, TrainConfig::default(), mean, Some(prec))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let b = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b);
        let nl = b.iter().position(|&x| x == b'\n').unwrap();
        assert_eq!(b.len() - nl - 1, 12 + 8 * 22 * 2);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut b = sample().to_bytes().unwrap();
        b.truncate(b.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_precision() {
        let mut c = sample();
        c.precision = None;
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(!back.header.has_precision);
        assert!(matches!(back.posterior(), Err(Error::MissingPrecision)));
    }

    #[test]
    fn bad_magic_and_version() {
        let b = sample().to_bytes().unwrap();
        let nl = b.iter().position(|&x| x == b'\n').unwrap();
        let mut bad = b.clone();
        bad[nl + 1] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let text = String::from_utf8(b[..nl].to_vec()).unwrap().replace("\"format_version\":1", "\"format_version\":9");
        let mut v = text.into_bytes();
        v.extend_from_slice(&b[nl..]);
        assert!(Checkpoint::from_bytes(&v).is_err());
    }
}
