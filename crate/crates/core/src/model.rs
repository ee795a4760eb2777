//! Trained consistency models and their checkpoint files.
//!
//! A model is one or two aggregators plus the shared log-temperature of the
//! loss they were trained with. Checkpoint layout:
//!
//! ```text
//! magic    8 bytes  "DFCONCK1"
//! hlen     u64 LE   length of the JSON header in bytes
//! header   hlen     UTF-8 JSON (see CheckpointHeader)
//! payload           f32 LE; per aggregator in header order: weight (d_in x d_out, row-major), then bias
//! ```
//!
//! Parameters are held as `f64` in memory and stored as `f32`; a model that
//! came out of [`ConsistencyModel::load`] or [`ConsistencyModel::quantize_f32`]
//! round-trips bit for bit.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{ModelParams, Role};
use crate::consistency::CrossLossMode;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFCONCK1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// One identity aggregator.
    Intra,
    /// Visual and audio aggregators.
    Cross,
}

impl ModelKind {
    pub fn roles(self) -> &'static [Role] {
        match self {
            ModelKind::Intra => &[Role::Identity],
            ModelKind::Cross => &[Role::Visual, Role::Audio],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorHeader {
    pub role: Role,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: ModelKind,
    pub log_tau: f64,
    pub step: usize,
    pub loss_mode: CrossLossMode,
    pub byte_order: String,
    pub aggregators: Vec<AggregatorHeader>,
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyModel {
    pub kind: ModelKind,
    pub log_tau: f64,
    pub aggregators: Vec<ModelParams>,
    pub step: usize,
    pub loss_mode: CrossLossMode,
    pub train_config: Option<serde_json::Value>,
}

impl ConsistencyModel {
    /// Fresh model; `d_in` is looked up per role.
    pub fn init<R: Rng + ?Sized>(
        kind: ModelKind,
        d_in: impl Fn(Role) -> usize,
        d_out: usize,
        tau_init: f64,
        rng: &mut R,
    ) -> Self {
        let aggregators = kind
            .roles()
            .iter()
            .map(|&role| ModelParams::init(role, d_in(role), d_out, rng))
            .collect();
        ConsistencyModel {
            kind,
            log_tau: tau_init.ln(),
            aggregators,
            step: 0,
            loss_mode: CrossLossMode::default(),
            train_config: None,
        }
    }

    /// Temperature clamped to `[TAU_MIN, TAU_MAX]`.
    pub fn tau(&self) -> f64 {
        self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)
    }

    pub fn clamp_tau(&mut self) {
        self.log_tau = self.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    pub fn aggregator(&self, role: Role) -> Result<&ModelParams> {
        self.aggregators
            .iter()
            .find(|p| p.role == role)
            .ok_or_else(|| Error::Shape(format!("{:?} model has no {role:?} aggregator", self.kind)))
    }

    pub fn quantize_f32(&mut self) {
        self.aggregators.iter_mut().for_each(ModelParams::quantize_f32);
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            log_tau: self.log_tau,
            step: self.step,
            loss_mode: self.loss_mode,
            byte_order: crate::streams::BYTE_ORDER.to_string(),
            aggregators: self
                .aggregators
                .iter()
                .map(|p| AggregatorHeader {
                    role: p.role,
                    d_in: p.d_in,
                    d_out: p.d_out,
                })
                .collect(),
            train_config: self.train_config.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.aggregators {
            for v in p.weight.iter().chain(&p.bias) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(Error::format(path, "truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(path, e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if header.byte_order != crate::streams::BYTE_ORDER {
            return Err(Error::format(path, format!("unsupported byte_order {:?}", header.byte_order)));
        }
        let roles: Vec<Role> = header.aggregators.iter().map(|a| a.role).collect();
        if roles != header.kind.roles() {
            return Err(Error::format(
                path,
                format!("{:?} checkpoint lists aggregators {roles:?}", header.kind),
            ));
        }
        if !header.log_tau.is_finite() {
            return Err(Error::format(path, "log_tau is not finite"));
        }

        let payload = &body[hlen..];
        let expected: usize = header.aggregators.iter().map(|a| (a.d_in + 1) * a.d_out * 4).sum();
        if payload.len() != expected {
            return Err(Error::SizeMismatch {
                path: path.to_path_buf(),
                expected: expected as u64,
                found: payload.len() as u64,
            });
        }
        let mut values = payload.chunks_exact(4).map(|c| {
            f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))
        });
        let mut aggregators = Vec::with_capacity(header.aggregators.len());
        for a in &header.aggregators {
            if a.d_in == 0 || a.d_out == 0 {
                return Err(Error::format(path, "aggregator dimensions must be positive"));
            }
            let weight: Vec<f64> = values.by_ref().take(a.d_in * a.d_out).collect();
            let bias: Vec<f64> = values.by_ref().take(a.d_out).collect();
            let p = ModelParams {
                role: a.role,
                d_in: a.d_in,
                d_out: a.d_out,
                weight,
                bias,
            };
            if !p.is_finite() {
                return Err(Error::format(path, format!("non-finite {:?} parameters", a.role)));
            }
            aggregators.push(p);
        }
        if header.kind == ModelKind::Cross && aggregators[0].d_out != aggregators[1].d_out {
            return Err(Error::format(path, "visual and audio embeddings differ in width"));
        }
        Ok(ConsistencyModel {
            kind: header.kind,
            log_tau: header.log_tau,
            aggregators,
            step: header.step,
            loss_mode: header.loss_mode,
            train_config: header.train_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ConsistencyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = ConsistencyModel::init(ModelKind::Cross, |_| 6, 4, 0.07, &mut rng);
        m.aggregators[1].bias[2] = 0.125;
        m.step = 17;
        m.loss_mode = CrossLossMode::SharedDenominator;
        m.quantize_f32();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = m.to_bytes();
        let back = ConsistencyModel::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.log_tau.to_bits(), m.log_tau.to_bits());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn loss_mode_is_echoed_in_header() {
        let bytes = model().to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("\"loss_mode\":\"paper_literal\""));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = model().to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            ConsistencyModel::from_bytes(&bytes, Path::new("mem")),
            Err(Error::SizeMismatch { .. })
        ));
    }

    #[test]
    fn tau_is_clamped() {
        let mut m = model();
        m.log_tau = 5.0;
        assert_eq!(m.tau(), TAU_MAX);
        m.log_tau = -50.0;
        assert_eq!(m.tau(), TAU_MIN);
        m.clamp_tau();
        assert!((m.log_tau - TAU_MIN.ln()).abs() < 1e-15);
    }
}
