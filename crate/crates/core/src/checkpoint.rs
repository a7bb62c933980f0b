//! Checkpoint files.
//!
//! ```text
//! RDSEG-CHECKPOINT\n
//! <header: one line of JSON>\n
//! <payload: little-endian f32>
//! ```
//!
//! The payload holds every network tensor in manifest order, followed by
//! the two AdamW moment vectors. The header's `payload_sha256` covers the
//! payload bytes only.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, DenoiserNetwork};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::trainer::TrainConfig;

pub const MAGIC: &str = "RDSEG-CHECKPOINT";
pub const FORMAT_VERSION: u64 = 1;
pub const FIRST_MOMENT: &str = "optimizer.first_moment";
pub const SECOND_MOMENT: &str = "optimizer.second_moment";

/// One tensor of the payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

impl ManifestEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u64,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    /// Epochs completed.
    pub epoch: u64,
    /// Optimizer updates taken.
    pub step: u64,
    /// Bit pattern of the optimizer's current learning rate.
    pub lr_bits: u64,
    pub manifest: Vec<ManifestEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: DenoiserNetwork<f32>,
    pub opt: OptimizerState<f32>,
    pub train: TrainConfig,
    pub epoch: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn f32_bytes(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// SHA-256 of the parameters as little-endian f32, hex encoded.
pub fn parameter_checksum(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    f32_bytes(values, &mut bytes);
    sha256_hex(&bytes)
}

impl Checkpoint {
    /// Serializes to the file layout. Identical state gives identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.net.parameter_count();
        if self.opt.first_moment.len() != n || self.opt.second_moment.len() != n {
            return Err(Error::Shape(format!(
                "optimizer state for {} parameters, network has {n}",
                self.opt.first_moment.len()
            )));
        }
        let params = self.net.params();
        let mut manifest: Vec<ManifestEntry> = params
            .infos()
            .iter()
            .map(|i| ManifestEntry {
                name: i.name.clone(),
                shape: i.shape.clone(),
                offset: 4 * i.offset as u64,
            })
            .collect();
        for (k, name) in [FIRST_MOMENT, SECOND_MOMENT].into_iter().enumerate() {
            manifest.push(ManifestEntry {
                name: name.into(),
                shape: vec![n],
                offset: 4 * ((k + 1) * n) as u64,
            });
        }
        let mut payload = Vec::with_capacity(12 * n);
        f32_bytes(params.values(), &mut payload);
        f32_bytes(&self.opt.first_moment, &mut payload);
        f32_bytes(&self.opt.second_moment, &mut payload);
        let header = Header {
            format_version: FORMAT_VERSION,
            denoiser: self.net.config().clone(),
            train: self.train.clone(),
            epoch: self.epoch as u64,
            step: self.opt.step,
            lr_bits: self.opt.lr.to_bits(),
            manifest,
            payload_bytes: payload.len() as u64,
            payload_sha256: sha256_hex(&payload),
        };
        let json = serde_json::to_string(&header)
            .map_err(|e| Error::Corrupt(format!("header serialization: {e}")))?;
        let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 2 + payload.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Reads only the header, checking the magic line and version.
    pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .and_then(|r| r.strip_prefix(b"\n"))
            .ok_or_else(|| Error::Corrupt("missing checkpoint magic line".into()))?;
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Corrupt("unterminated header".into()))?;
        let raw: serde_json::Value = serde_json::from_slice(&rest[..end])
            .map_err(|e| Error::Corrupt(format!("header is not JSON: {e}")))?;
        let found = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Corrupt("header lacks format_version".into()))?;
        if found != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found,
                supported: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw)
            .map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
        Ok((header, &rest[end + 1..]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = Self::read_header(bytes)?;
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::Corrupt(format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        let digest = sha256_hex(payload);
        if digest != header.payload_sha256 {
            return Err(Error::Corrupt(format!(
                "payload checksum {digest} does not match {}",
                header.payload_sha256
            )));
        }
        header.train.validate()?;

        let mut end = 0u64;
        for e in &header.manifest {
            if e.offset != end {
                return Err(Error::Manifest(format!(
                    "tensor {} starts at byte {}, expected {end}",
                    e.name, e.offset
                )));
            }
            end += 4 * e.len() as u64;
        }
        if end != header.payload_bytes {
            return Err(Error::Manifest(format!(
                "manifest covers {end} bytes of a {}-byte payload",
                header.payload_bytes
            )));
        }
        let read = |e: &ManifestEntry| -> Vec<f32> {
            let start = e.offset as usize;
            payload[start..start + 4 * e.len()]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        };
        let find = |name: &str| -> Result<&ManifestEntry> {
            let mut hits = header.manifest.iter().filter(|e| e.name == name);
            match (hits.next(), hits.next()) {
                (Some(e), None) => Ok(e),
                (None, _) => Err(Error::Manifest(format!("missing tensor {name}"))),
                _ => Err(Error::Manifest(format!("tensor {name} appears twice"))),
            }
        };

        let mut net = DenoiserNetwork::<f32>::new(header.denoiser.clone(), 0)?;
        let n = net.parameter_count();
        let infos = net.params().infos().to_vec();
        if header.manifest.len() != infos.len() + 2 {
            let known: Vec<&str> = infos
                .iter()
                .map(|i| i.name.as_str())
                .chain([FIRST_MOMENT, SECOND_MOMENT])
                .collect();
            if let Some(extra) = header.manifest.iter().find(|e| !known.contains(&e.name.as_str())) {
                return Err(Error::Manifest(format!("unknown tensor {}", extra.name)));
            }
        }
        for info in &infos {
            let e = find(&info.name)?;
            if e.shape != info.shape {
                return Err(Error::Manifest(format!(
                    "tensor {} has shape {:?}, network expects {:?}",
                    info.name, e.shape, info.shape
                )));
            }
            net.params_mut().values_mut()[info.offset..info.offset + info.len()]
                .copy_from_slice(&read(e));
        }
        let mut moments = [FIRST_MOMENT, SECOND_MOMENT].map(|name| -> Result<Vec<f32>> {
            let e = find(name)?;
            if e.shape != [n] {
                return Err(Error::Manifest(format!(
                    "{name} has shape {:?}, expected [{n}]",
                    e.shape
                )));
            }
            Ok(read(e))
        });
        let second_moment = std::mem::replace(&mut moments[1], Ok(Vec::new()))?;
        let first_moment = std::mem::replace(&mut moments[0], Ok(Vec::new()))?;
        let opt = OptimizerState {
            first_moment,
            second_moment,
            step: header.step,
            lr: f64::from_bits(header.lr_bits),
        };
        Ok(Self {
            net,
            opt,
            train: header.train,
            epoch: header.epoch as usize,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
