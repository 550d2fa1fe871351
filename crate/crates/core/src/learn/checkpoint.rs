//! Checkpoint container: magic, header length, JSON header, raw
//! little-endian `f32` arrays, sha256 trailer over everything before it.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::car::{CarConfig, CarModel};
use crate::error::{Error, Result};
use crate::hinet::{Hinet, HinetConfig};
use crate::learn::train::{LogRecord, StageInput, TrainConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ARINCKP1";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "resampler+edsr")]
    Car,
    #[serde(rename = "hinet")]
    Hinet,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Car => "resampler+edsr",
            ModelKind::Hinet => "hinet",
        })
    }
}

/// Architecture snapshot stored with the arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ModelSpec {
    #[serde(rename = "resampler+edsr")]
    Car { car: CarConfig },
    #[serde(rename = "hinet")]
    Hinet {
        hinet: HinetConfig,
        stage_input: StageInput,
        /// Digest of the CAR checkpoint whose outputs were trained on.
        #[serde(default)]
        car_source: Option<String>,
    },
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Car { .. } => ModelKind::Car,
            ModelSpec::Hinet { .. } => ModelKind::Hinet,
        }
    }

    fn reference_layout(&self) -> Result<ParamSet<f32>> {
        Ok(match self {
            ModelSpec::Car { car } => CarModel::<f32>::init(car, 0)?.params(),
            ModelSpec::Hinet { hinet, .. } => Hinet::<f32>::init(hinet.clone(), 0)?.params,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub iteration: usize,
    pub seed: u64,
    pub history: Vec<LogRecord>,
    pub params: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 4],
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    train: TrainConfig,
    iteration: usize,
    seed: u64,
    history: Vec<LogRecord>,
    arrays: Vec<ArrayEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn expect_kind(&self, expected: ModelKind) -> Result<()> {
        if self.kind() != expected {
            return Err(Error::Kind {
                expected: expected.to_string(),
                found: self.kind().to_string(),
            });
        }
        Ok(())
    }

    pub fn car_model(&self) -> Result<CarModel> {
        self.expect_kind(ModelKind::Car)?;
        let ModelSpec::Car { car } = &self.model else {
            unreachable!()
        };
        CarModel::from_params(car, &self.params)
    }

    pub fn hinet_model(&self) -> Result<Hinet> {
        self.expect_kind(ModelKind::Hinet)?;
        let ModelSpec::Hinet { hinet, .. } = &self.model else {
            unreachable!()
        };
        Hinet::from_params(hinet.clone(), self.params.clone())
    }

    pub fn stage_input(&self) -> Option<StageInput> {
        match &self.model {
            ModelSpec::Hinet { stage_input, .. } => Some(*stage_input),
            ModelSpec::Car { .. } => None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            let len = t.len() * 4;
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape(),
                offset,
                len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            seed: self.seed,
            history: self.history.clone(),
            arrays,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let min = MAGIC.len() + 8 + DIGEST_LEN;
        if bytes.len() < min || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let header: Header =
            serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let data = &body[header_end..];

        let mut params = ParamSet::new();
        let mut expected_offset = 0;
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            if a.offset != expected_offset || a.len != n * 4 || a.offset + a.len > data.len() {
                return Err(corrupt(format!("array `{}` does not match the data section", a.name)));
            }
            let values = data[a.offset..a.offset + a.len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(a.name.clone(), Tensor::from_vec(a.shape, values)?);
            expected_offset += a.len;
        }
        if expected_offset != data.len() {
            return Err(corrupt("trailing bytes after the last array"));
        }
        header
            .model
            .reference_layout()
            .and_then(|r| params.check_layout(&r))
            .map_err(|e| corrupt(format!("arrays do not match the {} kind: {e}", header.model.kind())))?;
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            iteration: header.iteration,
            seed: header.seed,
            history: header.history,
            params,
        })
    }

    /// Hex sha256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(bytes[bytes.len() - DIGEST_LEN..].iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ck.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edsr::EdsrConfig;
    use crate::resampler::ResamplerConfig;

    fn tiny_car() -> Checkpoint {
        let car = CarConfig {
            resampler: ResamplerConfig {
                feature_width: 4,
                residual_blocks: 1,
                ..Default::default()
            },
            edsr: EdsrConfig {
                feature_width: 4,
                residual_blocks: 1,
                ..Default::default()
            },
        };
        Checkpoint {
            params: CarModel::<f32>::init(&car, 1).unwrap().params(),
            model: ModelSpec::Car { car },
            train: TrainConfig::car(),
            iteration: 12,
            seed: 1,
            history: vec![LogRecord {
                iteration: 12,
                loss: 0.1234567,
                val_psnr: Some(21.5),
            }],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = tiny_car();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&ck, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn tampering_is_detected() {
        let mut bytes = tiny_car().to_bytes().unwrap();
        let i = bytes.windows(9).position(|w| w == b"iteration").unwrap();
        bytes[i + 11] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn kind_mismatch() {
        let ck = tiny_car();
        assert!(ck.car_model().is_ok());
        assert!(matches!(ck.hinet_model(), Err(Error::Kind { .. })));
    }

    #[test]
    fn inventory_must_match_kind() {
        let mut ck = tiny_car();
        ck.params.insert("extra", Tensor::zeros([1, 1, 1, 1]));
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()), Err(Error::Corrupt(_))));
    }
}
