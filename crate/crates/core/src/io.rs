//! Tensor and weight files.
//!
//! `rawtensor` v1: a JSON header line `{"v":1,"dtype":"f32","shape":[..]}`
//! followed by the row-major little-endian payload.
//!
//! Weight files: the magic `ICAF`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the JSON manifest, then every
//! tensor payload in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dmff::{DmffConfig, DmffWeights};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{decode_le, Dtype, Scalar, Tensor};

pub const RAWTENSOR_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: [u8; 4] = *b"ICAF";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    v: u32,
    dtype: Dtype,
    shape: Vec<usize>,
}

fn payload<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * S::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn encode_rawtensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let header = RawHeader {
        v: RAWTENSOR_VERSION,
        dtype: S::DTYPE,
        shape: t.shape().to_vec(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend(payload(t));
    out
}

/// Decodes a rawtensor buffer, converting the stored dtype to `S`.
pub fn decode_rawtensor<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Manifest("rawtensor header line is not terminated".into()))?;
    let header: RawHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Manifest(format!("rawtensor header: {e}")))?;
    if header.v != RAWTENSOR_VERSION {
        return Err(Error::Version {
            expected: RAWTENSOR_VERSION,
            found: header.v,
        });
    }
    let body = &bytes[newline + 1..];
    let numel: usize = header.shape.iter().product();
    let needed = numel * header.dtype.size();
    if body.len() < needed {
        return Err(Error::Truncated {
            needed,
            available: body.len(),
        });
    }
    if body.len() > needed {
        return Err(Error::Manifest(format!(
            "rawtensor payload has {} bytes, header implies {needed}",
            body.len()
        )));
    }
    Tensor::new(&header.shape, decode_le(body, header.dtype))
}

pub fn write_rawtensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    fs::write(path, encode_rawtensor(t))?;
    Ok(())
}

pub fn read_rawtensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    decode_rawtensor(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub numel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DmffConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_weights<S: Scalar>(cfg: &DmffConfig, wts: &DmffWeights<S>) -> Result<Vec<u8>> {
    let named = wts.named_tensors();
    let manifest = Manifest {
        config: cfg.clone(),
        tensors: named
            .iter()
            .map(|(name, _, t)| TensorEntry {
                name: name.clone(),
                dtype: S::DTYPE,
                shape: t.shape().to_vec(),
                numel: t.numel(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend(json);
    for (_, _, t) in &named {
        out.extend(payload(t));
    }
    Ok(out)
}

/// A decoded weight file: its pipeline config and every named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile<S> {
    pub config: DmffConfig,
    pub tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> WeightFile<S> {
    /// Weights laid out for the stored config; names must match exactly.
    pub fn weights(&self) -> Result<DmffWeights<S>> {
        let w = self.weights_for(&self.config)?;
        let expected = w.param_breakdown().len();
        if expected != self.tensors.len() {
            let known: Vec<String> = w.param_breakdown().into_iter().map(|(n, _)| n).collect();
            let extra: Vec<&String> = self.tensors.keys().filter(|k| !known.contains(k)).collect();
            return Err(Error::Manifest(format!(
                "manifest lists tensors the config does not use: {extra:?}"
            )));
        }
        Ok(w)
    }

    /// Weights laid out for `cfg`, drawing each tensor by name. Tensors
    /// the layout does not use are ignored.
    pub fn weights_for(&self, cfg: &DmffConfig) -> Result<DmffWeights<S>> {
        let mut w = DmffWeights::<S>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut problem = None;
        w.visit_mut("", &mut |name, _, t| {
            if problem.is_some() {
                return;
            }
            match self.tensors.get(name) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    problem = Some(format!(
                        "tensor {name} has shape {:?}, layout expects {:?}",
                        src.shape(),
                        t.shape()
                    ))
                }
                None => problem = Some(format!("tensor {name} missing from weight file")),
            }
        });
        match problem {
            Some(msg) => Err(Error::Manifest(msg)),
            None => Ok(w),
        }
    }
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let available = bytes.len().saturating_sub(*at);
    if available < n {
        return Err(Error::Truncated {
            needed: n,
            available,
        });
    }
    let out = &bytes[*at..*at + n];
    *at += n;
    Ok(out)
}

pub fn decode_weights<S: Scalar>(bytes: &[u8]) -> Result<WeightFile<S>> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4)?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::BadMagic {
            expected: WEIGHTS_MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != WEIGHTS_VERSION {
        return Err(Error::Version {
            expected: WEIGHTS_VERSION,
            found: version,
        });
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Manifest("manifest length overflows".into()))?;
    let manifest: Manifest = serde_json::from_slice(take(bytes, &mut at, len)?)
        .map_err(|e| Error::Manifest(format!("manifest JSON: {e}")))?;

    let mut tensors = BTreeMap::new();
    let mut total = 0usize;
    for e in &manifest.tensors {
        let product: usize = e.shape.iter().product();
        if product != e.numel || e.shape.is_empty() || e.numel == 0 {
            return Err(Error::Manifest(format!(
                "tensor {} declares numel {} for shape {:?}",
                e.name, e.numel, e.shape
            )));
        }
        total += e.numel * e.dtype.size();
    }
    let remaining = bytes.len() - at;
    if remaining < total {
        return Err(Error::Truncated {
            needed: total,
            available: remaining,
        });
    }
    if remaining > total {
        return Err(Error::Manifest(format!(
            "payload has {remaining} bytes but the manifest accounts for {total}"
        )));
    }
    for e in manifest.tensors {
        let raw = take(bytes, &mut at, e.numel * e.dtype.size())?;
        let t = Tensor::new(&e.shape, decode_le(raw, e.dtype))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::Manifest(format!("tensor {} listed twice", e.name)));
        }
    }
    Ok(WeightFile {
        config: manifest.config,
        tensors,
    })
}

pub fn save_weights<S: Scalar>(path: &Path, cfg: &DmffConfig, wts: &DmffWeights<S>) -> Result<()> {
    fs::write(path, encode_weights(cfg, wts)?)?;
    Ok(())
}

pub fn read_weight_file<S: Scalar>(path: &Path) -> Result<WeightFile<S>> {
    decode_weights(&fs::read(path)?)
}

/// Loads a weight file and rebuilds the weights for its stored config.
pub fn load_weights<S: Scalar>(path: &Path) -> Result<(DmffConfig, DmffWeights<S>)> {
    let file = read_weight_file::<S>(path)?;
    let w = file.weights()?;
    Ok((file.config, w))
}
