//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian; see `docs/checkpoint-format.md`):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `THALTCKP` |
//! | 8 | 4 | format version (`u32`) |
//! | 12 | 4 | header length `H` (`u32`) |
//! | 16 | H | UTF-8 TOML header: kind, epoch, model, halting, normalization |
//! | 16+H | 4 | tensor count (`u32`) |
//! | … | | tensor records sorted by name |
//! | … | 1 | optimizer flag (0 or 1) |
//! | … | | if 1: Adam step (`u64`), tensor count, moment records |
//! | end−4 | 4 | CRC-32 of every preceding byte |
//!
//! A tensor record is: name length (`u16`), name bytes, dtype code (`u8`),
//! rank (`u8`), `rank` dims (`u64` each), payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::halting::HaltingConfig;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::{AdamState, Mode};
use crate::vit::{param_shapes, ModelConfig, ModelParams, GATE_SCALE, GATE_SHIFT};

pub const MAGIC: &[u8; 8] = b"THALTCKP";
pub const VERSION: u32 = 1;
const SOURCE: &str = "checkpoint";
const MAX_RANK: usize = 8;

/// A model together with everything needed to resume or reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub mode: Mode,
    pub epoch: usize,
    pub model: ModelConfig,
    pub halting: Option<HaltingConfig>,
    pub normalization: Normalization,
    pub params: ModelParams<T>,
    pub optimizer: Option<AdamState<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: Mode,
    epoch: usize,
    model: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    halting: Option<HaltingConfig>,
    normalization: NormHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormHeader {
    mean: Vec<f32>,
    std: Vec<f32>,
}

fn is_gate(name: &str) -> bool {
    name == GATE_SCALE || name == GATE_SHIFT
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    T::to_le_bytes_vec(t.data(), out);
}

/// Tensors of a parameter set sorted by name; static checkpoints omit the
/// halting gates.
fn sorted_tensors<T: Scalar>(params: &ModelParams<T>, mode: Mode) -> Vec<(String, &Tensor<T>)> {
    let mut named: Vec<(String, &Tensor<T>)> = params
        .named()
        .into_iter()
        .filter(|(n, _)| mode == Mode::Adaptive || !is_gate(n))
        .collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    named
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.mode,
            epoch: self.epoch,
            model: self.model.clone(),
            halting: self.halting.clone(),
            normalization: NormHeader {
                mean: self.normalization.mean.clone(),
                std: self.normalization.std.clone(),
            },
        };
        let text = toml::to_string(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((text.len() as u32).to_le_bytes());
        out.extend(text.as_bytes());

        let tensors = sorted_tensors(&self.params, self.mode);
        out.extend((tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            write_tensor(&mut out, name, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend(opt.step.to_le_bytes());
                let m = sorted_tensors(&opt.m, self.mode);
                let v = sorted_tensors(&opt.v, self.mode);
                out.extend(((m.len() + v.len()) as u32).to_le_bytes());
                for (name, t) in &m {
                    write_tensor(&mut out, &format!("adam.m.{name}"), t);
                }
                for (name, t) in &v {
                    write_tensor(&mut out, &format!("adam.v.{name}"), t);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::parse(SOURCE, bytes.len(), "file too short for a checkpoint"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::parse(SOURCE, 0, "bad magic, not a checkpoint file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
        }
        let header_len = r.u32()? as usize;
        let header_at = r.pos;
        let text = std::str::from_utf8(r.take(header_len)?).map_err(|_| Error::parse(SOURCE, header_at, "header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::parse(SOURCE, header_at, format!("header: {e}")))?;
        header.model.validate()?;
        let model = header.model;

        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor::<T>()?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        let params = assemble::<T>(&model, header.kind, header.halting.as_ref(), &mut tensors, "")?;

        let flag_at = r.pos;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let count = r.u32()? as usize;
                let mut moments = BTreeMap::new();
                for _ in 0..count {
                    let (name, t) = r.tensor::<T>()?;
                    moments.insert(name, t);
                }
                let m = assemble::<T>(&model, header.kind, None, &mut moments, "adam.m.")?;
                let v = assemble::<T>(&model, header.kind, None, &mut moments, "adam.v.")?;
                if let Some(extra) = moments.keys().next() {
                    return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
                }
                Some(AdamState { step, m, v })
            }
            other => return Err(Error::parse(SOURCE, flag_at, format!("optimizer flag {other} is not 0 or 1"))),
        };
        if r.pos != body.len() {
            return Err(Error::parse(SOURCE, r.pos, "trailing bytes after checkpoint body"));
        }
        let normalization = Normalization {
            mean: header.normalization.mean,
            std: header.normalization.std,
        };
        if normalization.mean.len() != model.channels || normalization.std.len() != model.channels {
            return Err(Error::Checkpoint("normalization channel count does not match model".into()));
        }
        Ok(Self {
            mode: header.kind,
            epoch: header.epoch,
            model,
            halting: header.halting,
            normalization,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters ready for adaptive execution. A static checkpoint gets its
    /// halting gates from `halting`; an adaptive one keeps its stored gates.
    pub fn adaptive_params(&self, halting: &HaltingConfig) -> ModelParams<T> {
        let mut p = self.params.clone();
        if self.mode == Mode::Static {
            p.set_gates(halting.gamma, halting.beta);
        }
        p
    }

    /// Fails with the list of differing fields unless `expected` matches the
    /// stored model configuration.
    pub fn ensure_model(&self, expected: &ModelConfig) -> Result<()> {
        let diffs = model_diff(expected, &self.model);
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("checkpoint model differs: {}", diffs.join(", "))))
        }
    }
}

/// `field: expected != found` for every differing config field.
pub fn model_diff(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let table = |c: &ModelConfig| toml::Value::try_from(c).ok().and_then(|v| v.as_table().cloned()).unwrap_or_default();
    let (a, b) = (table(expected), table(found));
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k}: expected {v}, found {}", b.get(k).map(|x| x.to_string()).unwrap_or_default()))
        .collect()
}

/// Builds a parameter set from named tensors with the given prefix, removing
/// them from `tensors`. Gates missing from static checkpoints come from
/// `halting` (or zero for optimizer moments).
fn assemble<T: Scalar>(
    model: &ModelConfig,
    mode: Mode,
    halting: Option<&HaltingConfig>,
    tensors: &mut BTreeMap<String, Tensor<T>>,
    prefix: &str,
) -> Result<ModelParams<T>> {
    let shapes = param_shapes(model);
    let defaults = halting.cloned().unwrap_or_default();
    let params = shapes.try_map(|name, shape| {
        let key = format!("{prefix}{name}");
        match tensors.remove(&key) {
            Some(t) if t.shape() == shape.as_slice() => Ok(t),
            Some(t) => Err(Error::Checkpoint(format!("`{key}` has shape {:?}, model expects {shape:?}", t.shape()))),
            None if mode == Mode::Static && is_gate(name) => {
                let v = if !prefix.is_empty() {
                    0.0
                } else if name == GATE_SCALE {
                    defaults.gamma
                } else {
                    defaults.beta
                };
                Ok(Tensor::scalar(T::c(v)))
            }
            None => Err(Error::Checkpoint(format!("missing tensor `{key}`"))),
        }
    })?;
    if prefix.is_empty() {
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
    }
    Ok(params)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse(SOURCE, self.pos, format!("need {n} bytes, {} remain", self.bytes.len() - self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let at = self.pos;
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::parse(SOURCE, at, "tensor name is not UTF-8"))?
            .to_string();
        let code_at = self.pos;
        let code = self.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::parse(SOURCE, code_at, format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("`{name}` is stored as {dtype:?}, loading as {:?}", T::DTYPE)));
        }
        let rank = self.u8()? as usize;
        if rank > MAX_RANK {
            return Err(Error::parse(SOURCE, code_at + 1, format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?).map_err(|_| Error::parse(SOURCE, self.pos - 8, "dimension overflow"))?;
            count = count.checked_mul(d).ok_or_else(|| Error::parse(SOURCE, self.pos - 8, "tensor size overflow"))?;
            shape.push(d);
        }
        let bytes = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::parse(SOURCE, self.pos, "tensor size overflow"))?;
        let payload = self.take(bytes)?;
        let data = payload.chunks_exact(dtype.size()).map(T::from_le_chunk).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 4,
            channels: 3,
            patch_size: 2,
            num_layers: 2,
            embed_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    fn sample(mode: Mode, with_opt: bool) -> Checkpoint<f32> {
        let model = tiny();
        let params = ModelParams::<f32>::init(&model, 3.0, -7.0, 5).unwrap();
        let optimizer = with_opt.then(|| {
            let mut st = AdamState::new(&params);
            st.step = 17;
            st.m.head_bias = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
            st
        });
        Checkpoint {
            mode,
            epoch: 4,
            halting: (mode == Mode::Adaptive).then(HaltingConfig::default),
            normalization: Normalization {
                mean: vec![0.49, 0.48, 0.45],
                std: vec![0.25, 0.24, 0.26],
            },
            model,
            params,
            optimizer,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for (mode, opt) in [(Mode::Adaptive, true), (Mode::Adaptive, false), (Mode::Static, true)] {
            let ck = sample(mode, opt);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes().unwrap(), bytes);
            assert_eq!(back.params.patch_weight, ck.params.patch_weight);
            assert_eq!(back.epoch, 4);
            assert_eq!(back.normalization, ck.normalization);
            assert_eq!(back.optimizer.as_ref().map(|o| o.step), opt.then_some(17));
        }
    }

    #[test]
    fn adaptive_round_trip_is_exact() {
        let ck = sample(Mode::Adaptive, true);
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupting_a_payload_byte_fails_checksum() {
        let bytes = sample(Mode::Adaptive, false).to_bytes().unwrap();
        let mut bad = bytes.clone();
        let i = bytes.len() - 10;
        bad[i] ^= 0x40;
        let err = Checkpoint::<f32>::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn unknown_version_is_explicit() {
        let mut bytes = sample(Mode::Adaptive, false).to_bytes().unwrap();
        bytes[8] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::<f32>::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn static_checkpoint_gets_config_gates() {
        let ck = sample(Mode::Static, false);
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let h = HaltingConfig {
            gamma: 5.0,
            beta: -10.0,
            ..Default::default()
        };
        let p = back.adaptive_params(&h);
        assert_eq!((p.gamma(), p.beta()), (5.0, -10.0));
        assert_eq!(p.head_weight, ck.params.head_weight);
    }

    #[test]
    fn tensors_are_written_in_name_order() {
        let bytes = sample(Mode::Adaptive, false).to_bytes().unwrap();
        let names: Vec<String> = sorted_tensors(&sample(Mode::Adaptive, false).params, Mode::Adaptive)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let text = String::from_utf8_lossy(&bytes);
        let positions: Vec<usize> = names.iter().map(|n| text.find(n.as_str()).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn config_mismatch_lists_fields() {
        let ck = sample(Mode::Static, false);
        let other = ModelConfig {
            embed_dim: 16,
            num_classes: 5,
            ..tiny()
        };
        let err = ck.ensure_model(&other).unwrap_err().to_string();
        assert!(err.contains("embed_dim") && err.contains("num_classes"), "{err}");
        assert!(ck.ensure_model(&tiny()).is_ok());
    }

    #[test]
    fn truncation_never_panics() {
        let bytes = sample(Mode::Adaptive, true).to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
