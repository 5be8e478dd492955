//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | field        | encoding                                             |
//! |--------------|------------------------------------------------------|
//! | magic        | `b"FMAE"`                                            |
//! | version      | `u32`, currently 1                                   |
//! | header       | `u64` length + UTF-8 JSON ([`CheckpointHeader`])     |
//! | step count   | `u64` optimizer steps taken                          |
//! | entry count  | `u64`                                                |
//! | entries      | sorted by name, see below                            |
//! | checksum     | SHA-256 of every preceding byte                      |
//!
//! Each entry is a `u32`-prefixed name, a `u32` rank, `u64` dims, then the
//! value, first and second Adam moments as raw `f64` bits. Gradients are not
//! stored. Loading restores every stored bit.

use std::path::Path;

use motion_mae_core::model::{ForecastModel, MaeModel};
use motion_mae_core::numerics::params::ParamEntry;
use motion_mae_core::numerics::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"FMAE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Masked-autoencoder pre-training model.
    Pretrain,
    /// Forecasting model.
    Forecast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_mae(model: &MaeModel, config: &ExperimentConfig) -> Self {
        let config = ExperimentConfig { model: model.config.clone(), ..config.clone() };
        Self { header: CheckpointHeader { kind: ModelKind::Pretrain, config }, params: model.params.clone() }
    }

    pub fn from_forecast(model: &ForecastModel, config: &ExperimentConfig) -> Self {
        let config = ExperimentConfig { model: model.config.clone(), ..config.clone() };
        Self { header: CheckpointHeader { kind: ModelKind::Forecast, config }, params: model.params.clone() }
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind)));
        }
        Ok(())
    }

    /// Fails unless the stored names and shapes are exactly those of a
    /// freshly built model of the stored config.
    fn check_layout(&self, fresh: &ParamStore) -> Result<()> {
        let stored: Vec<(&str, &[usize])> =
            self.params.entries().iter().map(|e| (e.name.as_str(), e.value.shape())).collect();
        let expected: Vec<(&str, &[usize])> =
            fresh.entries().iter().map(|e| (e.name.as_str(), e.value.shape())).collect();
        if stored != expected {
            let diff = expected
                .iter()
                .find(|e| !stored.contains(e))
                .or_else(|| stored.iter().find(|s| !expected.contains(s)))
                .map_or(String::new(), |(n, s)| format!(" (first difference: `{n}` {s:?})"));
            return Err(Error::Checkpoint(format!("parameters do not match the stored model config{diff}")));
        }
        Ok(())
    }

    pub fn into_mae(self) -> Result<MaeModel> {
        self.expect_kind(ModelKind::Pretrain)?;
        let config = self.header.config.model.clone();
        let fresh = MaeModel::new(config.clone(), &mut motion_mae_core::numerics::RngStream::new(0))?;
        self.check_layout(&fresh.params)?;
        Ok(MaeModel { config, params: self.params })
    }

    pub fn into_forecast(self) -> Result<ForecastModel> {
        self.expect_kind(ModelKind::Forecast)?;
        let config = self.header.config.model.clone();
        let fresh = ForecastModel::scratch(config.clone(), &mut motion_mae_core::numerics::RngStream::new(0))?;
        self.check_layout(&fresh.params)?;
        Ok(ForecastModel { config, params: self.params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.params.step_count().to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for e in self.params.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for t in [&e.value, &e.m, &e.v] {
                for x in t.data() {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing FMAE magic".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let step_count = r.u64()?;
        let n = r.u64()? as usize;
        let mut params = ParamStore::new();
        let mut previous: Option<String> = None;
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            if previous.as_deref().is_some_and(|p| p >= name.as_str()) {
                return Err(Error::Checkpoint(format!("entry `{name}` out of order")));
            }
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let mut slot = || -> Result<Tensor> {
                let data = (0..numel).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
                Ok(Tensor::new(&shape, data)?)
            };
            let (value, m, v) = (slot()?, slot()?, slot()?);
            params.insert_entry(ParamEntry { name: name.clone(), grad: Tensor::zeros(&shape), value, m, v })?;
            previous = Some(name);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        params.set_step_count(step_count);
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use motion_mae_core::model::ModelConfig;
    use motion_mae_core::numerics::RngStream;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.model = ModelConfig { dim: 8, heads: 2, encoder_depth: 1, decoder_depth: 1, ..c.model };
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny();
        let mut m = MaeModel::new(cfg.model.clone(), &mut RngStream::new(1)).unwrap();
        m.params.entries_mut()[0].m.data_mut()[0] = f64::from_bits(0x3ff0_0000_0000_0001);
        m.params.entries_mut()[1].v.data_mut()[0] = -0.0;
        m.params.set_step_count(17);
        let ck = Checkpoint::from_mae(&m, &cfg);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let m2 = back.into_mae().unwrap();
        assert_eq!(m2.params.step_count(), 17);
        for (a, b) in m.params.entries().iter().zip(m2.params.entries()) {
            for (x, y) in [(&a.value, &b.value), (&a.m, &b.m), (&a.v, &b.v)] {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(x), bits(y), "{}", a.name);
            }
        }
    }

    #[test]
    fn corruption_and_kind_are_detected() {
        let cfg = tiny();
        let m = MaeModel::new(cfg.model.clone(), &mut RngStream::new(1)).unwrap();
        let mut bytes = Checkpoint::from_mae(&m, &cfg).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let ck = Checkpoint::from_mae(&m, &cfg);
        assert!(ck.into_forecast().is_err());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let cfg = tiny();
        let m = MaeModel::new(cfg.model.clone(), &mut RngStream::new(1)).unwrap();
        let mut ck = Checkpoint::from_mae(&m, &cfg);
        ck.header.config.model.encoder_depth = 2;
        assert!(ck.into_mae().is_err());
    }
}
