//! Binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "MSFC"  u32 version
//! u32 spec_len  spec_len bytes of ModelSpec JSON
//! u32 count  count × record
//! u8 has_optimizer
//!   [u64 t  u32 count  count × record (m)  u32 count  count × record (v)
//!    u32 progress_len  progress_len bytes of JSON]
//! record = u32 name_len  name  u32 rank(=4)  4 × u32 dims  f32 payload
//! ```
//!
//! The whole file is parsed and checked before anything is handed back, so
//! a bad file never yields a partially loaded model.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{Shape4, Tensor};

pub const MAGIC: &[u8; 4] = b"MSFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Shape4,
    pub data: Vec<f32>,
}

impl Record {
    /// Order-sensitive digest of the payload bytes.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSection {
    pub t: u64,
    pub m: Vec<Record>,
    pub v: Vec<Record>,
    /// Trainer bookkeeping, opaque to this module.
    pub progress: serde_json::Value,
}

/// A parsed file, before it is matched against a model.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub version: u32,
    pub spec: ModelSpec,
    pub params: Vec<Record>,
    pub optimizer: Option<OptimizerSection>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn record(&mut self, name: &str, shape: Shape4, data: &[f32]) {
        self.bytes(name.as_bytes());
        self.u32(4);
        for d in shape.dims() {
            self.u32(d as u32);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn store(&mut self, store: &ParamStore) {
        self.u32(store.len() as u32);
        for p in store.iter() {
            self.record(&p.name, p.value.shape(), p.value.data());
        }
    }

    fn moments(&mut self, store: &ParamStore, moments: &[Vec<f32>]) {
        self.u32(moments.len() as u32);
        for (p, m) in store.iter().zip(moments) {
            self.record(&p.name, p.value.shape(), m);
        }
    }
}

pub fn encode(model: &Model, optimizer: Option<(&AdamState, &serde_json::Value)>) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(&serde_json::to_vec(&model.spec)?);
    w.store(&model.params);
    match optimizer {
        None => w.0.push(0),
        Some((state, progress)) => {
            w.0.push(1);
            w.0.extend_from_slice(&state.t.to_le_bytes());
            w.moments(&model.params, &state.m);
            w.moments(&model.params, &state.v);
            w.bytes(&serde_json::to_vec(progress)?);
        }
    }
    Ok(w.0)
}

pub fn save(path: &Path, model: &Model, optimizer: Option<(&AdamState, &serde_json::Value)>) -> Result<()> {
    let bytes = encode(model, optimizer)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what}: need {n} bytes at offset {}", self.pos),
            ));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }

    fn record(&mut self, index: usize) -> Result<Record> {
        let at = self.pos as u64;
        let ctx = |m: &str| format!("record {index}: {m}");
        let name = std::str::from_utf8(self.bytes(&ctx("name"))?)
            .map_err(|_| Error::format(at, ctx("name is not UTF-8")))?
            .to_string();
        let rank = self.u32(&ctx("rank"))?;
        if rank != 4 {
            return Err(Error::format(self.pos as u64 - 4, ctx(&format!("{name}: rank {rank}, expected 4"))));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32(&ctx("dims"))? as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3])
            .map_err(|e| Error::format(at, ctx(&format!("{name}: {e}"))))?;
        let numel = shape.numel();
        let payload = self.take(4 * numel, &ctx(&format!("payload of {name}")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Record { name, shape, data })
    }

    fn records(&mut self, what: &str, first_index: usize) -> Result<Vec<Record>> {
        let count = self.u32(what)? as usize;
        (0..count).map(|i| self.record(first_index + i)).collect()
    }
}

/// Parses and structurally validates a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<CheckpointFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic bytes, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let spec_at = r.pos as u64;
    let spec: ModelSpec = serde_json::from_slice(r.bytes("model spec")?)
        .map_err(|e| Error::format(spec_at, format!("model spec: {e}")))?;
    let params = r.records("record count", 0)?;
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let t = r.u64("optimizer step")?;
            let m = r.records("first-moment count", params.len())?;
            let v = r.records("second-moment count", params.len() + m.len())?;
            let at = r.pos as u64;
            let progress = serde_json::from_slice(r.bytes("trainer progress")?)
                .map_err(|e| Error::format(at, format!("trainer progress: {e}")))?;
            Some(OptimizerSection { t, m, v, progress })
        }
        flag => return Err(Error::format(r.pos as u64 - 1, format!("bad optimizer flag {flag}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(CheckpointFile {
        version,
        spec,
        params,
        optimizer,
    })
}

pub fn read(path: &Path) -> Result<CheckpointFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copies records into `store`, demanding an exact name and shape match.
fn fill(store: &mut ParamStore, records: &[Record], what: &str) -> Result<Vec<Vec<f32>>> {
    for rec in records {
        let p = store
            .by_name(&rec.name)
            .ok_or_else(|| Error::format(0, format!("{what}: unknown parameter {}", rec.name)))?;
        if p.value.shape() != rec.shape {
            return Err(Error::format(
                0,
                format!("{what}: {} has shape {}, model expects {}", rec.name, rec.shape, p.value.shape()),
            ));
        }
    }
    let mut out = Vec::with_capacity(store.len());
    for p in store.iter() {
        let rec = records
            .iter()
            .find(|r| r.name == p.name)
            .ok_or_else(|| Error::format(0, format!("{what}: missing parameter {}", p.name)))?;
        out.push(rec.data.clone());
    }
    Ok(out)
}

impl CheckpointFile {
    /// Loads parameters into `model`, which must have exactly the recorded
    /// parameter names and shapes. `model` is untouched on error.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        let values = fill(&mut model.params, &self.params, "parameters")?;
        for (p, v) in model.params.iter_mut().zip(values) {
            p.value = Tensor::from_vec(p.value.shape(), v)?;
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::build(self.spec, 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    pub fn adam_state(&self, model: &Model) -> Result<Option<AdamState>> {
        let Some(opt) = &self.optimizer else { return Ok(None) };
        let mut store = model.params.clone();
        Ok(Some(AdamState {
            t: opt.t,
            m: fill(&mut store, &opt.m, "first moments")?,
            v: fill(&mut store, &opt.v, "second moments")?,
        }))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|r| r.data.len()).sum()
    }
}

/// Model (and optimizer state, when stored) from a checkpoint file.
pub fn load(path: &Path) -> Result<(Model, Option<AdamState>)> {
    let file = read(path)?;
    let model = file.build_model()?;
    let state = file.adam_state(&model)?;
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::rng::Rng;

    fn small(spec: ModelSpec) -> ModelSpec {
        spec.with_encoder(crate::encoder::EncoderConfig {
            stage_channels: [4, 6, 8],
            blocks_per_stage: 1,
            ..Default::default()
        })
    }

    fn fcn() -> Model {
        Model::build(small(ModelSpec::fcn(3, (32, 32))), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = fcn();
        let bytes = encode(&model, None).unwrap();
        let back = decode(&bytes).unwrap().build_model().unwrap();
        for (a, b) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let x = Tensor::randn(Shape4::new(1, 3, 32, 32).unwrap(), 1, 1.0).unwrap();
        let (ya, yb) = (model.infer(&[x.clone()]).unwrap(), back.infer(&[x]).unwrap());
        assert!(ya.data().iter().zip(yb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(encode(&back, None).unwrap(), bytes);
    }

    #[test]
    fn optimizer_section_round_trips() {
        let model = fcn();
        let mut state = AdamState::new(&model.params);
        let mut rng = Rng::new(2);
        state.t = 17;
        for m in state.m.iter_mut().chain(state.v.iter_mut()) {
            m.iter_mut().for_each(|x| *x = rng.normal() as f32);
        }
        let progress = serde_json::json!({"epoch": 3});
        let file = decode(&encode(&model, Some((&state, &progress))).unwrap()).unwrap();
        assert_eq!(file.adam_state(&model).unwrap().unwrap(), state);
        assert_eq!(file.optimizer.unwrap().progress, progress);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&fcn(), None).unwrap();
        assert_eq!(&bytes[..4], b"MSFC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(*bytes.last().unwrap(), 0);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode(&fcn(), None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = encode(&fcn(), None).unwrap();
        bytes[4] = 9;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = encode(&fcn(), None).unwrap();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })), "cut at {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_names_the_record() {
        let bytes = encode(&fcn(), None).unwrap();
        let err = decode(&bytes[..bytes.len() - 10]).unwrap_err().to_string();
        assert!(err.contains("record"), "{err}");
    }

    #[test]
    fn mismatched_model_names_first_missing_parameter() {
        let file = decode(&encode(&fcn(), None).unwrap()).unwrap();
        let mut other = Model::build(small(ModelSpec::msfcn(2, 3, (32, 32))), 1).unwrap();
        let before = other.params.clone();
        let err = file.apply_to(&mut other).unwrap_err().to_string();
        assert!(err.contains("missing parameter encoder1.stem.weight"), "{err}");
        for (a, b) in before.iter().zip(other.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let file = decode(&encode(&Model::build(small(ModelSpec::msfcn(2, 3, (32, 32))), 1).unwrap(), None).unwrap()).unwrap();
        let err = file.apply_to(&mut fcn()).unwrap_err().to_string();
        assert!(err.contains("unknown parameter encoder1"), "{err}");
    }

    #[test]
    fn checksum_tracks_content() {
        let model = fcn();
        let file = decode(&encode(&model, None).unwrap()).unwrap();
        let mut rec = file.params[0].clone();
        let sum = rec.checksum();
        assert_eq!(sum.len(), 16);
        rec.data[0] += 1.0;
        assert_ne!(rec.checksum(), sum);
        assert_eq!(file.param_count(), model.param_count());
    }
}
