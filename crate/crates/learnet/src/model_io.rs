//! Deterministic binary serialization of a network spec plus its parameters.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "LRNT"
//! version u32      currently 1; other versions are rejected
//! spec    u32 length + that many bytes of JSON network-spec text
//! count   u32      number of tensors
//! tensor  u32 name length + UTF-8 name
//!         u8  dtype code (1 = f32, 2 = f64)
//!         u32 rank, then rank x u32 dims
//!         raw little-endian element values
//! ```
//!
//! Saving the same model twice produces byte-identical files; loading is the
//! exact inverse.

use std::path::Path;

use crate::networks::{NetworkSpec, ParamSet};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LRNT";
pub const VERSION: u32 = 1;

/// A model whose element precision is only known at load time.
pub enum LoadedModel {
    F32 { spec: NetworkSpec, params: ParamSet<f32> },
    F64 { spec: NetworkSpec, params: ParamSet<f64> },
}

impl LoadedModel {
    pub fn spec(&self) -> &NetworkSpec {
        match self {
            LoadedModel::F32 { spec, .. } => spec,
            LoadedModel::F64 { spec, .. } => spec,
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            LoadedModel::F32 { .. } => Dtype::F32,
            LoadedModel::F64 { .. } => Dtype::F64,
        }
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a model to its canonical byte representation.
pub fn to_bytes<F: Scalar>(spec: &NetworkSpec, params: &ParamSet<F>) -> Result<Vec<u8>> {
    let spec_json =
        serde_json::to_string(spec).map_err(|e| Error::Format(format!("unencodable spec: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, spec_json.len() as u32);
    out.extend_from_slice(spec_json.as_bytes());
    push_u32(&mut out, params.len() as u32);
    for (name, tensor) in params.iter() {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.code());
        push_u32(&mut out, tensor.rank() as u32);
        for &d in tensor.shape() {
            push_u32(&mut out, d as u32);
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Write the model file; byte-identical output for identical inputs.
pub fn save<F: Scalar>(spec: &NetworkSpec, params: &ParamSet<F>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(spec, params)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated file: needed {n} bytes for {what}, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parse a model file, checking magic, version, dtype codes, and name
/// uniqueness; returns the spec text and raw tensors.
fn parse<F: Scalar>(bytes: &[u8]) -> Result<(NetworkSpec, ParamSet<F>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"LRNT\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let spec_len = r.u32("spec length")? as usize;
    let spec_bytes = r.take(spec_len, "spec text")?;
    let spec_text = std::str::from_utf8(spec_bytes)
        .map_err(|_| Error::Format("spec text is not valid UTF-8".into()))?;
    let spec: NetworkSpec = serde_json::from_str(spec_text)
        .map_err(|e| Error::Format(format!("unreadable spec: {e}")))?;

    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not valid UTF-8")))?
            .to_string();
        let code = r.u8("dtype code")?;
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| Error::Format(format!("tensor {name}: unknown dtype code {code}")))?;
        if dtype != F::DTYPE {
            return Err(Error::Format(format!(
                "tensor {name}: dtype {dtype:?} does not match requested {:?}",
                F::DTYPE
            )));
        }
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Format(format!("tensor {name}: zero dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * F::DTYPE.size(), &format!("values of tensor {name}"))?;
        let data = raw.chunks_exact(F::DTYPE.size()).map(F::read_le).collect();
        if params.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        params.insert(name, Tensor::new(shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the tensor table",
            bytes.len() - r.pos
        )));
    }
    Ok((spec, params))
}

/// Load a model whose precision is known at compile time; the stored dtype
/// must match.
pub fn load<F: Scalar>(path: &Path) -> Result<(NetworkSpec, ParamSet<F>)> {
    let bytes = std::fs::read(path)?;
    parse(&bytes)
}

/// Element precision stored in a model file (files with no tensors report
/// f32, the default build precision).
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let spec_len = r.u32("spec length")? as usize;
    r.take(spec_len, "spec text")?;
    let count = r.u32("tensor count")?;
    if count == 0 {
        return Ok(Dtype::F32);
    }
    let name_len = r.u32("tensor name length")? as usize;
    r.take(name_len, "tensor name")?;
    let code = r.u8("dtype code")?;
    Dtype::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))
}

/// Load a model at whatever precision it was saved with.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    match peek_dtype(path)? {
        Dtype::F32 => {
            let (spec, params) = load::<f32>(path)?;
            Ok(LoadedModel::F32 { spec, params })
        }
        Dtype::F64 => {
            let (spec, params) = load::<f64>(path)?;
            Ok(LoadedModel::F64 { spec, params })
        }
    }
}

/// Check that every parameter slot the spec requires is present with the
/// right shape (models and configs can otherwise drift apart).
pub fn check_params_cover<F: Scalar>(spec: &NetworkSpec, params: &ParamSet<F>) -> Result<()> {
    for def in crate::networks::param_defs(spec)? {
        match params.get(&def.name) {
            None => {
                return Err(Error::Format(format!("model is missing parameter {}", def.name)))
            }
            Some(t) if t.shape() != def.shape.as_slice() => {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    def.name,
                    t.shape(),
                    def.shape
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}
