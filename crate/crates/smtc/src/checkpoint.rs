//! Binary checkpoint files.
//!
//! ```text
//! "SMTC" | version: u32 | header-length: u32 | header JSON | record-count: u32 | records
//! record = name-length: u32 | name | rank: u32 | extents: u64 × rank | precision: u8 | payload
//! ```
//!
//! All integers and payloads are little-endian. The header carries the model
//! configuration, the training step and the optimizer hyper-parameters.
//! Parameters are stored under their own names; optimizer moments under
//! `adamw.m/<name>` and `adamw.v/<name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use smtc_core::model::{Model, ModelConfig};
use smtc_core::numerics::{AdamWState, Precision, Scalar};
use smtc_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SMTC";
pub const VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adamw.m/";
const SECOND_MOMENT: &str = "adamw.v/";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    step_count: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: u64,
    precision: Precision,
    optimizer: Option<OptimizerHeader>,
}

/// A model with its optional optimizer state and training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<AdamWState<T>>,
    pub step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(T::PRECISION.tag());
    match T::PRECISION {
        Precision::Single => {
            for v in t.data() {
                out.extend_from_slice(&v.to_f32().expect("finite cast").to_le_bytes());
            }
        }
        Precision::Double => {
            for v in t.data() {
                out.extend_from_slice(&v.to_f64().expect("finite cast").to_le_bytes());
            }
        }
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode<T: Scalar>(model: &Model<T>, optimizer: Option<&AdamWState<T>>, step: u64) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        step,
        precision: T::PRECISION,
        optimizer: optimizer.map(|o| OptimizerHeader {
            step_count: o.step_count,
            lr: o.lr.to_f64().unwrap_or(f64::NAN),
            beta1: o.beta1.to_f64().unwrap_or(f64::NAN),
            beta2: o.beta2.to_f64().unwrap_or(f64::NAN),
            eps: o.eps.to_f64().unwrap_or(f64::NAN),
            weight_decay: o.weight_decay.to_f64().unwrap_or(f64::NAN),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);

    let params: Vec<_> = model.store.iter().map(|(_, p)| p).collect();
    let moments = if optimizer.is_some() { 2 } else { 0 };
    put_u32(&mut out, (params.len() * (1 + moments)) as u32);
    for p in &params {
        put_record(&mut out, &p.name, &p.value);
    }
    if let Some(o) = optimizer {
        for (p, m) in params.iter().zip(&o.first_moment) {
            put_record(&mut out, &format!("{FIRST_MOMENT}{}", p.name), m);
        }
        for (p, v) in params.iter().zip(&o.second_moment) {
            put_record(&mut out, &format!("{SECOND_MOMENT}{}", p.name), v);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "record name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let tag = self.take(1)?[0];
        let precision =
            Precision::from_tag(tag).ok_or_else(|| Error::format(self.path, format!("unknown precision tag {tag} for {name}")))?;
        if precision != T::PRECISION {
            return Err(Error::format(
                self.path,
                format!("{name} is stored as {precision:?}, expected {:?}", T::PRECISION),
            ));
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * precision.byte_width())?;
        let data: Vec<T> = match precision {
            Precision::Single => raw
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))).expect("cast"))
                .collect(),
            Precision::Double => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))).expect("cast"))
                .collect(),
        };
        Ok((name, Tensor::new(&shape, data)?))
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(n)?).map_err(Error::json(path))?;
    if header.precision != T::PRECISION {
        return Err(Error::format(
            path,
            format!("checkpoint holds {:?} values, expected {:?}", header.precision, T::PRECISION),
        ));
    }
    let mut model = Model::<T>::new(header.config.clone(), 0)?;
    let mut optimizer = header.optimizer.map(|h| {
        let mut o = AdamWState::new(&model.store, T::from_f64_lossy(h.lr), T::from_f64_lossy(h.weight_decay));
        o.step_count = h.step_count;
        o.beta1 = T::from_f64_lossy(h.beta1);
        o.beta2 = T::from_f64_lossy(h.beta2);
        o.eps = T::from_f64_lossy(h.eps);
        o
    });
    let count = r.u32()? as usize;
    let mut seen = vec![0u8; model.store.len()];
    for _ in 0..count {
        let (name, value) = r.record::<T>()?;
        let (slot, key) = if let Some(rest) = name.strip_prefix(FIRST_MOMENT) {
            (1, rest)
        } else if let Some(rest) = name.strip_prefix(SECOND_MOMENT) {
            (2, rest)
        } else {
            (0, name.as_str())
        };
        let id = model
            .store
            .find(key)
            .ok_or_else(|| Error::format(path, format!("unknown tensor {name}")))?;
        if model.store.get(id).shape() != value.shape() {
            return Err(Error::format(
                path,
                format!("{name}: shape {:?}, expected {:?}", value.shape(), model.store.get(id).shape()),
            ));
        }
        match (slot, optimizer.as_mut()) {
            (0, _) => model.store.set(id, value)?,
            (1, Some(o)) => o.first_moment[id.0] = value,
            (2, Some(o)) => o.second_moment[id.0] = value,
            _ => return Err(Error::format(path, format!("{name} present without optimizer header"))),
        }
        seen[id.0] |= 1 << slot;
    }
    let want = if optimizer.is_some() { 0b111 } else { 0b001 };
    if let Some(i) = seen.iter().position(|&s| s != want) {
        let name = &model.store.entry(smtc_core::params::ParamId(i)).name;
        return Err(Error::format(path, format!("missing or duplicated records for {name}")));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after records"));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        step: header.step,
    })
}

/// Writes to a sibling temporary file, then renames it into place.
pub fn save<T: Scalar>(path: &Path, model: &Model<T>, optimizer: Option<&AdamWState<T>>, step: u64) -> Result<()> {
    let bytes = encode(model, optimizer, step);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
        f.write_all(&bytes).map_err(Error::io(&tmp))?;
        f.sync_all().map_err(Error::io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}
