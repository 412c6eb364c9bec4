//! MMEB1: the embedding-dataset container.
//!
//! ```text
//! "MMEB1\0"  version:u32  header_len:u32  header:JSON
//! per record:
//!   id_len:u32 id:UTF-8  presence:u8  class:i32  time:f32  event:u8
//!   for each present modality (Lab, ECG, ECHO): token_len*feature_dim f32, row-major
//! ```
//!
//! Integers and floats are little-endian, with no padding. Absent labels are
//! written as class -1, time NaN and event 255. The header is written as
//! compact JSON with keys in declaration order, so reading a file this module
//! wrote and writing it again reproduces the same bytes.

use medfuse_core::data::{LabelSchema, LabeledRecord, Survival};
use medfuse_core::diff::Tensor;
use medfuse_core::modality::{Modality, ModalityBundle, ModalitySet};
use serde::{Deserialize, Serialize};

use crate::error::FormatError;

pub const MAGIC: &[u8; 6] = b"MMEB1\0";
pub const VERSION: u32 = 1;

const NO_CLASS: i32 = -1;
const NO_EVENT: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    feature_dim: usize,
    token_len: usize,
    modalities: Vec<String>,
    n_records: usize,
    label_schema: String,
}

/// A decoded MMEB1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct MmebFile {
    pub schema: LabelSchema,
    pub token_len: usize,
    pub feature_dim: usize,
    /// Modalities the file declares; every record's presence is a subset.
    pub modalities: ModalitySet,
    pub records: Vec<LabeledRecord>,
}

impl MmebFile {
    /// Wrap records, deriving the dimensions and declared modalities from them.
    pub fn from_records(schema: LabelSchema, records: Vec<LabeledRecord>) -> Result<Self, FormatError> {
        let [token_len, feature_dim] = records
            .first()
            .map(|r| r.bundle.dims())
            .ok_or_else(|| FormatError::BadHeader("no records to infer dimensions from".into()))?;
        let bits = records.iter().fold(0u8, |acc, r| acc | r.bundle.presence().bits());
        let file = Self {
            schema,
            token_len,
            feature_dim,
            modalities: ModalitySet::from_bits(bits).unwrap_or(ModalitySet::EMPTY),
            records,
        };
        file.check()?;
        Ok(file)
    }

    fn check(&self) -> Result<(), FormatError> {
        for (i, r) in self.records.iter().enumerate() {
            let bad = |detail: String| Err(FormatError::BadRecord { record: i, detail });
            if r.bundle.dims() != [self.token_len, self.feature_dim] {
                return bad(format!(
                    "sequence is {:?}, header says [{}, {}]",
                    r.bundle.dims(),
                    self.token_len,
                    self.feature_dim
                ));
            }
            if !r.bundle.presence().is_subset_of(self.modalities) {
                return bad(format!(
                    "has modalities `{}` outside the declared `{}`",
                    r.bundle.presence(),
                    self.modalities
                ));
            }
            if r.id.len() > u32::MAX as usize {
                return bad("id too long".into());
            }
            if let Err(e) = r.validate(self.schema) {
                return bad(e.to_string());
            }
        }
        Ok(())
    }
}

pub fn write_mmeb(file: &MmebFile) -> Result<Vec<u8>, FormatError> {
    file.check()?;
    let header = Header {
        feature_dim: file.feature_dim,
        token_len: file.token_len,
        modalities: file.modalities.members().iter().map(|m| m.name().to_string()).collect(),
        n_records: file.records.len(),
        label_schema: file.schema.name().to_string(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| FormatError::BadHeader(e.to_string()))?;

    let per_modality = file.token_len * file.feature_dim * 4;
    let mut out = Vec::with_capacity(16 + header.len() + file.records.len() * (32 + 3 * per_modality));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for r in &file.records {
        out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        out.push(r.bundle.presence().bits());
        out.extend_from_slice(&r.class.unwrap_or(NO_CLASS).to_le_bytes());
        let (time, event) = match r.survival {
            Some(s) => (s.time as f32, s.event as u8),
            None => (f32::NAN, NO_EVENT),
        };
        out.extend_from_slice(&time.to_le_bytes());
        out.push(event);
        for m in Modality::ALL {
            if let Some(t) = r.bundle.get(m) {
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                what,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], FormatError> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn i32(&mut self, what: &'static str) -> Result<i32, FormatError> {
        Ok(i32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f32(&mut self, what: &'static str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Magic, version and header length shared with MMWT1.
pub(crate) fn check_preamble(c: &mut Cursor<'_>, magic: &[u8; 6], format: &'static str, version: u32) -> Result<(), FormatError> {
    if c.buf.get(..magic.len()) != Some(&magic[..]) {
        return Err(FormatError::BadMagic(format));
    }
    c.pos = magic.len();
    let found = c.u32("version")?;
    if found != version {
        return Err(FormatError::UnsupportedVersion { format, found });
    }
    Ok(())
}

pub fn read_mmeb(bytes: &[u8]) -> Result<MmebFile, FormatError> {
    let mut c = Cursor::new(bytes);
    check_preamble(&mut c, MAGIC, "MMEB1", VERSION)?;
    let header_len = c.u32("header length")? as usize;
    let raw = c.take(header_len, "header")?;
    let text = std::str::from_utf8(raw).map_err(|_| FormatError::InvalidUtf8("header"))?;
    let header: Header = serde_json::from_str(text).map_err(|e| FormatError::BadHeader(e.to_string()))?;

    let schema: LabelSchema = header
        .label_schema
        .parse()
        .map_err(|_| FormatError::BadHeader(format!("unknown label_schema `{}`", header.label_schema)))?;
    let mut declared = 0u8;
    for name in &header.modalities {
        let m = Modality::parse(name).ok_or_else(|| FormatError::BadHeader(format!("unknown modality `{}`", name)))?;
        declared |= m.bit();
    }
    let modalities = ModalitySet::from_bits(declared).unwrap();
    if modalities.is_empty() {
        return Err(FormatError::BadHeader("no modalities declared".into()));
    }
    if header.token_len == 0 || header.feature_dim == 0 {
        return Err(FormatError::BadHeader("token_len and feature_dim must be positive".into()));
    }
    let floats = header
        .token_len
        .checked_mul(header.feature_dim)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| FormatError::BadHeader("sequence size overflows".into()))?;

    // Each record needs at least 14 bytes, which bounds the allocation.
    let mut records = Vec::with_capacity(header.n_records.min(c.remaining() / 14 + 1));
    for i in 0..header.n_records {
        let id_len = c.u32("record id length")? as usize;
        let id = std::str::from_utf8(c.take(id_len, "record id")?)
            .map_err(|_| FormatError::InvalidUtf8("record id"))?
            .to_string();
        let presence = c.u8("presence bitmask")?;
        if presence == 0 {
            return Err(FormatError::ZeroBitmask { record: i });
        }
        let present = ModalitySet::from_bits(presence)
            .filter(|p| p.is_subset_of(modalities))
            .ok_or_else(|| FormatError::BadRecord {
                record: i,
                detail: format!("presence bitmask {:#05b} outside the declared modalities", presence),
            })?;
        let class = match c.i32("class label")? {
            NO_CLASS => None,
            k => Some(k),
        };
        let time = c.f32("time")?;
        let event = c.u8("event flag")?;
        let survival = match (time.is_nan(), event) {
            (true, NO_EVENT) => None,
            (false, 0 | 1) => Some(Survival {
                time: time as f64,
                event: event == 1,
            }),
            _ => {
                return Err(FormatError::BadRecord {
                    record: i,
                    detail: format!("inconsistent survival fields (time {}, event {})", time, event),
                })
            }
        };
        let mut slots: [Option<Tensor>; 3] = [None, None, None];
        for m in present.members() {
            let raw = c.take(floats * 4, "modality tokens")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            slots[m.index()] = Some(Tensor::matrix(header.token_len, header.feature_dim, data));
        }
        let bundle = ModalityBundle::from_slots(slots).map_err(|e| FormatError::BadRecord {
            record: i,
            detail: e.to_string(),
        })?;
        records.push(LabeledRecord {
            id,
            bundle,
            class,
            survival,
        });
    }
    if c.remaining() > 0 {
        return Err(FormatError::RecordCount {
            declared: header.n_records,
            found: format!("{} trailing bytes after the last declared record", c.remaining()),
        });
    }
    let file = MmebFile {
        schema,
        token_len: header.token_len,
        feature_dim: header.feature_dim,
        modalities,
        records,
    };
    file.check()?;
    Ok(file)
}
