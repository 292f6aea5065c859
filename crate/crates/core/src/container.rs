//! The `MOOD1` interchange container.
//!
//! All integers are little-endian.
//!
//! ```text
//! header   := "MOOD1" | endianness: u8 (1 = little) | version: u16 | section_count: u32
//! section  := kind: u8 | name_len: u32 | name: UTF-8 | payload_len: u64 | payload
//! payload  := record_count: u32 | record*
//! record   := dtype: u8 (0 = f32, 1 = f64, 2 = i64) | rank: u8 | dims: u64 * rank | data
//! ```
//!
//! `payload_len` covers everything after itself up to the next section, so readers
//! can skip section kinds they do not know.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MOOD1";
pub const VERSION: u16 = 1;
const LITTLE_ENDIAN: u8 = 1;
pub const HEADER_LEN: usize = 5 + 1 + 2 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SectionKind {
    Model,
    Dataset,
    Embeddings,
    Activations,
    Stats,
    Scores,
}

impl SectionKind {
    pub fn code(self) -> u8 {
        match self {
            SectionKind::Model => 1,
            SectionKind::Dataset => 2,
            SectionKind::Embeddings => 3,
            SectionKind::Activations => 4,
            SectionKind::Stats => 5,
            SectionKind::Scores => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => SectionKind::Model,
            2 => SectionKind::Dataset,
            3 => SectionKind::Embeddings,
            4 => SectionKind::Activations,
            5 => SectionKind::Stats,
            6 => SectionKind::Scores,
            _ => return None,
        })
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SectionKind::Model => "MODEL",
            SectionKind::Dataset => "DATASET",
            SectionKind::Embeddings => "EMBEDDINGS",
            SectionKind::Activations => "ACTIVATIONS",
            SectionKind::Stats => "STATS",
            SectionKind::Scores => "SCORES",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Bitwise equality, so NaN payloads compare equal to themselves.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let expected = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::invalid("record dims overflow"))?;
        if dims.len() > u8::MAX as usize || expected != data.len() as u64 {
            return Err(Error::invalid(format!(
                "record dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f64(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), TensorData::F64(data))
    }

    pub fn f32(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), TensorData::F32(data))
    }

    pub fn i64(dims: &[usize], data: Vec<i64>) -> Result<Self> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), TensorData::I64(data))
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    /// Floating payload as `f64`; `f32` payloads are upcast.
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::I64(_) => Err(Error::invalid("expected a floating-point record, found i64")),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            other => Err(Error::invalid(format!("expected an i64 record, found {:?}", other.dtype()))),
        }
    }

    fn encoded_len(&self) -> usize {
        2 + 8 * self.dims.len() + self.data.len() * self.data.dtype().width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub kind: SectionKind,
    pub name: String,
    pub records: Vec<TensorRecord>,
}

impl Section {
    pub fn new(kind: SectionKind, name: impl Into<String>, records: Vec<TensorRecord>) -> Self {
        Self {
            kind,
            name: name.into(),
            records,
        }
    }

    pub fn record(&self, index: usize) -> Result<&TensorRecord> {
        self.records.get(index).ok_or_else(|| {
            Error::MissingArtifact(format!("record {index} of {} section '{}'", self.kind, self.name))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub sections: Vec<Section>,
}

/// Structured parse failure; `offset` is the byte position where decoding failed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContainerError {
    #[error("bad magic at offset 0: expected \"MOOD1\"")]
    BadMagic,
    #[error("unsupported endianness marker {found} at offset {offset}")]
    UnsupportedEndianness { found: u8, offset: usize },
    #[error("unsupported container version {found} at offset {offset}")]
    UnsupportedVersion { found: u16, offset: usize },
    #[error("truncated {what} in section {section:?} at offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        section: Option<String>,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("section name at offset {offset} is not valid UTF-8")]
    InvalidName { offset: usize },
    #[error("unknown dtype code {code} in section {section:?} at offset {offset}")]
    UnknownDtype { code: u8, section: String, offset: usize },
    #[error("record dims overflow in section {section:?} at offset {offset}")]
    DimsOverflow { section: String, offset: usize },
    #[error("payload of section {section:?} at offset {offset} declares {declared} bytes but records span {actual}")]
    PayloadSizeMismatch {
        section: String,
        offset: usize,
        declared: u64,
        actual: u64,
    },
    #[error("{count} trailing bytes after last section at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
}

impl Container {
    pub fn new(sections: Vec<Section>) -> Self {
        Self { sections }
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn find(&self, kind: SectionKind, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.kind == kind && s.name == name)
    }

    pub fn require(&self, kind: SectionKind, name: &str) -> Result<&Section> {
        self.find(kind, name)
            .ok_or_else(|| Error::MissingArtifact(format!("{kind} section '{name}'")))
    }

    pub fn of_kind(&self, kind: SectionKind) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(move |s| s.kind == kind)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(LITTLE_ENDIAN);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for section in &self.sections {
            out.push(section.kind.code());
            out.extend_from_slice(&(section.name.len() as u32).to_le_bytes());
            out.extend_from_slice(section.name.as_bytes());
            let payload_len = 4 + section.records.iter().map(|r| r.encoded_len()).sum::<usize>();
            out.extend_from_slice(&(payload_len as u64).to_le_bytes());
            out.extend_from_slice(&(section.records.len() as u32).to_le_bytes());
            for record in &section.records {
                out.push(record.data.dtype().code());
                out.push(record.dims.len() as u8);
                for d in &record.dims {
                    out.extend_from_slice(&d.to_le_bytes());
                }
                match &record.data {
                    TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                    TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                    TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                }
            }
        }
        out
    }

    /// Decodes a container. Sections of unknown kind are skipped with a warning.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0, section: None };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        r.pos = MAGIC.len();
        let endian_at = r.pos;
        let endian = r.u8("endianness marker")?;
        if endian != LITTLE_ENDIAN {
            return Err(ContainerError::UnsupportedEndianness { found: endian, offset: endian_at });
        }
        let version_at = r.pos;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion { found: version, offset: version_at });
        }
        let count = r.u32("section count")?;
        let mut sections = Vec::new();
        for _ in 0..count {
            r.section = None;
            let kind_code = r.u8("section kind")?;
            let name_len = r.u32("section name length")? as usize;
            let name_at = r.pos;
            let name_bytes = r.take(name_len, "section name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| ContainerError::InvalidName { offset: name_at })?
                .to_string();
            r.section = Some(name.clone());
            let payload_len = r.u64("payload length")?;
            let payload_at = r.pos;
            let available = bytes.len() - r.pos;
            if payload_len > available as u64 {
                return Err(ContainerError::Truncated {
                    what: "payload",
                    section: Some(name),
                    offset: payload_at,
                    needed: payload_len.min(usize::MAX as u64) as usize,
                    available,
                });
            }
            let Some(kind) = SectionKind::from_code(kind_code) else {
                log::warn!("skipping section '{name}' of unknown kind {kind_code}");
                r.pos += payload_len as usize;
                continue;
            };
            let record_count = r.u32("record count")?;
            let mut records = Vec::new();
            for _ in 0..record_count {
                records.push(r.record(payload_at + payload_len as usize)?);
            }
            let actual = (r.pos - payload_at) as u64;
            if actual != payload_len {
                return Err(ContainerError::PayloadSizeMismatch {
                    section: name,
                    offset: payload_at,
                    declared: payload_len,
                    actual,
                });
            }
            sections.push(Section { kind, name, records });
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::TrailingBytes {
                offset: r.pos,
                count: bytes.len() - r.pos,
            });
        }
        Ok(Self { sections })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: Option<String>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], ContainerError> {
        self.take_within(n, what, self.bytes.len())
    }

    fn take_within(&mut self, n: usize, what: &'static str, limit: usize) -> std::result::Result<&'a [u8], ContainerError> {
        let available = limit.saturating_sub(self.pos);
        if n > available {
            return Err(ContainerError::Truncated {
                what,
                section: self.section.clone(),
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> std::result::Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// Reads one record, never past `limit` (the end of the enclosing payload).
    fn record(&mut self, limit: usize) -> std::result::Result<TensorRecord, ContainerError> {
        let section = self.section.clone().unwrap_or_default();
        let at = self.pos;
        let head = self.take_within(2, "record header", limit)?;
        let (dtype_code, rank) = (head[0], head[1] as usize);
        let dtype = match dtype_code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::I64,
            code => return Err(ContainerError::UnknownDtype { code, section, offset: at }),
        };
        let dims_at = self.pos;
        let raw_dims = self.take_within(8 * rank, "record dims", limit)?;
        let dims: Vec<u64> = raw_dims
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let byte_len = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.width() as u64))
            .filter(|&n| n <= usize::MAX as u64)
            .ok_or(ContainerError::DimsOverflow { section, offset: dims_at })? as usize;
        let raw = self.take_within(byte_len, "record data", limit)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I64 => TensorData::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(TensorRecord { dims, data })
    }
}

pub fn write_container(path: impl AsRef<Path>, container: &Container) -> Result<()> {
    std::fs::write(path.as_ref(), container.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(Container::from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_container_is_header_only() {
        let bytes = Container::default().to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[..5], b"MOOD1");
        assert_eq!(Container::from_bytes(&bytes).unwrap(), Container::default());
    }

    #[test]
    fn single_embedding_round_trips() {
        let c = Container::new(vec![Section::new(
            SectionKind::Embeddings,
            "0",
            vec![TensorRecord::f64(&[1, 1], vec![2.5]).unwrap()],
        )]);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    fn sample() -> Container {
        Container::new(vec![
            Section::new(SectionKind::Stats, "layer", vec![TensorRecord::f64(&[3], vec![1.0, 2.0, 3.0]).unwrap()]),
            Section::new(SectionKind::Scores, "ood", vec![TensorRecord::i64(&[2], vec![4, 5]).unwrap()]),
        ])
    }

    #[test]
    fn truncation_reports_section_and_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 4];
        match Container::from_bytes(cut) {
            Err(ContainerError::Truncated { section, offset, .. }) => {
                assert_eq!(section.as_deref(), Some("ood"));
                assert!(offset < bytes.len());
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert_eq!(Container::from_bytes(&bytes), Err(ContainerError::BadMagic));
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let bytes = sample().to_bytes();
        // first record header sits after header, kind, name_len, name, payload_len, record_count
        let at = HEADER_LEN + 1 + 4 + "layer".len() + 8 + 4;
        let mut corrupt = bytes.clone();
        corrupt[at] = 9;
        assert!(matches!(
            Container::from_bytes(&corrupt),
            Err(ContainerError::UnknownDtype { code: 9, offset, .. }) if offset == at
        ));
    }

    #[test]
    fn unknown_section_kind_is_skipped() {
        let mut bytes = sample().to_bytes();
        bytes[HEADER_LEN] = 42;
        let c = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c.sections.len(), 1);
        assert_eq!(c.sections[0].name, "ood");
    }

    #[test]
    fn payload_size_mismatch_is_detected() {
        let mut c = sample().to_bytes();
        // grow the first section's declared payload by one and append a byte inside it
        let len_at = HEADER_LEN + 1 + 4 + "layer".len();
        let declared = u64::from_le_bytes(c[len_at..len_at + 8].try_into().unwrap());
        c[len_at..len_at + 8].copy_from_slice(&(declared + 1).to_le_bytes());
        let insert_at = len_at + 8 + declared as usize;
        c.insert(insert_at, 0);
        assert!(matches!(
            Container::from_bytes(&c),
            Err(ContainerError::PayloadSizeMismatch { declared: d, .. }) if d == declared + 1
        ));
    }
}
