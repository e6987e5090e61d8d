//! Binary encoding of message values and bus envelopes.
//!
//! Message payloads are a sequence of `key varint ((field_id << 3) | wire_type)`
//! plus body, in ascending field-id order. Wire types:
//!
//! | wire type | used for                                           |
//! |-----------|----------------------------------------------------|
//! | 0         | bool, uint32/64, int32/64 (zigzag)                 |
//! | 1         | float64, 8 bytes little-endian                     |
//! | 2         | string, bytes, nested message, list (count + items) |
//!
//! An envelope frame is `A5 44 01`, varints `message_id sender_node
//! sent_ts_us payload_len`, the payload, then a little-endian CRC32 (IEEE) of
//! everything before it.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::idl::{FieldId, FieldType, MessageId, MessageSchema, SchemaSet, FIELD_ID_LIMIT};

pub const WIRE_VARINT: u8 = 0;
pub const WIRE_FIXED64: u8 = 1;
pub const WIRE_DELIMITED: u8 = 2;

pub const FRAME_MAGIC: [u8; 2] = [0xA5, 0x44];
pub const FRAME_VERSION: u8 = 0x01;
const CRC_LEN: usize = 4;

// ---------------------------------------------------------------------------
// Varints

/// Appends the minimal LEB128 encoding of `v`.
pub fn put_varint(buf: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        buf.push((v as u8) | 0x80);
        v >>= 7;
    }
    buf.push(v as u8);
}

pub fn encode_varint(v: u64) -> Vec<u8> {
    let mut buf = Vec::with_capacity(10);
    put_varint(&mut buf, v);
    buf
}

pub fn varint_len(v: u64) -> usize {
    let bits = 64 - (v | 1).leading_zeros() as usize;
    bits.div_ceil(7)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum VarintError {
    #[error("varint runs past end of input")]
    Truncated,
    #[error("varint longer than 64 bits")]
    Overflow,
}

/// Decodes a varint at the start of `bytes`, returning the value and its length.
pub fn decode_varint(bytes: &[u8]) -> Result<(u64, usize), VarintError> {
    let mut value = 0u64;
    for (i, &b) in bytes.iter().enumerate() {
        if i == 9 && b > 1 {
            return Err(VarintError::Overflow);
        }
        value |= u64::from(b & 0x7F) << (7 * i);
        if b & 0x80 == 0 {
            return Ok((value, i + 1));
        }
        if i == 9 {
            return Err(VarintError::Overflow);
        }
    }
    Err(VarintError::Truncated)
}

pub fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

pub fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

// ---------------------------------------------------------------------------
// Values

/// A dynamic value for one field.
#[derive(Debug, Clone)]
pub enum Value {
    Bool(bool),
    Int32(i32),
    Int64(i64),
    Uint32(u32),
    Uint64(u64),
    Float64(f64),
    String(String),
    Bytes(Vec<u8>),
    Message(Record),
    List(Vec<Value>),
}

// Floats compare by bit pattern: the codec preserves bits, not numeric equality.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Bool(a), Bool(b)) => a == b,
            (Int32(a), Int32(b)) => a == b,
            (Int64(a), Int64(b)) => a == b,
            (Uint32(a), Uint32(b)) => a == b,
            (Uint64(a), Uint64(b)) => a == b,
            (Float64(a), Float64(b)) => a.to_bits() == b.to_bits(),
            (String(a), String(b)) => a == b,
            (Bytes(a), Bytes(b)) => a == b,
            (Message(a), Message(b)) => a == b,
            (List(a), List(b)) => a == b,
            _ => false,
        }
    }
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Bool(_) => "bool",
            Value::Int32(_) => "int32",
            Value::Int64(_) => "int64",
            Value::Uint32(_) => "uint32",
            Value::Uint64(_) => "uint64",
            Value::Float64(_) => "float64",
            Value::String(_) => "string",
            Value::Bytes(_) => "bytes",
            Value::Message(_) => "message",
            Value::List(_) => "list",
        }
    }

    /// Numeric view used by guards and metric aggregation.
    pub fn as_f64(&self) -> Option<f64> {
        Some(match self {
            Value::Int32(v) => f64::from(*v),
            Value::Int64(v) => *v as f64,
            Value::Uint32(v) => f64::from(*v),
            Value::Uint64(v) => *v as f64,
            Value::Float64(v) => *v,
            _ => return None,
        })
    }

    /// The value a decoder produces for a field absent from the payload.
    pub fn default_for(set: &SchemaSet, ty: &FieldType) -> Value {
        match ty {
            FieldType::Bool => Value::Bool(false),
            FieldType::Int32 => Value::Int32(0),
            FieldType::Int64 => Value::Int64(0),
            FieldType::Uint32 => Value::Uint32(0),
            FieldType::Uint64 => Value::Uint64(0),
            FieldType::Float64 => Value::Float64(0.0),
            FieldType::String => Value::String(String::new()),
            FieldType::Bytes => Value::Bytes(Vec::new()),
            FieldType::Message(id) => Value::Message(match set.get(*id) {
                Some(schema) => Record::defaults(set, schema),
                None => Record::new(),
            }),
            FieldType::List(_) => Value::List(Vec::new()),
        }
    }
}

/// Field values of one message, keyed by field id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record(BTreeMap<FieldId, Value>);

impl Record {
    pub fn new() -> Record {
        Record(BTreeMap::new())
    }

    /// A record holding the default value of every field in `schema`.
    pub fn defaults(set: &SchemaSet, schema: &MessageSchema) -> Record {
        Record(
            schema
                .fields
                .iter()
                .map(|f| (f.id, Value::default_for(set, &f.ty)))
                .collect(),
        )
    }

    pub fn with(mut self, id: FieldId, value: Value) -> Record {
        self.0.insert(id, value);
        self
    }

    pub fn insert(&mut self, id: FieldId, value: Value) -> Option<Value> {
        self.0.insert(id, value)
    }

    pub fn get(&self, id: FieldId) -> Option<&Value> {
        self.0.get(&id)
    }

    pub fn get_mut(&mut self, id: FieldId) -> Option<&mut Value> {
        self.0.get_mut(&id)
    }

    /// Follows a chain of nested-message field ids.
    pub fn get_path(&self, path: &[FieldId]) -> Option<&Value> {
        let (first, rest) = path.split_first()?;
        let value = self.0.get(first)?;
        if rest.is_empty() {
            return Some(value);
        }
        match value {
            Value::Message(inner) => inner.get_path(rest),
            _ => None,
        }
    }

    pub fn remove(&mut self, id: FieldId) -> Option<Value> {
        self.0.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (FieldId, &Value)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(FieldId, Value)> for Record {
    fn from_iter<T: IntoIterator<Item = (FieldId, Value)>>(iter: T) -> Self {
        Record(iter.into_iter().collect())
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("schema mismatch at {path}: expected {expected}, got {got}")]
    SchemaMismatch {
        path: String,
        expected: String,
        got: String,
    },
    #[error("payload truncated at offset {0}")]
    TruncatedPayload(usize),
    #[error("invalid wire type for field {0}")]
    InvalidWireType(u64),
    #[error("invalid UTF-8 at {0}")]
    InvalidUtf8(String),
    #[error("malformed varint at offset {0}")]
    MalformedVarint(usize),
    #[error("value out of range at {0}")]
    ValueOutOfRange(String),
    #[error("list body length mismatch at offset {0}")]
    LengthMismatch(usize),
}

/// Lazily rendered field path, e.g. `Pose.points[3].x`.
#[derive(Clone, Copy)]
struct FieldPath<'a> {
    parent: Option<&'a FieldPath<'a>>,
    seg: Seg<'a>,
}

#[derive(Clone, Copy)]
enum Seg<'a> {
    Root(&'a str),
    Field(&'a str),
    Index(usize),
}

impl<'a> FieldPath<'a> {
    fn root(name: &'a str) -> Self {
        FieldPath {
            parent: None,
            seg: Seg::Root(name),
        }
    }

    fn field(&'a self, name: &'a str) -> FieldPath<'a> {
        FieldPath {
            parent: Some(self),
            seg: Seg::Field(name),
        }
    }

    fn index(&'a self, i: usize) -> FieldPath<'a> {
        FieldPath {
            parent: Some(self),
            seg: Seg::Index(i),
        }
    }
}

impl fmt::Display for FieldPath<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = self.parent {
            p.fmt(f)?;
        }
        match self.seg {
            Seg::Root(n) => f.write_str(n),
            Seg::Field(n) => write!(f, ".{n}"),
            Seg::Index(i) => write!(f, "[{i}]"),
        }
    }
}

// ---------------------------------------------------------------------------
// Message encoding

fn wire_type(ty: &FieldType) -> u8 {
    match ty {
        FieldType::Bool
        | FieldType::Int32
        | FieldType::Int64
        | FieldType::Uint32
        | FieldType::Uint64 => WIRE_VARINT,
        FieldType::Float64 => WIRE_FIXED64,
        _ => WIRE_DELIMITED,
    }
}

/// Encodes `record` under `schema`. Every schema field must be present and
/// the record may not carry fields the schema lacks.
pub fn encode_message(
    set: &SchemaSet,
    schema: &MessageSchema,
    record: &Record,
) -> Result<Vec<u8>, CodecError> {
    let mut buf = Vec::new();
    encode_record_into(&mut buf, set, schema, record, &FieldPath::root(&schema.name))?;
    Ok(buf)
}

fn encode_record_into(
    buf: &mut Vec<u8>,
    set: &SchemaSet,
    schema: &MessageSchema,
    record: &Record,
    path: &FieldPath<'_>,
) -> Result<(), CodecError> {
    if let Some((id, value)) = record.iter().find(|(id, _)| schema.field(*id).is_none()) {
        return Err(CodecError::SchemaMismatch {
            path: format!("{path}.#{id}"),
            expected: "no such field".into(),
            got: value.kind().into(),
        });
    }
    for field in &schema.fields {
        let fpath = path.field(&field.name);
        let value = record.get(field.id).ok_or_else(|| CodecError::SchemaMismatch {
            path: fpath.to_string(),
            expected: field.ty.display(set).to_string(),
            got: "missing".into(),
        })?;
        put_varint(buf, (u64::from(field.id) << 3) | u64::from(wire_type(&field.ty)));
        match (&field.ty, value) {
            (FieldType::List(elem), Value::List(items)) => {
                let mut body = Vec::new();
                put_varint(&mut body, items.len() as u64);
                for (i, item) in items.iter().enumerate() {
                    encode_element(&mut body, set, elem, item, &fpath.index(i))?;
                }
                put_varint(buf, body.len() as u64);
                buf.extend_from_slice(&body);
            }
            (ty, value) => encode_element(buf, set, ty, value, &fpath)?,
        }
    }
    Ok(())
}

fn encode_element(
    buf: &mut Vec<u8>,
    set: &SchemaSet,
    ty: &FieldType,
    value: &Value,
    path: &FieldPath<'_>,
) -> Result<(), CodecError> {
    match (ty, value) {
        (FieldType::Bool, Value::Bool(v)) => put_varint(buf, u64::from(*v)),
        (FieldType::Int32, Value::Int32(v)) => put_varint(buf, zigzag(i64::from(*v))),
        (FieldType::Int64, Value::Int64(v)) => put_varint(buf, zigzag(*v)),
        (FieldType::Uint32, Value::Uint32(v)) => put_varint(buf, u64::from(*v)),
        (FieldType::Uint64, Value::Uint64(v)) => put_varint(buf, *v),
        (FieldType::Float64, Value::Float64(v)) => buf.extend_from_slice(&v.to_le_bytes()),
        (FieldType::String, Value::String(s)) => {
            put_varint(buf, s.len() as u64);
            buf.extend_from_slice(s.as_bytes());
        }
        (FieldType::Bytes, Value::Bytes(b)) => {
            put_varint(buf, b.len() as u64);
            buf.extend_from_slice(b);
        }
        (FieldType::Message(id), Value::Message(inner)) => {
            let schema = set.get(*id).ok_or_else(|| CodecError::SchemaMismatch {
                path: path.to_string(),
                expected: format!("message #{id}"),
                got: "unregistered message".into(),
            })?;
            let mut body = Vec::new();
            encode_record_into(&mut body, set, schema, inner, path)?;
            put_varint(buf, body.len() as u64);
            buf.extend_from_slice(&body);
        }
        (ty, value) => {
            return Err(CodecError::SchemaMismatch {
                path: path.to_string(),
                expected: ty.display(set).to_string(),
                got: value.kind().into(),
            })
        }
    }
    Ok(())
}

/// Checks that `record` would encode under `schema` without producing bytes.
pub fn check_record(set: &SchemaSet, schema: &MessageSchema, record: &Record) -> Result<(), CodecError> {
    encode_message(set, schema, record).map(|_| ())
}

// ---------------------------------------------------------------------------
// Message decoding

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    end: usize,
}

impl<'b> Reader<'b> {
    fn varint(&mut self) -> Result<u64, CodecError> {
        match decode_varint(&self.bytes[self.pos..self.end]) {
            Ok((v, n)) => {
                self.pos += n;
                Ok(v)
            }
            Err(VarintError::Truncated) => Err(CodecError::TruncatedPayload(self.end)),
            Err(VarintError::Overflow) => Err(CodecError::MalformedVarint(self.pos)),
        }
    }

    fn take(&mut self, n: u64) -> Result<&'b [u8], CodecError> {
        let available = (self.end - self.pos) as u64;
        if n > available {
            return Err(CodecError::TruncatedPayload(self.end));
        }
        let start = self.pos;
        self.pos += n as usize;
        Ok(&self.bytes[start..self.pos])
    }

    /// Reads a length prefix and returns the absolute end of the delimited body.
    fn delimited_end(&mut self) -> Result<usize, CodecError> {
        let len = self.varint()?;
        if len > (self.end - self.pos) as u64 {
            return Err(CodecError::TruncatedPayload(self.end));
        }
        Ok(self.pos + len as usize)
    }

    fn skip(&mut self, wire: u8, field_id: u64) -> Result<(), CodecError> {
        match wire {
            WIRE_VARINT => self.varint().map(|_| ()),
            WIRE_FIXED64 => self.take(8).map(|_| ()),
            WIRE_DELIMITED => {
                let len = self.varint()?;
                self.take(len).map(|_| ())
            }
            _ => Err(CodecError::InvalidWireType(field_id)),
        }
    }
}

/// Decodes a payload under `schema`. Unknown field ids are skipped; schema
/// fields missing from the payload take their default value.
pub fn decode_message(
    set: &SchemaSet,
    schema: &MessageSchema,
    payload: &[u8],
) -> Result<Record, CodecError> {
    let mut reader = Reader {
        bytes: payload,
        pos: 0,
        end: payload.len(),
    };
    decode_record(&mut reader, set, schema, &FieldPath::root(&schema.name))
}

fn decode_record(
    r: &mut Reader<'_>,
    set: &SchemaSet,
    schema: &MessageSchema,
    path: &FieldPath<'_>,
) -> Result<Record, CodecError> {
    let mut record = Record::new();
    while r.pos < r.end {
        let key = r.varint()?;
        let field_id = key >> 3;
        let wire = (key & 7) as u8;
        let field = if field_id < FIELD_ID_LIMIT {
            schema.field(field_id as FieldId)
        } else {
            None
        };
        let Some(field) = field else {
            r.skip(wire, field_id)?;
            continue;
        };
        if wire != wire_type(&field.ty) {
            return Err(CodecError::InvalidWireType(field_id));
        }
        let fpath = path.field(&field.name);
        let value = match &field.ty {
            FieldType::List(elem) => {
                let body_end = r.delimited_end()?;
                let outer_end = std::mem::replace(&mut r.end, body_end);
                let count = r.varint()?;
                let mut items = Vec::new();
                for i in 0..count {
                    if r.pos >= r.end {
                        return Err(CodecError::TruncatedPayload(r.end));
                    }
                    items.push(decode_element(r, set, elem, &fpath.index(i as usize))?);
                }
                if r.pos != body_end {
                    return Err(CodecError::LengthMismatch(r.pos));
                }
                r.end = outer_end;
                Value::List(items)
            }
            ty => decode_element(r, set, ty, &fpath)?,
        };
        record.insert(field.id, value);
    }
    for field in &schema.fields {
        if record.get(field.id).is_none() {
            record.insert(field.id, Value::default_for(set, &field.ty));
        }
    }
    Ok(record)
}

fn decode_element(
    r: &mut Reader<'_>,
    set: &SchemaSet,
    ty: &FieldType,
    path: &FieldPath<'_>,
) -> Result<Value, CodecError> {
    let out_of_range = || CodecError::ValueOutOfRange(path.to_string());
    Ok(match ty {
        FieldType::Bool => match r.varint()? {
            0 => Value::Bool(false),
            1 => Value::Bool(true),
            _ => return Err(out_of_range()),
        },
        FieldType::Int32 => {
            let v = unzigzag(r.varint()?);
            Value::Int32(i32::try_from(v).map_err(|_| out_of_range())?)
        }
        FieldType::Int64 => Value::Int64(unzigzag(r.varint()?)),
        FieldType::Uint32 => Value::Uint32(u32::try_from(r.varint()?).map_err(|_| out_of_range())?),
        FieldType::Uint64 => Value::Uint64(r.varint()?),
        FieldType::Float64 => {
            let raw = r.take(8)?;
            Value::Float64(f64::from_le_bytes(raw.try_into().expect("8 bytes")))
        }
        FieldType::String => {
            let len = r.varint()?;
            let raw = r.take(len)?;
            Value::String(
                std::str::from_utf8(raw)
                    .map_err(|_| CodecError::InvalidUtf8(path.to_string()))?
                    .to_owned(),
            )
        }
        FieldType::Bytes => {
            let len = r.varint()?;
            Value::Bytes(r.take(len)?.to_vec())
        }
        FieldType::Message(id) => {
            let schema = set.get(*id).ok_or_else(out_of_range)?;
            let body_end = r.delimited_end()?;
            let outer_end = std::mem::replace(&mut r.end, body_end);
            let inner = decode_record(r, set, schema, path)?;
            r.end = outer_end;
            Value::Message(inner)
        }
        FieldType::List(_) => return Err(out_of_range()),
    })
}

// ---------------------------------------------------------------------------
// Envelopes

/// One timestamped, schema-identified message on the bus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub message_id: MessageId,
    pub sender_node: u32,
    /// Microseconds since the session epoch.
    pub sent_ts_us: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn frame_len(&self) -> usize {
        FRAME_MAGIC.len()
            + 1
            + varint_len(u64::from(self.message_id))
            + varint_len(u64::from(self.sender_node))
            + varint_len(self.sent_ts_us)
            + varint_len(self.payload.len() as u64)
            + self.payload.len()
            + CRC_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("frame CRC mismatch: stored {expected:#010x}, computed {got:#010x}")]
    CrcMismatch { expected: u32, got: u32 },
    #[error("truncated frame")]
    TruncatedFrame,
    #[error("malformed varint in frame header")]
    MalformedVarint,
    #[error("frame header field out of range")]
    FieldOverflow,
    #[error("{0} bytes after end of frame")]
    TrailingBytes(usize),
}

pub fn encode_envelope(e: &Envelope) -> Vec<u8> {
    let mut buf = Vec::with_capacity(e.frame_len());
    buf.extend_from_slice(&FRAME_MAGIC);
    buf.push(FRAME_VERSION);
    put_varint(&mut buf, u64::from(e.message_id));
    put_varint(&mut buf, u64::from(e.sender_node));
    put_varint(&mut buf, e.sent_ts_us);
    put_varint(&mut buf, e.payload.len() as u64);
    buf.extend_from_slice(&e.payload);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Decodes exactly one frame; bytes after the CRC are an error.
pub fn decode_envelope(frame: &[u8]) -> Result<Envelope, FrameError> {
    let (env, used) = decode_frame_prefix(frame)?;
    if used != frame.len() {
        return Err(FrameError::TrailingBytes(frame.len() - used));
    }
    Ok(env)
}

/// Decodes the frame at the start of `bytes`, returning it and its length.
pub fn decode_frame_prefix(bytes: &[u8]) -> Result<(Envelope, usize), FrameError> {
    for (i, m) in FRAME_MAGIC.iter().enumerate() {
        match bytes.get(i) {
            None => return Err(FrameError::TruncatedFrame),
            Some(b) if b != m => return Err(FrameError::BadMagic),
            _ => {}
        }
    }
    match bytes.get(2) {
        None => return Err(FrameError::TruncatedFrame),
        Some(&FRAME_VERSION) => {}
        Some(&v) => return Err(FrameError::UnsupportedVersion(v)),
    }
    let mut pos = 3;
    let mut next = || -> Result<u64, FrameError> {
        let (v, n) = decode_varint(&bytes[pos..]).map_err(|e| match e {
            VarintError::Truncated => FrameError::TruncatedFrame,
            VarintError::Overflow => FrameError::MalformedVarint,
        })?;
        pos += n;
        Ok(v)
    };
    let message_id = u32::try_from(next()?).map_err(|_| FrameError::FieldOverflow)?;
    let sender_node = u32::try_from(next()?).map_err(|_| FrameError::FieldOverflow)?;
    let sent_ts_us = next()?;
    let payload_len = next()?;
    let remaining = (bytes.len() - pos) as u64;
    if payload_len.checked_add(CRC_LEN as u64).is_none_or(|need| need > remaining) {
        return Err(FrameError::TruncatedFrame);
    }
    let body_end = pos + payload_len as usize;
    let stored = u32::from_le_bytes(bytes[body_end..body_end + CRC_LEN].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FrameError::CrcMismatch {
            expected: stored,
            got: computed,
        });
    }
    Ok((
        Envelope {
            message_id,
            sender_node,
            sent_ts_us,
            payload: bytes[pos..body_end].to_vec(),
        },
        body_end + CRC_LEN,
    ))
}
