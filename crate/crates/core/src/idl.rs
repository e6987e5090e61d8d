//! Message definition language.
//!
//! Sources look like protobuf with explicit numeric ids:
//!
//! ```text
//! message Ping [id = 1] {
//!   uint32 seq [id = 1];
//!   list<string> tags [id = 2];
//! }
//! ```
//!
//! [`parse_schema`] compiles a source into a validated [`SchemaSet`];
//! [`check_compatibility`] compares two versions of a schema.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub type MessageId = u32;
pub type FieldId = u32;

/// Exclusive upper bound for message ids.
pub const MESSAGE_ID_LIMIT: u64 = 1 << 31;
/// Exclusive upper bound for field ids. The low 3 bits of a wire key carry the wire type.
pub const FIELD_ID_LIMIT: u64 = 1 << 29;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdKind {
    Message,
    Field,
}

impl fmt::Display for IdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdKind::Message => f.write_str("message"),
            IdKind::Field => f.write_str("field"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdlError {
    #[error("syntax error at {line}:{column}: expected {expected}")]
    Syntax {
        line: usize,
        column: usize,
        expected: String,
    },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: IdKind, id: u64 },
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("unknown type `{0}`")]
    UnknownType(String),
    #[error("id {0} out of range")]
    IdOutOfRange(u64),
    #[error("recursive message containment: {}", .0.join(" -> "))]
    RecursiveMessage(Vec<String>),
    #[error("unknown message id {0}")]
    UnknownMessageId(MessageId),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldType {
    Bool,
    Int32,
    Int64,
    Uint32,
    Uint64,
    Float64,
    String,
    Bytes,
    Message(MessageId),
    List(Box<FieldType>),
}

impl FieldType {
    fn from_keyword(word: &str) -> Option<FieldType> {
        Some(match word {
            "bool" => FieldType::Bool,
            "int32" => FieldType::Int32,
            "int64" => FieldType::Int64,
            "uint32" => FieldType::Uint32,
            "uint64" => FieldType::Uint64,
            "float64" => FieldType::Float64,
            "string" => FieldType::String,
            "bytes" => FieldType::Bytes,
            _ => return None,
        })
    }

    fn keyword(&self) -> Option<&'static str> {
        Some(match self {
            FieldType::Bool => "bool",
            FieldType::Int32 => "int32",
            FieldType::Int64 => "int64",
            FieldType::Uint32 => "uint32",
            FieldType::Uint64 => "uint64",
            FieldType::Float64 => "float64",
            FieldType::String => "string",
            FieldType::Bytes => "bytes",
            FieldType::Message(_) | FieldType::List(_) => return None,
        })
    }

    /// Integer and float scalars; the types a guard may compare against a threshold.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            FieldType::Int32
                | FieldType::Int64
                | FieldType::Uint32
                | FieldType::Uint64
                | FieldType::Float64
        )
    }

    /// Every message id this type refers to, directly or as a list element.
    pub fn referenced_message(&self) -> Option<MessageId> {
        match self {
            FieldType::Message(id) => Some(*id),
            FieldType::List(inner) => inner.referenced_message(),
            _ => None,
        }
    }

    /// Renders the type the way it appears in source, naming referenced messages.
    pub fn display<'a>(&'a self, set: &'a SchemaSet) -> impl fmt::Display + 'a {
        DisplayType { ty: self, set }
    }
}

struct DisplayType<'a> {
    ty: &'a FieldType,
    set: &'a SchemaSet,
}

impl fmt::Display for DisplayType<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ty {
            FieldType::Message(id) => match self.set.messages.get(id) {
                Some(m) => f.write_str(&m.name),
                None => write!(f, "#{id}"),
            },
            FieldType::List(inner) => write!(f, "list<{}>", inner.display(self.set)),
            other => f.write_str(other.keyword().unwrap_or("?")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDef {
    pub name: String,
    pub id: FieldId,
    pub ty: FieldType,
}

/// One compiled message. Fields are kept in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageSchema {
    pub name: String,
    pub id: MessageId,
    pub fields: Vec<FieldDef>,
}

impl MessageSchema {
    pub fn field(&self, id: FieldId) -> Option<&FieldDef> {
        self.fields
            .binary_search_by_key(&id, |f| f.id)
            .ok()
            .map(|i| &self.fields[i])
    }

    pub fn field_by_name(&self, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.name == name)
    }
}

/// 32-byte SHA-256 of a schema's canonical source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SchemaDigest(pub [u8; 32]);

impl fmt::Display for SchemaDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for SchemaDigest {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(SchemaDigest(out))
    }
}

/// A validated registry of message schemas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaSet {
    messages: BTreeMap<MessageId, MessageSchema>,
    source_digest: SchemaDigest,
}

impl SchemaSet {
    /// Validates a list of message schemas and computes the canonical digest.
    ///
    /// Fields may be given in any order; they are stored sorted by id.
    pub fn from_messages(messages: Vec<MessageSchema>) -> Result<SchemaSet, IdlError> {
        let mut by_id = BTreeMap::new();
        let mut names = HashSet::new();
        for mut msg in messages {
            check_message_header(&msg.name, u64::from(msg.id), &mut names, &by_id)?;
            let mut field_ids = HashSet::new();
            let mut field_names = HashSet::new();
            for field in &msg.fields {
                check_field(&msg.name, &field.name, u64::from(field.id), &mut field_ids, &mut field_names)?;
                if let FieldType::List(inner) = &field.ty {
                    if matches!(**inner, FieldType::List(_)) {
                        return Err(IdlError::UnknownType(format!("list<list<..>> in {}.{}", msg.name, field.name)));
                    }
                }
            }
            msg.fields.sort_by_key(|f| f.id);
            by_id.insert(msg.id, msg);
        }
        for msg in by_id.values() {
            for field in &msg.fields {
                if let Some(target) = field.ty.referenced_message() {
                    if !by_id.contains_key(&target) {
                        return Err(IdlError::UnknownType(format!("#{target}")));
                    }
                }
            }
        }
        check_acyclic(&by_id)?;
        let mut set = SchemaSet {
            messages: by_id,
            source_digest: SchemaDigest([0; 32]),
        };
        set.source_digest = SchemaDigest(Sha256::digest(set.canonical_source().as_bytes()).into());
        Ok(set)
    }

    pub fn empty() -> SchemaSet {
        SchemaSet::from_messages(Vec::new()).expect("empty schema set is valid")
    }

    pub fn source_digest(&self) -> SchemaDigest {
        self.source_digest
    }

    pub fn messages(&self) -> impl Iterator<Item = &MessageSchema> {
        self.messages.values()
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn get(&self, id: MessageId) -> Option<&MessageSchema> {
        self.messages.get(&id)
    }

    pub fn by_name(&self, name: &str) -> Option<&MessageSchema> {
        self.messages.values().find(|m| m.name == name)
    }

    /// Looks up a message by id.
    pub fn resolve(&self, id: MessageId) -> Result<&MessageSchema, IdlError> {
        self.messages.get(&id).ok_or(IdlError::UnknownMessageId(id))
    }

    /// Canonical source: messages by ascending id, fields by ascending id,
    /// two-space field indent, single spaces between tokens, LF line endings.
    pub fn canonical_source(&self) -> String {
        let mut out = String::new();
        for msg in self.messages.values() {
            out.push_str(&format!("message {} [id = {}] {{\n", msg.name, msg.id));
            for field in &msg.fields {
                out.push_str(&format!(
                    "  {} {} [id = {}];\n",
                    field.ty.display(self),
                    field.name,
                    field.id
                ));
            }
            out.push_str("}\n");
        }
        out
    }
}

fn check_message_header(
    name: &str,
    id: u64,
    names: &mut HashSet<String>,
    by_id: &BTreeMap<MessageId, MessageSchema>,
) -> Result<(), IdlError> {
    if id == 0 || id >= MESSAGE_ID_LIMIT {
        return Err(IdlError::IdOutOfRange(id));
    }
    if by_id.contains_key(&(id as u32)) {
        return Err(IdlError::DuplicateId {
            kind: IdKind::Message,
            id,
        });
    }
    if !names.insert(name.to_string()) {
        return Err(IdlError::DuplicateName(name.to_string()));
    }
    Ok(())
}

fn check_field(
    message: &str,
    name: &str,
    id: u64,
    ids: &mut HashSet<u64>,
    names: &mut HashSet<String>,
) -> Result<(), IdlError> {
    if id == 0 || id >= FIELD_ID_LIMIT {
        return Err(IdlError::IdOutOfRange(id));
    }
    if !ids.insert(id) {
        return Err(IdlError::DuplicateId {
            kind: IdKind::Field,
            id,
        });
    }
    if !names.insert(name.to_string()) {
        return Err(IdlError::DuplicateName(format!("{message}.{name}")));
    }
    Ok(())
}

fn check_acyclic(messages: &BTreeMap<MessageId, MessageSchema>) -> Result<(), IdlError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }

    fn visit(
        id: MessageId,
        messages: &BTreeMap<MessageId, MessageSchema>,
        marks: &mut HashMap<MessageId, Mark>,
        stack: &mut Vec<MessageId>,
    ) -> Result<(), IdlError> {
        match marks.get(&id) {
            Some(Mark::Done) => return Ok(()),
            Some(Mark::Open) => {
                let start = stack.iter().position(|s| *s == id).unwrap_or(0);
                let cycle = stack[start..]
                    .iter()
                    .map(|m| messages[m].name.clone())
                    .collect();
                return Err(IdlError::RecursiveMessage(cycle));
            }
            None => {}
        }
        marks.insert(id, Mark::Open);
        stack.push(id);
        for field in &messages[&id].fields {
            if let Some(target) = field.ty.referenced_message() {
                visit(target, messages, marks, stack)?;
            }
        }
        stack.pop();
        marks.insert(id, Mark::Done);
        Ok(())
    }

    let mut marks = HashMap::new();
    for id in messages.keys() {
        visit(*id, messages, &mut marks, &mut Vec::new())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Lexer / parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Uint(u64),
    Punct(char),
    Eof,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(source: &str) -> Result<Vec<Spanned>, IdlError> {
    let mut out = Vec::new();
    let chars: Vec<char> = source.chars().collect();
    let (mut i, mut line, mut column) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            column = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            column += 1;
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let (start_line, start_col) = (line, column);
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            column += i - start;
            out.push(Spanned {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                line: start_line,
                column: start_col,
            });
        } else if c.is_ascii_digit() {
            let mut value: u64 = 0;
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                let digit = u64::from(chars[i] as u8 - b'0');
                value = value.saturating_mul(10).saturating_add(digit);
                i += 1;
            }
            column += i - start;
            out.push(Spanned {
                tok: Tok::Uint(value),
                line: start_line,
                column: start_col,
            });
        } else if "[]={};<>".contains(c) {
            i += 1;
            column += 1;
            out.push(Spanned {
                tok: Tok::Punct(c),
                line: start_line,
                column: start_col,
            });
        } else {
            return Err(IdlError::Syntax {
                line,
                column,
                expected: "identifier, number or punctuation".into(),
            });
        }
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        column,
    });
    Ok(out)
}

#[derive(Debug)]
enum RawType {
    Known(FieldType),
    Named(String),
    List(Box<RawType>),
}

#[derive(Debug)]
struct RawField {
    name: String,
    id: u64,
    ty: RawType,
}

#[derive(Debug)]
struct RawMessage {
    name: String,
    id: u64,
    fields: Vec<RawField>,
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &str) -> Result<T, IdlError> {
        let t = self.peek();
        Err(IdlError::Syntax {
            line: t.line,
            column: t.column,
            expected: expected.to_string(),
        })
    }

    fn punct(&mut self, c: char) -> Result<(), IdlError> {
        if self.peek().tok == Tok::Punct(c) {
            self.bump();
            Ok(())
        } else {
            self.fail(&format!("'{c}'"))
        }
    }

    fn ident(&mut self) -> Result<String, IdlError> {
        match &self.peek().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => self.fail("identifier"),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), IdlError> {
        match &self.peek().tok {
            Tok::Ident(s) if s == kw => {
                self.bump();
                Ok(())
            }
            _ => self.fail(&format!("'{kw}'")),
        }
    }

    /// `"[" "id" "=" UINT "]"`
    fn id_attr(&mut self) -> Result<u64, IdlError> {
        self.punct('[')?;
        self.keyword("id")?;
        self.punct('=')?;
        let id = match self.peek().tok {
            Tok::Uint(v) => v,
            _ => return self.fail("unsigned integer"),
        };
        self.bump();
        self.punct(']')?;
        Ok(id)
    }

    fn schema(&mut self) -> Result<Vec<RawMessage>, IdlError> {
        let mut out = Vec::new();
        while self.peek().tok != Tok::Eof {
            out.push(self.message()?);
        }
        Ok(out)
    }

    fn message(&mut self) -> Result<RawMessage, IdlError> {
        self.keyword("message")?;
        let name = self.ident()?;
        let id = self.id_attr()?;
        self.punct('{')?;
        let mut fields = Vec::new();
        while self.peek().tok != Tok::Punct('}') {
            if self.peek().tok == Tok::Eof {
                return self.fail("'}'");
            }
            fields.push(self.field()?);
        }
        self.punct('}')?;
        Ok(RawMessage { name, id, fields })
    }

    fn field(&mut self) -> Result<RawField, IdlError> {
        let ty = self.ty(true)?;
        let name = self.ident()?;
        let id = self.id_attr()?;
        self.punct(';')?;
        Ok(RawField { name, id, ty })
    }

    fn ty(&mut self, allow_list: bool) -> Result<RawType, IdlError> {
        let word = match &self.peek().tok {
            Tok::Ident(s) => s.clone(),
            _ => return self.fail("type"),
        };
        if word == "list" {
            if !allow_list {
                return self.fail("non-list element type");
            }
            self.bump();
            self.punct('<')?;
            let inner = self.ty(false)?;
            self.punct('>')?;
            return Ok(RawType::List(Box::new(inner)));
        }
        self.bump();
        Ok(match FieldType::from_keyword(&word) {
            Some(t) => RawType::Known(t),
            None => RawType::Named(word),
        })
    }
}

/// Compiles a definition source into a validated [`SchemaSet`].
pub fn parse_schema(source: &str) -> Result<SchemaSet, IdlError> {
    let mut parser = Parser {
        toks: lex(source)?,
        pos: 0,
    };
    let raw = parser.schema()?;

    // Header checks first so that duplicate ids are reported before type resolution.
    let mut names: HashMap<String, MessageId> = HashMap::new();
    let mut ids = BTreeSet::new();
    for msg in &raw {
        if msg.id == 0 || msg.id >= MESSAGE_ID_LIMIT {
            return Err(IdlError::IdOutOfRange(msg.id));
        }
        if !ids.insert(msg.id) {
            return Err(IdlError::DuplicateId {
                kind: IdKind::Message,
                id: msg.id,
            });
        }
        if names.insert(msg.name.clone(), msg.id as MessageId).is_some() {
            return Err(IdlError::DuplicateName(msg.name.clone()));
        }
        let mut field_ids = HashSet::new();
        let mut field_names = HashSet::new();
        for field in &msg.fields {
            check_field(&msg.name, &field.name, field.id, &mut field_ids, &mut field_names)?;
        }
    }

    fn resolve_type(ty: &RawType, names: &HashMap<String, MessageId>) -> Result<FieldType, IdlError> {
        Ok(match ty {
            RawType::Known(t) => t.clone(),
            RawType::Named(n) => FieldType::Message(
                *names.get(n).ok_or_else(|| IdlError::UnknownType(n.clone()))?,
            ),
            RawType::List(inner) => FieldType::List(Box::new(resolve_type(inner, names)?)),
        })
    }

    let mut messages = Vec::with_capacity(raw.len());
    for msg in &raw {
        let mut fields = Vec::with_capacity(msg.fields.len());
        for f in &msg.fields {
            fields.push(FieldDef {
                name: f.name.clone(),
                id: f.id as FieldId,
                ty: resolve_type(&f.ty, &names)?,
            });
        }
        messages.push(MessageSchema {
            name: msg.name.clone(),
            id: msg.id as MessageId,
            fields,
        });
    }
    SchemaSet::from_messages(messages)
}

// ---------------------------------------------------------------------------
// Compatibility

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verdict {
    Identical,
    BackwardCompatible,
    Breaking,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Identical => "identical",
            Verdict::BackwardCompatible => "backward-compatible",
            Verdict::Breaking => "breaking",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompatRule {
    MessageAdded,
    MessageRemoved,
    MessageRenamed,
    FieldAdded,
    FieldRemoved,
    FieldRenamed,
    FieldTypeChanged,
}

impl CompatRule {
    pub fn is_breaking(self) -> bool {
        matches!(self, CompatRule::MessageRemoved | CompatRule::FieldTypeChanged)
    }

    pub fn name(self) -> &'static str {
        match self {
            CompatRule::MessageAdded => "message-added",
            CompatRule::MessageRemoved => "message-removed",
            CompatRule::MessageRenamed => "message-renamed",
            CompatRule::FieldAdded => "field-added",
            CompatRule::FieldRemoved => "field-removed",
            CompatRule::FieldRenamed => "field-renamed",
            CompatRule::FieldTypeChanged => "type-changed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub message_id: MessageId,
    pub field_id: Option<FieldId>,
    pub rule: CompatRule,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompatibilityReport {
    pub verdict: Verdict,
    pub findings: Vec<Finding>,
}

impl fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verdict: {}", self.verdict)?;
        for finding in &self.findings {
            let field = finding
                .field_id
                .map(|id| id.to_string())
                .unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "  {:<16} message={:<6} field={:<6} {}",
                finding.rule.name(),
                finding.message_id,
                field,
                finding.description
            )?;
        }
        Ok(())
    }
}

/// Compares two schema versions message by message (matched on id).
pub fn check_compatibility(old: &SchemaSet, new: &SchemaSet) -> CompatibilityReport {
    let mut findings = Vec::new();
    let ids: BTreeSet<MessageId> = old.messages.keys().chain(new.messages.keys()).copied().collect();
    for id in ids {
        match (old.messages.get(&id), new.messages.get(&id)) {
            (None, Some(m)) => findings.push(Finding {
                message_id: id,
                field_id: None,
                rule: CompatRule::MessageAdded,
                description: format!("message {} added", m.name),
            }),
            (Some(m), None) => findings.push(Finding {
                message_id: id,
                field_id: None,
                rule: CompatRule::MessageRemoved,
                description: format!("message {} removed", m.name),
            }),
            (Some(a), Some(b)) => compare_message(old, new, a, b, &mut findings),
            (None, None) => unreachable!(),
        }
    }
    let verdict = if findings.is_empty() {
        Verdict::Identical
    } else if findings.iter().any(|f| f.rule.is_breaking()) {
        Verdict::Breaking
    } else {
        Verdict::BackwardCompatible
    };
    CompatibilityReport { verdict, findings }
}

fn compare_message(
    old_set: &SchemaSet,
    new_set: &SchemaSet,
    old: &MessageSchema,
    new: &MessageSchema,
    findings: &mut Vec<Finding>,
) {
    if old.name != new.name {
        findings.push(Finding {
            message_id: old.id,
            field_id: None,
            rule: CompatRule::MessageRenamed,
            description: format!("message {} renamed to {}", old.name, new.name),
        });
    }
    let field_ids: BTreeSet<FieldId> = old
        .fields
        .iter()
        .chain(new.fields.iter())
        .map(|f| f.id)
        .collect();
    for fid in field_ids {
        let (rule, description) = match (old.field(fid), new.field(fid)) {
            (None, Some(f)) => (
                CompatRule::FieldAdded,
                format!("{}.{} ({}) added", new.name, f.name, f.ty.display(new_set)),
            ),
            (Some(f), None) => (
                CompatRule::FieldRemoved,
                format!("{}.{} removed", old.name, f.name),
            ),
            (Some(a), Some(b)) if a.ty != b.ty => (
                CompatRule::FieldTypeChanged,
                format!(
                    "{}.{} changed type {} -> {}",
                    old.name,
                    a.name,
                    a.ty.display(old_set),
                    b.ty.display(new_set)
                ),
            ),
            (Some(a), Some(b)) if a.name != b.name => (
                CompatRule::FieldRenamed,
                format!("{}.{} renamed to {}", old.name, a.name, b.name),
            ),
            _ => continue,
        };
        findings.push(Finding {
            message_id: old.id,
            field_id: Some(fid),
            rule,
            description,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_source() {
        let set = parse_schema("").unwrap();
        assert!(set.is_empty());
        assert_eq!(set, SchemaSet::empty());
    }

    #[test]
    fn single_ping() {
        let set = parse_schema("message Ping [id = 1] { uint32 seq [id = 1]; }").unwrap();
        assert_eq!(set.len(), 1);
        let ping = set.resolve(1).unwrap();
        assert_eq!(ping.name, "Ping");
        assert_eq!(
            ping.fields,
            vec![FieldDef {
                name: "seq".into(),
                id: 1,
                ty: FieldType::Uint32
            }]
        );
    }

    #[test]
    fn duplicate_message_id() {
        let err = parse_schema("message A [id = 1] {} message B [id = 1] {}").unwrap_err();
        assert_eq!(
            err,
            IdlError::DuplicateId {
                kind: IdKind::Message,
                id: 1
            }
        );
    }

    #[test]
    fn self_containment() {
        let err = parse_schema("message A [id = 1] { A inner [id = 1]; }").unwrap_err();
        assert_eq!(err, IdlError::RecursiveMessage(vec!["A".into()]));
    }

    #[test]
    fn indirect_cycle_through_list() {
        let src = "message A [id = 1] { B b [id = 1]; }\nmessage B [id = 2] { list<A> back [id = 1]; }";
        assert_eq!(
            parse_schema(src).unwrap_err(),
            IdlError::RecursiveMessage(vec!["A".into(), "B".into()])
        );
    }

    #[test]
    fn forward_reference_and_comments() {
        let src = "// header\nmessage Outer [id = 2] {\n  Inner i [id = 1]; // trailing\n  list<Inner> many [id = 2];\n}\nmessage Inner [id = 1] { float64 x [id = 1]; }\n";
        let set = parse_schema(src).unwrap();
        let outer = set.resolve(2).unwrap();
        assert_eq!(outer.fields[0].ty, FieldType::Message(1));
        assert_eq!(outer.fields[1].ty, FieldType::List(Box::new(FieldType::Message(1))));
    }

    #[test]
    fn error_cases() {
        assert_eq!(
            parse_schema("message A [id = 1] { Nope n [id = 1]; }").unwrap_err(),
            IdlError::UnknownType("Nope".into())
        );
        assert_eq!(
            parse_schema("message A [id = 0] {}").unwrap_err(),
            IdlError::IdOutOfRange(0)
        );
        assert_eq!(
            parse_schema("message A [id = 2147483648] {}").unwrap_err(),
            IdlError::IdOutOfRange(1 << 31)
        );
        assert_eq!(
            parse_schema("message A [id = 1] { bool b [id = 536870912]; }").unwrap_err(),
            IdlError::IdOutOfRange(1 << 29)
        );
        assert_eq!(
            parse_schema("message A [id = 1] {} message A [id = 2] {}").unwrap_err(),
            IdlError::DuplicateName("A".into())
        );
        assert_eq!(
            parse_schema("message A [id = 1] { bool b [id = 1]; bool b [id = 2]; }").unwrap_err(),
            IdlError::DuplicateName("A.b".into())
        );
        assert_eq!(
            parse_schema("message A [id = 1] { bool b [id = 1]; bool c [id = 1]; }").unwrap_err(),
            IdlError::DuplicateId {
                kind: IdKind::Field,
                id: 1
            }
        );
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_schema("message A [id = 1] {\n  uint32 x [id = 1]\n}") {
            Err(IdlError::Syntax {
                line,
                column,
                expected,
            }) => {
                assert_eq!((line, column), (3, 1));
                assert_eq!(expected, "';'");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_schema("message A [id = 1] { list<list<bool>> x [id = 1]; }"),
            Err(IdlError::Syntax { expected, .. }) if expected == "non-list element type"
        ));
        assert!(matches!(
            parse_schema("message A [id = 1] { bool x [id = 1]; "),
            Err(IdlError::Syntax { .. })
        ));
        assert!(matches!(parse_schema("msg A"), Err(IdlError::Syntax { line: 1, column: 1, .. })));
        assert!(matches!(parse_schema("message A [id = 1] { # }"), Err(IdlError::Syntax { .. })));
    }

    #[test]
    fn resolve_unknown() {
        assert_eq!(
            SchemaSet::empty().resolve(1).unwrap_err(),
            IdlError::UnknownMessageId(1)
        );
        let set = parse_schema("message Ping [id = 1] { uint32 seq [id = 1]; }").unwrap();
        assert_eq!(set.resolve(1).unwrap(), set.resolve(1).unwrap());
    }

    #[test]
    fn canonical_form() {
        let set = parse_schema("message  B [id=2]{string s[id=3];bool a[id=1];}  message A[id=1]{ B b [id = 1]; }").unwrap();
        assert_eq!(
            set.canonical_source(),
            "message A [id = 1] {\n  B b [id = 1];\n}\nmessage B [id = 2] {\n  bool a [id = 1];\n  string s [id = 3];\n}\n"
        );
        let again = parse_schema(&set.canonical_source()).unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn whitespace_does_not_change_digest() {
        let a = parse_schema("message P [id = 1] { uint32 seq [id = 1]; }").unwrap();
        let b = parse_schema("message P[id=1]{\n\n uint32   seq [ id = 1 ] ; // c\n}").unwrap();
        assert_eq!(a.source_digest(), b.source_digest());
        let c = parse_schema("message P [id = 1] { uint64 seq [id = 1]; }").unwrap();
        assert_ne!(a.source_digest(), c.source_digest());
    }

    #[test]
    fn compat_examples() {
        let old = parse_schema("message Ping [id = 1] { uint32 seq [id = 1]; }").unwrap();
        let same = check_compatibility(&old, &old);
        assert_eq!(same.verdict, Verdict::Identical);
        assert!(same.findings.is_empty());

        let added = parse_schema("message Ping [id = 1] { uint32 seq [id = 1]; uint64 ts [id = 2]; }").unwrap();
        let r = check_compatibility(&old, &added);
        assert_eq!(r.verdict, Verdict::BackwardCompatible);
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].rule, CompatRule::FieldAdded);
        assert_eq!(r.findings[0].field_id, Some(2));

        let changed = parse_schema("message Ping [id = 1] { string seq [id = 1]; }").unwrap();
        let r = check_compatibility(&old, &changed);
        assert_eq!(r.verdict, Verdict::Breaking);
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].rule, CompatRule::FieldTypeChanged);
    }

    #[test]
    fn compat_other_rules() {
        let old = parse_schema("message Ping [id = 1] { uint32 seq [id = 1]; } message Pong [id = 2] {}").unwrap();
        let renamed = parse_schema("message Ping [id = 1] { uint32 counter [id = 1]; } message Pong [id = 2] {}").unwrap();
        let r = check_compatibility(&old, &renamed);
        assert_eq!(r.verdict, Verdict::BackwardCompatible);
        assert_eq!(r.findings[0].rule, CompatRule::FieldRenamed);

        let removed_field = parse_schema("message Ping [id = 1] {} message Pong [id = 2] {}").unwrap();
        let r = check_compatibility(&old, &removed_field);
        assert_eq!(r.verdict, Verdict::BackwardCompatible);
        assert_eq!(r.findings[0].rule, CompatRule::FieldRemoved);

        let removed_msg = parse_schema("message Ping [id = 1] { uint32 seq [id = 1]; }").unwrap();
        let r = check_compatibility(&old, &removed_msg);
        assert_eq!(r.verdict, Verdict::Breaking);
        assert_eq!(r.findings[0].rule, CompatRule::MessageRemoved);

        let r = check_compatibility(&removed_msg, &old);
        assert_eq!(r.verdict, Verdict::BackwardCompatible);
        assert_eq!(r.findings[0].rule, CompatRule::MessageAdded);
        assert!(r.to_string().starts_with("verdict: backward-compatible"));
    }

    fn arb_source() -> impl Strategy<Value = String> {
        let scalar = prop_oneof![
            Just("bool"),
            Just("int32"),
            Just("int64"),
            Just("uint32"),
            Just("uint64"),
            Just("float64"),
            Just("string"),
            Just("bytes"),
        ];
        let field = (scalar, any::<bool>(), 0usize..3);
        prop::collection::vec(prop::collection::vec(field, 0..5), 0..5).prop_map(|messages| {
            let mut src = String::new();
            for (mi, fields) in messages.iter().enumerate() {
                src.push_str(&format!("message M{mi} [id = {}] {{\n", mi * 3 + 1));
                // Fields listed in descending id order to exercise canonical sorting.
                for (fi, (ty, list, refer)) in fields.iter().enumerate().rev() {
                    let ty = if *refer > 0 && mi > 0 {
                        format!("M{}", mi - 1)
                    } else {
                        ty.to_string()
                    };
                    let ty = if *list { format!("list<{ty}>") } else { ty };
                    src.push_str(&format!("  {ty} f{fi} [id = {}];\n", fi * 2 + 1));
                }
                src.push_str("}\n");
            }
            src
        })
    }

    fn add_fields(set: &SchemaSet, extra: usize) -> SchemaSet {
        let mut messages: Vec<MessageSchema> = set.messages().cloned().collect();
        for msg in &mut messages {
            let mut next = msg.fields.iter().map(|f| f.id).max().unwrap_or(0) + 1;
            for k in 0..extra {
                msg.fields.push(FieldDef {
                    name: format!("added{next}_{k}"),
                    id: next,
                    ty: FieldType::Uint64,
                });
                next += 1;
            }
        }
        SchemaSet::from_messages(messages).unwrap()
    }

    proptest! {
        #[test]
        fn parse_is_deterministic(src in arb_source()) {
            let a = parse_schema(&src).unwrap();
            let b = parse_schema(&src).unwrap();
            prop_assert_eq!(a.source_digest(), b.source_digest());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn canonical_print_is_a_fixpoint(src in arb_source()) {
            let set = parse_schema(&src).unwrap();
            let reparsed = parse_schema(&set.canonical_source()).unwrap();
            prop_assert_eq!(reparsed, set);
        }

        #[test]
        fn compatibility_is_reflexive(src in arb_source()) {
            let set = parse_schema(&src).unwrap();
            prop_assert_eq!(check_compatibility(&set, &set).verdict, Verdict::Identical);
        }

        #[test]
        fn field_addition_chains_never_break(src in arb_source(), steps in 1usize..6) {
            let mut current = parse_schema(&src).unwrap();
            for _ in 0..steps {
                let next = add_fields(&current, 1);
                prop_assert_ne!(check_compatibility(&current, &next).verdict, Verdict::Breaking);
                current = next;
            }
            let base = parse_schema(&src).unwrap();
            prop_assert_ne!(check_compatibility(&base, &current).verdict, Verdict::Breaking);
        }
    }
}
