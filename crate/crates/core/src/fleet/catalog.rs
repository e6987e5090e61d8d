//! Synthetic modules standing in for sensors, planners and metric probes.
//!
//! A module's behaviour comes from its `param kind=` entry:
//!
//! * `sensor`: publishes `msg` every step, padded to `bytes` of payload.
//! * `metric`: publishes `msg` with `field` set to `value`, switching to
//!   `violate_value` from `violate_at_us` on.
//! * `sink`: drains its inbox and counts what it saw.
//! * `idle` (the default): does nothing.
//!
//! Any kind accepts `fail_at_us`, after which every step faults.

use std::sync::Arc;

use rand::Rng;

use crate::bus::{Module, ModuleFault, NodeId, StepContext};
use crate::codec::{encode_message, Envelope, Record, Value};
use crate::experiment::guard::resolve_field_path;
use crate::experiment::{ModuleFactory, ModuleSpec};
use crate::idl::{FieldId, FieldType, MessageId, MessageSchema, SchemaSet};

/// A record of message `id` whose encoding is as close to `target` bytes as
/// the schema allows, with a sequence field to stamp per publish.
#[derive(Debug, Clone)]
pub struct SyntheticPayload {
    pub message_id: MessageId,
    schema: Arc<SchemaSet>,
    template: Record,
    seq_field: Option<(FieldId, FieldType)>,
    pad: Option<Pad>,
}

#[derive(Debug, Clone, Copy)]
struct Pad {
    field: FieldId,
    bytes: bool,
    target: usize,
    /// Bit length of the sequence number the padding was sized for.
    sized_for: u32,
}

fn first_field(schema: &MessageSchema, pred: impl Fn(&FieldType) -> bool) -> Option<&crate::idl::FieldDef> {
    schema.fields.iter().find(|f| pred(&f.ty))
}

fn numeric_value(ty: &FieldType, x: f64) -> Value {
    match ty {
        FieldType::Int32 => Value::Int32(x as i32),
        FieldType::Int64 => Value::Int64(x as i64),
        FieldType::Uint32 => Value::Uint32(x as u32),
        FieldType::Uint64 => Value::Uint64(x as u64),
        _ => Value::Float64(x),
    }
}

impl SyntheticPayload {
    pub fn new(schema: &Arc<SchemaSet>, message_id: MessageId, target_bytes: usize) -> Result<SyntheticPayload, String> {
        let msg = schema
            .get(message_id)
            .ok_or_else(|| format!("message id {message_id} not in schema"))?;
        let pad = first_field(msg, |t| matches!(t, FieldType::Bytes | FieldType::String)).map(|f| Pad {
            field: f.id,
            bytes: f.ty == FieldType::Bytes,
            target: target_bytes,
            sized_for: 0,
        });
        let mut p = SyntheticPayload {
            message_id,
            schema: Arc::clone(schema),
            template: Record::defaults(schema, msg),
            seq_field: first_field(msg, FieldType::is_numeric).map(|f| (f.id, f.ty.clone())),
            pad,
        };
        p.fit();
        Ok(p)
    }

    /// Resizes the padding so the current template encodes to the target.
    fn fit(&mut self) {
        let Some(pad) = self.pad else { return };
        let msg = self.schema.get(self.message_id).expect("checked in new");
        let fill = |n: usize| {
            if pad.bytes {
                Value::Bytes(vec![0xA5; n])
            } else {
                Value::String("x".repeat(n))
            }
        };
        let len_with = |rec: &Record| encode_message(&self.schema, msg, rec).map(|b| b.len()).unwrap_or(0);
        let target = pad.target;
        self.template.insert(pad.field, fill(0));
        // padding length n costs n plus its length prefix; converge on the target
        let mut n = target.saturating_sub(len_with(&self.template));
        for _ in 0..4 {
            self.template.insert(pad.field, fill(n));
            let len = len_with(&self.template);
            if len == target {
                break;
            }
            n = (n + target).saturating_sub(len);
        }
        while n > 0 && len_with(&self.template) > target {
            n -= 1;
            self.template.insert(pad.field, fill(n));
        }
    }

    pub fn record(&mut self, seq: u64) -> &Record {
        if let Some((id, ty)) = &self.seq_field {
            self.template.insert(*id, numeric_value(ty, seq as f64));
            // a longer sequence number takes bytes from the padding
            let bits = u64::BITS - seq.leading_zeros();
            if let Some(pad) = self.pad.as_mut().filter(|p| p.sized_for != bits) {
                pad.sized_for = bits;
                self.fit();
            }
        }
        &self.template
    }
}

fn set_path(record: &mut Record, path: &[FieldId], value: Value) {
    match path {
        [] => {}
        [last] => {
            record.insert(*last, value);
        }
        [first, rest @ ..] => {
            if let Some(Value::Message(inner)) = record.get_mut(*first) {
                set_path(inner, rest, value);
            }
        }
    }
}

fn leaf_type(schema: &SchemaSet, msg: MessageId, path: &[FieldId]) -> Option<FieldType> {
    let mut m = schema.get(msg)?;
    let mut ty = None;
    for id in path {
        let f = m.field(*id)?;
        if let FieldType::Message(inner) = &f.ty {
            m = schema.get(*inner)?;
        }
        ty = Some(f.ty.clone());
    }
    ty
}

struct Failing {
    at_us: Option<u64>,
}

impl Failing {
    fn check(&self, now: u64) -> Result<(), ModuleFault> {
        match self.at_us {
            Some(t) if now >= t => Err(ModuleFault::new(format!("scripted failure at {t} us"))),
            _ => Ok(()),
        }
    }
}

pub struct SensorModule {
    payload: SyntheticPayload,
    seq: u64,
    fail: Failing,
}

impl Module for SensorModule {
    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<(), ModuleFault> {
        self.fail.check(ctx.now_us())?;
        let id = self.payload.message_id;
        let rec = self.payload.record(self.seq);
        ctx.publish(id, rec).map_err(|e| ModuleFault::new(e.to_string()))?;
        self.seq += 1;
        Ok(())
    }
}

pub struct MetricModule {
    message_id: MessageId,
    template: Record,
    path: Vec<FieldId>,
    leaf: FieldType,
    value: f64,
    jitter: f64,
    violate: Option<(u64, f64)>,
    /// A numeric top-level field other than the metric, stamped per publish.
    seq_field: Option<(FieldId, FieldType)>,
    seq: u64,
    fail: Failing,
}

impl Module for MetricModule {
    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<(), ModuleFault> {
        let now = ctx.now_us();
        self.fail.check(now)?;
        let x = match self.violate {
            Some((at, v)) if now >= at => v,
            _ if self.jitter > 0.0 => self.value + ctx.rng().gen_range(-self.jitter..=self.jitter),
            _ => self.value,
        };
        set_path(&mut self.template, &self.path, numeric_value(&self.leaf, x));
        if let Some((id, ty)) = &self.seq_field {
            self.template.insert(*id, numeric_value(ty, self.seq as f64));
            self.seq += 1;
        }
        ctx.publish(self.message_id, &self.template)
            .map_err(|e| ModuleFault::new(e.to_string()))?;
        Ok(())
    }
}

#[derive(Default)]
pub struct SinkModule {
    pub seen: u64,
    fail: Option<u64>,
}

impl Module for SinkModule {
    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<(), ModuleFault> {
        Failing { at_us: self.fail }.check(ctx.now_us())?;
        self.seen += ctx.drain_inbox().len() as u64;
        Ok(())
    }

    fn on_envelope(&mut self, _envelope: &Envelope, _ctx: &mut StepContext<'_>) -> Result<bool, ModuleFault> {
        Ok(false)
    }
}

pub struct IdleModule {
    fail: Failing,
}

impl Module for IdleModule {
    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<(), ModuleFault> {
        self.fail.check(ctx.now_us())
    }
}

fn param<T: std::str::FromStr>(spec: &ModuleSpec, key: &str) -> Result<Option<T>, String> {
    spec.param(key)
        .map(|v| v.parse().map_err(|_| format!("param {key}={v} is not valid")))
        .transpose()
}

fn required<T: std::str::FromStr>(spec: &ModuleSpec, key: &str) -> Result<T, String> {
    param(spec, key)?.ok_or_else(|| format!("param {key} is required for kind {}", spec.param("kind").unwrap_or("idle")))
}

/// Builds catalog modules against one schema.
pub struct Catalog {
    schema: Arc<SchemaSet>,
}

impl Catalog {
    pub fn new(schema: Arc<SchemaSet>) -> Catalog {
        Catalog { schema }
    }

    pub fn build_spec(&self, spec: &ModuleSpec) -> Result<Box<dyn Module>, String> {
        let fail = Failing {
            at_us: param(spec, "fail_at_us")?,
        };
        let schema = &self.schema;
        Ok(match spec.param("kind").unwrap_or("idle") {
            "idle" => Box::new(IdleModule { fail }),
            "sensor" => {
                let msg: MessageId = required(spec, "msg")?;
                let bytes: usize = param(spec, "bytes")?.unwrap_or(0);
                Box::new(SensorModule {
                    payload: SyntheticPayload::new(schema, msg, bytes)?,
                    seq: 0,
                    fail,
                })
            }
            "metric" => {
                let msg: MessageId = required(spec, "msg")?;
                let message = schema.get(msg).ok_or_else(|| format!("message id {msg} not in schema"))?;
                let field = match spec.param("field") {
                    Some(f) => f.to_string(),
                    None => first_field(message, FieldType::is_numeric)
                        .map(|f| f.name.clone())
                        .ok_or_else(|| format!("message {} has no numeric field", message.name))?,
                };
                let path = resolve_field_path(schema, msg, &field).map_err(|e| e.to_string())?;
                let leaf = leaf_type(schema, msg, &path).expect("path just resolved");
                let violate = match (param::<u64>(spec, "violate_at_us")?, param::<f64>(spec, "violate_value")?) {
                    (Some(at), Some(v)) => Some((at, v)),
                    (None, None) => None,
                    _ => return Err("violate_at_us and violate_value go together".into()),
                };
                let seq_field = message
                    .fields
                    .iter()
                    .find(|f| f.ty.is_numeric() && f.id != path[0])
                    .map(|f| (f.id, f.ty.clone()));
                Box::new(MetricModule {
                    message_id: msg,
                    seq_field,
                    seq: 0,
                    template: Record::defaults(schema, message),
                    path,
                    leaf,
                    value: param(spec, "value")?.unwrap_or(0.0),
                    jitter: param(spec, "jitter")?.unwrap_or(0.0),
                    violate,
                    fail,
                })
            }
            "sink" => Box::new(SinkModule {
                seen: 0,
                fail: fail.at_us,
            }),
            other => return Err(format!("unknown module kind `{other}`")),
        })
    }
}

impl ModuleFactory for Catalog {
    fn build(&mut self, spec: &ModuleSpec, _node_id: NodeId) -> Result<Box<dyn Module>, String> {
        self.build_spec(spec)
    }
}
