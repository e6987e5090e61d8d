//! Self-preservation guards and the on-vehicle safety monitor.

use std::sync::{Arc, Mutex};

use thiserror::Error;

use super::control::EMERGENCY_STOP_ID;
use super::manifest::GuardPredicate;
use crate::bus::{ControlRequest, Module, ModuleFault, StepContext};
use crate::codec::{decode_message, Envelope};
use crate::idl::{FieldId, FieldType, MessageId, SchemaSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GuardPathError {
    #[error("message id {0} not in schema")]
    UnknownMessage(MessageId),
    #[error("no field `{field}` in message {message}")]
    UnknownField { message: String, field: String },
    #[error("field path `{path}` crosses a list or scalar")]
    NotTraversable { path: String },
    #[error("field `{path}` has non-numeric type {ty}")]
    NonNumeric { path: String, ty: String },
}

/// Resolves a dotted field path to field ids; the leaf must be numeric.
pub fn resolve_field_path(schema: &SchemaSet, message_id: MessageId, path: &str) -> Result<Vec<FieldId>, GuardPathError> {
    let mut msg = schema.get(message_id).ok_or(GuardPathError::UnknownMessage(message_id))?;
    let parts: Vec<&str> = path.split('.').collect();
    let mut ids = Vec::with_capacity(parts.len());
    for (i, part) in parts.iter().enumerate() {
        let field = msg.field_by_name(part).ok_or_else(|| GuardPathError::UnknownField {
            message: msg.name.clone(),
            field: part.to_string(),
        })?;
        ids.push(field.id);
        let last = i + 1 == parts.len();
        match (&field.ty, last) {
            (ty, true) if ty.is_numeric() => {}
            (ty, true) => {
                return Err(GuardPathError::NonNumeric {
                    path: path.to_string(),
                    ty: ty.display(schema).to_string(),
                })
            }
            (FieldType::Message(inner), false) => {
                msg = schema.get(*inner).ok_or(GuardPathError::UnknownMessage(*inner))?;
            }
            (_, false) => {
                return Err(GuardPathError::NotTraversable { path: path.to_string() });
            }
        }
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedGuard {
    pub predicate: GuardPredicate,
    path: Vec<FieldId>,
}

impl ResolvedGuard {
    pub fn resolve(schema: &SchemaSet, predicate: &GuardPredicate) -> Result<ResolvedGuard, GuardPathError> {
        Ok(ResolvedGuard {
            path: resolve_field_path(schema, predicate.message_id, &predicate.field_path)?,
            predicate: predicate.clone(),
        })
    }

    /// The guarded field's value in `envelope`, if it carries this guard's message.
    pub fn sample(&self, schema: &SchemaSet, envelope: &Envelope) -> Option<f64> {
        if envelope.message_id != self.predicate.message_id {
            return None;
        }
        let msg = schema.get(envelope.message_id)?;
        let record = decode_message(schema, msg, &envelope.payload).ok()?;
        record.get_path(&self.path)?.as_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuardIncident {
    /// Index into the guard list.
    pub guard: usize,
    pub first_violation_us: u64,
    pub trigger_us: u64,
}

/// Incremental guard evaluation. A predicate that becomes true at `t0` is
/// taken to hold until a sample says otherwise; the guard fires at
/// `t0 + sustain_us` if no recovering sample arrived by then. Each guard fires once.
#[derive(Debug, Clone)]
pub struct GuardTracker {
    guards: Vec<ResolvedGuard>,
    since: Vec<Option<u64>>,
    fired: Vec<bool>,
}

impl GuardTracker {
    pub fn new(guards: Vec<ResolvedGuard>) -> GuardTracker {
        let n = guards.len();
        GuardTracker {
            guards,
            since: vec![None; n],
            fired: vec![false; n],
        }
    }

    pub fn guards(&self) -> &[ResolvedGuard] {
        &self.guards
    }

    fn fire(&mut self, i: usize, since: u64) -> GuardIncident {
        self.fired[i] = true;
        self.since[i] = None;
        GuardIncident {
            guard: i,
            first_violation_us: since,
            trigger_us: since.saturating_add(self.guards[i].predicate.sustain_us),
        }
    }

    pub fn observe(&mut self, ts_us: u64, schema: &SchemaSet, envelope: &Envelope) -> Vec<GuardIncident> {
        let mut out = Vec::new();
        for i in 0..self.guards.len() {
            if self.fired[i] {
                continue;
            }
            let Some(v) = self.guards[i].sample(schema, envelope) else {
                continue;
            };
            let p = &self.guards[i].predicate;
            let sustain = p.sustain_us;
            if p.op.holds(v, p.threshold) {
                let since = *self.since[i].get_or_insert(ts_us);
                if since.saturating_add(sustain) <= ts_us {
                    out.push(self.fire(i, since));
                }
            } else {
                if let Some(since) = self.since[i] {
                    // the violation lasted through [since, ts_us)
                    if since.saturating_add(sustain) < ts_us {
                        out.push(self.fire(i, since));
                        continue;
                    }
                }
                self.since[i] = None;
            }
        }
        out
    }

    /// Fires guards whose violation has persisted up to `now_us`.
    pub fn tick(&mut self, now_us: u64) -> Vec<GuardIncident> {
        let mut out = Vec::new();
        for i in 0..self.guards.len() {
            if let Some(since) = self.since[i] {
                if !self.fired[i] && since.saturating_add(self.guards[i].predicate.sustain_us) <= now_us {
                    out.push(self.fire(i, since));
                }
            }
        }
        out
    }
}

/// Evaluates guards over a timestamped envelope stream observed up to `clock_us`.
pub fn evaluate_guards<'a>(
    guards: &[ResolvedGuard],
    schema: &SchemaSet,
    stream: impl IntoIterator<Item = (u64, &'a Envelope)>,
    clock_us: u64,
) -> Vec<GuardIncident> {
    let mut tracker = GuardTracker::new(guards.to_vec());
    let mut out = Vec::new();
    for (ts, env) in stream {
        out.extend(tracker.observe(ts, schema, env));
    }
    out.extend(tracker.tick(clock_us));
    out.sort_by_key(|i| (i.trigger_us, i.guard));
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MonitorEvent {
    Guard { experiment_id: String, incident: GuardIncident, at_us: u64 },
    EmergencyStop { at_us: u64, experiment_id: Option<String> },
}

struct Watch {
    experiment_id: String,
    tag: String,
    tracker: GuardTracker,
}

/// State shared between the monitor module and the vehicle agent.
pub struct MonitorState {
    watch: Option<Watch>,
    events: Vec<MonitorEvent>,
}

pub type SharedMonitor = Arc<Mutex<MonitorState>>;

impl MonitorState {
    pub fn shared() -> SharedMonitor {
        Arc::new(Mutex::new(MonitorState {
            watch: None,
            events: Vec::new(),
        }))
    }

    pub fn arm(&mut self, experiment_id: &str, tag: &str, guards: Vec<ResolvedGuard>) {
        self.watch = Some(Watch {
            experiment_id: experiment_id.to_string(),
            tag: tag.to_string(),
            tracker: GuardTracker::new(guards),
        });
    }

    pub fn disarm(&mut self) {
        self.watch = None;
    }

    pub fn armed_for(&self) -> Option<&str> {
        self.watch.as_ref().map(|w| w.experiment_id.as_str())
    }

    /// Events since the last call.
    pub fn take_events(&mut self) -> Vec<MonitorEvent> {
        std::mem::take(&mut self.events)
    }

    fn react(&mut self, incidents: Vec<GuardIncident>, at_us: u64, ctx: &mut StepContext<'_>) {
        let Some(first) = incidents.into_iter().next() else {
            return;
        };
        let watch = self.watch.take().expect("incidents come from an armed watch");
        ctx.request(ControlRequest::Revert {
            tag: watch.tag,
            reason: format!("guard {} violated", first.guard),
        });
        self.events.push(MonitorEvent::Guard {
            experiment_id: watch.experiment_id,
            incident: first,
            at_us,
        });
    }
}

/// Always-on bus module: evaluates the armed experiment's guards on delivery
/// and on every step, and honours local emergency-stop messages.
pub struct SafetyMonitor {
    state: SharedMonitor,
    schema: Arc<SchemaSet>,
}

impl SafetyMonitor {
    pub fn new(state: SharedMonitor, schema: Arc<SchemaSet>) -> SafetyMonitor {
        SafetyMonitor { state, schema }
    }
}

impl Module for SafetyMonitor {
    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<(), ModuleFault> {
        let now = ctx.now_us();
        let mut st = self.state.lock().expect("monitor lock");
        let incidents = match st.watch.as_mut() {
            Some(w) => w.tracker.tick(now),
            None => return Ok(()),
        };
        st.react(incidents, now, ctx);
        Ok(())
    }

    fn on_envelope(&mut self, envelope: &Envelope, ctx: &mut StepContext<'_>) -> Result<bool, ModuleFault> {
        let now = ctx.now_us();
        let mut st = self.state.lock().expect("monitor lock");
        if envelope.message_id == EMERGENCY_STOP_ID {
            let experiment_id = st.watch.take().map(|w| w.experiment_id);
            ctx.request(ControlRequest::RevertAll {
                reason: "emergency stop".into(),
            });
            st.events.push(MonitorEvent::EmergencyStop { at_us: now, experiment_id });
            return Ok(true);
        }
        let incidents = match st.watch.as_mut() {
            Some(w) => w.tracker.observe(now, &self.schema, envelope),
            None => return Ok(true),
        };
        st.react(incidents, now, ctx);
        Ok(true)
    }
}
