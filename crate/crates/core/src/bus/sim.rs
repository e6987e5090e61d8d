//! Deterministic single-threaded session on a virtual clock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    check_frequency, BusError, ControlEvent, ControlRequest, EnvelopeTap, MemberConfig, ModuleFailure,
    ModuleFault, ModuleHandle, NodeId, Publish, Subscriptions,
};
use crate::codec::{decode_message, encode_envelope, encode_message, Envelope, Record};
use crate::idl::{MessageId, SchemaSet};

/// A software module driven by the scheduler.
pub trait Module {
    /// Runs once per period.
    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<(), ModuleFault>;

    /// Called when a subscribed envelope is delivered. Returning `true`
    /// consumes it; otherwise it is queued in the module's inbox for the next step.
    fn on_envelope(&mut self, _envelope: &Envelope, _ctx: &mut StepContext<'_>) -> Result<bool, ModuleFault> {
        Ok(false)
    }
}

impl<F> Module for F
where
    F: FnMut(&mut StepContext<'_>) -> Result<(), ModuleFault>,
{
    fn step(&mut self, ctx: &mut StepContext<'_>) -> Result<(), ModuleFault> {
        self(ctx)
    }
}

/// What a module sees while it runs.
pub struct StepContext<'a> {
    now_us: u64,
    node_id: NodeId,
    schema: &'a SchemaSet,
    inbox: &'a mut VecDeque<Envelope>,
    outbox: &'a mut Vec<Envelope>,
    controls: &'a mut Vec<ControlRequest>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> StepContext<'a> {
    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn schema(&self) -> &SchemaSet {
        self.schema
    }

    /// Per-module generator seeded from the session seed and node id.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn drain_inbox(&mut self) -> Vec<Envelope> {
        self.inbox.drain(..).collect()
    }

    pub fn inbox_len(&self) -> usize {
        self.inbox.len()
    }

    /// Encodes and stamps `record`; delivery happens when the callback returns.
    pub fn publish(&mut self, message_id: MessageId, record: &Record) -> Result<&Envelope, BusError> {
        let schema = self
            .schema
            .get(message_id)
            .ok_or(BusError::UnknownMessage(message_id))?;
        let payload = encode_message(self.schema, schema, record)?;
        self.outbox.push(Envelope {
            message_id,
            sender_node: self.node_id,
            sent_ts_us: self.now_us,
            payload,
        });
        Ok(self.outbox.last().expect("just pushed"))
    }

    pub fn request(&mut self, request: ControlRequest) {
        self.controls.push(request);
    }
}

struct Member {
    handle: ModuleHandle,
    inbox: VecDeque<Envelope>,
    module: Option<Box<dyn Module>>,
    scheduled: bool,
    start_us: u64,
    step_index: u64,
    generation: u64,
    tag: Option<String>,
    suspended_by: Option<String>,
    failed: bool,
    rng: ChaCha8Rng,
}

impl Member {
    fn is_live(&self) -> bool {
        !self.failed && self.suspended_by.is_none()
    }

    fn due_us(&self) -> u64 {
        self.start_us + self.step_index * 1_000_000 / u64::from(self.handle.frequency_hz)
    }
}

/// Queue key: earlier first, injections before steps, then (priority, node_id).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    at_us: u64,
    class: u8,
    priority: u8,
    node_id: NodeId,
    token: u64,
}

const CLASS_INJECT: u8 = 0;
const CLASS_STEP: u8 = 1;

/// Read-only view of one member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberInfo {
    pub handle: ModuleHandle,
    pub tag: Option<String>,
    pub suspended_by: Option<String>,
    pub failed: bool,
    pub scheduled: bool,
}

/// In-process session where time only moves through [`SimSession::advance`].
///
/// Within one instant, due steps run in ascending `(priority, node_id)` order
/// and every publish is delivered before the next step starts.
pub struct SimSession {
    session_id: u32,
    schema: Arc<SchemaSet>,
    seed: u64,
    now_us: u64,
    members: BTreeMap<NodeId, Member>,
    events: BinaryHeap<Reverse<Event>>,
    injections: HashMap<u64, Envelope>,
    next_token: u64,
    pending: VecDeque<Envelope>,
    taps: Vec<Box<dyn EnvelopeTap>>,
    digest: Option<Sha256>,
    collected: Option<Vec<Envelope>>,
    delivered_total: u64,
    failures: Vec<ModuleFailure>,
    control_log: Vec<ControlEvent>,
}

fn member_seed(seed: u64, node_id: NodeId) -> u64 {
    // splitmix64 over the pair
    let mut z = seed ^ (u64::from(node_id).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimSession {
    pub fn new(session_id: u32, schema: Arc<SchemaSet>, seed: u64) -> SimSession {
        SimSession {
            session_id,
            schema,
            seed,
            now_us: 0,
            members: BTreeMap::new(),
            events: BinaryHeap::new(),
            injections: HashMap::new(),
            next_token: 0,
            pending: VecDeque::new(),
            taps: Vec::new(),
            digest: None,
            collected: None,
            delivered_total: 0,
            failures: Vec::new(),
            control_log: Vec::new(),
        }
    }

    pub fn session_id(&self) -> u32 {
        self.session_id
    }

    pub fn schema(&self) -> &Arc<SchemaSet> {
        &self.schema
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    /// Number of envelopes delivered since the session started.
    pub fn delivered_total(&self) -> u64 {
        self.delivered_total
    }

    pub fn failures(&self) -> &[ModuleFailure] {
        &self.failures
    }

    pub fn control_log(&self) -> &[ControlEvent] {
        &self.control_log
    }

    pub fn member(&self, node_id: NodeId) -> Option<MemberInfo> {
        self.members.get(&node_id).map(|m| MemberInfo {
            handle: m.handle.clone(),
            tag: m.tag.clone(),
            suspended_by: m.suspended_by.clone(),
            failed: m.failed,
            scheduled: m.scheduled,
        })
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.members.keys().copied()
    }

    /// Joins a member. `member_schema` must be the session's schema.
    pub fn join(&mut self, config: MemberConfig, member_schema: &SchemaSet) -> Result<ModuleHandle, BusError> {
        if member_schema.source_digest() != self.schema.source_digest() {
            return Err(BusError::SchemaDigestMismatch {
                local: member_schema.source_digest(),
                remote: self.schema.source_digest(),
            });
        }
        if self.members.contains_key(&config.node_id) {
            return Err(BusError::DuplicateNode(config.node_id));
        }
        check_frequency(config.frequency_hz)?;
        let handle = ModuleHandle {
            node_id: config.node_id,
            subscriptions: config.subscriptions,
            frequency_hz: config.frequency_hz,
            priority: config.priority,
        };
        self.members.insert(
            config.node_id,
            Member {
                handle: handle.clone(),
                inbox: VecDeque::new(),
                module: None,
                scheduled: false,
                start_us: self.now_us,
                step_index: 0,
                generation: 0,
                tag: None,
                suspended_by: None,
                failed: false,
                rng: ChaCha8Rng::seed_from_u64(member_seed(self.seed, config.node_id)),
            },
        );
        Ok(handle)
    }

    /// Joins and schedules in one call.
    pub fn spawn(&mut self, config: MemberConfig, module: Box<dyn Module>) -> Result<ModuleHandle, BusError> {
        let schema = Arc::clone(&self.schema);
        let handle = self.join(config, &schema)?;
        self.run_scheduled(&handle, module)?;
        Ok(handle)
    }

    /// Removes a member entirely; its node id becomes free again.
    pub fn leave(&mut self, node_id: NodeId) -> Result<(), BusError> {
        self.members.remove(&node_id).map(|_| ()).ok_or(BusError::NotJoined(node_id))
    }

    pub fn set_tag(&mut self, node_id: NodeId, tag: Option<String>) -> Result<(), BusError> {
        self.members
            .get_mut(&node_id)
            .map(|m| m.tag = tag)
            .ok_or(BusError::NotJoined(node_id))
    }

    /// Registers `module` to step once per `1/frequency_hz`, starting at the current instant.
    pub fn run_scheduled(&mut self, handle: &ModuleHandle, module: Box<dyn Module>) -> Result<(), BusError> {
        let now = self.now_us;
        let member = self
            .members
            .get_mut(&handle.node_id)
            .ok_or(BusError::NotJoined(handle.node_id))?;
        if member.failed {
            return Err(BusError::ModuleFailed(handle.node_id));
        }
        if member.scheduled {
            return Err(BusError::AlreadyScheduled(handle.node_id));
        }
        member.module = Some(module);
        member.scheduled = true;
        member.start_us = now;
        member.step_index = 0;
        member.generation += 1;
        let ev = Event {
            at_us: now,
            class: CLASS_STEP,
            priority: member.handle.priority,
            node_id: handle.node_id,
            token: member.generation,
        };
        self.events.push(Reverse(ev));
        Ok(())
    }

    /// Pauses a member until a `Revert` for `tag` resumes it.
    pub fn suspend(&mut self, node_id: NodeId, tag: &str) -> Result<(), BusError> {
        let member = self.members.get_mut(&node_id).ok_or(BusError::NotJoined(node_id))?;
        member.suspended_by = Some(tag.to_string());
        member.generation += 1;
        Ok(())
    }

    pub fn attach_tap(&mut self, tap: Box<dyn EnvelopeTap>) {
        self.taps.push(tap);
    }

    /// Starts hashing the frame bytes of every delivered envelope.
    pub fn enable_digest(&mut self) {
        if self.digest.is_none() {
            self.digest = Some(Sha256::new());
        }
    }

    /// SHA-256 of the concatenated frames delivered since `enable_digest`.
    pub fn digest(&self) -> Option<[u8; 32]> {
        self.digest.as_ref().map(|d| d.clone().finalize().into())
    }

    pub fn receive(&mut self, handle: &ModuleHandle) -> Vec<Envelope> {
        self.members
            .get_mut(&handle.node_id)
            .map(|m| m.inbox.drain(..).collect())
            .unwrap_or_default()
    }

    fn sender_ready(&self, handle: &ModuleHandle) -> Result<(), BusError> {
        match self.members.get(&handle.node_id) {
            None => Err(BusError::NotJoined(handle.node_id)),
            Some(m) if m.failed => Err(BusError::ModuleFailed(handle.node_id)),
            Some(_) => Ok(()),
        }
    }

    /// Publishes from outside any step, stamped with the current instant.
    pub fn publish(&mut self, handle: &ModuleHandle, message_id: MessageId, record: &Record) -> Result<Envelope, BusError> {
        self.sender_ready(handle)?;
        let schema = self.schema.get(message_id).ok_or(BusError::UnknownMessage(message_id))?;
        let payload = encode_message(&self.schema, schema, record)?;
        let env = Envelope {
            message_id,
            sender_node: handle.node_id,
            sent_ts_us: self.now_us,
            payload,
        };
        self.pending.push_back(env.clone());
        self.flush_pending();
        Ok(env)
    }

    /// Delivers an already-stamped envelope now, keeping its sender id.
    /// The send timestamp is restamped to the current instant.
    pub fn inject(&mut self, mut envelope: Envelope) {
        envelope.sent_ts_us = self.now_us;
        self.pending.push_back(envelope);
        self.flush_pending();
    }

    /// Queues an envelope to be injected when the clock reaches `at_us`.
    pub fn schedule_injection(&mut self, at_us: u64, envelope: Envelope) {
        let token = self.next_token;
        self.next_token += 1;
        self.injections.insert(token, envelope);
        self.events.push(Reverse(Event {
            at_us: at_us.max(self.now_us),
            class: CLASS_INJECT,
            priority: 0,
            node_id: 0,
            token,
        }));
    }

    /// Advances the clock by `delta_us`, running every step due in
    /// `[now, now + delta_us)`. Returns delivered envelopes in delivery order.
    pub fn advance(&mut self, delta_us: u64) -> Vec<Envelope> {
        self.collected = Some(Vec::new());
        self.run_until(self.now_us.saturating_add(delta_us));
        self.collected.take().unwrap_or_default()
    }

    /// Like [`advance`](Self::advance) but only counts deliveries.
    pub fn run_for(&mut self, delta_us: u64) -> u64 {
        let before = self.delivered_total;
        self.run_until(self.now_us.saturating_add(delta_us));
        self.delivered_total - before
    }

    /// Runs the earliest pending event, if any is due before `end_us`.
    fn run_until(&mut self, end_us: u64) {
        while let Some(Reverse(ev)) = self.events.peek().copied() {
            if ev.at_us >= end_us {
                break;
            }
            self.events.pop();
            self.now_us = ev.at_us;
            match ev.class {
                CLASS_INJECT => {
                    if let Some(env) = self.injections.remove(&ev.token) {
                        self.inject(env);
                    }
                }
                _ => self.run_step(ev),
            }
        }
        self.now_us = end_us;
    }

    fn run_step(&mut self, ev: Event) {
        let schema = Arc::clone(&self.schema);
        let now = self.now_us;
        let Some(member) = self.members.get_mut(&ev.node_id) else {
            return;
        };
        if !member.is_live() || !member.scheduled || member.generation != ev.token {
            return;
        }
        let Some(mut module) = member.module.take() else {
            return;
        };
        let mut outbox = Vec::new();
        let mut controls = Vec::new();
        let result = {
            let mut ctx = StepContext {
                now_us: now,
                node_id: ev.node_id,
                schema: &schema,
                inbox: &mut member.inbox,
                outbox: &mut outbox,
                controls: &mut controls,
                rng: &mut member.rng,
            };
            module.step(&mut ctx)
        };
        member.module = Some(module);
        member.step_index += 1;
        let next = Event {
            at_us: member.due_us(),
            ..ev
        };
        self.events.push(Reverse(next));
        if let Err(fault) = result {
            self.fail(ev.node_id, fault);
        }
        self.pending.extend(outbox);
        self.flush_pending();
        self.apply_controls(Some(ev.node_id), controls);
    }

    fn fail(&mut self, node_id: NodeId, fault: ModuleFault) {
        if let Some(m) = self.members.get_mut(&node_id) {
            m.failed = true;
            m.scheduled = false;
            m.subscriptions_clear();
            m.inbox.clear();
        }
        self.failures.push(ModuleFailure {
            node_id,
            at_us: self.now_us,
            reason: fault.0,
        });
    }

    fn flush_pending(&mut self) {
        while let Some(env) = self.pending.pop_front() {
            self.route(env);
        }
    }

    fn route(&mut self, env: Envelope) {
        let frame = encode_envelope(&env);
        if let Some(d) = self.digest.as_mut() {
            d.update(&frame);
        }
        for tap in &mut self.taps {
            tap.on_delivered(self.now_us, &env, &frame);
        }
        drop(frame);
        self.delivered_total += 1;

        let recipients: Vec<NodeId> = self
            .members
            .iter()
            .filter(|(id, m)| **id != env.sender_node && m.is_live() && m.handle.subscriptions.contains(env.message_id))
            .map(|(id, _)| *id)
            .collect();
        let schema = Arc::clone(&self.schema);
        for node_id in recipients {
            let Some(member) = self.members.get_mut(&node_id) else {
                continue;
            };
            if !member.is_live() {
                continue;
            }
            let mut outbox = Vec::new();
            let mut controls = Vec::new();
            let outcome = match member.module.take() {
                Some(mut module) => {
                    let r = {
                        let mut ctx = StepContext {
                            now_us: self.now_us,
                            node_id,
                            schema: &schema,
                            inbox: &mut member.inbox,
                            outbox: &mut outbox,
                            controls: &mut controls,
                            rng: &mut member.rng,
                        };
                        module.on_envelope(&env, &mut ctx)
                    };
                    member.module = Some(module);
                    r
                }
                None => Ok(false),
            };
            match outcome {
                Ok(true) => {}
                Ok(false) => member.inbox.push_back(env.clone()),
                Err(fault) => self.fail(node_id, fault),
            }
            self.pending.extend(outbox);
            self.apply_controls(Some(node_id), controls);
        }
        if let Some(c) = self.collected.as_mut() {
            c.push(env);
        }
    }

    fn apply_controls(&mut self, origin: Option<NodeId>, controls: Vec<ControlRequest>) {
        for request in controls {
            self.apply_control(origin, request);
        }
    }

    /// Applies a structural change immediately (between callbacks).
    pub fn apply_control(&mut self, origin: Option<NodeId>, request: ControlRequest) -> Vec<NodeId> {
        let tags: Vec<String> = match &request {
            ControlRequest::Revert { tag, .. } => vec![tag.clone()],
            ControlRequest::RevertAll { .. } => {
                let mut t: Vec<String> = self
                    .members
                    .values()
                    .flat_map(|m| m.tag.iter().chain(m.suspended_by.iter()).cloned())
                    .collect();
                t.sort();
                t.dedup();
                t
            }
        };
        let mut retired = Vec::new();
        for tag in &tags {
            let gone: Vec<NodeId> = self
                .members
                .iter()
                .filter(|(_, m)| m.tag.as_deref() == Some(tag))
                .map(|(id, _)| *id)
                .collect();
            for id in gone {
                self.members.remove(&id);
                retired.push(id);
            }
            let now = self.now_us;
            let mut resumed = Vec::new();
            for (id, m) in self.members.iter_mut() {
                if m.suspended_by.as_deref() == Some(tag) {
                    m.suspended_by = None;
                    if m.scheduled {
                        m.generation += 1;
                        m.start_us = now;
                        m.step_index = 0;
                        resumed.push(Event {
                            at_us: now,
                            class: CLASS_STEP,
                            priority: m.handle.priority,
                            node_id: *id,
                            token: m.generation,
                        });
                    }
                }
            }
            self.events.extend(resumed.into_iter().map(Reverse));
        }
        self.control_log.push(ControlEvent {
            at_us: self.now_us,
            origin,
            request,
            retired: retired.clone(),
        });
        retired
    }

    /// Nodes that may currently publish: joined, not failed, not suspended.
    pub fn live_nodes(&self) -> Vec<NodeId> {
        self.members
            .iter()
            .filter(|(_, m)| m.is_live())
            .map(|(id, _)| *id)
            .collect()
    }
}

impl Member {
    fn subscriptions_clear(&mut self) {
        self.handle.subscriptions = Subscriptions::none();
    }
}

impl Publish for SimSession {
    fn publish_encoded(
        &mut self,
        handle: &ModuleHandle,
        message_id: MessageId,
        payload: Vec<u8>,
    ) -> Result<Envelope, BusError> {
        self.sender_ready(handle)?;
        let schema = self.schema.get(message_id).ok_or(BusError::UnknownMessage(message_id))?;
        decode_message(&self.schema, schema, &payload)?;
        let env = Envelope {
            message_id,
            sender_node: handle.node_id,
            sent_ts_us: self.now_us,
            payload,
        };
        self.pending.push_back(env.clone());
        self.flush_pending();
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Value;
    use crate::idl::parse_schema;
    use std::cell::RefCell;
    use std::rc::Rc;

    fn schema() -> Arc<SchemaSet> {
        Arc::new(
            parse_schema("message Ping [id = 1] { uint32 seq [id = 1]; } message Pong [id = 2] { uint32 seq [id = 1]; }")
                .unwrap(),
        )
    }

    fn ping(seq: u32) -> Record {
        Record::new().with(1, Value::Uint32(seq))
    }

    fn counter(msg: MessageId) -> Box<dyn Module> {
        let mut n = 0u32;
        Box::new(move |ctx: &mut StepContext<'_>| {
            ctx.publish(msg, &ping(n))?;
            n += 1;
            Ok(())
        })
    }

    #[test]
    fn join_and_receive() {
        let s = schema();
        let mut session = SimSession::new(1, s.clone(), 0);
        let a = session.join(MemberConfig::new(1), &s).unwrap();
        let b = session.join(MemberConfig::new(2), &s).unwrap();
        session.publish(&a, 1, &ping(5)).unwrap();
        let got = session.receive(&b);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].sender_node, 1);
        assert!(session.receive(&a).is_empty(), "sender does not receive its own envelope");
    }

    #[test]
    fn join_errors() {
        let s = schema();
        let mut session = SimSession::new(1, s.clone(), 0);
        session.join(MemberConfig::new(1), &s).unwrap();
        assert_eq!(session.join(MemberConfig::new(1), &s), Err(BusError::DuplicateNode(1)));
        let other = parse_schema("message Ping [id = 1] { uint64 seq [id = 1]; }").unwrap();
        assert!(matches!(
            session.join(MemberConfig::new(2), &other),
            Err(BusError::SchemaDigestMismatch { .. })
        ));
        assert_eq!(
            session.join(MemberConfig::new(3).frequency(0), &s),
            Err(BusError::InvalidFrequency(0))
        );
        assert_eq!(
            session.join(MemberConfig::new(3).frequency(1001), &s),
            Err(BusError::InvalidFrequency(1001))
        );
    }

    #[test]
    fn subscriptions_filter_delivery() {
        let s = schema();
        let mut session = SimSession::new(1, s.clone(), 0);
        let tx = session.join(MemberConfig::new(1), &s).unwrap();
        let pings = session
            .join(MemberConfig::new(2).subscribe(Subscriptions::from_ids([1])), &s)
            .unwrap();
        let pongs = session
            .join(MemberConfig::new(3).subscribe(Subscriptions::from_ids([2])), &s)
            .unwrap();
        let all = session.join(MemberConfig::new(4), &s).unwrap();
        session.publish(&tx, 1, &ping(1)).unwrap();
        assert_eq!(session.receive(&pings).len(), 1);
        assert!(session.receive(&pongs).is_empty());
        assert_eq!(session.receive(&all).len(), 1);
    }

    #[test]
    fn nonconforming_publish_sends_nothing() {
        let s = schema();
        let mut session = SimSession::new(1, s.clone(), 0);
        let tx = session.join(MemberConfig::new(1), &s).unwrap();
        let rx = session.join(MemberConfig::new(2), &s).unwrap();
        let bad = Record::new().with(1, Value::String("no".into()));
        assert!(matches!(session.publish(&tx, 1, &bad), Err(BusError::SchemaMismatch(_))));
        assert!(session.receive(&rx).is_empty());
        assert_eq!(session.delivered_total(), 0);
        let ghost = ModuleHandle {
            node_id: 99,
            subscriptions: Subscriptions::All,
            frequency_hz: 1,
            priority: 0,
        };
        assert_eq!(session.publish(&ghost, 1, &ping(0)), Err(BusError::NotJoined(99)));
    }

    #[test]
    fn per_sender_fifo() {
        let s = schema();
        let mut session = SimSession::new(1, s.clone(), 0);
        let tx = session.join(MemberConfig::new(1), &s).unwrap();
        let rx = session.join(MemberConfig::new(2), &s).unwrap();
        session.publish(&tx, 1, &ping(1)).unwrap();
        session.advance(10);
        session.publish(&tx, 1, &ping(2)).unwrap();
        let got = session.receive(&rx);
        assert_eq!(got.len(), 2);
        assert!(got[0].sent_ts_us <= got[1].sent_ts_us);
        assert_eq!(got[0].payload, vec![0x08, 0x01]);
        assert_eq!(got[1].payload, vec![0x08, 0x02]);
    }

    #[test]
    fn ten_hz_for_one_second() {
        let s = schema();
        let mut session = SimSession::new(1, s, 0);
        session.spawn(MemberConfig::new(1).frequency(10), counter(1)).unwrap();
        let out = session.advance(1_000_000);
        assert_eq!(out.len(), 10);
        let ts: Vec<u64> = out.iter().map(|e| e.sent_ts_us).collect();
        assert_eq!(ts, (0..10).map(|k| k * 100_000).collect::<Vec<_>>());
    }

    #[test]
    fn non_dividing_frequency_keeps_exact_count() {
        let s = schema();
        let mut session = SimSession::new(1, s, 0);
        session.spawn(MemberConfig::new(1).frequency(3), counter(1)).unwrap();
        assert_eq!(session.advance(1_000_000).len(), 3);
        assert_eq!(session.advance(2_000_000).len(), 6);
    }

    #[test]
    fn advance_zero_and_one_period() {
        let s = schema();
        let mut session = SimSession::new(1, s, 0);
        session.spawn(MemberConfig::new(1).frequency(1), counter(1)).unwrap();
        assert!(session.advance(0).is_empty());
        let out = session.advance(1_000_000);
        assert_eq!(out.len(), 1);
        assert_eq!(session.now_us(), 1_000_000);
    }

    #[test]
    fn priority_order_within_an_instant() {
        let s = schema();
        let mut session = SimSession::new(1, s, 0);
        let seen: Rc<RefCell<Vec<(u64, usize)>>> = Rc::default();
        // node 5 with priority 2 observes how many pings from priority 1 it already has.
        let seen2 = seen.clone();
        let observer = move |ctx: &mut StepContext<'_>| {
            let n = ctx.drain_inbox().len();
            seen2.borrow_mut().push((ctx.now_us(), n));
            Ok(())
        };
        session
            .spawn(
                MemberConfig::new(5).frequency(10).priority(2).subscribe(Subscriptions::from_ids([1])),
                Box::new(observer),
            )
            .unwrap();
        session.spawn(MemberConfig::new(9).frequency(10).priority(1), counter(1)).unwrap();
        session.advance(1_000_000);
        let seen = seen.borrow();
        assert_eq!(seen.len(), 10);
        assert!(seen.iter().all(|(_, n)| *n == 1), "{seen:?}");
    }

    #[test]
    fn equal_priority_breaks_ties_by_node_id() {
        let s = schema();
        let mut session = SimSession::new(1, s, 0);
        session.spawn(MemberConfig::new(7).frequency(5), counter(2)).unwrap();
        session.spawn(MemberConfig::new(3).frequency(5), counter(1)).unwrap();
        let out = session.advance(1_000_000);
        let senders: Vec<u32> = out.iter().map(|e| e.sender_node).collect();
        assert_eq!(senders, [3, 7].repeat(5));
    }

    #[test]
    fn failing_module_is_isolated() {
        let s = schema();
        let mut session = SimSession::new(1, s, 0);
        let mut calls = 0;
        let flaky = move |ctx: &mut StepContext<'_>| {
            calls += 1;
            if calls == 3 {
                return Err(ModuleFault::new("boom"));
            }
            ctx.publish(2, &ping(calls))?;
            Ok(())
        };
        session.spawn(MemberConfig::new(1).frequency(10), Box::new(flaky)).unwrap();
        session.spawn(MemberConfig::new(2).frequency(10), counter(1)).unwrap();
        let out = session.advance(1_000_000);
        assert_eq!(out.iter().filter(|e| e.sender_node == 1).count(), 2);
        assert_eq!(out.iter().filter(|e| e.sender_node == 2).count(), 10);
        assert_eq!(session.failures().len(), 1);
        assert_eq!(session.failures()[0].node_id, 1);
        assert_eq!(session.failures()[0].at_us, 200_000);
        assert!(session.member(1).unwrap().failed);
        assert_eq!(session.member(1).unwrap().handle.subscriptions, Subscriptions::none());
    }

    #[test]
    fn same_seed_same_digest() {
        let run = |seed: u64| {
            let s = schema();
            let mut session = SimSession::new(1, s, seed);
            session.enable_digest();
            for node in 1..5u32 {
                let m = move |ctx: &mut StepContext<'_>| {
                    use rand::Rng;
                    let v: u32 = ctx.rng().gen();
                    ctx.publish(1 + node % 2, &ping(v))?;
                    Ok(())
                };
                session
                    .spawn(MemberConfig::new(node).frequency(node * 7).priority((node % 3) as u8), Box::new(m))
                    .unwrap();
            }
            session.advance(10_000_000);
            session.digest().unwrap()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn reactive_module_and_revert() {
        let s = schema();
        let mut session = SimSession::new(1, s.clone(), 0);
        struct Tripwire;
        impl Module for Tripwire {
            fn step(&mut self, _ctx: &mut StepContext<'_>) -> Result<(), ModuleFault> {
                Ok(())
            }
            fn on_envelope(&mut self, env: &Envelope, ctx: &mut StepContext<'_>) -> Result<bool, ModuleFault> {
                if env.sender_node == 2 && env.payload == [0x08, 0x03] {
                    ctx.request(ControlRequest::Revert {
                        tag: "exp".into(),
                        reason: "tripped".into(),
                    });
                }
                Ok(true)
            }
        }
        let base = session.spawn(MemberConfig::new(1).frequency(10), counter(1)).unwrap();
        session.suspend(base.node_id, "exp").unwrap();
        let exp = session.spawn(MemberConfig::new(2).frequency(10), counter(1)).unwrap();
        session.set_tag(exp.node_id, Some("exp".into())).unwrap();
        session
            .spawn(MemberConfig::new(3).frequency(1).subscribe(Subscriptions::from_ids([1])), Box::new(Tripwire))
            .unwrap();
        let out = session.advance(1_000_000);
        let exp_ts: Vec<u64> = out.iter().filter(|e| e.sender_node == 2).map(|e| e.sent_ts_us).collect();
        assert_eq!(exp_ts, vec![0, 100_000, 200_000, 300_000]);
        let base_ts: Vec<u64> = out.iter().filter(|e| e.sender_node == 1).map(|e| e.sent_ts_us).collect();
        assert_eq!(base_ts.first(), Some(&300_000));
        assert_eq!(base_ts.len(), 7);
        assert_eq!(session.control_log().len(), 1);
        assert_eq!(session.control_log()[0].retired, vec![2]);
        assert_eq!(session.live_nodes(), vec![1, 3]);
    }

    #[test]
    fn scheduled_injection_runs_at_its_instant() {
        let s = schema();
        let mut session = SimSession::new(1, s.clone(), 0);
        let rx = session.join(MemberConfig::new(2), &s).unwrap();
        let env = Envelope {
            message_id: 1,
            sender_node: 40,
            sent_ts_us: 5,
            payload: vec![0x08, 0x01],
        };
        session.schedule_injection(250, env.clone());
        assert!(session.advance(250).is_empty());
        let out = session.advance(1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sent_ts_us, 250);
        assert_eq!(out[0].sender_node, 40);
        assert_eq!(session.receive(&rx).len(), 1);
    }

    #[test]
    fn publish_encoded_validates() {
        let s = schema();
        let mut session = SimSession::new(1, s.clone(), 0);
        let tx = session.join(MemberConfig::new(1), &s).unwrap();
        assert!(session.publish_encoded(&tx, 1, vec![0x08]).is_err());
        assert!(session.publish_encoded(&tx, 9, vec![]).is_err());
        assert!(session.publish_encoded(&tx, 1, vec![0x08, 0x07]).is_ok());
    }
}
