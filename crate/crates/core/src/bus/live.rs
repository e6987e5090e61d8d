//! Wall-clock sessions over a frame transport.

use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{
    check_frequency, BusError, EnvelopeTap, MemberConfig, ModuleFailure, ModuleFault, ModuleHandle, NodeId, Publish,
    Subscriptions,
};
use crate::codec::{decode_envelope, decode_message, encode_envelope, encode_message, Envelope, Record};
use crate::idl::{MessageId, SchemaDigest, SchemaSet};

/// Carries whole frames between hosts. Delivery is best effort.
pub trait Transport: Send + Sync {
    fn send(&self, frame: &[u8]) -> Result<(), BusError>;
    /// Waits up to `timeout` for one frame.
    fn recv_timeout(&self, timeout: Duration) -> Result<Option<Vec<u8>>, BusError>;
}

fn io_err(e: io::Error) -> BusError {
    BusError::Transport(e.to_string())
}

/// One datagram per frame, sent to every configured peer (unicast or broadcast).
pub struct UdpTransport {
    socket: UdpSocket,
    peers: Vec<SocketAddr>,
}

/// Largest frame that fits a single UDP datagram.
pub const MAX_DATAGRAM: usize = 65_507;

impl UdpTransport {
    pub fn bind(local: impl ToSocketAddrs, peers: &[SocketAddr]) -> Result<UdpTransport, BusError> {
        let socket = UdpSocket::bind(local).map_err(io_err)?;
        socket.set_broadcast(true).map_err(io_err)?;
        Ok(UdpTransport {
            socket,
            peers: peers.to_vec(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, BusError> {
        self.socket.local_addr().map_err(io_err)
    }

    pub fn add_peer(&mut self, peer: SocketAddr) {
        self.peers.push(peer);
    }
}

impl Transport for UdpTransport {
    fn send(&self, frame: &[u8]) -> Result<(), BusError> {
        if frame.len() > MAX_DATAGRAM {
            return Err(BusError::Transport(format!("frame of {} bytes exceeds a datagram", frame.len())));
        }
        for peer in &self.peers {
            self.socket.send_to(frame, peer).map_err(io_err)?;
        }
        Ok(())
    }

    fn recv_timeout(&self, timeout: Duration) -> Result<Option<Vec<u8>>, BusError> {
        self.socket
            .set_read_timeout(Some(timeout.max(Duration::from_micros(1))))
            .map_err(io_err)?;
        let mut buf = vec![0u8; 65_536];
        match self.socket.recv_from(&mut buf) {
            Ok((n, _)) => {
                buf.truncate(n);
                Ok(Some(buf))
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(io_err(e)),
        }
    }
}

/// In-process fan-out: every frame sent by one endpoint reaches all others.
#[derive(Clone, Default)]
pub struct LoopbackHub {
    endpoints: Arc<Mutex<Vec<(usize, Sender<Vec<u8>>)>>>,
}

pub struct LoopbackTransport {
    id: usize,
    hub: LoopbackHub,
    rx: Mutex<Receiver<Vec<u8>>>,
}

impl LoopbackHub {
    pub fn new() -> LoopbackHub {
        LoopbackHub::default()
    }

    pub fn endpoint(&self) -> LoopbackTransport {
        let (tx, rx) = mpsc::channel();
        let mut eps = self.endpoints.lock().expect("hub lock");
        let id = eps.len();
        eps.push((id, tx));
        LoopbackTransport {
            id,
            hub: self.clone(),
            rx: Mutex::new(rx),
        }
    }
}

impl Transport for LoopbackTransport {
    fn send(&self, frame: &[u8]) -> Result<(), BusError> {
        let eps = self.hub.endpoints.lock().expect("hub lock");
        for (id, tx) in eps.iter() {
            if *id != self.id {
                // a dropped endpoint is just an absent peer
                let _ = tx.send(frame.to_vec());
            }
        }
        Ok(())
    }

    fn recv_timeout(&self, timeout: Duration) -> Result<Option<Vec<u8>>, BusError> {
        match self.rx.lock().expect("rx lock").recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => Ok(None),
        }
    }
}

// Membership handshake frames use message id 0, which no schema can define.
const HELLO_ID: MessageId = 0;
const HELLO_ANNOUNCE: u8 = 0;
const HELLO_CONFLICT: u8 = 1;
const HELLO_MISMATCH: u8 = 2;

fn hello(node_id: NodeId, digest: &SchemaDigest, kind: u8) -> Vec<u8> {
    let mut payload = digest.0.to_vec();
    payload.push(kind);
    encode_envelope(&Envelope {
        message_id: HELLO_ID,
        sender_node: node_id,
        sent_ts_us: 0,
        payload,
    })
}

fn parse_hello(env: &Envelope) -> Option<(SchemaDigest, u8)> {
    if env.payload.len() != 33 {
        return None;
    }
    let mut d = [0u8; 32];
    d.copy_from_slice(&env.payload[..32]);
    Some((SchemaDigest(d), env.payload[32]))
}

struct LiveMember {
    handle: ModuleHandle,
    inbox: VecDeque<Envelope>,
    failed: bool,
}

#[derive(Default)]
struct State {
    members: BTreeMap<NodeId, LiveMember>,
    // replies to our own announcements, keyed by node id
    join_replies: BTreeMap<NodeId, Vec<(SchemaDigest, u8)>>,
    last_ts_us: u64,
    overruns: Vec<BusError>,
    failures: Vec<ModuleFailure>,
    taps: Vec<Box<dyn EnvelopeTap + Send>>,
    received_remote: u64,
}

struct Inner {
    session_id: u32,
    schema: Arc<SchemaSet>,
    epoch: Instant,
    transport: Arc<dyn Transport>,
    state: Mutex<State>,
    arrived: Condvar,
    handshake: Duration,
}

/// Session whose modules run on their own threads against the wall clock.
#[derive(Clone)]
pub struct LiveSession {
    inner: Arc<Inner>,
}

impl LiveSession {
    /// Opens a session and starts its receiver thread. `handshake` is how long
    /// `join` waits for conflicting peers to answer.
    pub fn open(session_id: u32, schema: Arc<SchemaSet>, transport: Arc<dyn Transport>, handshake: Duration) -> LiveSession {
        let inner = Arc::new(Inner {
            session_id,
            schema,
            epoch: Instant::now(),
            transport,
            state: Mutex::new(State::default()),
            arrived: Condvar::new(),
            handshake,
        });
        let weak = Arc::downgrade(&inner);
        let transport = Arc::clone(&inner.transport);
        thread::spawn(move || receive_loop(weak, transport));
        LiveSession { inner }
    }

    pub fn session_id(&self) -> u32 {
        self.inner.session_id
    }

    pub fn schema(&self) -> &Arc<SchemaSet> {
        &self.inner.schema
    }

    /// Microseconds since the session epoch.
    pub fn now_us(&self) -> u64 {
        self.inner.epoch.elapsed().as_micros() as u64
    }

    fn state(&self) -> std::sync::MutexGuard<'_, State> {
        self.inner.state.lock().expect("session lock poisoned")
    }

    pub fn join(&self, config: MemberConfig, member_schema: &SchemaSet) -> Result<ModuleHandle, BusError> {
        let local = self.inner.schema.source_digest();
        if member_schema.source_digest() != local {
            return Err(BusError::SchemaDigestMismatch {
                local: member_schema.source_digest(),
                remote: local,
            });
        }
        check_frequency(config.frequency_hz)?;
        {
            let mut st = self.state();
            if st.members.contains_key(&config.node_id) {
                return Err(BusError::DuplicateNode(config.node_id));
            }
            st.join_replies.insert(config.node_id, Vec::new());
        }
        self.inner.transport.send(&hello(config.node_id, &local, HELLO_ANNOUNCE))?;
        let deadline = Instant::now() + self.inner.handshake;
        let mut st = self.state();
        loop {
            let replies = st.join_replies.get(&config.node_id).cloned().unwrap_or_default();
            if let Some((remote, _)) = replies.iter().find(|(_, k)| *k == HELLO_MISMATCH) {
                st.join_replies.remove(&config.node_id);
                return Err(BusError::SchemaDigestMismatch { local, remote: *remote });
            }
            if replies.iter().any(|(_, k)| *k == HELLO_CONFLICT) {
                st.join_replies.remove(&config.node_id);
                return Err(BusError::DuplicateNode(config.node_id));
            }
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            st = self.inner.arrived.wait_timeout(st, deadline - now).expect("session lock").0;
        }
        st.join_replies.remove(&config.node_id);
        if st.members.contains_key(&config.node_id) {
            return Err(BusError::DuplicateNode(config.node_id));
        }
        let handle = ModuleHandle {
            node_id: config.node_id,
            subscriptions: config.subscriptions,
            frequency_hz: config.frequency_hz,
            priority: config.priority,
        };
        st.members.insert(
            handle.node_id,
            LiveMember {
                handle: handle.clone(),
                inbox: VecDeque::new(),
                failed: false,
            },
        );
        Ok(handle)
    }

    pub fn attach_tap(&self, tap: Box<dyn EnvelopeTap + Send>) {
        self.state().taps.push(tap);
    }

    pub fn publish(&self, handle: &ModuleHandle, message_id: MessageId, record: &Record) -> Result<Envelope, BusError> {
        let schema = self
            .inner
            .schema
            .get(message_id)
            .ok_or(BusError::UnknownMessage(message_id))?;
        let payload = encode_message(&self.inner.schema, schema, record)?;
        self.send_payload(handle.node_id, message_id, payload)
    }

    fn send_payload(&self, node_id: NodeId, message_id: MessageId, payload: Vec<u8>) -> Result<Envelope, BusError> {
        let (env, frame) = {
            let mut st = self.state();
            match st.members.get(&node_id) {
                None => return Err(BusError::NotJoined(node_id)),
                Some(m) if m.failed => return Err(BusError::ModuleFailed(node_id)),
                Some(_) => {}
            }
            // timestamps never go backwards, which keeps per-sender FIFO checkable
            let ts = self.now_us().max(st.last_ts_us);
            st.last_ts_us = ts;
            let env = Envelope {
                message_id,
                sender_node: node_id,
                sent_ts_us: ts,
                payload,
            };
            let frame = encode_envelope(&env);
            deliver_locally(&mut st, ts, &env, &frame);
            (env, frame)
        };
        self.inner.arrived.notify_all();
        self.inner.transport.send(&frame)?;
        Ok(env)
    }

    /// Delivers an envelope under its original sender id, restamped to now.
    pub fn inject(&self, mut envelope: Envelope) -> Result<Envelope, BusError> {
        if self.inner.schema.get(envelope.message_id).is_none() {
            return Err(BusError::UnknownMessage(envelope.message_id));
        }
        let frame = {
            let mut st = self.state();
            let ts = self.now_us().max(st.last_ts_us);
            st.last_ts_us = ts;
            envelope.sent_ts_us = ts;
            let frame = encode_envelope(&envelope);
            deliver_locally(&mut st, ts, &envelope, &frame);
            frame
        };
        self.inner.arrived.notify_all();
        self.inner.transport.send(&frame)?;
        Ok(envelope)
    }

    pub fn receive(&self, handle: &ModuleHandle) -> Vec<Envelope> {
        self.state()
            .members
            .get_mut(&handle.node_id)
            .map(|m| m.inbox.drain(..).collect())
            .unwrap_or_default()
    }

    /// Blocks until at least one envelope is queued for `handle` or `timeout` passes.
    pub fn recv_timeout(&self, handle: &ModuleHandle, timeout: Duration) -> Vec<Envelope> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state();
        loop {
            if let Some(m) = st.members.get_mut(&handle.node_id) {
                if !m.inbox.is_empty() {
                    return m.inbox.drain(..).collect();
                }
            } else {
                return Vec::new();
            }
            let now = Instant::now();
            if now >= deadline {
                return Vec::new();
            }
            st = self.inner.arrived.wait_timeout(st, deadline - now).expect("session lock").0;
        }
    }

    pub fn overruns(&self) -> Vec<BusError> {
        self.state().overruns.clone()
    }

    pub fn failures(&self) -> Vec<ModuleFailure> {
        self.state().failures.clone()
    }

    /// Envelopes received from other hosts so far.
    pub fn received_remote(&self) -> u64 {
        self.state().received_remote
    }

    fn mark_failed(&self, node_id: NodeId, reason: String) {
        let at_us = self.now_us();
        let mut st = self.state();
        if let Some(m) = st.members.get_mut(&node_id) {
            m.failed = true;
            m.handle.subscriptions = Subscriptions::none();
            m.inbox.clear();
        }
        st.failures.push(ModuleFailure { node_id, at_us, reason });
    }

    /// Runs `step` on its own thread once per period until the task is stopped.
    /// A step that takes longer than its period is reported as one
    /// [`BusError::StepOverrun`]; the next step starts at the following period boundary.
    pub fn run_scheduled<F>(&self, handle: &ModuleHandle, mut step: F) -> Result<ScheduledTask, BusError>
    where
        F: FnMut(&mut LiveContext) -> Result<(), ModuleFault> + Send + 'static,
    {
        {
            let st = self.state();
            match st.members.get(&handle.node_id) {
                None => return Err(BusError::NotJoined(handle.node_id)),
                Some(m) if m.failed => return Err(BusError::ModuleFailed(handle.node_id)),
                Some(_) => {}
            }
        }
        let stop = Arc::new(AtomicBool::new(false));
        let period = Duration::from_micros(handle.period_us());
        let mut ctx = LiveContext {
            session: self.clone(),
            node_id: handle.node_id,
        };
        let flag = Arc::clone(&stop);
        let join = thread::spawn(move || {
            let mut next = Instant::now();
            while !flag.load(Ordering::Relaxed) {
                let now = Instant::now();
                if next > now {
                    thread::sleep(next - now);
                }
                let started = Instant::now();
                if let Err(fault) = step(&mut ctx) {
                    ctx.session.mark_failed(ctx.node_id, fault.0);
                    break;
                }
                let elapsed = started.elapsed();
                if elapsed > period {
                    ctx.session.state().overruns.push(BusError::StepOverrun {
                        node_id: ctx.node_id,
                        period_us: period.as_micros() as u64,
                    });
                }
                next += period;
                let now = Instant::now();
                while next <= now {
                    next += period;
                }
            }
        });
        Ok(ScheduledTask {
            stop,
            join: Some(join),
        })
    }
}

impl Publish for LiveSession {
    fn publish_encoded(
        &mut self,
        handle: &ModuleHandle,
        message_id: MessageId,
        payload: Vec<u8>,
    ) -> Result<Envelope, BusError> {
        let schema = self
            .inner
            .schema
            .get(message_id)
            .ok_or(BusError::UnknownMessage(message_id))?;
        decode_message(&self.inner.schema, schema, &payload)?;
        self.send_payload(handle.node_id, message_id, payload)
    }
}

fn deliver_locally(st: &mut State, received_ts_us: u64, env: &Envelope, frame: &[u8]) {
    for tap in st.taps.iter_mut() {
        tap.on_delivered(received_ts_us, env, frame);
    }
    for (id, m) in st.members.iter_mut() {
        if *id != env.sender_node && !m.failed && m.handle.subscriptions.contains(env.message_id) {
            m.inbox.push_back(env.clone());
        }
    }
}

fn receive_loop(session: Weak<Inner>, transport: Arc<dyn Transport>) {
    loop {
        let frame = transport.recv_timeout(Duration::from_millis(20)).unwrap_or_default();
        let Some(inner) = session.upgrade() else {
            return;
        };
        let Some(frame) = frame else {
            continue;
        };
        // corrupt or foreign datagrams are dropped
        let Ok(env) = decode_envelope(&frame) else {
            continue;
        };
        let local = inner.schema.source_digest();
        let mut st = inner.state.lock().expect("session lock poisoned");
        if env.message_id == HELLO_ID {
            let Some((digest, kind)) = parse_hello(&env) else {
                continue;
            };
            if kind == HELLO_ANNOUNCE {
                let reply = if digest != local {
                    Some(HELLO_MISMATCH)
                } else if st.members.contains_key(&env.sender_node) {
                    Some(HELLO_CONFLICT)
                } else {
                    None
                };
                drop(st);
                if let Some(kind) = reply {
                    let _ = inner.transport.send(&hello(env.sender_node, &local, kind));
                }
            } else if let Some(replies) = st.join_replies.get_mut(&env.sender_node) {
                replies.push((digest, kind));
                drop(st);
                inner.arrived.notify_all();
            }
            continue;
        }
        if inner.schema.get(env.message_id).is_none() {
            continue;
        }
        let ts = inner.epoch.elapsed().as_micros() as u64;
        st.received_remote += 1;
        deliver_locally(&mut st, ts, &env, &frame);
        drop(st);
        inner.arrived.notify_all();
    }
}

/// What a live module sees while it runs.
pub struct LiveContext {
    session: LiveSession,
    node_id: NodeId,
}

impl LiveContext {
    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn now_us(&self) -> u64 {
        self.session.now_us()
    }

    pub fn session(&self) -> &LiveSession {
        &self.session
    }

    pub fn publish(&mut self, message_id: MessageId, record: &Record) -> Result<Envelope, BusError> {
        let schema = self
            .session
            .inner
            .schema
            .get(message_id)
            .ok_or(BusError::UnknownMessage(message_id))?;
        let payload = encode_message(&self.session.inner.schema, schema, record)?;
        self.session.send_payload(self.node_id, message_id, payload)
    }

    pub fn drain_inbox(&mut self) -> Vec<Envelope> {
        self.session
            .state()
            .members
            .get_mut(&self.node_id)
            .map(|m| m.inbox.drain(..).collect())
            .unwrap_or_default()
    }
}

/// Running periodic module; stops (and joins its thread) on drop.
pub struct ScheduledTask {
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ScheduledTask {
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ScheduledTask {
    fn drop(&mut self) {
        self.halt();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Value;
    use crate::idl::parse_schema;

    fn schema() -> Arc<SchemaSet> {
        Arc::new(parse_schema("message Ping [id = 1] { uint32 seq [id = 1]; }").unwrap())
    }

    fn ping(seq: u32) -> Record {
        Record::new().with(1, Value::Uint32(seq))
    }

    const HS: Duration = Duration::from_millis(60);

    #[test]
    fn loopback_delivery_between_hosts() {
        let hub = LoopbackHub::new();
        let s = schema();
        let a = LiveSession::open(1, s.clone(), Arc::new(hub.endpoint()), HS);
        let b = LiveSession::open(1, s.clone(), Arc::new(hub.endpoint()), HS);
        let tx = a.join(MemberConfig::new(1), &s).unwrap();
        let rx = b.join(MemberConfig::new(2).subscribe(Subscriptions::from_ids([1])), &s).unwrap();
        for i in 0..5 {
            a.publish(&tx, 1, &ping(i)).unwrap();
        }
        let mut got = Vec::new();
        let deadline = Instant::now() + Duration::from_secs(2);
        while got.len() < 5 && Instant::now() < deadline {
            got.extend(b.recv_timeout(&rx, Duration::from_millis(50)));
        }
        assert_eq!(got.len(), 5);
        assert!(got.windows(2).all(|w| w[0].sent_ts_us <= w[1].sent_ts_us));
        assert_eq!(got[4].payload, vec![0x08, 0x04]);
    }

    #[test]
    fn duplicate_node_across_hosts() {
        let hub = LoopbackHub::new();
        let s = schema();
        let a = LiveSession::open(1, s.clone(), Arc::new(hub.endpoint()), HS);
        let b = LiveSession::open(1, s.clone(), Arc::new(hub.endpoint()), HS);
        a.join(MemberConfig::new(7), &s).unwrap();
        assert_eq!(b.join(MemberConfig::new(7), &s), Err(BusError::DuplicateNode(7)));
        assert_eq!(a.join(MemberConfig::new(7), &s), Err(BusError::DuplicateNode(7)));
    }

    #[test]
    fn digest_mismatch_across_hosts() {
        let hub = LoopbackHub::new();
        let s = schema();
        let other = Arc::new(parse_schema("message Ping [id = 1] { int64 seq [id = 1]; }").unwrap());
        let a = LiveSession::open(1, s.clone(), Arc::new(hub.endpoint()), HS);
        a.join(MemberConfig::new(1), &s).unwrap();
        let b = LiveSession::open(1, other.clone(), Arc::new(hub.endpoint()), HS);
        let err = b.join(MemberConfig::new(2), &other).unwrap_err();
        assert_eq!(
            err,
            BusError::SchemaDigestMismatch {
                local: other.source_digest(),
                remote: s.source_digest()
            }
        );
    }

    #[test]
    fn busy_step_reports_one_overrun() {
        let hub = LoopbackHub::new();
        let s = schema();
        let session = LiveSession::open(1, s.clone(), Arc::new(hub.endpoint()), Duration::ZERO);
        let h = session.join(MemberConfig::new(1).frequency(100), &s).unwrap();
        let mut calls = 0;
        let task = session
            .run_scheduled(&h, move |_ctx: &mut LiveContext| {
                calls += 1;
                if calls == 2 {
                    let t = Instant::now();
                    while t.elapsed() < Duration::from_millis(20) {
                        std::hint::spin_loop();
                    }
                }
                Ok(())
            })
            .unwrap();
        thread::sleep(Duration::from_millis(120));
        task.stop();
        assert_eq!(
            session.overruns(),
            vec![BusError::StepOverrun {
                node_id: 1,
                period_us: 10_000
            }]
        );
    }

    #[test]
    fn failed_live_module_is_unsubscribed() {
        let hub = LoopbackHub::new();
        let s = schema();
        let session = LiveSession::open(1, s.clone(), Arc::new(hub.endpoint()), Duration::ZERO);
        let bad = session.join(MemberConfig::new(1).frequency(100), &s).unwrap();
        let good = session.join(MemberConfig::new(2).frequency(100), &s).unwrap();
        let t1 = session
            .run_scheduled(&bad, |_ctx: &mut LiveContext| Err(ModuleFault::new("boom")))
            .unwrap();
        let t2 = session
            .run_scheduled(&good, |ctx: &mut LiveContext| {
                ctx.publish(1, &ping(1))?;
                Ok(())
            })
            .unwrap();
        thread::sleep(Duration::from_millis(80));
        t1.stop();
        t2.stop();
        assert_eq!(session.failures().len(), 1);
        assert_eq!(session.publish(&bad, 1, &ping(0)), Err(BusError::ModuleFailed(1)));
        assert!(session.receive(&bad).is_empty());
    }

    #[test]
    fn udp_localhost_roundtrip() {
        let s = schema();
        let ta = UdpTransport::bind("127.0.0.1:0", &[]).unwrap();
        let tb = UdpTransport::bind("127.0.0.1:0", &[]).unwrap();
        let (aa, ba) = (ta.local_addr().unwrap(), tb.local_addr().unwrap());
        let mut ta = ta;
        let mut tb = tb;
        ta.add_peer(ba);
        tb.add_peer(aa);
        let a = LiveSession::open(3, s.clone(), Arc::new(ta), HS);
        let b = LiveSession::open(3, s.clone(), Arc::new(tb), HS);
        let tx = a.join(MemberConfig::new(1), &s).unwrap();
        let rx = b.join(MemberConfig::new(2), &s).unwrap();
        assert_eq!(b.join(MemberConfig::new(1), &s), Err(BusError::DuplicateNode(1)));
        a.publish(&tx, 1, &ping(9)).unwrap();
        let got = b.recv_timeout(&rx, Duration::from_secs(2));
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].sender_node, 1);
        assert_eq!(b.received_remote(), 1);
    }
}
