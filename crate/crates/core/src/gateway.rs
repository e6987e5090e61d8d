//! Store-and-forward gateway between a vehicle bus and a remote server.
//!
//! Uplink: delivered envelopes pass through per-id [`FilterRule`]s into a
//! bounded [`UplinkQueue`], which is drained at most once per connectivity
//! window under a byte budget. Downlink: frames from the server are injected
//! into the bus only if their message id is allow-listed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::bus::{BusError, EnvelopeTap, ModuleHandle, NodeId, Publish};
use crate::codec::{decode_envelope, decode_frame_prefix, encode_envelope, Envelope, FrameError};
use crate::idl::MessageId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("more than one filter rule for message id {0}")]
    DuplicateRule(MessageId),
    #[error("sample rate for message id {0} must be at least 1")]
    InvalidSampleRate(MessageId),
    #[error("envelope of {size} bytes can never fit (limit {capacity})")]
    OversizedEnvelope { size: u64, capacity: u64 },
    #[error("invalid gateway configuration: {0}")]
    InvalidConfig(String),
    #[error("uplink stream: {0}")]
    Stream(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    Relay,
    /// Keep one envelope in every `n`, starting with the first.
    Sample(u32),
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterRule {
    pub message_id: MessageId,
    pub mode: FilterMode,
    /// 0 is the highest priority.
    pub priority: u8,
}

/// Validated rule set; ids without a rule are dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterTable {
    rules: BTreeMap<MessageId, FilterRule>,
}

impl FilterTable {
    pub fn new(rules: impl IntoIterator<Item = FilterRule>) -> Result<FilterTable, GatewayError> {
        let mut table = BTreeMap::new();
        for rule in rules {
            if rule.mode == FilterMode::Sample(0) {
                return Err(GatewayError::InvalidSampleRate(rule.message_id));
            }
            if table.insert(rule.message_id, rule).is_some() {
                return Err(GatewayError::DuplicateRule(rule.message_id));
            }
        }
        Ok(FilterTable { rules: table })
    }

    pub fn get(&self, id: MessageId) -> Option<&FilterRule> {
        self.rules.get(&id)
    }

    pub fn rules(&self) -> impl Iterator<Item = &FilterRule> {
        self.rules.values()
    }

    /// Adds `rule`, replacing any rule for the same id. Returns the replaced rule.
    pub fn set(&mut self, rule: FilterRule) -> Result<Option<FilterRule>, GatewayError> {
        if rule.mode == FilterMode::Sample(0) {
            return Err(GatewayError::InvalidSampleRate(rule.message_id));
        }
        Ok(self.rules.insert(rule.message_id, rule))
    }
}

/// Per-id count of envelopes seen by sampling rules.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleCounters(BTreeMap<MessageId, u64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Enqueue(u8),
    Drop,
}

pub fn apply_filters(rules: &FilterTable, envelope: &Envelope, counters: &mut SampleCounters) -> Decision {
    let Some(rule) = rules.get(envelope.message_id) else {
        return Decision::Drop;
    };
    match rule.mode {
        FilterMode::Relay => Decision::Enqueue(rule.priority),
        FilterMode::Drop => Decision::Drop,
        FilterMode::Sample(n) => {
            let seen = counters.0.entry(envelope.message_id).or_insert(0);
            let fire = (*seen).is_multiple_of(u64::from(n));
            *seen += 1;
            if fire {
                Decision::Enqueue(rule.priority)
            } else {
                Decision::Drop
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueuedFrame {
    pub message_id: MessageId,
    pub priority: u8,
    pub seq: u64,
    pub enqueued_us: u64,
    pub frame: Vec<u8>,
}

impl QueuedFrame {
    pub fn size(&self) -> u64 {
        self.frame.len() as u64
    }

    fn summary(&self) -> FrameSummary {
        FrameSummary {
            message_id: self.message_id,
            priority: self.priority,
            bytes: self.size(),
            enqueued_us: self.enqueued_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSummary {
    pub message_id: MessageId,
    pub priority: u8,
    pub bytes: u64,
    pub enqueued_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvictionReport {
    pub evicted: Vec<FrameSummary>,
    /// Set when the newcomer itself was refused.
    pub dropped: Option<FrameSummary>,
}

/// Bounded priority-then-FIFO buffer of encoded frames.
#[derive(Debug, Clone)]
pub struct UplinkQueue {
    capacity_bytes: u64,
    stored_bytes: u64,
    next_seq: u64,
    levels: BTreeMap<u8, Level>,
}

#[derive(Debug, Clone, Default)]
struct Level {
    bytes: u64,
    frames: VecDeque<QueuedFrame>,
}

impl UplinkQueue {
    pub fn new(capacity_bytes: u64) -> UplinkQueue {
        UplinkQueue {
            capacity_bytes,
            stored_bytes: 0,
            next_seq: 0,
            levels: BTreeMap::new(),
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn stored_bytes(&self) -> u64 {
        self.stored_bytes
    }

    pub fn len(&self) -> usize {
        self.levels.values().map(|l| l.frames.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.stored_bytes == 0 && self.len() == 0
    }

    /// Frames in drain order.
    pub fn iter(&self) -> impl Iterator<Item = &QueuedFrame> {
        self.levels.values().flat_map(|l| l.frames.iter())
    }

    /// Stores `frame`, evicting the lowest-priority, oldest entries if needed.
    /// Entries of strictly higher priority than the newcomer are never evicted;
    /// if they alone prevent a fit, the newcomer is dropped instead.
    pub fn enqueue(
        &mut self,
        message_id: MessageId,
        frame: Vec<u8>,
        priority: u8,
        now_us: u64,
    ) -> Result<EvictionReport, GatewayError> {
        let size = frame.len() as u64;
        if size > self.capacity_bytes {
            return Err(GatewayError::OversizedEnvelope {
                size,
                capacity: self.capacity_bytes,
            });
        }
        let entry = QueuedFrame {
            message_id,
            priority,
            seq: self.next_seq,
            enqueued_us: now_us,
            frame,
        };
        self.next_seq += 1;
        let mut report = EvictionReport::default();
        let free = self.capacity_bytes - self.stored_bytes;
        if size > free {
            let evictable: u64 = self.levels.range(priority..).map(|(_, l)| l.bytes).sum();
            if free + evictable < size {
                report.dropped = Some(entry.summary());
                return Ok(report);
            }
            while self.capacity_bytes - self.stored_bytes < size {
                let (&p, level) = self.levels.iter_mut().next_back().expect("evictable bytes remain");
                let victim = level.frames.pop_front().expect("levels are never empty");
                level.bytes -= victim.size();
                if level.frames.is_empty() {
                    self.levels.remove(&p);
                }
                self.stored_bytes -= victim.size();
                report.evicted.push(victim.summary());
            }
        }
        self.stored_bytes += size;
        let level = self.levels.entry(priority).or_default();
        level.bytes += size;
        level.frames.push_back(entry);
        Ok(report)
    }

    /// Removes frames in (priority, enqueue order) while they fit in `budget`.
    /// Stops at the first frame that does not fit.
    pub fn drain(&mut self, budget: u64) -> Vec<QueuedFrame> {
        let mut out = Vec::new();
        let mut used = 0u64;
        while let Some(mut entry) = self.levels.first_entry() {
            let level = entry.get_mut();
            let head = level.frames.front().expect("levels are never empty");
            if used + head.size() > budget {
                break;
            }
            let frame = level.frames.pop_front().expect("head exists");
            level.bytes -= frame.size();
            if level.frames.is_empty() {
                entry.remove();
            }
            used += frame.size();
            self.stored_bytes -= frame.size();
            out.push(frame);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectivityState {
    pub online: bool,
    pub budget_bytes_per_window: u64,
    pub window_us: u64,
}

impl ConnectivityState {
    pub fn new(budget_bytes_per_window: u64, window_us: u64) -> Result<ConnectivityState, GatewayError> {
        if budget_bytes_per_window == 0 || window_us == 0 {
            return Err(GatewayError::InvalidConfig("budget and window must be positive".into()));
        }
        Ok(ConnectivityState {
            online: false,
            budget_bytes_per_window,
            window_us,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UplinkBatch {
    pub window_index: u64,
    pub frames: Vec<QueuedFrame>,
    pub total_bytes: u64,
}

impl UplinkBatch {
    /// Concatenated frames, as carried in one stream message.
    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes as usize);
        for f in &self.frames {
            out.extend_from_slice(&f.frame);
        }
        out
    }
}

/// Uplink counters for one message id.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdCounters {
    pub offered: u64,
    pub filtered: u64,
    pub enqueued: u64,
    pub evicted: u64,
    /// Newcomers refused because higher-priority data filled the queue.
    pub refused: u64,
    pub uplinked: u64,
    pub enqueued_bytes: u64,
    pub evicted_bytes: u64,
    pub uplinked_bytes: u64,
}

impl IdCounters {
    /// Envelopes still waiting in the queue.
    pub fn residual(&self) -> u64 {
        self.enqueued - self.evicted - self.uplinked
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    NotAllowListed(MessageId),
    Frame(FrameError),
    Bus(BusError),
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::NotAllowListed(id) => write!(f, "message id {id} not allow-listed"),
            RejectReason::Frame(e) => write!(f, "{e}"),
            RejectReason::Bus(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DownlinkOutcome {
    Injected(Envelope),
    Rejected(RejectReason),
}

/// Decodes a downlink frame and checks it against the allow-list.
pub fn ingest_downlink(allow_list: &BTreeSet<MessageId>, frame: &[u8]) -> Result<Envelope, RejectReason> {
    let env = decode_envelope(frame).map_err(RejectReason::Frame)?;
    if !allow_list.contains(&env.message_id) {
        return Err(RejectReason::NotAllowListed(env.message_id));
    }
    Ok(env)
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub node_id: NodeId,
    pub rules: FilterTable,
    pub capacity_bytes: u64,
    pub budget_bytes_per_window: u64,
    pub window_us: u64,
    pub allow_list: BTreeSet<MessageId>,
    /// `host:port` of the uplink server, if any.
    pub server: Option<String>,
}

/// One vehicle's gateway: filters, queue, connectivity and downlink.
#[derive(Debug, Clone)]
pub struct Gateway {
    config: GatewayConfig,
    counters: SampleCounters,
    queue: UplinkQueue,
    connectivity: ConnectivityState,
    last_window: Option<u64>,
    per_id: BTreeMap<MessageId, IdCounters>,
    max_stored_bytes: u64,
    oversized: u64,
    downlink_injected: u64,
    downlink_rejected: u64,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Gateway, GatewayError> {
        if config.capacity_bytes == 0 {
            return Err(GatewayError::InvalidConfig("capacity must be positive".into()));
        }
        let connectivity = ConnectivityState::new(config.budget_bytes_per_window, config.window_us)?;
        Ok(Gateway {
            queue: UplinkQueue::new(config.capacity_bytes),
            config,
            counters: SampleCounters::default(),
            connectivity,
            last_window: None,
            per_id: BTreeMap::new(),
            max_stored_bytes: 0,
            oversized: 0,
            downlink_injected: 0,
            downlink_rejected: 0,
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn queue(&self) -> &UplinkQueue {
        &self.queue
    }

    pub fn connectivity(&self) -> ConnectivityState {
        self.connectivity
    }

    pub fn set_rule(&mut self, rule: FilterRule) -> Result<Option<FilterRule>, GatewayError> {
        self.config.rules.set(rule)
    }

    pub fn set_online(&mut self, online: bool) {
        self.connectivity.online = online;
    }

    pub fn counters(&self) -> &BTreeMap<MessageId, IdCounters> {
        &self.per_id
    }

    pub fn max_stored_bytes(&self) -> u64 {
        self.max_stored_bytes
    }

    /// Frames refused because they could never be uplinked whole.
    pub fn oversized(&self) -> u64 {
        self.oversized
    }

    pub fn downlink_counts(&self) -> (u64, u64) {
        (self.downlink_injected, self.downlink_rejected)
    }

    /// Largest frame the gateway accepts: it must fit both the queue and one window.
    pub fn frame_limit(&self) -> u64 {
        self.config.capacity_bytes.min(self.config.budget_bytes_per_window)
    }

    /// Runs an already-encoded envelope through filters and into the queue.
    pub fn offer_frame(&mut self, envelope: &Envelope, frame: &[u8], now_us: u64) -> Result<EvictionReport, GatewayError> {
        let stats = self.per_id.entry(envelope.message_id).or_default();
        stats.offered += 1;
        let Decision::Enqueue(priority) = apply_filters(&self.config.rules, envelope, &mut self.counters) else {
            stats.filtered += 1;
            return Ok(EvictionReport::default());
        };
        let size = frame.len() as u64;
        if size > self.frame_limit() {
            self.oversized += 1;
            return Err(GatewayError::OversizedEnvelope {
                size,
                capacity: self.frame_limit(),
            });
        }
        let report = self.queue.enqueue(envelope.message_id, frame.to_vec(), priority, now_us)?;
        if let Some(d) = &report.dropped {
            self.per_id.entry(d.message_id).or_default().refused += 1;
        } else {
            let s = self.per_id.entry(envelope.message_id).or_default();
            s.enqueued += 1;
            s.enqueued_bytes += size;
        }
        for e in &report.evicted {
            let s = self.per_id.entry(e.message_id).or_default();
            s.evicted += 1;
            s.evicted_bytes += e.bytes;
        }
        self.max_stored_bytes = self.max_stored_bytes.max(self.queue.stored_bytes());
        Ok(report)
    }

    pub fn offer(&mut self, envelope: &Envelope, now_us: u64) -> Result<EvictionReport, GatewayError> {
        self.offer_frame(envelope, &encode_envelope(envelope), now_us)
    }

    /// Releases at most one batch per window while online.
    pub fn drain(&mut self, now_us: u64) -> UplinkBatch {
        let window_index = now_us / self.connectivity.window_us;
        if !self.connectivity.online || self.last_window == Some(window_index) {
            return UplinkBatch {
                window_index,
                ..UplinkBatch::default()
            };
        }
        self.last_window = Some(window_index);
        let frames = self.queue.drain(self.connectivity.budget_bytes_per_window);
        let mut total_bytes = 0;
        for f in &frames {
            total_bytes += f.size();
            let s = self.per_id.entry(f.message_id).or_default();
            s.uplinked += 1;
            s.uplinked_bytes += f.size();
        }
        UplinkBatch {
            window_index,
            frames,
            total_bytes,
        }
    }

    /// Injects an allow-listed downlink frame into the bus as `handle`.
    pub fn ingest<P: Publish>(&mut self, frame: &[u8], bus: &mut P, handle: &ModuleHandle) -> DownlinkOutcome {
        let outcome = match ingest_downlink(&self.config.allow_list, frame) {
            Ok(env) => match bus.publish_encoded(handle, env.message_id, env.payload) {
                Ok(sent) => DownlinkOutcome::Injected(sent),
                Err(e) => DownlinkOutcome::Rejected(RejectReason::Bus(e)),
            },
            Err(reason) => DownlinkOutcome::Rejected(reason),
        };
        match outcome {
            DownlinkOutcome::Injected(_) => self.downlink_injected += 1,
            DownlinkOutcome::Rejected(_) => self.downlink_rejected += 1,
        }
        outcome
    }
}

impl EnvelopeTap for Gateway {
    fn on_delivered(&mut self, received_ts_us: u64, envelope: &Envelope, frame: &[u8]) {
        // oversized frames are counted and skipped
        let _ = self.offer_frame(envelope, frame, received_ts_us);
    }
}

/// Writes one batch as a stream message: 4-byte little-endian length, then the frames.
pub fn write_batch<W: Write>(out: &mut W, batch: &UplinkBatch) -> Result<(), GatewayError> {
    let len = u32::try_from(batch.total_bytes).map_err(|_| GatewayError::Stream("batch exceeds 4 GiB".into()))?;
    let stream = |e: io::Error| GatewayError::Stream(e.to_string());
    out.write_all(&len.to_le_bytes()).map_err(stream)?;
    for f in &batch.frames {
        out.write_all(&f.frame).map_err(stream)?;
    }
    out.flush().map_err(stream)
}

/// Reads one stream message and decodes its frames. `Ok(None)` on clean end of stream.
pub fn read_batch<R: Read>(input: &mut R) -> Result<Option<Vec<Envelope>>, GatewayError> {
    let stream = |e: io::Error| GatewayError::Stream(e.to_string());
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(stream(e)),
    }
    let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut body).map_err(stream)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < body.len() {
        let (env, used) = decode_frame_prefix(&body[pos..]).map_err(|e| GatewayError::Stream(e.to_string()))?;
        out.push(env);
        pos += used;
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env(id: MessageId, payload_len: usize) -> Envelope {
        Envelope {
            message_id: id,
            sender_node: 1,
            sent_ts_us: 0,
            payload: vec![0xAB; payload_len],
        }
    }

    fn rule(id: MessageId, mode: FilterMode, priority: u8) -> FilterRule {
        FilterRule {
            message_id: id,
            mode,
            priority,
        }
    }

    #[test]
    fn relay_and_default_drop() {
        let t = FilterTable::new([rule(7, FilterMode::Relay, 0)]).unwrap();
        let mut c = SampleCounters::default();
        assert_eq!(apply_filters(&t, &env(7, 1), &mut c), Decision::Enqueue(0));
        assert_eq!(apply_filters(&t, &env(8, 1), &mut c), Decision::Drop);
    }

    #[test]
    fn sample_one_in_64() {
        let t = FilterTable::new([rule(3, FilterMode::Sample(64), 2)]).unwrap();
        let mut c = SampleCounters::default();
        let fired: Vec<usize> = (1..=640)
            .filter(|_| apply_filters(&t, &env(3, 1), &mut c) == Decision::Enqueue(2))
            .collect();
        // independent oracle: position p fires iff (p - 1) is a multiple of 64
        let oracle: Vec<usize> = (1..=640).filter(|p| (p - 1) % 64 == 0).collect();
        assert_eq!(fired, oracle);
        assert_eq!(fired.len(), 10);
        assert_eq!(&fired[..3], &[1, 65, 129]);
    }

    #[test]
    fn rule_table_validation() {
        assert_eq!(
            FilterTable::new([rule(1, FilterMode::Relay, 0), rule(1, FilterMode::Drop, 0)]),
            Err(GatewayError::DuplicateRule(1))
        );
        assert_eq!(
            FilterTable::new([rule(2, FilterMode::Sample(0), 0)]),
            Err(GatewayError::InvalidSampleRate(2))
        );
    }

    #[test]
    fn eviction_policy() {
        let mut q = UplinkQueue::new(100);
        assert_eq!(q.enqueue(1, vec![0; 40], 0, 0).unwrap(), EvictionReport::default());

        let mut q = UplinkQueue::new(100);
        for t in 0..4 {
            q.enqueue(5, vec![0; 25], 5, t).unwrap();
        }
        let r = q.enqueue(0, vec![0; 30], 0, 9).unwrap();
        assert_eq!(r.evicted.iter().map(|e| e.enqueued_us).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(q.stored_bytes(), 80);

        let mut q = UplinkQueue::new(100);
        for t in 0..4 {
            q.enqueue(1, vec![0; 25], 0, t).unwrap();
        }
        let r = q.enqueue(2, vec![0; 10], 5, 9).unwrap();
        assert!(r.evicted.is_empty());
        assert_eq!(r.dropped.unwrap().message_id, 2);
        assert_eq!(q.stored_bytes(), 100);
        assert_eq!(q.len(), 4);

        assert_eq!(
            q.enqueue(1, vec![0; 101], 0, 0),
            Err(GatewayError::OversizedEnvelope { size: 101, capacity: 100 })
        );
    }

    #[test]
    fn eviction_never_touches_higher_priority() {
        let mut q = UplinkQueue::new(100);
        q.enqueue(1, vec![0; 50], 1, 0).unwrap();
        q.enqueue(2, vec![0; 30], 3, 1).unwrap();
        q.enqueue(3, vec![0; 20], 2, 2).unwrap();
        let r = q.enqueue(4, vec![0; 45], 2, 3).unwrap();
        let ids: Vec<_> = r.evicted.iter().map(|e| e.message_id).collect();
        assert_eq!(ids, vec![2, 3]);
        assert_eq!(q.iter().map(|f| f.message_id).collect::<Vec<_>>(), vec![1, 4]);
    }

    #[test]
    fn drain_respects_budget_and_order() {
        let mut q = UplinkQueue::new(1000);
        q.enqueue(1, vec![0; 30], 2, 0).unwrap();
        q.enqueue(2, vec![0; 30], 0, 1).unwrap();
        q.enqueue(3, vec![0; 30], 1, 2).unwrap();
        q.enqueue(4, vec![0; 30], 0, 3).unwrap();
        let out = q.drain(70);
        assert_eq!(out.iter().map(|f| f.message_id).collect::<Vec<_>>(), vec![2, 4]);
        let out = q.drain(1000);
        assert_eq!(out.iter().map(|f| f.message_id).collect::<Vec<_>>(), vec![3, 1]);
        assert!(q.is_empty());
    }

    fn gateway(budget: u64) -> Gateway {
        Gateway::new(GatewayConfig {
            node_id: 900,
            rules: FilterTable::new([rule(1, FilterMode::Relay, 0), rule(2, FilterMode::Relay, 1)]).unwrap(),
            capacity_bytes: 10_000,
            budget_bytes_per_window: budget,
            window_us: 1_000_000,
            allow_list: BTreeSet::from([1]),
            server: None,
        })
        .unwrap()
    }

    #[test]
    fn offline_drain_is_empty_and_one_batch_per_window() {
        let mut g = gateway(1_000);
        for _ in 0..5 {
            g.offer(&env(1, 10), 0).unwrap();
        }
        assert!(g.drain(0).frames.is_empty());
        assert_eq!(g.queue().len(), 5);
        g.set_online(true);
        let b = g.drain(10);
        assert_eq!(b.frames.len(), 5);
        g.offer(&env(1, 10), 20).unwrap();
        assert!(g.drain(999_999).frames.is_empty(), "second drain in the same window");
        assert_eq!(g.drain(1_000_000).frames.len(), 1);
        let c = g.counters()[&1];
        assert_eq!((c.enqueued, c.uplinked, c.residual()), (6, 6, 0));
    }

    #[test]
    fn frames_larger_than_budget_are_refused() {
        let mut g = gateway(50);
        assert!(matches!(
            g.offer(&env(1, 100), 0),
            Err(GatewayError::OversizedEnvelope { capacity: 50, .. })
        ));
        assert_eq!(g.oversized(), 1);
    }

    #[test]
    fn downlink_allow_list() {
        use crate::bus::{MemberConfig, SimSession, Subscriptions};
        use crate::idl::parse_schema;
        use std::sync::Arc;
        let s = Arc::new(parse_schema("message Cmd [id = 1] { uint32 v [id = 1]; } message Other [id = 2] { uint32 v [id = 1]; }").unwrap());
        let mut bus = SimSession::new(1, s.clone(), 0);
        let gw_handle = bus.join(MemberConfig::new(900), &s).unwrap();
        let listener = bus.join(MemberConfig::new(5).subscribe(Subscriptions::from_ids([1, 2])), &s).unwrap();
        let mut g = gateway(1_000);

        let ok = encode_envelope(&Envelope {
            message_id: 1,
            sender_node: 77,
            sent_ts_us: 3,
            payload: vec![0x08, 0x05],
        });
        match g.ingest(&ok, &mut bus, &gw_handle) {
            DownlinkOutcome::Injected(e) => assert_eq!(e.sender_node, 900),
            other => panic!("{other:?}"),
        }
        let got = bus.receive(&listener);
        assert_eq!(got.len(), 1);

        let denied = encode_envelope(&Envelope {
            message_id: 2,
            sender_node: 77,
            sent_ts_us: 3,
            payload: vec![0x08, 0x05],
        });
        assert_eq!(
            g.ingest(&denied, &mut bus, &gw_handle),
            DownlinkOutcome::Rejected(RejectReason::NotAllowListed(2))
        );
        let mut corrupt = ok.clone();
        corrupt[5] ^= 1;
        assert!(matches!(
            g.ingest(&corrupt, &mut bus, &gw_handle),
            DownlinkOutcome::Rejected(RejectReason::Frame(FrameError::CrcMismatch { .. }))
        ));
        assert!(bus.receive(&listener).is_empty());
        assert_eq!(g.downlink_counts(), (1, 2));
    }

    #[test]
    fn stream_roundtrip_over_tcp() {
        use std::net::{TcpListener, TcpStream};
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut all = Vec::new();
            while let Some(batch) = read_batch(&mut sock).unwrap() {
                all.push(batch);
            }
            all
        });
        let mut g = gateway(1_000);
        g.set_online(true);
        g.offer(&env(1, 5), 0).unwrap();
        g.offer(&env(2, 7), 0).unwrap();
        let mut sock = TcpStream::connect(addr).unwrap();
        write_batch(&mut sock, &g.drain(0)).unwrap();
        write_batch(&mut sock, &g.drain(1_000_000)).unwrap();
        drop(sock);
        let got = server.join().unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0], vec![env(1, 5), env(2, 7)]);
        assert!(got[1].is_empty());
    }

    proptest! {
        #[test]
        fn queue_bounds_and_order(
            ops in proptest::collection::vec((0u8..4, 1usize..60, any::<bool>(), 1u64..120), 1..300),
            capacity in 60u64..400,
        ) {
            let mut q = UplinkQueue::new(capacity);
            let mut last_seq_out: BTreeMap<u8, u64> = BTreeMap::new();
            for (t, (prio, size, drain, budget)) in ops.into_iter().enumerate() {
                if drain {
                    let out = q.drain(budget);
                    prop_assert!(out.iter().map(|f| f.size()).sum::<u64>() <= budget);
                    prop_assert!(out.windows(2).all(|w| (w[0].priority, w[0].seq) < (w[1].priority, w[1].seq)));
                    for f in &out {
                        let prev = last_seq_out.insert(f.priority, f.seq);
                        prop_assert!(prev.is_none_or(|p| p < f.seq));
                    }
                } else {
                    let before: Vec<(u8, u64)> = q.iter().map(|f| (f.priority, f.seq)).collect();
                    let r = q.enqueue(t as u32, vec![0; size], prio, t as u64).unwrap();
                    for e in &r.evicted {
                        prop_assert!(e.priority >= prio);
                    }
                    if r.dropped.is_some() {
                        let after: Vec<(u8, u64)> = q.iter().map(|f| (f.priority, f.seq)).collect();
                        prop_assert_eq!(before, after);
                    }
                }
                prop_assert!(q.stored_bytes() <= capacity);
                prop_assert_eq!(q.stored_bytes(), q.iter().map(|f| f.size()).sum::<u64>());
            }
        }
    }
}
