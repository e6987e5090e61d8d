//! Session logs (`.celg`): recording, reading, indexing and replay.
//!
//! Layout:
//!
//! ```text
//! "CELG" 0x01 session_id:u32le digest:[u8;32] epoch_len:varint epoch:utf8
//! { received_ts_us:varint frame }*
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bus::{EnvelopeTap, LiveSession, SimSession};
use crate::codec::{decode_frame_prefix, decode_varint, put_varint, Envelope, FrameError, VarintError};
use crate::idl::{MessageId, SchemaDigest};

pub const LOG_MAGIC: [u8; 4] = *b"CELG";
pub const LOG_VERSION: u8 = 0x01;
pub const LOG_EXTENSION: &str = "celg";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorruptCause {
    #[error("truncated receipt timestamp")]
    TruncatedTimestamp,
    #[error("malformed receipt timestamp")]
    MalformedTimestamp,
    #[error("receipt timestamp {ts} before previous {prev}")]
    NonMonotonic { prev: u64, ts: u64 },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecorderError {
    #[error("sink full after {0} bytes")]
    SinkFull(u64),
    #[error("sink I/O error: {0}")]
    SinkIoError(String),
    #[error("invalid log header: {0}")]
    BadHeader(String),
    #[error("log schema digest {log} does not match session schema {session}")]
    DigestMismatch { log: SchemaDigest, session: SchemaDigest },
    #[error("corrupt entry at byte {offset}: {cause}")]
    CorruptEntry { offset: usize, cause: CorruptCause },
    #[error("invalid replay speed {0:?}")]
    InvalidSpeed(String),
    #[error("replay failed: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogHeader {
    pub session_id: u32,
    pub schema_digest: SchemaDigest,
    /// Free-form description of the clock origin, e.g. `virtual`.
    pub epoch: String,
}

impl LogHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(42 + self.epoch.len());
        buf.extend_from_slice(&LOG_MAGIC);
        buf.push(LOG_VERSION);
        buf.extend_from_slice(&self.session_id.to_le_bytes());
        buf.extend_from_slice(&self.schema_digest.0);
        put_varint(&mut buf, self.epoch.len() as u64);
        buf.extend_from_slice(self.epoch.as_bytes());
        buf
    }

    /// Parses the header at the start of `log`, returning it and its length.
    pub fn decode(log: &[u8]) -> Result<(LogHeader, usize), RecorderError> {
        let bad = |m: &str| RecorderError::BadHeader(m.to_string());
        if log.len() < 41 {
            return Err(bad("truncated"));
        }
        if log[..4] != LOG_MAGIC {
            return Err(bad("bad magic"));
        }
        if log[4] != LOG_VERSION {
            return Err(RecorderError::BadHeader(format!("unsupported version {}", log[4])));
        }
        let session_id = u32::from_le_bytes(log[5..9].try_into().expect("4 bytes"));
        let mut digest = [0u8; 32];
        digest.copy_from_slice(&log[9..41]);
        let (len, n) = decode_varint(&log[41..]).map_err(|_| bad("bad epoch length"))?;
        let start = 41 + n;
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| start.checked_add(l))
            .filter(|&e| e <= log.len())
            .ok_or_else(|| bad("truncated epoch"))?;
        let epoch = std::str::from_utf8(&log[start..end])
            .map_err(|_| bad("epoch is not UTF-8"))?
            .to_string();
        Ok((
            LogHeader {
                session_id,
                schema_digest: SchemaDigest(digest),
                epoch,
            },
            end,
        ))
    }
}

/// A write target with a fixed byte capacity. A write that does not fit is
/// refused whole, so the data already written stays a valid prefix.
#[derive(Debug)]
pub struct BoundedSink<W> {
    inner: W,
    remaining: u64,
}

impl<W: Write> BoundedSink<W> {
    pub fn new(inner: W, capacity: u64) -> BoundedSink<W> {
        BoundedSink {
            inner,
            remaining: capacity,
        }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: Write> Write for BoundedSink<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.len() as u64 > self.remaining {
            return Err(io::Error::new(io::ErrorKind::StorageFull, "sink capacity exhausted"));
        }
        let n = self.inner.write(buf)?;
        self.remaining -= n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn sink_error(e: io::Error, written: u64) -> RecorderError {
    match e.kind() {
        io::ErrorKind::StorageFull | io::ErrorKind::WriteZero => RecorderError::SinkFull(written),
        _ => RecorderError::SinkIoError(e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordingStats {
    pub entries: u64,
    pub bytes_written: u64,
}

struct RecorderState<W> {
    sink: Option<W>,
    stats: RecordingStats,
    last_ts_us: u64,
    error: Option<RecorderError>,
    scratch: Vec<u8>,
}

impl<W: Write> EnvelopeTap for RecorderState<W> {
    fn on_delivered(&mut self, received_ts_us: u64, _envelope: &Envelope, frame: &[u8]) {
        if self.error.is_some() {
            return;
        }
        let Some(sink) = self.sink.as_mut() else {
            return;
        };
        // a live clock may be read out of order by concurrent publishers
        let ts = received_ts_us.max(self.last_ts_us);
        self.scratch.clear();
        put_varint(&mut self.scratch, ts);
        self.scratch.extend_from_slice(frame);
        match sink.write_all(&self.scratch) {
            Ok(()) => {
                self.last_ts_us = ts;
                self.stats.entries += 1;
                self.stats.bytes_written += self.scratch.len() as u64;
            }
            Err(e) => self.error = Some(sink_error(e, self.stats.bytes_written)),
        }
    }
}

/// Handle to an active recording. Every envelope delivered on the session is
/// appended until [`close`](Recording::close) is called.
pub struct Recording<W> {
    state: Arc<Mutex<RecorderState<W>>>,
}

impl<W: Write> Recording<W> {
    /// Writes the header and returns a recording not yet attached to any session.
    pub fn start(header: &LogHeader, mut sink: W) -> Result<Recording<W>, (W, RecorderError)> {
        let bytes = header.encode();
        if let Err(e) = sink.write_all(&bytes) {
            return Err((sink, sink_error(e, 0)));
        }
        Ok(Recording {
            state: Arc::new(Mutex::new(RecorderState {
                sink: Some(sink),
                stats: RecordingStats {
                    entries: 0,
                    bytes_written: bytes.len() as u64,
                },
                last_ts_us: 0,
                error: None,
                scratch: Vec::new(),
            })),
        })
    }

    pub fn stats(&self) -> RecordingStats {
        self.state.lock().expect("recorder lock").stats
    }

    /// First sink error, after which recording stopped.
    pub fn error(&self) -> Option<RecorderError> {
        self.state.lock().expect("recorder lock").error.clone()
    }

    /// Flushes and detaches the sink. Returns it together with the outcome.
    pub fn close(self) -> (W, Result<RecordingStats, RecorderError>) {
        let mut st = self.state.lock().expect("recorder lock");
        let mut sink = st.sink.take().expect("recording closed once");
        let stats = st.stats;
        let result = match st.error.take() {
            Some(e) => Err(e),
            None => sink.flush().map(|_| stats).map_err(|e| sink_error(e, stats.bytes_written)),
        };
        (sink, result)
    }
}

impl<W: Write + 'static> Recording<W> {
    fn tap(&self) -> Box<dyn EnvelopeTap> {
        Box::new(Arc::clone(&self.state))
    }
}

/// Starts recording every envelope delivered on a simulated session.
pub fn record<W: Write + 'static>(session: &mut SimSession, sink: W) -> Result<Recording<W>, (W, RecorderError)> {
    let header = LogHeader {
        session_id: session.session_id(),
        schema_digest: session.schema().source_digest(),
        epoch: "virtual".to_string(),
    };
    let rec = Recording::start(&header, sink)?;
    session.attach_tap(rec.tap());
    Ok(rec)
}

/// Starts recording every envelope delivered on a live session.
pub fn record_live<W: Write + Send + 'static>(session: &LiveSession, sink: W) -> Result<Recording<W>, (W, RecorderError)> {
    let unix_us = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_micros())
        .unwrap_or(0);
    let header = LogHeader {
        session_id: session.session_id(),
        schema_digest: session.schema().source_digest(),
        epoch: format!("wall unix_us={unix_us}"),
    };
    let rec = Recording::start(&header, sink)?;
    session.attach_tap(Box::new(Arc::clone(&rec.state)));
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    /// Byte offset of the entry (its timestamp varint) in the log.
    pub offset: usize,
    pub received_ts_us: u64,
    pub envelope: Envelope,
    /// Length of the encoded frame.
    pub frame_len: usize,
}

/// Iterator over the entries of a log. Stops after the first corrupt entry,
/// which is yielded as exactly one error.
pub struct LogEntries<'a> {
    log: &'a [u8],
    pos: usize,
    prev_ts: u64,
    done: bool,
}

impl<'a> Iterator for LogEntries<'a> {
    type Item = Result<LogEntry, RecorderError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done || self.pos >= self.log.len() {
            return None;
        }
        let offset = self.pos;
        let item = self.read_entry();
        match &item {
            Ok(_) => {}
            Err(_) => self.done = true,
        }
        Some(item.map_err(|cause| RecorderError::CorruptEntry { offset, cause }))
    }
}

impl<'a> LogEntries<'a> {
    fn read_entry(&mut self) -> Result<LogEntry, CorruptCause> {
        let offset = self.pos;
        let (ts, n) = decode_varint(&self.log[offset..]).map_err(|e| match e {
            VarintError::Truncated => CorruptCause::TruncatedTimestamp,
            VarintError::Overflow => CorruptCause::MalformedTimestamp,
        })?;
        if ts < self.prev_ts {
            return Err(CorruptCause::NonMonotonic { prev: self.prev_ts, ts });
        }
        let (envelope, frame_len) = decode_frame_prefix(&self.log[offset + n..])?;
        self.pos = offset + n + frame_len;
        self.prev_ts = ts;
        Ok(LogEntry {
            offset,
            received_ts_us: ts,
            envelope,
            frame_len,
        })
    }
}

/// Parses the header and returns it with an iterator over the entries.
pub fn read_log(log: &[u8]) -> Result<(LogHeader, LogEntries<'_>), RecorderError> {
    let (header, len) = LogHeader::decode(log)?;
    Ok((
        header,
        LogEntries {
            log,
            pos: len,
            prev_ts: 0,
            done: false,
        },
    ))
}

/// Reads a whole log, failing on the first corrupt entry.
pub fn read_all(log: &[u8]) -> Result<(LogHeader, Vec<LogEntry>), RecorderError> {
    let (header, entries) = read_log(log)?;
    let entries = entries.collect::<Result<Vec<_>, _>>()?;
    Ok((header, entries))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MessageStats {
    pub count: u64,
    pub first_received_us: u64,
    pub last_received_us: u64,
    pub offsets: Vec<usize>,
}

/// Per-message-id statistics derived from the log bytes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LogIndex {
    pub by_id: BTreeMap<MessageId, MessageStats>,
    pub total_entries: u64,
}

pub fn index(log: &[u8]) -> Result<LogIndex, RecorderError> {
    let (_, entries) = read_log(log)?;
    let mut idx = LogIndex::default();
    for entry in entries {
        let entry = entry?;
        let stats = idx.by_id.entry(entry.envelope.message_id).or_insert_with(|| MessageStats {
            first_received_us: entry.received_ts_us,
            ..MessageStats::default()
        });
        stats.count += 1;
        stats.last_received_us = entry.received_ts_us;
        stats.offsets.push(entry.offset);
        idx.total_entries += 1;
    }
    Ok(idx)
}

impl fmt::Display for LogIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10}  {:>10}  {:>14}  {:>14}", "message_id", "count", "first_us", "last_us")?;
        for (id, s) in &self.by_id {
            writeln!(
                f,
                "{:>10}  {:>10}  {:>14}  {:>14}",
                id, s.count, s.first_received_us, s.last_received_us
            )?;
        }
        write!(f, "{:>10}  {:>10}", "total", self.total_entries)
    }
}

/// Positive rational replay speed `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Speed {
    num: u64,
    den: u64,
}

impl Speed {
    pub const REAL_TIME: Speed = Speed { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Speed, RecorderError> {
        if num == 0 || den == 0 {
            return Err(RecorderError::InvalidSpeed(format!("{num}/{den}")));
        }
        Ok(Speed { num, den })
    }

    /// Replay offset for a recorded offset: `floor(rel * den / num)`.
    pub fn scale(&self, rel_us: u64) -> u64 {
        (u128::from(rel_us) * u128::from(self.den) / u128::from(self.num)) as u64
    }
}

impl FromStr for Speed {
    type Err = RecorderError;

    /// Accepts `3`, `0.25` or `1/3`.
    fn from_str(s: &str) -> Result<Speed, RecorderError> {
        let bad = || RecorderError::InvalidSpeed(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            return Speed::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9 || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let digits = |t: &str| t.is_empty() || t.bytes().all(|b| b.is_ascii_digit());
        if !digits(int) || !digits(frac) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int.checked_mul(den).and_then(|v| v.checked_add(frac_v)).ok_or_else(bad)?;
        let g = gcd(num, den).max(1);
        Speed::new(num / g, den / g)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl fmt::Display for Speed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayReport {
    pub count: u64,
    /// Offset of the last envelope after scaling.
    pub duration_us: u64,
}

fn replay_plan(log: &[u8], session_digest: SchemaDigest) -> Result<Vec<LogEntry>, RecorderError> {
    let (header, entries) = read_all(log)?;
    if header.schema_digest != session_digest {
        return Err(RecorderError::DigestMismatch {
            log: header.schema_digest,
            session: session_digest,
        });
    }
    Ok(entries)
}

/// Re-delivers every logged envelope into a simulated session, keeping sender
/// ids and placing each at `start + scale(received - first_received)`. The
/// whole log is validated before anything is injected.
pub fn replay(log: &[u8], session: &mut SimSession, speed: Speed) -> Result<ReplayReport, RecorderError> {
    let entries = replay_plan(log, session.schema().source_digest())?;
    let Some(first) = entries.first().map(|e| e.received_ts_us) else {
        return Ok(ReplayReport {
            count: 0,
            duration_us: 0,
        });
    };
    let start = session.now_us();
    let mut duration_us = 0;
    let count = entries.len() as u64;
    for e in entries {
        let at = speed.scale(e.received_ts_us - first);
        duration_us = at;
        session.schedule_injection(start + at, e.envelope);
    }
    session.run_for(duration_us + 1);
    Ok(ReplayReport { count, duration_us })
}

/// Wall-clock replay into a live session; timing is best effort.
pub fn replay_live(log: &[u8], session: &LiveSession, speed: Speed) -> Result<ReplayReport, RecorderError> {
    let entries = replay_plan(log, session.schema().source_digest())?;
    let Some(first) = entries.first().map(|e| e.received_ts_us) else {
        return Ok(ReplayReport {
            count: 0,
            duration_us: 0,
        });
    };
    let start = Instant::now();
    let mut duration_us = 0;
    let count = entries.len() as u64;
    for e in entries {
        let at = speed.scale(e.received_ts_us - first);
        duration_us = at;
        let due = start + Duration::from_micros(at);
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        session
            .inject(e.envelope)
            .map_err(|err| RecorderError::Replay(err.to_string()))?;
    }
    Ok(ReplayReport { count, duration_us })
}
