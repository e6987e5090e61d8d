//! Publish/subscribe sessions.
//!
//! [`SimSession`] runs every module on one virtual clock and is fully
//! deterministic. [`LiveSession`] runs modules on their own threads against
//! the wall clock and carries frames over a [`Transport`] (UDP datagrams or an
//! in-process loopback hub).

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::codec::{CodecError, Envelope};
use crate::idl::{MessageId, SchemaDigest};

mod live;
mod sim;

pub use live::{LiveContext, LiveSession, LoopbackHub, LoopbackTransport, ScheduledTask, Transport, UdpTransport, MAX_DATAGRAM};
pub use sim::{MemberInfo, Module, SimSession, StepContext};

pub type NodeId = u32;

pub const MIN_FREQUENCY_HZ: u32 = 1;
pub const MAX_FREQUENCY_HZ: u32 = 1000;

/// Which message ids a member receives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Subscriptions {
    All,
    Only(BTreeSet<MessageId>),
}

impl Subscriptions {
    /// An empty id set means "everything".
    pub fn from_ids(ids: impl IntoIterator<Item = MessageId>) -> Subscriptions {
        let set: BTreeSet<MessageId> = ids.into_iter().collect();
        if set.is_empty() {
            Subscriptions::All
        } else {
            Subscriptions::Only(set)
        }
    }

    /// Subscribes to nothing at all; used by pure publishers.
    pub fn none() -> Subscriptions {
        Subscriptions::Only(BTreeSet::new())
    }

    pub fn contains(&self, id: MessageId) -> bool {
        match self {
            Subscriptions::All => true,
            Subscriptions::Only(ids) => ids.contains(&id),
        }
    }
}

/// Membership parameters for one module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberConfig {
    pub node_id: NodeId,
    pub subscriptions: Subscriptions,
    pub frequency_hz: u32,
    pub priority: u8,
}

impl MemberConfig {
    pub fn new(node_id: NodeId) -> MemberConfig {
        MemberConfig {
            node_id,
            subscriptions: Subscriptions::All,
            frequency_hz: 1,
            priority: 0,
        }
    }

    pub fn subscribe(mut self, subscriptions: Subscriptions) -> MemberConfig {
        self.subscriptions = subscriptions;
        self
    }

    pub fn frequency(mut self, hz: u32) -> MemberConfig {
        self.frequency_hz = hz;
        self
    }

    pub fn priority(mut self, priority: u8) -> MemberConfig {
        self.priority = priority;
        self
    }
}

/// Proof of membership returned by `join`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleHandle {
    pub node_id: NodeId,
    pub subscriptions: Subscriptions,
    pub frequency_hz: u32,
    pub priority: u8,
}

impl ModuleHandle {
    pub fn period_us(&self) -> u64 {
        1_000_000 / u64::from(self.frequency_hz)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("node {0} already joined")]
    DuplicateNode(NodeId),
    #[error("schema digest mismatch: local {local}, session {remote}")]
    SchemaDigestMismatch {
        local: SchemaDigest,
        remote: SchemaDigest,
    },
    #[error("node {0} has not joined this session")]
    NotJoined(NodeId),
    #[error("node {0} has failed and was unsubscribed")]
    ModuleFailed(NodeId),
    #[error("frequency {0} Hz outside 1..=1000")]
    InvalidFrequency(u32),
    #[error("node {0} already has a scheduled step")]
    AlreadyScheduled(NodeId),
    #[error("step of node {node_id} overran its {period_us} us period")]
    StepOverrun { node_id: NodeId, period_us: u64 },
    #[error("message id {0} not in session schema")]
    UnknownMessage(MessageId),
    #[error(transparent)]
    SchemaMismatch(#[from] CodecError),
    #[error("transport error: {0}")]
    Transport(String),
}

/// Error raised by a module's step or delivery callback. The module is then
/// marked failed and unsubscribed; the rest of the session carries on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleFault(pub String);

impl ModuleFault {
    pub fn new(msg: impl Into<String>) -> ModuleFault {
        ModuleFault(msg.into())
    }
}

impl fmt::Display for ModuleFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<E: std::error::Error> From<E> for ModuleFault {
    fn from(e: E) -> Self {
        ModuleFault(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleFailure {
    pub node_id: NodeId,
    pub at_us: u64,
    pub reason: String,
}

/// Structural change a module may request from inside a callback. Applied by
/// the session right after that callback returns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlRequest {
    /// Remove members tagged with `tag` and resume members suspended by it.
    Revert { tag: String, reason: String },
    /// `Revert` for every tag currently present.
    RevertAll { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlEvent {
    pub at_us: u64,
    pub origin: Option<NodeId>,
    pub request: ControlRequest,
    /// Node ids removed by this request.
    pub retired: Vec<NodeId>,
}

/// Observer of every envelope delivered on a session, with its encoded frame.
pub trait EnvelopeTap {
    fn on_delivered(&mut self, received_ts_us: u64, envelope: &Envelope, frame: &[u8]);
}

impl<T: EnvelopeTap> EnvelopeTap for Rc<RefCell<T>> {
    fn on_delivered(&mut self, received_ts_us: u64, envelope: &Envelope, frame: &[u8]) {
        self.borrow_mut().on_delivered(received_ts_us, envelope, frame)
    }
}

impl<T: EnvelopeTap> EnvelopeTap for Arc<Mutex<T>> {
    fn on_delivered(&mut self, received_ts_us: u64, envelope: &Envelope, frame: &[u8]) {
        self.lock()
            .expect("tap lock poisoned")
            .on_delivered(received_ts_us, envelope, frame)
    }
}

/// Anything modules can publish already-encoded payloads into.
pub trait Publish {
    fn publish_encoded(
        &mut self,
        handle: &ModuleHandle,
        message_id: MessageId,
        payload: Vec<u8>,
    ) -> Result<Envelope, BusError>;
}

pub(crate) fn check_frequency(hz: u32) -> Result<(), BusError> {
    if (MIN_FREQUENCY_HZ..=MAX_FREQUENCY_HZ).contains(&hz) {
        Ok(())
    } else {
        Err(BusError::InvalidFrequency(hz))
    }
}
