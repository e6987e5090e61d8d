//! Middleware and experimentation toolkit for fleets of cyber-physical nodes.
//!
//! Modules communicate over a publish/subscribe [`bus`] using messages defined
//! in a small interface language ([`idl`]) and encoded with [`codec`]. A
//! [`recorder`] captures whole sessions for replay, a [`gateway`] relays
//! selected traffic to a remote server under a bandwidth budget, and
//! [`experiment`] drives safety-guarded experiments across a fleet, which
//! [`fleet`] simulates on a shared virtual clock.

pub mod bus;
pub mod codec;
pub mod experiment;
pub mod fleet;
pub mod gateway;
pub mod idl;
pub mod recorder;
