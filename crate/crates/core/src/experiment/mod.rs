//! Continuous experimentation: manifests, layered deployment, cohorts,
//! activation, guards, emergency stop and feedback aggregation.

pub mod artifact;
pub mod cohort;
pub mod control;
pub mod feedback;
pub mod guard;
pub mod manifest;
pub mod runtime;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub use artifact::{
    deploy, layer_digest, missing_layers, ArtifactStore, DeployError, DeployReport, DownlinkState, Layer,
    LayerDigest, StoreError, VehicleCache,
};
pub use cohort::{assign_cohort, in_cohort};
pub use feedback::{aggregate_feedback, ExperimentSummary, FieldStats, VehicleFeedback, VehicleSummary};
pub use guard::{evaluate_guards, resolve_field_path, GuardIncident, GuardPathError, ResolvedGuard, SafetyMonitor};
pub use manifest::{
    Comparator, ExperimentManifest, GatewaySpec, GuardPredicate, ManifestError, ManifestErrorKind, ModuleSpec, ScenarioManifest,
};
pub use runtime::{start_scenario, ActivationAck, ModuleFactory, StopReport, VehicleAgent};

use crate::bus::{check_frequency, BusError, Subscriptions};
use crate::gateway::FilterMode;
use crate::idl::{MessageId, SchemaDigest, SchemaSet};

pub const MAX_MODULES: usize = 200;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment {0} is not staged on this vehicle")]
    NotStaged(String),
    #[error("experiment {0} is already active")]
    AlreadyActive(String),
    #[error("experiment {0} is not active")]
    NotActive(String),
    #[error("module {name}: {reason}")]
    Module { name: String, reason: String },
    #[error("report for {found} in a summary of {expected}")]
    MixedExperimentIds { expected: String, found: String },
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Guard(#[from] GuardPathError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CompletionStatus {
    Completed,
    GuardStopped,
    EmergencyStopped,
    OfflineTimeout,
}

impl CompletionStatus {
    pub fn name(self) -> &'static str {
        match self {
            CompletionStatus::Completed => "completed",
            CompletionStatus::GuardStopped => "guard-stopped",
            CompletionStatus::EmergencyStopped => "emergency-stopped",
            CompletionStatus::OfflineTimeout => "offline-timeout",
        }
    }
}

impl fmt::Display for CompletionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finding {
    NoModules,
    ModuleCountExceeded { count: usize },
    DuplicateModuleName(String),
    UnpinnedVersion(String),
    UnknownLayer { module: String, layer: LayerDigest },
    SchemaDigestMismatch { manifest: SchemaDigest, expected: SchemaDigest },
    InvalidFrequency { module: String, hz: u32 },
    UnknownMessageId { context: String, id: MessageId },
    UnknownGuardField { guard: usize, reason: String },
    NonNumericGuardField { guard: usize, path: String },
    EmptyDelta,
    NonPositiveDuration,
    FractionOutOfRange(String),
    BaseMismatch { expected: String, found: String },
    InvalidGateway(String),
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::NoModules => write!(f, "NoModules: scenario has no modules"),
            Finding::ModuleCountExceeded { count } => {
                write!(f, "ModuleCountExceeded: {count} modules, limit {MAX_MODULES}")
            }
            Finding::DuplicateModuleName(n) => write!(f, "DuplicateModuleName: {n}"),
            Finding::UnpinnedVersion(n) => write!(f, "UnpinnedVersion: module {n} has no version"),
            Finding::UnknownLayer { module, layer } => write!(f, "UnknownLayer: module {module} layer {layer}"),
            Finding::SchemaDigestMismatch { manifest, expected } => {
                write!(f, "SchemaDigestMismatch: manifest {manifest}, expected {expected}")
            }
            Finding::InvalidFrequency { module, hz } => write!(f, "InvalidFrequency: module {module} at {hz} Hz"),
            Finding::UnknownMessageId { context, id } => write!(f, "UnknownMessageId: {id} in {context}"),
            Finding::UnknownGuardField { guard, reason } => write!(f, "UnknownGuardField: guard {guard}: {reason}"),
            Finding::NonNumericGuardField { guard, path } => {
                write!(f, "NonNumericGuardField: guard {guard} field {path}")
            }
            Finding::EmptyDelta => write!(f, "EmptyDelta: experiment changes no modules"),
            Finding::NonPositiveDuration => write!(f, "NonPositiveDuration: duration_us must be > 0"),
            Finding::FractionOutOfRange(v) => write!(f, "FractionOutOfRange: {v}"),
            Finding::BaseMismatch { expected, found } => {
                write!(f, "BaseMismatch: experiment targets {expected}, scenario is {found}")
            }
            Finding::InvalidGateway(why) => write!(f, "InvalidGateway: {why}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has(&self, pred: impl Fn(&Finding) -> bool) -> bool {
        self.findings.iter().any(pred)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.findings.is_empty() {
            return writeln!(f, "valid");
        }
        for finding in &self.findings {
            writeln!(f, "{finding}")?;
        }
        Ok(())
    }
}

fn check_modules<'a>(
    modules: impl IntoIterator<Item = &'a ModuleSpec>,
    store: &ArtifactStore,
    schema: &SchemaSet,
    out: &mut Vec<Finding>,
) {
    let mut names = BTreeSet::new();
    for m in modules {
        if !names.insert(m.name.as_str()) {
            out.push(Finding::DuplicateModuleName(m.name.clone()));
        }
        if m.version.trim().is_empty() {
            out.push(Finding::UnpinnedVersion(m.name.clone()));
        }
        if store.stack(&m.layer).is_err() {
            out.push(Finding::UnknownLayer {
                module: m.name.clone(),
                layer: m.layer,
            });
        }
        if check_frequency(m.frequency_hz).is_err() {
            out.push(Finding::InvalidFrequency {
                module: m.name.clone(),
                hz: m.frequency_hz,
            });
        }
        if let Subscriptions::Only(ids) = &m.subscriptions {
            for id in ids {
                if schema.get(*id).is_none() {
                    out.push(Finding::UnknownMessageId {
                        context: format!("module {} subscriptions", m.name),
                        id: *id,
                    });
                }
            }
        }
    }
}

fn check_gateway(g: &GatewaySpec, schema: &SchemaSet, out: &mut Vec<Finding>) {
    if g.capacity_bytes == 0 {
        out.push(Finding::InvalidGateway("capacity is 0".into()));
    }
    if g.budget_bytes_per_window == 0 {
        out.push(Finding::InvalidGateway("budget is 0".into()));
    }
    if g.window_us == 0 {
        out.push(Finding::InvalidGateway("window_us is 0".into()));
    }
    for r in &g.rules {
        if schema.get(r.message_id).is_none() {
            out.push(Finding::UnknownMessageId {
                context: "gateway rule".into(),
                id: r.message_id,
            });
        }
        if r.mode == FilterMode::Sample(0) {
            out.push(Finding::InvalidGateway(format!("rule {} samples 1 in 0", r.message_id)));
        }
    }
    for id in &g.allow {
        if schema.get(*id).is_none() {
            out.push(Finding::UnknownMessageId {
                context: "gateway allow".into(),
                id: *id,
            });
        }
    }
}

fn check_schema_digest(manifest: SchemaDigest, store: &ArtifactStore, schema: &SchemaSet, out: &mut Vec<Finding>) {
    let local = schema.source_digest();
    if manifest != local {
        out.push(Finding::SchemaDigestMismatch {
            manifest,
            expected: local,
        });
    } else if let Some(s) = store.schema_digest() {
        if s != manifest {
            out.push(Finding::SchemaDigestMismatch { manifest, expected: s });
        }
    }
}

fn check_count(count: usize, out: &mut Vec<Finding>) {
    if count == 0 {
        out.push(Finding::NoModules);
    } else if count > MAX_MODULES {
        out.push(Finding::ModuleCountExceeded { count });
    }
}

pub fn validate_scenario(m: &ScenarioManifest, store: &ArtifactStore, schema: &SchemaSet) -> ValidationReport {
    let mut out = Vec::new();
    check_count(m.modules.len(), &mut out);
    check_schema_digest(m.schema_digest, store, schema, &mut out);
    check_modules(&m.modules, store, schema, &mut out);
    if let Some(g) = &m.gateway {
        check_gateway(g, schema, &mut out);
    }
    ValidationReport { findings: out }
}

/// Validates an experiment on its own and, when `base` is given, the
/// scenario that results from applying it.
pub fn validate_experiment(
    m: &ExperimentManifest,
    base: Option<&ScenarioManifest>,
    store: &ArtifactStore,
    schema: &SchemaSet,
) -> ValidationReport {
    let mut out = Vec::new();
    if m.delta.is_empty() {
        out.push(Finding::EmptyDelta);
    }
    if m.duration_us == 0 {
        out.push(Finding::NonPositiveDuration);
    }
    if !(0.0..=1.0).contains(&m.fraction) {
        out.push(Finding::FractionOutOfRange(m.fraction.to_string()));
    }
    check_modules(&m.delta, store, schema, &mut out);
    for id in &m.metrics {
        if schema.get(*id).is_none() {
            out.push(Finding::UnknownMessageId {
                context: "metric".into(),
                id: *id,
            });
        }
    }
    for (i, g) in m.guards.iter().enumerate() {
        match resolve_field_path(schema, g.message_id, &g.field_path) {
            Ok(_) => {}
            Err(GuardPathError::NonNumeric { path, .. }) => out.push(Finding::NonNumericGuardField { guard: i, path }),
            Err(GuardPathError::UnknownMessage(id)) => out.push(Finding::UnknownMessageId {
                context: format!("guard {i}"),
                id,
            }),
            Err(e) => out.push(Finding::UnknownGuardField {
                guard: i,
                reason: e.to_string(),
            }),
        }
    }
    if let Some(base) = base {
        if base.name != m.base {
            out.push(Finding::BaseMismatch {
                expected: m.base.clone(),
                found: base.name.clone(),
            });
        }
        check_schema_digest(base.schema_digest, store, schema, &mut out);
        let added = m.delta.iter().filter(|d| base.module(&d.name).is_none()).count();
        let combined = base.modules.len() + added;
        if combined > MAX_MODULES {
            out.push(Finding::ModuleCountExceeded { count: combined });
        }
    }
    ValidationReport { findings: out }
}
