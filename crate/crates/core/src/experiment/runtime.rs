//! On-vehicle experiment agent: staging, activation, deactivation and
//! emergency stop on a simulated session.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::artifact::{deploy, ArtifactStore, DeployReport, DownlinkState, VehicleCache};
use super::control::{status_record, StatusCode, EXPERIMENT_STATUS_ID};
use super::guard::{MonitorEvent, MonitorState, ResolvedGuard, SafetyMonitor, SharedMonitor};
use super::manifest::{ExperimentManifest, ModuleSpec, ScenarioManifest};
use super::{CompletionStatus, ExperimentError};
use crate::bus::{ControlRequest, MemberConfig, Module, ModuleHandle, NodeId, SimSession, Subscriptions};

/// Node id of the `index`-th module of a base scenario.
pub fn base_node_id(index: usize) -> NodeId {
    1 + index as NodeId
}

/// Node id of the `index`-th module of an experiment delta.
pub fn delta_node_id(index: usize) -> NodeId {
    10_001 + index as NodeId
}

pub const GATEWAY_NODE: NodeId = 60_000;
pub const MONITOR_NODE: NodeId = 60_001;
pub const AGENT_NODE: NodeId = 60_002;
/// Monitor step rate; bounds how late a sustained guard is noticed.
pub const MONITOR_HZ: u32 = 1000;

/// Turns module specs into runnable behaviour.
pub trait ModuleFactory {
    fn build(&mut self, spec: &ModuleSpec, node_id: NodeId) -> Result<Box<dyn Module>, String>;
}

/// Spawns every module of `scenario` on `session`, in manifest order.
pub fn start_scenario(
    session: &mut SimSession,
    scenario: &ScenarioManifest,
    factory: &mut dyn ModuleFactory,
) -> Result<Vec<ModuleHandle>, ExperimentError> {
    let mut handles = Vec::with_capacity(scenario.modules.len());
    for (i, spec) in scenario.modules.iter().enumerate() {
        handles.push(spawn_spec(session, spec, base_node_id(i), factory)?);
    }
    Ok(handles)
}

fn spawn_spec(
    session: &mut SimSession,
    spec: &ModuleSpec,
    node_id: NodeId,
    factory: &mut dyn ModuleFactory,
) -> Result<ModuleHandle, ExperimentError> {
    let module = factory.build(spec, node_id).map_err(|reason| ExperimentError::Module {
        name: spec.name.clone(),
        reason,
    })?;
    let config = MemberConfig::new(node_id)
        .subscribe(spec.subscriptions.clone())
        .frequency(spec.frequency_hz)
        .priority(spec.priority);
    Ok(session.spawn(config, module)?)
}

pub fn experiment_tag(experiment_id: &str) -> String {
    format!("exp:{experiment_id}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationAck {
    pub experiment_id: String,
    pub at_us: u64,
    pub nodes: Vec<NodeId>,
    pub replaced: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopReport {
    pub at_us: u64,
    /// The experiment that was running, if any.
    pub deactivated: Option<String>,
    pub retired: Vec<NodeId>,
    /// Staged experiments discarded by the stop.
    pub cancelled: Vec<String>,
}

impl StopReport {
    pub fn is_noop(&self) -> bool {
        self.deactivated.is_none() && self.cancelled.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LifecycleKind {
    Staged,
    Activated,
    Deactivated(String),
    GuardStopped { guard: usize, trigger_us: u64 },
    EmergencyStopped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LifecycleEvent {
    pub at_us: u64,
    pub experiment_id: String,
    pub kind: LifecycleKind,
}

struct Active {
    id: String,
    nodes: Vec<NodeId>,
}

/// Per-vehicle experiment state. Owns the safety monitor and an agent
/// endpoint on the vehicle's session.
pub struct VehicleAgent {
    vehicle_id: String,
    cache: VehicleCache,
    staged: BTreeMap<String, ExperimentManifest>,
    active: Option<Active>,
    monitor: SharedMonitor,
    agent: ModuleHandle,
    events: Vec<LifecycleEvent>,
    outcomes: BTreeMap<String, CompletionStatus>,
    guard_incidents: BTreeMap<String, u64>,
    last_estop_us: Option<u64>,
}

impl VehicleAgent {
    /// Installs the safety monitor and agent endpoint on `session`.
    pub fn install(vehicle_id: &str, session: &mut SimSession) -> Result<VehicleAgent, ExperimentError> {
        let monitor = MonitorState::shared();
        let schema = Arc::clone(session.schema());
        session.spawn(
            MemberConfig::new(MONITOR_NODE).frequency(MONITOR_HZ),
            Box::new(SafetyMonitor::new(Arc::clone(&monitor), schema)),
        )?;
        let agent = session.join(
            MemberConfig::new(AGENT_NODE).subscribe(Subscriptions::none()),
            &Arc::clone(session.schema()),
        )?;
        Ok(VehicleAgent {
            vehicle_id: vehicle_id.to_string(),
            cache: VehicleCache::default(),
            staged: BTreeMap::new(),
            active: None,
            monitor,
            agent,
            events: Vec::new(),
            outcomes: BTreeMap::new(),
            guard_incidents: BTreeMap::new(),
            last_estop_us: None,
        })
    }

    pub fn vehicle_id(&self) -> &str {
        &self.vehicle_id
    }

    pub fn cache(&self) -> &VehicleCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut VehicleCache {
        &mut self.cache
    }

    pub fn agent_handle(&self) -> &ModuleHandle {
        &self.agent
    }

    pub fn events(&self) -> &[LifecycleEvent] {
        &self.events
    }

    pub fn active(&self) -> Option<&str> {
        self.active.as_ref().map(|a| a.id.as_str())
    }

    pub fn is_staged(&self, experiment_id: &str) -> bool {
        self.staged.contains_key(experiment_id)
    }

    pub fn outcome(&self, experiment_id: &str) -> Option<CompletionStatus> {
        self.outcomes.get(experiment_id).copied()
    }

    /// Instant of the most recent emergency stop, local or commanded.
    pub fn last_estop_us(&self) -> Option<u64> {
        self.last_estop_us
    }

    pub fn guard_incidents(&self, experiment_id: &str) -> u64 {
        self.guard_incidents.get(experiment_id).copied().unwrap_or(0)
    }

    fn note(&mut self, session: &mut SimSession, experiment_id: &str, kind: LifecycleKind) {
        let at_us = session.now_us();
        let code = match &kind {
            LifecycleKind::Staged => StatusCode::Staged,
            LifecycleKind::Activated => StatusCode::Active,
            LifecycleKind::Deactivated(_) => StatusCode::Completed,
            LifecycleKind::GuardStopped { .. } => StatusCode::GuardStopped,
            LifecycleKind::EmergencyStopped => StatusCode::EmergencyStopped,
        };
        if session.schema().get(EXPERIMENT_STATUS_ID).is_some() {
            // best effort: the status message is informational
            let _ = session.publish(&self.agent, EXPERIMENT_STATUS_ID, &status_record(experiment_id, code, at_us));
        }
        self.events.push(LifecycleEvent {
            at_us,
            experiment_id: experiment_id.to_string(),
            kind,
        });
    }

    /// Transfers the delta's layers and stages the experiment once all are cached.
    pub fn deploy(
        &mut self,
        manifest: &ExperimentManifest,
        store: &ArtifactStore,
        link: DownlinkState,
        session: &mut SimSession,
    ) -> Result<DeployReport, ExperimentError> {
        let tops: Vec<_> = manifest.delta.iter().map(|m| m.layer).collect();
        let report = deploy(&tops, store, &mut self.cache, link)?;
        if !self.staged.contains_key(&manifest.id) {
            self.staged.insert(manifest.id.clone(), manifest.clone());
            self.note(session, &manifest.id, LifecycleKind::Staged);
        }
        Ok(report)
    }

    /// Swaps the delta modules in at the current instant: replaced base
    /// modules are suspended and delta modules start stepping now.
    pub fn activate(
        &mut self,
        experiment_id: &str,
        session: &mut SimSession,
        base: &ScenarioManifest,
        store: &ArtifactStore,
        factory: &mut dyn ModuleFactory,
    ) -> Result<ActivationAck, ExperimentError> {
        if let Some(a) = &self.active {
            return Err(ExperimentError::AlreadyActive(a.id.clone()));
        }
        let manifest = self
            .staged
            .get(experiment_id)
            .cloned()
            .ok_or_else(|| ExperimentError::NotStaged(experiment_id.to_string()))?;
        if !manifest.delta.iter().all(|m| self.cache.has_stack(store, &m.layer)) {
            return Err(ExperimentError::NotStaged(experiment_id.to_string()));
        }
        let schema = Arc::clone(session.schema());
        let guards = manifest
            .guards
            .iter()
            .map(|g| ResolvedGuard::resolve(&schema, g))
            .collect::<Result<Vec<_>, _>>()?;
        let tag = experiment_tag(experiment_id);
        let mut replaced = Vec::new();
        for spec in &manifest.delta {
            if let Some(i) = base.modules.iter().position(|m| m.name == spec.name) {
                let node = base_node_id(i);
                if session.member(node).is_some() {
                    session.suspend(node, &tag)?;
                    replaced.push(node);
                }
            }
        }
        let mut nodes = Vec::new();
        for (i, spec) in manifest.delta.iter().enumerate() {
            let node = delta_node_id(i);
            match spawn_spec(session, spec, node, factory) {
                Ok(_) => {
                    session.set_tag(node, Some(tag.clone()))?;
                    nodes.push(node);
                }
                Err(e) => {
                    // leave the vehicle on its baseline
                    for n in &nodes {
                        session.set_tag(*n, Some(tag.clone()))?;
                    }
                    session.apply_control(
                        None,
                        ControlRequest::Revert {
                            tag,
                            reason: "activation failed".into(),
                        },
                    );
                    return Err(e);
                }
            }
        }
        self.monitor.lock().expect("monitor lock").arm(experiment_id, &tag, guards);
        self.active = Some(Active {
            id: experiment_id.to_string(),
            nodes: nodes.clone(),
        });
        self.note(session, experiment_id, LifecycleKind::Activated);
        Ok(ActivationAck {
            experiment_id: experiment_id.to_string(),
            at_us: session.now_us(),
            nodes,
            replaced,
        })
    }

    /// Reverts to the base scenario at the current instant.
    pub fn deactivate(&mut self, experiment_id: &str, session: &mut SimSession, reason: &str) -> Result<(), ExperimentError> {
        self.sync(session);
        match &self.active {
            Some(a) if a.id == experiment_id => {}
            _ => return Err(ExperimentError::NotActive(experiment_id.to_string())),
        }
        self.active = None;
        self.monitor.lock().expect("monitor lock").disarm();
        session.apply_control(
            None,
            ControlRequest::Revert {
                tag: experiment_tag(experiment_id),
                reason: reason.to_string(),
            },
        );
        self.staged.remove(experiment_id);
        self.outcomes
            .entry(experiment_id.to_string())
            .or_insert(CompletionStatus::Completed);
        self.note(session, experiment_id, LifecycleKind::Deactivated(reason.to_string()));
        Ok(())
    }

    /// Reverts every experimental module and discards staged experiments.
    pub fn emergency_stop(&mut self, session: &mut SimSession) -> StopReport {
        self.sync(session);
        let at_us = session.now_us();
        self.last_estop_us = Some(at_us);
        let cancelled = self.cancel_staged();
        let Some(active) = self.active.take() else {
            return StopReport {
                at_us,
                deactivated: None,
                retired: Vec::new(),
                cancelled,
            };
        };
        self.monitor.lock().expect("monitor lock").disarm();
        let retired = session.apply_control(
            None,
            ControlRequest::RevertAll {
                reason: "emergency stop".into(),
            },
        );
        self.outcomes.insert(active.id.clone(), CompletionStatus::EmergencyStopped);
        self.note(session, &active.id, LifecycleKind::EmergencyStopped);
        StopReport {
            at_us,
            deactivated: Some(active.id),
            retired,
            cancelled,
        }
    }

    /// Folds in what the safety monitor did inside the session since the last call.
    pub fn sync(&mut self, session: &mut SimSession) -> Vec<LifecycleEvent> {
        let events = self.monitor.lock().expect("monitor lock").take_events();
        let mut out = Vec::new();
        for ev in events {
            let (id, kind, status) = match ev {
                MonitorEvent::Guard {
                    experiment_id, incident, ..
                } => {
                    *self.guard_incidents.entry(experiment_id.clone()).or_insert(0) += 1;
                    (
                        experiment_id,
                        LifecycleKind::GuardStopped {
                            guard: incident.guard,
                            trigger_us: incident.trigger_us,
                        },
                        CompletionStatus::GuardStopped,
                    )
                }
                MonitorEvent::EmergencyStop {
                    experiment_id: Some(id),
                    at_us,
                } => {
                    self.last_estop_us = Some(at_us);
                    self.staged.remove(&id);
                    self.cancel_staged();
                    (id, LifecycleKind::EmergencyStopped, CompletionStatus::EmergencyStopped)
                }
                MonitorEvent::EmergencyStop {
                    experiment_id: None,
                    at_us,
                } => {
                    // nothing running, but the stop still cancels what is staged
                    self.last_estop_us = Some(at_us);
                    self.cancel_staged();
                    continue;
                }
            };
            if self.active.as_ref().is_some_and(|a| a.id == id) {
                self.active = None;
            }
            self.staged.remove(&id);
            self.outcomes.insert(id.clone(), status);
            self.note(session, &id, kind);
            out.push(self.events.last().expect("just noted").clone());
        }
        out
    }

    /// Nodes started for the running experiment.
    pub fn active_nodes(&self) -> &[NodeId] {
        self.active.as_ref().map_or(&[], |a| a.nodes.as_slice())
    }

    /// Marks an experiment that never got going on this vehicle.
    pub fn mark_offline_timeout(&mut self, experiment_id: &str) {
        self.settle(experiment_id, CompletionStatus::OfflineTimeout);
    }

    /// Records `status` unless the experiment already has an outcome.
    pub fn settle(&mut self, experiment_id: &str, status: CompletionStatus) {
        self.outcomes.entry(experiment_id.to_string()).or_insert(status);
    }

    fn cancel_staged(&mut self) -> Vec<String> {
        let active = self.active.as_ref().map(|a| a.id.clone());
        let cancelled: Vec<String> = std::mem::take(&mut self.staged)
            .into_keys()
            .filter(|id| active.as_ref() != Some(id))
            .collect();
        for id in &cancelled {
            self.settle(id, CompletionStatus::EmergencyStopped);
        }
        cancelled
    }
}
