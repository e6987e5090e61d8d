//! One continuous-experimentation iteration over a running fleet: cohort,
//! deploy, activate, relay metrics, guard, deactivate, aggregate.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use super::{Catalog, Fleet, FleetError, FleetHook, Vehicle};
use crate::experiment::control::EXPERIMENT_STATUS_ID;
use crate::experiment::runtime::LifecycleKind;
use crate::experiment::{
    aggregate_feedback, assign_cohort, validate_experiment, ArtifactStore, CompletionStatus, DeployError,
    DownlinkState, ExperimentError, ExperimentManifest, ExperimentSummary, ScenarioManifest, VehicleFeedback,
};
use crate::gateway::{FilterMode, FilterRule};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CeOptions {
    /// Gateway priority given to metric relay rules the iteration adds.
    pub metric_priority: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VehicleRow {
    pub vehicle_id: String,
    pub in_cohort: bool,
    pub status: Option<CompletionStatus>,
    pub layers_sent: usize,
    pub deploy_bytes: u64,
    pub activated_at_us: Option<u64>,
    pub stopped_at_us: Option<u64>,
    pub uplink_bytes: u64,
    pub evicted_bytes: u64,
    pub max_window_bytes: u64,
    pub budget_bytes_per_window: u64,
    pub metric_enqueued: u64,
    pub metric_evicted: u64,
    pub metric_uplinked: u64,
    pub metric_residual: u64,
    pub guard_incidents: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeIterationReport {
    pub experiment_id: String,
    pub base: String,
    pub cohort: BTreeSet<String>,
    pub summary: ExperimentSummary,
    pub vehicles: Vec<VehicleRow>,
    /// Metric envelopes the cohort's gateways uplinked.
    pub relayed_metrics: u64,
    pub sim_start_us: u64,
    pub sim_end_us: u64,
    pub wall_time: Duration,
}

impl CeIterationReport {
    /// Aggregate count equals what gateways uplinked, which equals what they
    /// enqueued minus evictions and what is still queued.
    pub fn conservation_holds(&self) -> bool {
        let cohort = self.vehicles.iter().filter(|v| v.in_cohort);
        let net: u64 = cohort
            .map(|v| v.metric_enqueued - v.metric_evicted - v.metric_residual)
            .sum();
        self.summary.total_envelopes() == self.relayed_metrics && self.relayed_metrics == net
    }

    pub fn budget_respected(&self) -> bool {
        self.vehicles.iter().all(|v| v.max_window_bytes <= v.budget_bytes_per_window)
    }

    /// The report with wall time zeroed, for comparing runs.
    pub fn deterministic_part(&self) -> CeIterationReport {
        CeIterationReport {
            wall_time: Duration::ZERO,
            ..self.clone()
        }
    }

    /// Structured report in the manifest section syntax.
    pub fn to_report_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "[report] experiment={} base={} cohort={} vehicles={} sim_start_us={} sim_end_us={} wall_ms={} relayed={} aggregated={} conservation={} budget_ok={}",
            self.experiment_id,
            self.base,
            self.cohort.len(),
            self.vehicles.len(),
            self.sim_start_us,
            self.sim_end_us,
            self.wall_time.as_millis(),
            self.relayed_metrics,
            self.summary.total_envelopes(),
            u8::from(self.conservation_holds()),
            u8::from(self.budget_respected()),
        );
        for v in &self.vehicles {
            let opt = |x: Option<u64>| x.map_or("-".to_string(), |t| t.to_string());
            let _ = writeln!(
                s,
                "[vehicle] id={} cohort={} status={} layers_sent={} deploy_bytes={} activated_us={} stopped_us={} uplink_bytes={} evicted_bytes={} max_window_bytes={} metric_uplinked={} metric_residual={} guard_incidents={}",
                v.vehicle_id,
                u8::from(v.in_cohort),
                v.status.map_or("-", CompletionStatus::name),
                v.layers_sent,
                v.deploy_bytes,
                opt(v.activated_at_us),
                opt(v.stopped_at_us),
                v.uplink_bytes,
                v.evicted_bytes,
                v.max_window_bytes,
                v.metric_uplinked,
                v.metric_residual,
                v.guard_incidents,
            );
        }
        if !self.summary.status_tally.is_empty() {
            s.push_str("[status]");
            for (k, n) in &self.summary.status_tally {
                let _ = write!(s, " {k}={n}");
            }
            s.push('\n');
        }
        for (k, st) in &self.summary.fields {
            let _ = writeln!(
                s,
                "[field] msg={} path={} count={} min={} max={} mean={}",
                k.message_id,
                k.path,
                st.count,
                st.min,
                st.max,
                st.mean()
            );
        }
        s
    }
}

impl fmt::Display for CeIterationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "experiment {} on {}: cohort {}/{}  sim {:.3} s  wall {:.3} s",
            self.experiment_id,
            self.base,
            self.cohort.len(),
            self.vehicles.len(),
            (self.sim_end_us - self.sim_start_us) as f64 / 1e6,
            self.wall_time.as_secs_f64()
        )?;
        writeln!(
            f,
            "{:<10} {:<18} {:>7} {:>12} {:>12} {:>12} {:>8} {:>6}",
            "vehicle", "status", "layers", "uplink_B", "evicted_B", "max_win_B", "metrics", "guards"
        )?;
        for v in &self.vehicles {
            writeln!(
                f,
                "{:<10} {:<18} {:>7} {:>12} {:>12} {:>12} {:>8} {:>6}",
                v.vehicle_id,
                v.status.map_or("-", CompletionStatus::name),
                v.layers_sent,
                v.uplink_bytes,
                v.evicted_bytes,
                v.max_window_bytes,
                v.metric_uplinked,
                v.guard_incidents
            )?;
        }
        writeln!(
            f,
            "relayed {}  aggregated {}  conservation {}  budget {}",
            self.relayed_metrics,
            self.summary.total_envelopes(),
            if self.conservation_holds() { "ok" } else { "VIOLATED" },
            if self.budget_respected() { "ok" } else { "VIOLATED" }
        )?;
        write!(f, "{}", self.summary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Outside,
    Pending,
    Active { deadline_us: u64 },
    Done,
}

struct CeHook<'a> {
    manifest: &'a ExperimentManifest,
    base: &'a ScenarioManifest,
    store: &'a ArtifactStore,
    catalog: Catalog,
    phases: Vec<Phase>,
    rows: Vec<VehicleRow>,
    downlink_bytes_per_s: Option<u64>,
    /// Bytes received towards the next layer, and the instant the link was last credited.
    credit: Vec<(u64, Option<u64>)>,
}

impl CeHook<'_> {
    fn visit_at(&mut self, i: usize, v: &mut Vehicle, now: u64, closing: bool) -> Result<Option<u64>, FleetError> {
        let id = &self.manifest.id;
        let online = v.online_at(now);
        let (agent, session, _) = v.parts();
        agent.sync(session);
        match self.phases[i] {
            Phase::Outside | Phase::Done => Ok(None),
            Phase::Pending if agent.last_estop_us().is_some() => {
                // the stop overrides the pending activation
                agent.settle(id, CompletionStatus::EmergencyStopped);
                self.phases[i] = Phase::Done;
                Ok(None)
            }
            Phase::Pending if closing || !online => {
                self.credit[i].1 = None;
                Ok(None)
            }
            Phase::Pending => {
                // layers move whole; bytes of a partly received layer carry over
                let (credit, since) = &mut self.credit[i];
                let budget = match self.downlink_bytes_per_s {
                    None => u64::MAX,
                    Some(rate) => {
                        let dt = since.map_or(0, |s| now - s);
                        *credit += (u128::from(rate) * u128::from(dt) / 1_000_000) as u64;
                        *since = Some(now);
                        *credit
                    }
                };
                let link = DownlinkState {
                    online: true,
                    byte_budget: budget,
                };
                match agent.deploy(self.manifest, self.store, link, session) {
                    Ok(rep) => {
                        self.rows[i].layers_sent += rep.layers_sent;
                        self.rows[i].deploy_bytes += rep.bytes_sent;
                        *credit = 0;
                    }
                    Err(ExperimentError::Deploy(DeployError::TransferInterrupted { partial, .. })) => {
                        self.rows[i].layers_sent += partial.layers_sent;
                        self.rows[i].deploy_bytes += partial.bytes_sent;
                        *credit -= partial.bytes_sent.min(*credit);
                        return Ok(None);
                    }
                    Err(e) => return Err(e.into()),
                }
                let ack = agent.activate(id, session, self.base, self.store, &mut self.catalog)?;
                self.rows[i].activated_at_us = Some(ack.at_us);
                let deadline_us = now.saturating_add(self.manifest.duration_us);
                self.phases[i] = Phase::Active { deadline_us };
                Ok(Some(deadline_us))
            }
            Phase::Active { deadline_us } => {
                if agent.active() != Some(id.as_str()) {
                    self.phases[i] = Phase::Done;
                    return Ok(None);
                }
                if closing || now >= deadline_us {
                    let reason = if closing { "run ended" } else { "duration elapsed" };
                    agent.deactivate(id, session, reason)?;
                    self.phases[i] = Phase::Done;
                    return Ok(None);
                }
                Ok(Some(deadline_us))
            }
        }
    }
}

impl FleetHook for CeHook<'_> {
    fn visit(&mut self, index: usize, vehicle: &mut Vehicle, now_us: u64) -> Result<Option<u64>, FleetError> {
        self.visit_at(index, vehicle, now_us, false)
    }
}

/// Runs `manifest` on `fleet` from its current instant to the end of its
/// profile duration and aggregates what the cohort uplinked.
pub fn ce_iteration(
    manifest: &ExperimentManifest,
    fleet: &mut Fleet,
    store: &ArtifactStore,
    options: CeOptions,
) -> Result<CeIterationReport, FleetError> {
    let wall = Instant::now();
    let schema = std::sync::Arc::clone(fleet.schema());
    let base = fleet.scenario().clone();
    let report = validate_experiment(manifest, Some(&base), store, &schema);
    if !report.is_valid() {
        return Err(FleetError::Validation(report));
    }
    let ids: Vec<String> = fleet.vehicles().iter().map(|v| v.sim.vehicle_id.clone()).collect();
    let cohort = assign_cohort(&ids, manifest.fraction, &manifest.id, manifest.seed);

    let mut relay_ids: BTreeSet<_> = manifest.metrics.clone();
    if schema.get(EXPERIMENT_STATUS_ID).is_some() {
        relay_ids.insert(EXPERIMENT_STATUS_ID);
    }
    fleet.keep_uplinked(relay_ids.iter().copied());
    for v in fleet.vehicles_mut() {
        if !cohort.contains(&v.sim.vehicle_id) {
            continue;
        }
        let (_, _, gw) = v.parts();
        let mut gw = gw.borrow_mut();
        for &message_id in &relay_ids {
            if gw.config().rules.get(message_id).is_none() {
                gw.set_rule(FilterRule {
                    message_id,
                    mode: FilterMode::Relay,
                    priority: options.metric_priority,
                })?;
            }
        }
    }

    let mut hook = CeHook {
        manifest,
        base: &base,
        store,
        catalog: Catalog::new(std::sync::Arc::clone(&schema)),
        phases: ids
            .iter()
            .map(|id| if cohort.contains(id) { Phase::Pending } else { Phase::Outside })
            .collect(),
        rows: ids
            .iter()
            .map(|id| VehicleRow {
                vehicle_id: id.clone(),
                in_cohort: cohort.contains(id),
                ..VehicleRow::default()
            })
            .collect(),
        downlink_bytes_per_s: fleet.profile().downlink_bytes_per_s,
        credit: vec![(0, None); ids.len()],
    };
    let sim_start_us = fleet.now_us();
    let end = fleet.end_us();
    fleet.run_until(end, &mut hook)?;
    for (i, v) in fleet.vehicles_mut().iter_mut().enumerate() {
        hook.visit_at(i, v, end, true)?;
    }
    fleet.service()?;

    let mut feedback = Vec::new();
    for (i, v) in fleet.vehicles_mut().iter_mut().enumerate() {
        let row = &mut hook.rows[i];
        let gw = v.gateway();
        let counters = gw.counters();
        row.uplink_bytes = v.uplink().bytes;
        row.max_window_bytes = v.uplink().max_batch_bytes;
        row.budget_bytes_per_window = gw.config().budget_bytes_per_window;
        row.evicted_bytes = counters.values().map(|c| c.evicted_bytes).sum();
        for id in &manifest.metrics {
            if let Some(c) = counters.get(id) {
                row.metric_enqueued += c.enqueued;
                row.metric_evicted += c.evicted;
                row.metric_uplinked += c.uplinked;
                row.metric_residual += c.residual();
            }
        }
        drop(gw);
        if !row.in_cohort {
            continue;
        }
        if hook.phases[i] == Phase::Pending {
            v.parts().0.mark_offline_timeout(&manifest.id);
        }
        let agent = v.agent();
        row.status = agent.outcome(&manifest.id);
        row.guard_incidents = agent.guard_incidents(&manifest.id);
        row.stopped_at_us = agent
            .events()
            .iter()
            .filter(|e| e.experiment_id == manifest.id)
            .find(|e| {
                matches!(
                    e.kind,
                    LifecycleKind::Deactivated(_) | LifecycleKind::GuardStopped { .. } | LifecycleKind::EmergencyStopped
                )
            })
            .map(|e| e.at_us);
        feedback.push(VehicleFeedback {
            experiment_id: manifest.id.clone(),
            vehicle_id: v.sim.vehicle_id.clone(),
            status: row.status.unwrap_or(CompletionStatus::OfflineTimeout),
            guard_incidents: row.guard_incidents,
            metrics: v
                .uplink()
                .kept
                .iter()
                .filter(|(_, e)| manifest.metrics.contains(&e.message_id))
                .map(|(_, e)| e.clone())
                .collect(),
        });
    }
    let summary = aggregate_feedback(&manifest.id, &schema, &feedback)?;
    let relayed_metrics = hook.rows.iter().filter(|r| r.in_cohort).map(|r| r.metric_uplinked).sum();
    Ok(CeIterationReport {
        experiment_id: manifest.id.clone(),
        base: base.name.clone(),
        cohort,
        summary,
        vehicles: hook.rows,
        relayed_metrics,
        sim_start_us,
        sim_end_us: fleet.now_us(),
        wall_time: wall.elapsed(),
    })
}
