//! Desk-scale fleet harness: simulated vehicles on one virtual clock, each a
//! bus session with synthetic modules, a gateway and an experiment agent.

pub mod catalog;
pub mod ce;
pub mod profile;
pub mod samples;

use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::rc::Rc;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use catalog::{Catalog, SyntheticPayload};
pub use ce::{ce_iteration, CeIterationReport, CeOptions, VehicleRow};
pub use profile::{ConnectivitySchedule, FleetProfile, OnlineInterval, Rate, VehicleOverrides};

use crate::bus::{BusError, EnvelopeTap, MemberConfig, ModuleFailure, NodeId, SimSession, Subscriptions};
use crate::codec::Envelope;
use crate::experiment::cohort::fmix64;
use crate::experiment::control::{emergency_stop_record, EMERGENCY_STOP_ID};
use crate::experiment::runtime::{AGENT_NODE, GATEWAY_NODE};
use crate::experiment::{
    deploy, start_scenario, validate_scenario, ArtifactStore, DownlinkState, ExperimentError, GatewaySpec, LayerDigest,
    ManifestError,
    ModuleSpec, ScenarioManifest, ValidationReport, VehicleAgent,
};
use crate::gateway::{read_batch, write_batch, FilterTable, Gateway, GatewayConfig, GatewayError, IdCounters};
use crate::idl::{MessageId, SchemaSet};
use crate::recorder::{record, Recording, RecorderError, RecordingStats};

/// Node id of the `index`-th profile rate generator.
pub fn profile_node_id(index: usize) -> NodeId {
    20_001 + index as NodeId
}

pub const DEFAULT_DURATION_US: u64 = 10_000_000;

/// Used when a scenario has no `[gateway]` section.
pub fn default_gateway() -> GatewaySpec {
    GatewaySpec {
        capacity_bytes: 64 << 20,
        budget_bytes_per_window: 1 << 20,
        window_us: 1_000_000,
        server: None,
        rules: Vec::new(),
        allow: BTreeSet::new(),
    }
}

#[derive(Debug, Error)]
pub enum FleetError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("validation failed:\n{0}")]
    Validation(ValidationReport),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Load {
    pub envelopes: u64,
    pub frame_bytes: u64,
    pub payload_bytes: u64,
}

/// Tap counting everything delivered on a vehicle's bus.
#[derive(Debug, Default)]
pub struct LoadMeter {
    pub by_id: BTreeMap<MessageId, Load>,
}

impl EnvelopeTap for LoadMeter {
    fn on_delivered(&mut self, _received_ts_us: u64, envelope: &Envelope, frame: &[u8]) {
        let l = self.by_id.entry(envelope.message_id).or_default();
        l.envelopes += 1;
        l.frame_bytes += frame.len() as u64;
        l.payload_bytes += envelope.payload.len() as u64;
    }
}

/// What the server received from one vehicle over the uplink stream.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UplinkLog {
    pub batches: u64,
    pub bytes: u64,
    pub max_batch_bytes: u64,
    pub by_id: BTreeMap<MessageId, u64>,
    /// Envelopes of the ids the server asked to keep, with their window index.
    pub kept: Vec<(u64, Envelope)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VehicleSim {
    pub vehicle_id: String,
    pub scenario: String,
    pub rates: Vec<Rate>,
    pub schedule: ConnectivitySchedule,
    pub estops_us: Vec<u64>,
}

pub struct Vehicle {
    pub sim: VehicleSim,
    session: SimSession,
    gateway: Rc<RefCell<Gateway>>,
    meter: Rc<RefCell<LoadMeter>>,
    agent: VehicleAgent,
    recording: Option<Recording<Vec<u8>>>,
    uplink: UplinkLog,
}

impl Vehicle {
    pub fn session(&self) -> &SimSession {
        &self.session
    }

    pub fn gateway(&self) -> Ref<'_, Gateway> {
        self.gateway.borrow()
    }

    pub fn load(&self) -> Ref<'_, LoadMeter> {
        self.meter.borrow()
    }

    pub fn agent(&self) -> &VehicleAgent {
        &self.agent
    }

    pub fn uplink(&self) -> &UplinkLog {
        &self.uplink
    }

    /// Agent and session together, for lifecycle calls that need both.
    pub fn parts(&mut self) -> (&mut VehicleAgent, &mut SimSession, &RefCell<Gateway>) {
        (&mut self.agent, &mut self.session, &self.gateway)
    }

    pub fn online_at(&self, t_us: u64) -> bool {
        self.sim.schedule.online_at(t_us)
    }

    /// Connectivity update plus at most one uplink batch for the current window.
    fn service(&mut self, keep: &BTreeSet<MessageId>) -> Result<(), FleetError> {
        let now = self.session.now_us();
        let mut gw = self.gateway.borrow_mut();
        gw.set_online(self.sim.schedule.online_at(now));
        let batch = gw.drain(now);
        if batch.frames.is_empty() {
            return Ok(());
        }
        let mut wire = Vec::with_capacity(batch.total_bytes as usize + 4);
        write_batch(&mut wire, &batch)?;
        let envelopes = read_batch(&mut wire.as_slice())?.unwrap_or_default();
        let u = &mut self.uplink;
        u.batches += 1;
        u.bytes += batch.total_bytes;
        u.max_batch_bytes = u.max_batch_bytes.max(batch.total_bytes);
        for env in envelopes {
            *u.by_id.entry(env.message_id).or_insert(0) += 1;
            if keep.contains(&env.message_id) {
                u.kept.push((batch.window_index, env));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FleetOptions {
    /// Record every vehicle's bus into an in-memory log.
    pub record: bool,
    /// Maintain each session's delivered-frame digest.
    pub digest: bool,
}

/// Callback run for each vehicle at every tick boundary and at any instant
/// it asks to be woken at within the tick.
pub trait FleetHook {
    fn visit(&mut self, index: usize, vehicle: &mut Vehicle, now_us: u64) -> Result<Option<u64>, FleetError>;
}

pub struct NoHook;

impl FleetHook for NoHook {
    fn visit(&mut self, _: usize, _: &mut Vehicle, _: u64) -> Result<Option<u64>, FleetError> {
        Ok(None)
    }
}

pub struct Fleet {
    schema: Arc<SchemaSet>,
    scenario: ScenarioManifest,
    profile: FleetProfile,
    vehicles: Vec<Vehicle>,
    now_us: u64,
    keep: BTreeSet<MessageId>,
}

fn vehicle_seed(fleet_seed: u64, index: usize) -> u64 {
    fmix64(fleet_seed ^ fmix64(index as u64 + 1))
}

fn rate_spec(rate: &Rate) -> ModuleSpec {
    ModuleSpec {
        name: format!("profile-{}", rate.message_id),
        layer: LayerDigest([0; 32]),
        version: "synthetic".into(),
        frequency_hz: rate.frequency_hz,
        priority: 0,
        subscriptions: Subscriptions::none(),
        params: [
            ("kind".to_string(), "sensor".to_string()),
            ("msg".to_string(), rate.message_id.to_string()),
            ("bytes".to_string(), rate.payload_bytes.to_string()),
        ]
        .into(),
        experimental: false,
        line: 0,
    }
}

impl Fleet {
    pub fn new(
        scenario: &ScenarioManifest,
        profile: &FleetProfile,
        schema: Arc<SchemaSet>,
        options: FleetOptions,
    ) -> Result<Fleet, FleetError> {
        if profile.n == 0 {
            return Err(FleetError::Config("fleet needs at least one vehicle".into()));
        }
        let gw_spec = scenario.gateway.clone().unwrap_or_else(default_gateway);
        let mut catalog = Catalog::new(Arc::clone(&schema));
        let mut vehicles = Vec::with_capacity(profile.n);
        for (i, vehicle_id) in profile.vehicle_ids().into_iter().enumerate() {
            let mut session = SimSession::new(i as u32 + 1, Arc::clone(&schema), vehicle_seed(profile.seed, i));
            if options.digest {
                session.enable_digest();
            }
            let recording = if options.record {
                Some(record(&mut session, Vec::new()).map_err(|(_, e)| e)?)
            } else {
                None
            };
            let meter = Rc::new(RefCell::new(LoadMeter::default()));
            session.attach_tap(Box::new(Rc::clone(&meter)));
            let gateway = Rc::new(RefCell::new(Gateway::new(GatewayConfig {
                node_id: GATEWAY_NODE,
                rules: FilterTable::new(gw_spec.rules.iter().copied())?,
                capacity_bytes: gw_spec.capacity_bytes,
                budget_bytes_per_window: gw_spec.budget_bytes_per_window,
                window_us: gw_spec.window_us,
                allow_list: gw_spec.allow.clone(),
                server: gw_spec.server.clone(),
            })?));
            session.attach_tap(Box::new(Rc::clone(&gateway)));
            start_scenario(&mut session, scenario, &mut catalog)?;
            for (j, rate) in profile.rates.iter().enumerate() {
                let spec = rate_spec(rate);
                let module = catalog.build_spec(&spec).map_err(FleetError::Config)?;
                session.spawn(
                    MemberConfig::new(profile_node_id(j))
                        .subscribe(Subscriptions::none())
                        .frequency(rate.frequency_hz),
                    module,
                )?;
            }
            let agent = VehicleAgent::install(&vehicle_id, &mut session)?;
            let overrides = profile.overrides(&vehicle_id);
            if !overrides.estops_us.is_empty() {
                let msg = schema.get(EMERGENCY_STOP_ID).ok_or_else(|| {
                    FleetError::Config(format!("estop needs message {EMERGENCY_STOP_ID} in the schema"))
                })?;
                for &at in &overrides.estops_us {
                    let payload = crate::codec::encode_message(&schema, msg, &emergency_stop_record(at))
                        .map_err(BusError::from)?;
                    session.schedule_injection(
                        at,
                        Envelope {
                            message_id: EMERGENCY_STOP_ID,
                            sender_node: AGENT_NODE,
                            sent_ts_us: at,
                            payload,
                        },
                    );
                }
            }
            vehicles.push(Vehicle {
                sim: VehicleSim {
                    vehicle_id,
                    scenario: scenario.name.clone(),
                    rates: profile.rates.clone(),
                    schedule: overrides.schedule,
                    estops_us: overrides.estops_us,
                },
                session,
                gateway,
                meter,
                agent,
                recording,
                uplink: UplinkLog::default(),
            });
        }
        Ok(Fleet {
            schema,
            scenario: scenario.clone(),
            profile: profile.clone(),
            vehicles,
            now_us: 0,
            keep: BTreeSet::new(),
        })
    }

    /// Puts the base scenario's layer stacks on every vehicle, as if the
    /// fleet had been provisioned with it. Returns the bytes per vehicle.
    pub fn preinstall(&mut self, store: &ArtifactStore) -> Result<u64, FleetError> {
        let tops: Vec<_> = self.scenario.modules.iter().map(|m| m.layer).collect();
        let mut bytes = 0;
        for v in &mut self.vehicles {
            let cache = v.agent.cache_mut();
            bytes = deploy(&tops, store, cache, DownlinkState::UNLIMITED)
                .map_err(ExperimentError::from)?
                .bytes_sent;
        }
        Ok(bytes)
    }

    pub fn schema(&self) -> &Arc<SchemaSet> {
        &self.schema
    }

    pub fn scenario(&self) -> &ScenarioManifest {
        &self.scenario
    }

    pub fn profile(&self) -> &FleetProfile {
        &self.profile
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn end_us(&self) -> u64 {
        self.profile.duration_us
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn vehicles_mut(&mut self) -> &mut [Vehicle] {
        &mut self.vehicles
    }

    pub fn vehicle(&self, id: &str) -> Option<&Vehicle> {
        self.vehicles.iter().find(|v| v.sim.vehicle_id == id)
    }

    /// Uplinked envelopes of these ids are kept for the server.
    pub fn keep_uplinked(&mut self, ids: impl IntoIterator<Item = MessageId>) {
        self.keep.extend(ids);
    }

    /// Uplink service for every vehicle at the current instant.
    pub fn service(&mut self) -> Result<(), FleetError> {
        for v in &mut self.vehicles {
            v.service(&self.keep)?;
        }
        Ok(())
    }

    /// Runs all vehicles to `end_us` in tick-sized slices, servicing uplinks
    /// and calling `hook` at every tick boundary.
    pub fn run_until(&mut self, end_us: u64, hook: &mut dyn FleetHook) -> Result<(), FleetError> {
        let tick = self.profile.tick_us;
        while self.now_us < end_us {
            let tick_end = ((self.now_us / tick + 1) * tick).min(end_us);
            if self.now_us.is_multiple_of(tick) {
                self.service()?;
            }
            for (i, v) in self.vehicles.iter_mut().enumerate() {
                let mut t = self.now_us;
                loop {
                    let wake = hook.visit(i, v, t)?;
                    let stop = wake.filter(|w| *w > t && *w < tick_end).unwrap_or(tick_end);
                    v.session.run_for(stop - t);
                    t = stop;
                    if t >= tick_end {
                        break;
                    }
                }
            }
            self.now_us = tick_end;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<FleetOutcome, FleetError> {
        let mut out = Vec::with_capacity(self.vehicles.len());
        for v in self.vehicles {
            let (log, stats) = match v.recording {
                Some(r) => {
                    let (bytes, stats) = r.close();
                    (Some(bytes), Some(stats?))
                }
                None => (None, None),
            };
            let gw = v.gateway.borrow();
            out.push(VehicleOutcome {
                log_digest: log.as_ref().map(|l| Sha256::digest(l).into()),
                log,
                log_stats: stats,
                frame_digest: v.session.digest(),
                load: v.meter.borrow().by_id.clone(),
                counters: gw.counters().clone(),
                max_stored_bytes: gw.max_stored_bytes(),
                capacity_bytes: gw.config().capacity_bytes,
                budget_bytes_per_window: gw.config().budget_bytes_per_window,
                uplink: v.uplink.clone(),
                failures: v.session.failures().to_vec(),
                sim: v.sim.clone(),
            });
        }
        Ok(FleetOutcome {
            end_us: self.now_us,
            vehicles: out,
        })
    }
}

#[derive(Debug, Clone)]
pub struct VehicleOutcome {
    pub sim: VehicleSim,
    pub log: Option<Vec<u8>>,
    pub log_digest: Option<[u8; 32]>,
    pub log_stats: Option<RecordingStats>,
    pub frame_digest: Option<[u8; 32]>,
    pub load: BTreeMap<MessageId, Load>,
    pub counters: BTreeMap<MessageId, IdCounters>,
    pub max_stored_bytes: u64,
    pub capacity_bytes: u64,
    pub budget_bytes_per_window: u64,
    pub uplink: UplinkLog,
    pub failures: Vec<ModuleFailure>,
}

impl VehicleOutcome {
    pub fn offered_frame_bytes(&self) -> u64 {
        self.load.values().map(|l| l.frame_bytes).sum()
    }
}

#[derive(Debug, Clone)]
pub struct FleetOutcome {
    pub end_us: u64,
    pub vehicles: Vec<VehicleOutcome>,
}

/// Builds `n` vehicles and runs them for `duration_us` on one virtual clock.
pub fn simulate_fleet(
    n: usize,
    scenario: &ScenarioManifest,
    profile: &FleetProfile,
    schema: Arc<SchemaSet>,
    duration_us: u64,
    seed: u64,
    options: FleetOptions,
) -> Result<Fleet, FleetError> {
    let profile = FleetProfile {
        n,
        seed,
        duration_us,
        ..profile.clone()
    };
    let mut fleet = Fleet::new(scenario, &profile, schema, options)?;
    fleet.run_until(duration_us, &mut NoHook)?;
    fleet.service()?;
    Ok(fleet)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub modules: usize,
    pub duration_us: u64,
    pub delivered: u64,
    pub log: RecordingStats,
    pub failures: Vec<ModuleFailure>,
}

/// Validates `scenario`, runs its modules on one simulated session for
/// `duration_us` and records the bus into `sink`.
pub fn run_scenario<W: Write + 'static>(
    scenario: &ScenarioManifest,
    store: &ArtifactStore,
    schema: Arc<SchemaSet>,
    duration_us: u64,
    seed: u64,
    sink: W,
) -> Result<(W, RunSummary), FleetError> {
    let report = validate_scenario(scenario, store, &schema);
    if !report.is_valid() {
        return Err(FleetError::Validation(report));
    }
    let mut session = SimSession::new(1, Arc::clone(&schema), seed);
    let recording = record(&mut session, sink).map_err(|(_, e)| e)?;
    start_scenario(&mut session, scenario, &mut Catalog::new(schema))?;
    let delivered = session.run_for(duration_us);
    let (sink, stats) = recording.close();
    Ok((
        sink,
        RunSummary {
            modules: scenario.modules.len(),
            duration_us,
            delivered,
            log: stats?,
            failures: session.failures().to_vec(),
        },
    ))
}
