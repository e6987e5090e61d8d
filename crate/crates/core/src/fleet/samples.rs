//! Ready-made schema, store, scenario, experiment and profile used by
//! `cex init`, the examples in the README and the tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use super::profile::{FleetProfile, Rate};
use crate::bus::Subscriptions;
use crate::experiment::control::{CONTROL_IDL, EMERGENCY_STOP_ID, EXPERIMENT_COMMAND_ID};
use crate::experiment::{
    ArtifactStore, Comparator, ExperimentManifest, GatewaySpec, GuardPredicate, LayerDigest, ModuleSpec,
    ScenarioManifest,
};
use crate::gateway::{FilterMode, FilterRule};
use crate::idl::{parse_schema, MessageId, SchemaSet};

pub const ODOMETRY_ID: MessageId = 10;
pub const POSE_ID: MessageId = 20;
pub const LATENCY_ID: MessageId = 30;
pub const TRAJECTORY_ID: MessageId = 40;
pub const CAMERA_ID: MessageId = 100;
pub const RADAR_ID: MessageId = 101;
pub const DIAGNOSTICS_ID: MessageId = 50;

pub const VEHICLE_IDL: &str = "\
// vehicle bus
message Pose [id = 20] {
  float64 x [id = 1];
  float64 y [id = 2];
}

message Odometry [id = 10] {
  uint64 seq [id = 1];
  float64 speed [id = 2];
  Pose pose [id = 3];
}

message PlannerLatency [id = 30] {
  uint64 seq [id = 1];
  float64 latency_ms [id = 2];
  string note [id = 3];
}

message Trajectory [id = 40] {
  uint64 seq [id = 1];
  list<Pose> points [id = 2];
}

message Diagnostics [id = 50] {
  uint64 seq [id = 1];
  bytes blob [id = 2];
}

message CameraFrame [id = 100] {
  uint64 seq [id = 1];
  bytes image [id = 2];
}

message RadarScan [id = 101] {
  uint64 seq [id = 1];
  bytes returns [id = 2];
}
";

pub fn schema_text() -> String {
    format!("{VEHICLE_IDL}\n{CONTROL_IDL}")
}

pub fn schema() -> SchemaSet {
    parse_schema(&schema_text()).expect("sample schema parses")
}

/// Everything one fleet run needs, in memory.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub schema_text: String,
    pub store: ArtifactStore,
    pub scenario: ScenarioManifest,
    pub experiment: ExperimentManifest,
    pub profile: FleetProfile,
}

pub const SCHEMA_FILE: &str = "schema.odvd";
pub const STORE_FILE: &str = "store.cfg";
pub const SCENARIO_FILE: &str = "scenario.cfg";
pub const EXPERIMENT_FILE: &str = "experiment.cfg";
pub const PROFILE_FILE: &str = "profile.cfg";

/// Middleware, device interfaces and reusable logic are shared; project
/// layers sit on top.
pub fn build_store(schema: &SchemaSet) -> ArtifactStore {
    let mut st = ArtifactStore::new(schema.source_digest());
    let mw = st.add_layer("middleware", None, 48_000_000, "middleware-1.4").expect("fresh store");
    let devices = st.add_layer("devices", Some(mw), 12_000_000, "devices-2.0").expect("parent exists");
    let logic = st.add_layer("logic", Some(devices), 6_000_000, "logic-0.9").expect("parent exists");
    let perception = st.add_layer("perception", Some(logic), 3_000_000, "perception-3.2").expect("parent exists");
    for (name, size, content) in [
        ("planner-v1", 800_000, "planner-1.0.0"),
        ("planner-v2", 820_000, "planner-2.0.0"),
        ("latency-probe", 90_000, "probe-0.1.0"),
    ] {
        st.add_layer(name, Some(perception), size, content).expect("parent exists");
    }
    st
}

fn module(name: &str, layer: LayerDigest, version: &str, hz: u32, subs: Subscriptions, params: &[(&str, String)]) -> ModuleSpec {
    ModuleSpec {
        name: name.into(),
        layer,
        version: version.into(),
        frequency_hz: hz,
        priority: 0,
        subscriptions: subs,
        params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<BTreeMap<_, _>>(),
        experimental: false,
        line: 0,
    }
}

fn sensor(name: &str, layer: LayerDigest, hz: u32, msg: MessageId, bytes: usize) -> ModuleSpec {
    module(
        name,
        layer,
        "1.0.0",
        hz,
        Subscriptions::none(),
        &[("kind", "sensor".into()), ("msg", msg.to_string()), ("bytes", bytes.to_string())],
    )
}

/// A scenario of `modules` modules (at least 4): odometry, camera, radar and
/// planner, then a mix of sinks, pose publishers and idle modules.
pub fn scenario(schema: &SchemaSet, modules: usize, layers_for: &ArtifactStore) -> ScenarioManifest {
    let l = |name: &str| layers_for.by_name(name).expect("sample layer").digest;
    let mut ms = vec![
        sensor("odometry", l("devices"), 50, ODOMETRY_ID, 0),
        sensor("camera", l("devices"), 10, CAMERA_ID, 20_000),
        sensor("radar", l("devices"), 20, RADAR_ID, 4_000),
        module(
            "planner",
            l("planner-v1"),
            "1.0.0",
            10,
            Subscriptions::from_ids([ODOMETRY_ID]),
            &[("kind", "sensor".into()), ("msg", TRAJECTORY_ID.to_string())],
        ),
    ];
    for i in ms.len()..modules {
        ms.push(match i % 3 {
            0 => module(
                &format!("monitor-{i:03}"),
                l("logic"),
                "0.3.1",
                5,
                Subscriptions::from_ids([ODOMETRY_ID, TRAJECTORY_ID]),
                &[("kind", "sink".into())],
            ),
            1 => sensor(&format!("localizer-{i:03}"), l("logic"), 10, POSE_ID, 0),
            _ => module(
                &format!("service-{i:03}"),
                l("devices"),
                "1.1.0",
                1,
                Subscriptions::none(),
                &[("kind", "idle".into())],
            ),
        });
    }
    ms.truncate(modules);
    ScenarioManifest {
        name: "demo".into(),
        schema_digest: schema.source_digest(),
        modules: ms,
        gateway: Some(GatewaySpec {
            capacity_bytes: 8_000_000,
            budget_bytes_per_window: 1_000_000,
            window_us: 1_000_000,
            server: Some("127.0.0.1:7700".into()),
            rules: vec![
                FilterRule {
                    message_id: ODOMETRY_ID,
                    mode: FilterMode::Sample(10),
                    priority: 2,
                },
                FilterRule {
                    message_id: RADAR_ID,
                    mode: FilterMode::Sample(20),
                    priority: 3,
                },
                FilterRule {
                    message_id: CAMERA_ID,
                    mode: FilterMode::Drop,
                    priority: 4,
                },
            ],
            allow: BTreeSet::from([EXPERIMENT_COMMAND_ID, EMERGENCY_STOP_ID]),
        }),
    }
}

/// Replaces the planner and adds a latency probe; the guard trips when the
/// probe reports more than 50 ms.
pub fn experiment(store: &ArtifactStore, violate_at_us: Option<u64>) -> ExperimentManifest {
    let l = |name: &str| store.by_name(name).expect("sample layer").digest;
    let mut probe_params = vec![
        ("kind", "metric".to_string()),
        ("msg", LATENCY_ID.to_string()),
        ("field", "latency_ms".to_string()),
        ("value", "12".to_string()),
        ("jitter", "3".to_string()),
    ];
    if let Some(t) = violate_at_us {
        probe_params.push(("violate_at_us", t.to_string()));
        probe_params.push(("violate_value", "80".to_string()));
    }
    let mut planner = module(
        "planner",
        l("planner-v2"),
        "2.0.0",
        20,
        Subscriptions::from_ids([ODOMETRY_ID]),
        &[("kind", "sensor".into()), ("msg", TRAJECTORY_ID.to_string())],
    );
    planner.experimental = true;
    let mut probe = module("latency-probe", l("latency-probe"), "0.1.0", 10, Subscriptions::none(), &probe_params);
    probe.experimental = true;
    ExperimentManifest {
        id: "exp-1".into(),
        base: "demo".into(),
        fraction: 0.5,
        seed: 42,
        duration_us: 20_000_000,
        delta: vec![planner, probe],
        metrics: BTreeSet::from([LATENCY_ID]),
        guards: vec![GuardPredicate {
            message_id: LATENCY_ID,
            field_path: "latency_ms".into(),
            op: Comparator::Gt,
            threshold: 50.0,
            sustain_us: 0,
        }],
    }
}

pub fn profile() -> FleetProfile {
    FleetProfile {
        name: "desk".into(),
        n: 10,
        seed: 42,
        duration_us: 30_000_000,
        tick_us: 100_000,
        prefix: "veh-".into(),
        downlink_bytes_per_s: Some(20_000_000),
        rates: Vec::new(),
        vehicles: BTreeMap::new(),
    }
}

/// Camera and radar load totalling 300 MB/s of payload.
pub fn heavy_rates() -> Vec<Rate> {
    vec![
        Rate {
            message_id: CAMERA_ID,
            frequency_hz: 30,
            payload_bytes: 8_000_000,
        },
        Rate {
            message_id: RADAR_ID,
            frequency_hz: 40,
            payload_bytes: 1_500_000,
        },
    ]
}

impl SampleSet {
    pub fn new(modules: usize) -> SampleSet {
        let schema = schema();
        let store = build_store(&schema);
        let scenario = scenario(&schema, modules, &store);
        let experiment = experiment(&store, None);
        SampleSet {
            schema_text: schema_text(),
            store,
            scenario,
            experiment,
            profile: profile(),
        }
    }

    pub fn schema(&self) -> SchemaSet {
        parse_schema(&self.schema_text).expect("sample schema parses")
    }

    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SCHEMA_FILE), &self.schema_text)?;
        fs::write(dir.join(STORE_FILE), self.store.to_string())?;
        fs::write(dir.join(SCENARIO_FILE), self.scenario.to_string())?;
        fs::write(dir.join(EXPERIMENT_FILE), self.experiment.to_string())?;
        fs::write(dir.join(PROFILE_FILE), self.profile.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{validate_experiment, validate_scenario};

    #[test]
    fn samples_validate_and_roundtrip() {
        let s = SampleSet::new(30);
        let schema = s.schema();
        let r = validate_scenario(&s.scenario, &s.store, &schema);
        assert!(r.is_valid(), "{r}");
        let r = validate_experiment(&s.experiment, Some(&s.scenario), &s.store, &schema);
        assert!(r.is_valid(), "{r}");
        assert_eq!(ScenarioManifest::parse(&s.scenario.to_string()).unwrap().modules.len(), 30);
        let e = ExperimentManifest::parse(&s.experiment.to_string()).unwrap();
        assert_eq!(e.delta.len(), 2);
        assert_eq!(ArtifactStore::parse(&s.store.to_string()).unwrap(), s.store);
        assert_eq!(FleetProfile::parse(&s.profile.to_string()).unwrap(), s.profile);
        assert_eq!(heavy_rates().iter().map(|r| u64::from(r.frequency_hz) * r.payload_bytes as u64).sum::<u64>(), 300_000_000);
        let stack = s.store.stack(&s.store.by_name("planner-v2").unwrap().digest).unwrap();
        assert_eq!(stack.len(), 5);
    }
}
