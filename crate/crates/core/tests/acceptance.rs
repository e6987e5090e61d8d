//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its PASS/FAIL line; exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cex_core::bus::{SimSession, Subscriptions};
use cex_core::codec::{decode_message, encode_envelope, encode_message, Envelope, Record, Value};
use cex_core::experiment::runtime::delta_node_id;
use cex_core::experiment::{
    assign_cohort, deploy, start_scenario, validate_experiment, validate_scenario, ArtifactStore, CompletionStatus,
    DownlinkState, ExperimentManifest, Finding, GatewaySpec, ScenarioManifest, VehicleCache,
};
use cex_core::fleet::samples::{self, SampleSet, LATENCY_ID};
use cex_core::fleet::{
    ce_iteration, run_scenario, simulate_fleet, Catalog, CeOptions, Fleet, FleetError, FleetOptions, FleetProfile,
    VehicleOverrides,
};
use cex_core::gateway::{FilterMode, FilterRule, FilterTable, Gateway, GatewayConfig};
use cex_core::idl::{FieldDef, FieldType, MessageId, MessageSchema, SchemaSet};
use cex_core::recorder::{read_all, record, replay, LogEntry, Speed};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Random schemas and records

const SCALARS: [FieldType; 8] = [
    FieldType::Bool,
    FieldType::Int32,
    FieldType::Int64,
    FieldType::Uint32,
    FieldType::Uint64,
    FieldType::Float64,
    FieldType::String,
    FieldType::Bytes,
];

fn random_type(rng: &mut ChaCha8Rng, earlier: &[MessageId]) -> FieldType {
    let base = if !earlier.is_empty() && rng.gen_bool(0.25) {
        FieldType::Message(*earlier.choose(rng).expect("non-empty"))
    } else {
        SCALARS.choose(rng).expect("non-empty").clone()
    };
    if rng.gen_bool(0.2) {
        FieldType::List(Box::new(base))
    } else {
        base
    }
}

fn fresh_id(rng: &mut ChaCha8Rng, used: &mut BTreeSet<u32>, hi: u32) -> u32 {
    loop {
        // small ids are common on the wire, large ones exercise long varint keys
        let id = if rng.gen_bool(0.7) { rng.gen_range(1..64) } else { rng.gen_range(1..hi) };
        if used.insert(id) {
            return id;
        }
    }
}

/// Messages in dependency order: each may only contain messages listed before it.
fn random_messages(rng: &mut ChaCha8Rng, used_ids: &mut BTreeSet<u32>) -> Vec<MessageSchema> {
    let n = rng.gen_range(1..=5);
    let mut out: Vec<MessageSchema> = Vec::new();
    for k in 0..n {
        let earlier: Vec<MessageId> = out.iter().map(|m| m.id).collect();
        let id = fresh_id(rng, used_ids, 1 << 31);
        let mut field_ids = BTreeSet::new();
        let fields = (0..rng.gen_range(0..=7))
            .map(|j| FieldDef {
                name: format!("f{j}"),
                id: fresh_id(rng, &mut field_ids, 1 << 29),
                ty: random_type(rng, &earlier),
            })
            .collect();
        out.push(MessageSchema {
            name: format!("M{k}"),
            id,
            fields,
        });
    }
    out
}

fn random_value(rng: &mut ChaCha8Rng, set: &SchemaSet, ty: &FieldType, depth: usize) -> Value {
    match ty {
        FieldType::Bool => Value::Bool(rng.gen()),
        FieldType::Int32 => Value::Int32(rng.gen()),
        FieldType::Int64 => Value::Int64(rng.gen()),
        FieldType::Uint32 => Value::Uint32(rng.gen()),
        FieldType::Uint64 => Value::Uint64(rng.gen()),
        // any bit pattern, NaNs and signed zeros included
        FieldType::Float64 => Value::Float64(f64::from_bits(rng.gen())),
        FieldType::String => {
            let len = rng.gen_range(0..12);
            Value::String((0..len).map(|_| rng.gen::<char>()).collect())
        }
        FieldType::Bytes => {
            let len = rng.gen_range(0..40);
            Value::Bytes((0..len).map(|_| rng.gen()).collect())
        }
        FieldType::Message(id) => Value::Message(random_record(rng, set, *id, depth + 1)),
        FieldType::List(elem) => {
            let len = rng.gen_range(0..4);
            Value::List((0..len).map(|_| random_value(rng, set, elem, depth + 1)).collect())
        }
    }
}

fn random_record(rng: &mut ChaCha8Rng, set: &SchemaSet, id: MessageId, depth: usize) -> Record {
    let schema = set.get(id).expect("known message");
    let mut r = Record::new();
    for f in &schema.fields {
        r.insert(f.id, random_value(rng, set, &f.ty, depth));
    }
    r
}

/// What a reader holding only `base` should see of `r`.
fn project(r: &Record, base: &SchemaSet, id: MessageId) -> Record {
    let schema = base.get(id).expect("base message");
    let mut out = Record::new();
    for f in &schema.fields {
        let v = r.get(f.id).expect("extended record carries every base field");
        out.insert(f.id, project_value(v, base, &f.ty));
    }
    out
}

fn project_value(v: &Value, base: &SchemaSet, ty: &FieldType) -> Value {
    match (ty, v) {
        (FieldType::Message(id), Value::Message(r)) => Value::Message(project(r, base, *id)),
        (FieldType::List(elem), Value::List(items)) => {
            Value::List(items.iter().map(|i| project_value(i, base, elem)).collect())
        }
        _ => v.clone(),
    }
}

// ---------------------------------------------------------------------------
// Criteria

fn c1_codec_round_trip() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    let mut bytes = 0usize;
    for _ in 0..10_000 {
        let set = SchemaSet::from_messages(random_messages(&mut rng, &mut BTreeSet::new())).map_err(|e| e.to_string())?;
        let ids: Vec<MessageId> = set.messages().map(|m| m.id).collect();
        let id = *ids.choose(&mut rng).expect("at least one message");
        let schema = set.get(id).expect("chosen from set");
        let r = random_record(&mut rng, &set, id, 0);
        let enc = encode_message(&set, schema, &r).map_err(|e| e.to_string())?;
        bytes += enc.len();
        if decode_message(&set, schema, &enc).ok().as_ref() != Some(&r) {
            failures += 1;
        }
    }
    let el = t.elapsed();
    check(failures == 0, || format!("{failures} of 10000 pairs did not round-trip"))?;
    check(el < Duration::from_secs(30), || format!("took {el:?}"))?;
    Ok(format!("10000 pairs, 0 failures, {bytes} payload bytes, {:.2} s", el.as_secs_f64()))
}

fn c2_forward_compat() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    let mut added_fields = 0;
    for _ in 0..1_000 {
        let mut used = BTreeSet::new();
        let base_msgs = random_messages(&mut rng, &mut used);
        // new leaf messages the extension may embed
        let mut extra_msgs = Vec::new();
        for k in 0..rng.gen_range(0..=2) {
            let mut fids = BTreeSet::new();
            extra_msgs.push(MessageSchema {
                name: format!("X{k}"),
                id: fresh_id(&mut rng, &mut used, 1 << 31),
                fields: (0..rng.gen_range(1..=3))
                    .map(|j| FieldDef {
                        name: format!("x{j}"),
                        id: fresh_id(&mut rng, &mut fids, 1 << 29),
                        ty: SCALARS.choose(&mut rng).expect("non-empty").clone(),
                    })
                    .collect(),
            });
        }
        let extra_ids: Vec<MessageId> = extra_msgs.iter().map(|m| m.id).collect();
        let mut ext_msgs = base_msgs.clone();
        for m in &mut ext_msgs {
            let mut fids: BTreeSet<u32> = m.fields.iter().map(|f| f.id).collect();
            for j in 0..rng.gen_range(1..=3) {
                m.fields.push(FieldDef {
                    name: format!("added{j}"),
                    id: fresh_id(&mut rng, &mut fids, 1 << 29),
                    ty: random_type(&mut rng, &extra_ids),
                });
                added_fields += 1;
            }
        }
        ext_msgs.extend(extra_msgs);
        let base = SchemaSet::from_messages(base_msgs).map_err(|e| e.to_string())?;
        let ext = SchemaSet::from_messages(ext_msgs).map_err(|e| e.to_string())?;
        for m in base.messages() {
            let r = random_record(&mut rng, &ext, m.id, 0);
            let enc = encode_message(&ext, ext.get(m.id).expect("same id"), &r).map_err(|e| e.to_string())?;
            let want = project(&r, &base, m.id);
            if decode_message(&base, m, &enc).ok().as_ref() != Some(&want) {
                failures += 1;
            }
        }
    }
    check(failures == 0, || format!("{failures} extensions failed to decode to the projection"))?;
    Ok(format!("1000 extensions ({added_fields} added fields), 0 failures"))
}

fn rel_times(es: &[LogEntry]) -> Vec<u64> {
    es.iter().map(|e| e.received_ts_us - es[0].received_ts_us).collect()
}

fn c3_replay_fidelity() -> Outcome {
    let t = Instant::now();
    let s = SampleSet::new(30);
    let schema = Arc::new(s.schema());
    let (log, summary) =
        run_scenario(&s.scenario, &s.store, Arc::clone(&schema), 10_000_000, 3, Vec::new()).map_err(|e| e.to_string())?;
    let mut session = SimSession::new(1, Arc::clone(&schema), 0);
    let rec = record(&mut session, Vec::new()).map_err(|(_, e)| e.to_string())?;
    let rep = replay(&log, &mut session, Speed::REAL_TIME).map_err(|e| e.to_string())?;
    let (log2, _) = rec.close();
    let (_, a) = read_all(&log).map_err(|e| e.to_string())?;
    let (_, b) = read_all(&log2).map_err(|e| e.to_string())?;
    check(!a.is_empty() && a.len() == b.len(), || format!("{} entries recorded, {} re-recorded", a.len(), b.len()))?;
    let same_payloads = a.iter().zip(&b).all(|(x, y)| x.envelope.message_id == y.envelope.message_id && x.envelope.payload == y.envelope.payload);
    check(same_payloads, || "payload sequences differ".into())?;
    check(rel_times(&a) == rel_times(&b), || "relative timestamps differ".into())?;
    let el = t.elapsed();
    check(el < Duration::from_secs(60), || format!("took {el:?}"))?;
    Ok(format!(
        "{} modules, {} entries replayed over {} us, payloads and offsets identical, {:.2} s",
        summary.modules,
        rep.count,
        rep.duration_us,
        el.as_secs_f64()
    ))
}

fn random_scenario(rng: &mut ChaCha8Rng) -> (SampleSet, ScenarioManifest) {
    let s = SampleSet::new(rng.gen_range(4..=60));
    let mut scenario = s.scenario.clone();
    for m in &mut scenario.modules {
        m.frequency_hz = rng.gen_range(1..=200);
        if rng.gen_bool(0.2) {
            // metric publishers draw jitter from the session RNG
            m.params.clear();
            m.params.insert("kind".into(), "metric".into());
            m.params.insert("msg".into(), LATENCY_ID.to_string());
            m.params.insert("value".into(), rng.gen_range(1..100).to_string());
            m.params.insert("jitter".into(), rng.gen_range(1..10).to_string());
            m.subscriptions = Subscriptions::none();
        }
    }
    (s, scenario)
}

fn frame_digest(schema: &Arc<SchemaSet>, scenario: &ScenarioManifest, seed: u64, duration_us: u64) -> Result<[u8; 32], String> {
    let mut session = SimSession::new(1, Arc::clone(schema), seed);
    session.enable_digest();
    start_scenario(&mut session, scenario, &mut Catalog::new(Arc::clone(schema))).map_err(|e| e.to_string())?;
    session.run_for(duration_us);
    session.digest().ok_or_else(|| "digest not enabled".to_string())
}

fn c4_scheduler_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut distinct = BTreeSet::new();
    for _ in 0..20 {
        let (s, scenario) = random_scenario(&mut rng);
        let schema = Arc::new(s.schema());
        let report = validate_scenario(&scenario, &s.store, &schema);
        check(report.is_valid(), || format!("random scenario invalid: {report}"))?;
        let seed = rng.gen();
        let a = frame_digest(&schema, &scenario, seed, 2_000_000)?;
        let b = frame_digest(&schema, &scenario, seed, 2_000_000)?;
        if a != b {
            mismatches += 1;
        }
        distinct.insert(a);
    }
    check(mismatches == 0, || format!("{mismatches} of 20 scenarios diverged"))?;
    Ok(format!("20 scenarios, 0 mismatches, {} distinct digests", distinct.len()))
}

fn c5_bandwidth_bound() -> Outcome {
    let t = Instant::now();
    let s = SampleSet::new(6);
    let budget = 10_000_000;
    let capacity = 64 * 1024 * 1024;
    let mut scenario = s.scenario.clone();
    // a single idle module so the profile is the whole offered load
    scenario.modules.retain(|m| m.param("kind") == Some("idle"));
    scenario.gateway = Some(GatewaySpec {
        capacity_bytes: capacity,
        budget_bytes_per_window: budget,
        window_us: 1_000_000,
        server: None,
        rules: vec![
            FilterRule {
                message_id: samples::CAMERA_ID,
                mode: FilterMode::Relay,
                priority: 1,
            },
            FilterRule {
                message_id: samples::RADAR_ID,
                mode: FilterMode::Relay,
                priority: 2,
            },
        ],
        allow: BTreeSet::new(),
    });
    let profile = FleetProfile {
        n: 1,
        rates: samples::heavy_rates(),
        ..samples::profile()
    };
    let duration = 60_000_000;
    let fleet = simulate_fleet(1, &scenario, &profile, Arc::new(s.schema()), duration, 5, FleetOptions::default())
        .map_err(|e| e.to_string())?;
    let out = fleet.finish().map_err(|e| e.to_string())?;
    let v = &out.vehicles[0];
    let offered: u64 = samples::heavy_rates().iter().map(|r| v.load[&r.message_id].payload_bytes).sum();
    check(offered == profile.nominal_bytes_per_s() * 60, || format!("offered {offered} payload bytes: {:?}", v.load))?;
    check(v.failures.is_empty(), || format!("module failures: {:?}", v.failures))?;
    check(v.uplink.max_batch_bytes <= budget, || format!("a window uplinked {} bytes", v.uplink.max_batch_bytes))?;
    check(v.max_stored_bytes <= capacity, || format!("queue held {} bytes", v.max_stored_bytes))?;
    Ok(format!(
        "offered {:.1} MB/s for 60 s, {} windows, max window {} B <= {budget}, max queue {} B <= {capacity}, {:.1} s",
        offered as f64 / 60e6,
        v.uplink.batches,
        v.uplink.max_batch_bytes,
        v.max_stored_bytes,
        t.elapsed().as_secs_f64()
    ))
}

fn c6_store_and_forward() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut total = 0u64;
    for schedule in 0..100 {
        let ids: Vec<MessageId> = (1..=rng.gen_range(1..=5)).collect();
        let rules: Vec<FilterRule> = ids
            .iter()
            .map(|&id| FilterRule {
                message_id: id,
                mode: FilterMode::Relay,
                priority: rng.gen_range(0..4),
            })
            .collect();
        let prio: BTreeMap<MessageId, u8> = rules.iter().map(|r| (r.message_id, r.priority)).collect();
        let window_us = 100_000;
        let budget = rng.gen_range(300..3_000);
        let steps = rng.gen_range(50..300);
        let mut offers = Vec::new();
        for step in 0..steps {
            for _ in 0..rng.gen_range(0..4) {
                let id = *ids.choose(&mut rng).expect("non-empty");
                let payload: Vec<u8> = (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect();
                offers.push((step, id, payload));
            }
        }
        let frames: Vec<Vec<u8>> = offers
            .iter()
            .enumerate()
            .map(|(i, (step, id, payload))| {
                encode_envelope(&Envelope {
                    message_id: *id,
                    sender_node: i as u32,
                    sent_ts_us: *step as u64 * window_us,
                    payload: payload.clone(),
                })
            })
            .collect();
        let capacity: u64 = frames.iter().map(|f| f.len() as u64).sum::<u64>().max(budget);
        let mut gw = Gateway::new(GatewayConfig {
            node_id: 1,
            rules: FilterTable::new(rules).map_err(|e| e.to_string())?,
            capacity_bytes: capacity,
            budget_bytes_per_window: budget,
            window_us,
            allow_list: BTreeSet::new(),
            server: None,
        })
        .map_err(|e| e.to_string())?;
        // reference model: (priority, arrival) -> frame index
        let mut model: BTreeMap<(u8, usize), usize> = BTreeMap::new();
        let mut uplinked: Vec<usize> = Vec::new();
        let mut next = 0;
        let mut step = 0u64;
        while next < offers.len() || !model.is_empty() {
            if rng.gen_bool(0.3) {
                gw.set_online(rng.gen_bool(0.5));
            }
            let now = step * window_us;
            while next < offers.len() && offers[next].0 as u64 <= step {
                let env = cex_core::codec::decode_envelope(&frames[next]).map_err(|e| e.to_string())?;
                let rep = gw.offer_frame(&env, &frames[next], now).map_err(|e| e.to_string())?;
                check(rep.evicted.is_empty() && rep.dropped.is_none(), || "evicted below capacity".into())?;
                model.insert((prio[&env.message_id], next), next);
                next += 1;
            }
            let online = gw.connectivity().online;
            let batch = gw.drain(now);
            let mut want = Vec::new();
            if online {
                let mut used = 0;
                while let Some((&k, &i)) = model.iter().next() {
                    let size = frames[i].len() as u64;
                    if used + size > budget {
                        break;
                    }
                    used += size;
                    want.push(i);
                    model.remove(&k);
                }
            }
            let got: Vec<usize> = batch
                .frames
                .iter()
                .map(|f| {
                    let e = cex_core::codec::decode_envelope(&f.frame).expect("queued frames are valid");
                    e.sender_node as usize
                })
                .collect();
            check(got == want, || format!("schedule {schedule} step {step}: drained {got:?}, expected {want:?}"))?;
            uplinked.extend(got);
            step += 1;
            if step > 100_000 {
                return Err(format!("schedule {schedule} never drained"));
            }
        }
        let mut seen = uplinked.clone();
        seen.sort_unstable();
        check(seen == (0..offers.len()).collect::<Vec<_>>(), || format!("schedule {schedule}: not exactly once"))?;
        total += offers.len() as u64;
    }
    Ok(format!("100 schedules, {total} envelopes each uplinked exactly once in (priority, FIFO) order"))
}

fn c7_incremental_deploy() -> Outcome {
    let mut store = ArtifactStore::default();
    let mut parent = None;
    let mut layers = Vec::new();
    for (i, size) in [50_000_000u64, 12_000_000, 4_000_000, 1_500_000, 300_000].iter().enumerate() {
        let d = store
            .add_layer(&format!("l{i}"), parent, *size, &format!("content-{i}"))
            .map_err(|e| e.to_string())?;
        layers.push(d);
        parent = Some(d);
    }
    let top = *layers.last().expect("five layers");
    let mut cache = VehicleCache::default();
    let first = deploy(&[top], &store, &mut cache, DownlinkState::UNLIMITED).map_err(|e| e.to_string())?;
    check(first.layers_sent == 5, || format!("fresh vehicle got {} layers", first.layers_sent))?;
    let new_top = store
        .add_layer("l4-changed", Some(layers[3]), 310_000, "content-4b")
        .map_err(|e| e.to_string())?;
    let changed = deploy(&[new_top], &store, &mut cache, DownlinkState::UNLIMITED).map_err(|e| e.to_string())?;
    check(changed.layers_sent == 1 && changed.bytes_sent == 310_000, || {
        format!("changed top moved {} layers, {} bytes", changed.layers_sent, changed.bytes_sent)
    })?;
    let again = deploy(&[new_top], &store, &mut cache, DownlinkState::UNLIMITED).map_err(|e| e.to_string())?;
    check(again.layers_sent == 0 && again.bytes_sent == 0, || format!("redeploy moved {} bytes", again.bytes_sent))?;
    Ok(format!(
        "fresh: 5 layers / {} B; changed top: 1 layer / {} B; unchanged: 0 B",
        first.bytes_sent, changed.bytes_sent
    ))
}

fn c8_cohort() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..1_000 {
        let n = rng.gen_range(0..200);
        let roster: Vec<String> = (0..n).map(|i| format!("v{}-{}", i, rng.gen::<u16>())).collect();
        let fraction: f64 = rng.gen();
        let seed: u64 = rng.gen();
        let id = format!("exp-{}", rng.gen::<u32>());
        let c = assign_cohort(&roster, fraction, &id, seed);
        let mut shuffled = roster.clone();
        shuffled.shuffle(&mut rng);
        check(assign_cohort(&shuffled, fraction, &id, seed) == c, || format!("trial {trial}: order changed the cohort"))?;
        check(assign_cohort(&roster, fraction, &id, seed) == c, || format!("trial {trial}: not deterministic"))?;
        let bigger = fraction + (1.0 - fraction) * rng.gen::<f64>();
        check(c.is_subset(&assign_cohort(&roster, bigger, &id, seed)), || {
            format!("trial {trial}: raising {fraction} to {bigger} dropped vehicles")
        })?;
    }
    let roster: Vec<String> = (0..10_000).map(|i| format!("veh-{i:05}")).collect();
    let share = assign_cohort(&roster, 0.5, "exp-uniform", 7).len() as f64 / 10_000.0;
    check((share - 0.5).abs() <= 0.03, || format!("cohort share {share}"))?;
    Ok(format!("1000 triples hold order-independence, monotonicity, determinism; share at 0.5 = {share:.4}"))
}

fn guard_fleet(s: &SampleSet, tick_us: u64, estop: Option<u64>) -> Result<Fleet, FleetError> {
    let mut profile = FleetProfile {
        n: 1,
        duration_us: 6_000_000,
        tick_us,
        ..s.profile.clone()
    };
    if let Some(at) = estop {
        profile.vehicles.insert(
            "veh-00".into(),
            VehicleOverrides {
                estops_us: vec![at],
                ..VehicleOverrides::default()
            },
        );
    }
    let mut f = Fleet::new(&s.scenario, &profile, Arc::new(s.schema()), FleetOptions {
        record: true,
        digest: false,
    })?;
    f.preinstall(&s.store)?;
    Ok(f)
}

fn is_experimental(node: u32) -> bool {
    (delta_node_id(0)..delta_node_id(10_000)).contains(&node)
}

fn random_guarded(rng: &mut ChaCha8Rng, s: &SampleSet, violate_at: Option<u64>) -> (ExperimentManifest, u64) {
    let mut exp = ExperimentManifest {
        fraction: 1.0,
        seed: rng.gen(),
        ..samples::experiment(&s.store, violate_at)
    };
    for m in &mut exp.delta {
        m.frequency_hz = rng.gen_range(2..=100);
    }
    let min_period = exp.delta.iter().map(|m| 1_000_000 / u64::from(m.frequency_hz)).min().expect("delta modules");
    (exp, min_period)
}

fn c9_guard_latency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = SampleSet::new(12);
    let schema = s.schema();
    let latency = schema.get(LATENCY_ID).expect("sample schema");
    let mut worst_lag = 0u64;
    for trial in 0..50 {
        let violate_at = rng.gen_range(300_000..4_000_000);
        let (exp, period) = random_guarded(&mut rng, &s, Some(violate_at));
        let tick = [10_000, 50_000, 100_000][rng.gen_range(0..3)];
        let mut f = guard_fleet(&s, tick, None).map_err(|e| e.to_string())?;
        let r = ce_iteration(&exp, &mut f, &s.store, CeOptions::default()).map_err(|e| e.to_string())?;
        check(r.vehicles[0].status == Some(CompletionStatus::GuardStopped), || {
            format!("trial {trial}: status {:?}", r.vehicles[0].status)
        })?;
        let out = f.finish().map_err(|e| e.to_string())?;
        let (_, entries) = read_all(out.vehicles[0].log.as_ref().expect("recorded")).map_err(|e| e.to_string())?;
        // T: first violating metric as the log shows it
        let t = entries
            .iter()
            .filter(|e| e.envelope.message_id == LATENCY_ID && is_experimental(e.envelope.sender_node))
            .find(|e| {
                decode_message(&schema, latency, &e.envelope.payload)
                    .ok()
                    .and_then(|r| r.get(2).and_then(Value::as_f64))
                    .is_some_and(|x| x > 50.0)
            })
            .map(|e| e.envelope.sent_ts_us)
            .ok_or_else(|| format!("trial {trial}: no violation in the log"))?;
        let last = entries
            .iter()
            .filter(|e| is_experimental(e.envelope.sender_node))
            .map(|e| e.envelope.sent_ts_us)
            .max()
            .expect("violation is experimental");
        check(last <= t + period, || format!("trial {trial}: T={t}, last experimental at {last}, period {period}"))?;
        worst_lag = worst_lag.max(last - t);
    }
    let mut worst_estop_lag = 0u64;
    for trial in 0..50 {
        let (exp, period) = random_guarded(&mut rng, &s, None);
        let at = rng.gen_range(300_000..4_000_000);
        let tick = [10_000, 50_000, 100_000][rng.gen_range(0..3)];
        let mut f = guard_fleet(&s, tick, Some(at)).map_err(|e| e.to_string())?;
        let r = ce_iteration(&exp, &mut f, &s.store, CeOptions::default()).map_err(|e| e.to_string())?;
        check(r.vehicles[0].status == Some(CompletionStatus::EmergencyStopped), || {
            format!("estop trial {trial}: status {:?}", r.vehicles[0].status)
        })?;
        let out = f.finish().map_err(|e| e.to_string())?;
        let (_, entries) = read_all(out.vehicles[0].log.as_ref().expect("recorded")).map_err(|e| e.to_string())?;
        let last = entries
            .iter()
            .filter(|e| is_experimental(e.envelope.sender_node))
            .map(|e| e.envelope.sent_ts_us)
            .max()
            .ok_or_else(|| format!("estop trial {trial}: experiment never ran"))?;
        check(last <= at + period, || format!("estop trial {trial}: stop at {at}, last experimental at {last}"))?;
        worst_estop_lag = worst_estop_lag.max(last.saturating_sub(at));
    }
    Ok(format!(
        "50 guard trials, worst lag {worst_lag} us; 50 emergency stops, worst lag {worst_estop_lag} us; all within one period"
    ))
}

fn c10_full_iteration() -> Outcome {
    let t = Instant::now();
    let s = SampleSet::new(30);
    check(s.experiment.metrics.len() == 1, || "one metric topic".into())?;
    let profile = FleetProfile {
        n: 10,
        duration_us: 30_000_000,
        ..s.profile.clone()
    };
    let mut f = Fleet::new(&s.scenario, &profile, Arc::new(s.schema()), FleetOptions {
        record: true,
        digest: false,
    })
    .map_err(|e| e.to_string())?;
    let exp = ExperimentManifest {
        fraction: 0.5,
        ..s.experiment.clone()
    };
    let r = ce_iteration(&exp, &mut f, &s.store, CeOptions::default()).map_err(|e| e.to_string())?;
    let out = f.finish().map_err(|e| e.to_string())?;
    // oracle: metric envelopes the delta modules put on the cohort buses
    let mut published = 0u64;
    for v in &out.vehicles {
        let (_, es) = read_all(v.log.as_ref().expect("recorded")).map_err(|e| e.to_string())?;
        published += es
            .iter()
            .filter(|e| e.envelope.message_id == LATENCY_ID && is_experimental(e.envelope.sender_node))
            .count() as u64;
    }
    let aggregated = r.summary.total_envelopes();
    check(r.summary.cohort_size > 0, || "empty cohort".into())?;
    check(aggregated > 0 && aggregated == r.relayed_metrics, || {
        format!("aggregate {aggregated} != relayed {}", r.relayed_metrics)
    })?;
    check(r.conservation_holds(), || "enqueued - evicted - residual differs from relayed".into())?;
    check(aggregated == published, || format!("aggregate {aggregated}, logs show {published} published"))?;
    check(r.budget_respected(), || "a window exceeded its budget".into())?;
    let el = t.elapsed();
    check(el < Duration::from_secs(300), || format!("took {el:?}"))?;
    Ok(format!(
        "cohort {}/10, aggregated == relayed == logged == {aggregated}, wall {:.2} s",
        r.summary.cohort_size,
        el.as_secs_f64()
    ))
}

fn c11_scale_bound() -> Outcome {
    let s = SampleSet::new(200);
    let schema = Arc::new(s.schema());
    let report = validate_scenario(&s.scenario, &s.store, &schema);
    check(report.is_valid(), || format!("200 modules: {report}"))?;
    let (_, summary) =
        run_scenario(&s.scenario, &s.store, Arc::clone(&schema), 5_000_000, 11, std::io::sink()).map_err(|e| e.to_string())?;
    check(summary.failures.is_empty(), || format!("failures: {:?}", summary.failures))?;
    let over = SampleSet::new(201);
    let report = validate_scenario(&over.scenario, &over.store, &schema);
    check(report.has(|f| matches!(f, Finding::ModuleCountExceeded { count: 201 })), || {
        format!("201 modules not rejected: {report}")
    })?;
    // the base plus a delta may not exceed the bound either
    let exp = validate_experiment(&s.experiment, Some(&s.scenario), &s.store, &schema);
    Ok(format!(
        "200 modules valid, ran 5 s with {} log entries and 0 failures; 201 rejected; 200 + delta {}",
        summary.log.entries,
        if exp.is_valid() { "accepted" } else { "rejected" }
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("codec round-trip", c1_codec_round_trip),
        ("forward compatibility", c2_forward_compat),
        ("replay fidelity", c3_replay_fidelity),
        ("scheduler determinism", c4_scheduler_determinism),
        ("bandwidth bound", c5_bandwidth_bound),
        ("store-and-forward losslessness", c6_store_and_forward),
        ("incremental deploy", c7_incremental_deploy),
        ("cohort properties", c8_cohort),
        ("guard latency", c9_guard_latency),
        ("full CE iteration", c10_full_iteration),
        ("scale validation bound", c11_scale_bound),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
