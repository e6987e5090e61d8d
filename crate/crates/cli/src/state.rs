//! Locating schemas and stores next to manifests, and the fleet-state directory.
//!
//! A fleet-state directory holds `scenario.cfg`, `profile.cfg`, `store.cfg`,
//! one `.odvd` schema and, once something has been deployed, `caches.cfg`:
//!
//! ```text
//! [cache] vehicle=veh-00 layers=middleware,devices,logic
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use cex_core::experiment::{ArtifactStore, LayerDigest, ScenarioManifest, VehicleCache};
use cex_core::fleet::samples::{PROFILE_FILE, SCENARIO_FILE, STORE_FILE};
use cex_core::fleet::{Fleet, FleetProfile};
use cex_core::idl::{parse_schema, SchemaDigest, SchemaSet};

use crate::Failure;

pub const CACHES_FILE: &str = "caches.cfg";

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_schema(path: &Path) -> Result<SchemaSet> {
    parse_schema(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn dir_of(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

/// The `.odvd` file in `dir` whose digest is `digest`, or `explicit` if given.
pub fn find_schema(explicit: Option<&Path>, dir: &Path, digest: SchemaDigest) -> Result<SchemaSet> {
    if let Some(p) = explicit {
        return load_schema(p);
    }
    let mut candidates: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "odvd"))
        .collect();
    candidates.sort();
    for p in candidates {
        if let Ok(schema) = load_schema(&p) {
            if schema.source_digest() == digest {
                return Ok(schema);
            }
        }
    }
    bail!("no .odvd in {} has digest {digest}; pass --schema", dir.display())
}

pub fn load_store(path: &Path) -> Result<ArtifactStore> {
    ArtifactStore::parse(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// Scenario manifest plus the schema and store it refers to.
pub struct ScenarioFiles {
    pub scenario: ScenarioManifest,
    pub schema: Arc<SchemaSet>,
    pub store: ArtifactStore,
}

pub fn load_scenario(path: &Path, schema: Option<&Path>, store: Option<&Path>) -> Result<ScenarioFiles, Failure> {
    let scenario = ScenarioManifest::parse(&read(path)?)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let dir = dir_of(path);
    let schema = find_schema(schema, dir, scenario.schema_digest)?;
    let store_path = store.map_or_else(|| dir.join(STORE_FILE), Path::to_path_buf);
    let store = load_store(&store_path)?;
    Ok(ScenarioFiles {
        scenario,
        schema: Arc::new(schema),
        store,
    })
}

pub struct FleetState {
    pub dir: PathBuf,
    pub files: ScenarioFiles,
    pub profile: FleetProfile,
    pub caches: Option<BTreeMap<String, Vec<LayerDigest>>>,
}

impl FleetState {
    pub fn load(dir: &Path) -> Result<FleetState, Failure> {
        let files = load_scenario(&dir.join(SCENARIO_FILE), None, Some(&dir.join(STORE_FILE)))?;
        let profile_path = dir.join(PROFILE_FILE);
        let profile = FleetProfile::parse(&read(&profile_path)?)
            .map_err(|e| Failure::Invalid(format!("{}: {e}", profile_path.display())))?;
        let caches_path = dir.join(CACHES_FILE);
        let caches = if caches_path.exists() {
            Some(parse_caches(&read(&caches_path)?, &files.store).with_context(|| format!("parsing {}", caches_path.display()))?)
        } else {
            None
        };
        Ok(FleetState {
            dir: dir.to_path_buf(),
            files,
            profile,
            caches,
        })
    }

    /// Fills every vehicle's layer cache from `caches.cfg`, or with the base
    /// scenario's stacks when nothing has been deployed yet.
    pub fn provision(&self, fleet: &mut Fleet) -> Result<()> {
        let Some(caches) = &self.caches else {
            fleet.preinstall(&self.files.store)?;
            return Ok(());
        };
        for v in fleet.vehicles_mut() {
            let id = v.sim.vehicle_id.clone();
            let cache = v.parts().0.cache_mut();
            for d in caches.get(&id).into_iter().flatten() {
                let layer = self.files.store.get(d).expect("parse_caches checked the store");
                cache.insert(layer);
            }
        }
        Ok(())
    }

    pub fn save_caches<'a>(&self, caches: impl IntoIterator<Item = (&'a str, &'a VehicleCache)>) -> Result<()> {
        let mut text = String::new();
        for (id, cache) in caches {
            let names: Vec<&str> = cache
                .digests()
                .filter_map(|d| self.files.store.get(d).map(|l| l.name.as_str()))
                .collect();
            text.push_str(&format!("[cache] vehicle={id} layers={}\n", if names.is_empty() { "-".to_string() } else { names.join(",") }));
        }
        let path = self.dir.join(CACHES_FILE);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn parse_caches(text: &str, store: &ArtifactStore) -> Result<BTreeMap<String, Vec<LayerDigest>>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let bad = |m: String| anyhow!("line {}: {m}", i + 1);
        let rest = t.strip_prefix("[cache]").ok_or_else(|| bad(format!("expected [cache], got `{t}`")))?;
        let mut vehicle = None;
        let mut layers = None;
        for w in rest.split_whitespace() {
            match w.split_once('=') {
                Some(("vehicle", v)) => vehicle = Some(v.to_string()),
                Some(("layers", v)) => layers = Some(v),
                _ => return Err(bad(format!("unexpected `{w}`"))),
            }
        }
        let vehicle = vehicle.ok_or_else(|| bad("missing vehicle=".into()))?;
        let layers = layers.ok_or_else(|| bad("missing layers=".into()))?;
        let digests = layers
            .split(',')
            .filter(|n| *n != "-")
            .map(|n| {
                store
                    .by_name(n)
                    .map(|l| l.digest)
                    .ok_or_else(|| bad(format!("layer `{n}` not in the store")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(vehicle, digests);
    }
    Ok(out)
}
