//! Content-addressed layer store and incremental deployment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::idl::SchemaDigest;

/// SHA-256 identity of a layer, covering its parent, name, size and content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerDigest(pub [u8; 32]);

impl fmt::Display for LayerDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for LayerDigest {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(LayerDigest(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub digest: LayerDigest,
    pub parent: Option<LayerDigest>,
    pub size: u64,
    /// Stand-in for the layer's files; only its hash enters the digest.
    pub content: String,
}

pub fn layer_digest(parent: Option<LayerDigest>, name: &str, size: u64, content: &[u8]) -> LayerDigest {
    let mut h = Sha256::new();
    h.update(parent.map_or([0u8; 32], |p| p.0));
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(size.to_le_bytes());
    h.update(Sha256::digest(content));
    LayerDigest(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("unknown layer {0}")]
    UnknownLayer(LayerDigest),
    #[error("unknown parent layer `{0}`")]
    UnknownParent(String),
    #[error("duplicate layer name `{0}`")]
    DuplicateName(String),
    #[error("store file line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Layers addressed by digest. Each layer names its parent, so the digest of
/// a top layer identifies a whole stack.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArtifactStore {
    schema_digest: Option<SchemaDigest>,
    layers: BTreeMap<LayerDigest, Layer>,
    names: BTreeMap<String, LayerDigest>,
    order: Vec<LayerDigest>,
}

impl ArtifactStore {
    pub fn new(schema_digest: SchemaDigest) -> ArtifactStore {
        ArtifactStore {
            schema_digest: Some(schema_digest),
            ..ArtifactStore::default()
        }
    }

    pub fn schema_digest(&self) -> Option<SchemaDigest> {
        self.schema_digest
    }

    /// Adds a layer; names are unique within a store.
    pub fn add_layer(
        &mut self,
        name: &str,
        parent: Option<LayerDigest>,
        size: u64,
        content: &str,
    ) -> Result<LayerDigest, StoreError> {
        if let Some(p) = parent {
            if !self.layers.contains_key(&p) {
                return Err(StoreError::UnknownLayer(p));
            }
        }
        if self.names.contains_key(name) {
            return Err(StoreError::DuplicateName(name.to_string()));
        }
        let digest = layer_digest(parent, name, size, content.as_bytes());
        self.layers.insert(
            digest,
            Layer {
                name: name.to_string(),
                digest,
                parent,
                size,
                content: content.to_string(),
            },
        );
        self.names.insert(name.to_string(), digest);
        self.order.push(digest);
        Ok(digest)
    }

    pub fn get(&self, digest: &LayerDigest) -> Option<&Layer> {
        self.layers.get(digest)
    }

    pub fn by_name(&self, name: &str) -> Option<&Layer> {
        self.names.get(name).and_then(|d| self.layers.get(d))
    }

    pub fn contains(&self, digest: &LayerDigest) -> bool {
        self.layers.contains_key(digest)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// The stack under `top`, bottom layer first.
    pub fn stack(&self, top: &LayerDigest) -> Result<Vec<&Layer>, StoreError> {
        let mut out = Vec::new();
        let mut cur = Some(*top);
        while let Some(d) = cur {
            let layer = self.layers.get(&d).ok_or(StoreError::UnknownLayer(d))?;
            out.push(layer);
            cur = layer.parent;
        }
        out.reverse();
        Ok(out)
    }

    /// Parses the text form:
    ///
    /// ```text
    /// [store] schema=<hex>
    /// [layer] name=<str> parent=<name|-> size=<bytes> content=<str>
    /// ```
    pub fn parse(text: &str) -> Result<ArtifactStore, StoreError> {
        let mut store = ArtifactStore::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let perr = |message: String| StoreError::Parse { line, message };
            let mut words = t.split_whitespace();
            let head = words.next().expect("non-blank");
            let mut kv = BTreeMap::new();
            for w in words {
                let (k, v) = w
                    .split_once('=')
                    .ok_or_else(|| perr(format!("expected key=value, got `{w}`")))?;
                if kv.insert(k, v).is_some() {
                    return Err(perr(format!("duplicate key `{k}`")));
                }
            }
            let mut take = |k: &str| kv.remove(k).ok_or_else(|| perr(format!("missing key `{k}`")));
            match head {
                "[store]" => {
                    let s = take("schema")?;
                    store.schema_digest = Some(s.parse().map_err(|_| perr(format!("invalid digest `{s}`")))?);
                }
                "[layer]" => {
                    let name = take("name")?;
                    let parent_s = take("parent")?;
                    let size_s = take("size")?;
                    let content = take("content")?;
                    let size: u64 = size_s.parse().map_err(|_| perr(format!("invalid size `{size_s}`")))?;
                    let parent = match parent_s {
                        "-" => None,
                        p => Some(
                            store
                                .names
                                .get(p)
                                .copied()
                                .ok_or_else(|| StoreError::UnknownParent(p.to_string()))?,
                        ),
                    };
                    store.add_layer(name, parent, size, content)?;
                }
                other => return Err(perr(format!("unknown section `{other}`"))),
            }
            if let Some(k) = kv.keys().next() {
                return Err(perr(format!("unknown key `{k}`")));
            }
        }
        Ok(store)
    }
}

impl fmt::Display for ArtifactStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        if let Some(d) = self.schema_digest {
            let _ = writeln!(out, "[store] schema={d}");
        }
        for d in &self.order {
            let l = &self.layers[d];
            let parent = l.parent.map_or("-".to_string(), |p| self.layers[&p].name.clone());
            let _ = writeln!(
                out,
                "[layer] name={} parent={} size={} content={}",
                l.name, parent, l.size, l.content
            );
        }
        f.write_str(&out)
    }
}

/// Layers already present on one vehicle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VehicleCache {
    layers: BTreeSet<LayerDigest>,
    bytes: u64,
}

impl VehicleCache {
    pub fn contains(&self, d: &LayerDigest) -> bool {
        self.layers.contains(d)
    }

    pub fn insert(&mut self, layer: &Layer) -> bool {
        let fresh = self.layers.insert(layer.digest);
        if fresh {
            self.bytes += layer.size;
        }
        fresh
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn digests(&self) -> impl Iterator<Item = &LayerDigest> {
        self.layers.iter()
    }

    pub fn has_stack(&self, store: &ArtifactStore, top: &LayerDigest) -> bool {
        store
            .stack(top)
            .is_ok_and(|s| s.iter().all(|l| self.layers.contains(&l.digest)))
    }
}

/// Downlink conditions for one deploy attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownlinkState {
    pub online: bool,
    /// Bytes that can be moved before the link drops.
    pub byte_budget: u64,
}

impl DownlinkState {
    pub const UNLIMITED: DownlinkState = DownlinkState {
        online: true,
        byte_budget: u64::MAX,
    };
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeployReport {
    pub layers_sent: usize,
    pub bytes_sent: u64,
    pub sent: Vec<LayerDigest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeployError {
    #[error("vehicle offline")]
    VehicleOffline,
    #[error("unknown layer {0}")]
    UnknownLayer(LayerDigest),
    #[error("transfer interrupted after {} layers; {remaining} still missing", partial.layers_sent)]
    TransferInterrupted { partial: DeployReport, remaining: usize },
}

/// Layers of the given stacks missing from `cache`, bottom first, without duplicates.
pub fn missing_layers<'s>(
    tops: &[LayerDigest],
    store: &'s ArtifactStore,
    cache: &VehicleCache,
) -> Result<Vec<&'s Layer>, DeployError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for top in tops {
        let stack = store.stack(top).map_err(|e| match e {
            StoreError::UnknownLayer(d) => DeployError::UnknownLayer(d),
            _ => DeployError::UnknownLayer(*top),
        })?;
        for layer in stack {
            if !cache.contains(&layer.digest) && seen.insert(layer.digest) {
                out.push(layer);
            }
        }
    }
    Ok(out)
}

/// Transfers every layer of the given stacks that the vehicle lacks. Layers
/// that arrive before an interruption stay cached, so a retry resumes.
pub fn deploy(
    tops: &[LayerDigest],
    store: &ArtifactStore,
    cache: &mut VehicleCache,
    link: DownlinkState,
) -> Result<DeployReport, DeployError> {
    let missing = missing_layers(tops, store, cache)?;
    if missing.is_empty() {
        return Ok(DeployReport::default());
    }
    if !link.online {
        return Err(DeployError::VehicleOffline);
    }
    let mut report = DeployReport::default();
    let mut budget = link.byte_budget;
    for (i, layer) in missing.iter().enumerate() {
        if layer.size > budget {
            return Err(DeployError::TransferInterrupted {
                partial: report,
                remaining: missing.len() - i,
            });
        }
        budget -= layer.size;
        cache.insert(layer);
        report.layers_sent += 1;
        report.bytes_sent += layer.size;
        report.sent.push(layer.digest);
    }
    Ok(report)
}
