//! Scenario and experiment manifests.
//!
//! Line-oriented UTF-8: a `[section]` line carries `key=value` pairs and may
//! be followed by directive lines (`param`, `rule`, `allow`, `guard`,
//! `metric`). Blank lines and lines starting with `#` are ignored. Unknown
//! sections, keys and directives are errors. `subs=*` subscribes to
//! everything, `subs=-` to nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use super::artifact::LayerDigest;
use crate::bus::Subscriptions;
use crate::gateway::{FilterMode, FilterRule};
use crate::idl::{MessageId, SchemaDigest};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestErrorKind {
    #[error("malformed line: {0}")]
    Syntax(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing key `{0}`")]
    MissingKey(&'static str),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("invalid value `{value}` for `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("unknown directive `{0}`")]
    UnknownDirective(String),
    #[error("`{0}` is not allowed here")]
    Misplaced(String),
    #[error("missing [{0}] section")]
    MissingSection(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line} [{section}]: {kind}")]
pub struct ManifestError {
    pub line: usize,
    pub section: String,
    pub kind: ManifestErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleSpec {
    pub name: String,
    pub layer: LayerDigest,
    pub version: String,
    pub frequency_hz: u32,
    pub priority: u8,
    pub subscriptions: Subscriptions,
    pub params: BTreeMap<String, String>,
    pub experimental: bool,
    /// Line of the `[module]` header, for diagnostics.
    pub line: usize,
}

impl ModuleSpec {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewaySpec {
    pub capacity_bytes: u64,
    pub budget_bytes_per_window: u64,
    pub window_us: u64,
    pub server: Option<String>,
    pub rules: Vec<FilterRule>,
    pub allow: BTreeSet<MessageId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioManifest {
    pub name: String,
    pub schema_digest: SchemaDigest,
    pub modules: Vec<ModuleSpec>,
    pub gateway: Option<GatewaySpec>,
}

impl ScenarioManifest {
    pub fn experimental_flags(&self) -> BTreeSet<&str> {
        self.modules
            .iter()
            .filter(|m| m.experimental)
            .map(|m| m.name.as_str())
            .collect()
    }

    pub fn module(&self, name: &str) -> Option<&ModuleSpec> {
        self.modules.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Lt => value < threshold,
            Comparator::Le => value <= threshold,
            Comparator::Gt => value > threshold,
            Comparator::Ge => value >= threshold,
            Comparator::Eq => value == threshold,
            Comparator::Ne => value != threshold,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Comparator::Lt => "lt",
            Comparator::Le => "le",
            Comparator::Gt => "gt",
            Comparator::Ge => "ge",
            Comparator::Eq => "eq",
            Comparator::Ne => "ne",
        }
    }

    fn parse(s: &str) -> Option<Comparator> {
        Some(match s {
            "lt" => Comparator::Lt,
            "le" => Comparator::Le,
            "gt" => Comparator::Gt,
            "ge" => Comparator::Ge,
            "eq" => Comparator::Eq,
            "ne" => Comparator::Ne,
            _ => return None,
        })
    }
}

/// Safety predicate over one numeric field. When it holds for `sustain_us`
/// the experiment is deactivated.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardPredicate {
    pub message_id: MessageId,
    /// Dotted field names, e.g. `pose.speed`.
    pub field_path: String,
    pub op: Comparator,
    pub threshold: f64,
    pub sustain_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentManifest {
    pub id: String,
    pub base: String,
    pub fraction: f64,
    pub seed: u64,
    pub duration_us: u64,
    /// Modules added to, or replacing same-named modules of, the base scenario.
    pub delta: Vec<ModuleSpec>,
    pub metrics: BTreeSet<MessageId>,
    pub guards: Vec<GuardPredicate>,
}

// ---------------------------------------------------------------------------
// Raw section parsing

pub(crate) struct Pairs<'a> {
    pub(crate) line: usize,
    pub(crate) section: &'a str,
    pub(crate) pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Pairs<'a> {
    pub(crate) fn new(line: usize, section: &'a str, tokens: &[&'a str]) -> Result<Pairs<'a>, ManifestError> {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for tok in tokens {
            let Some((k, v)) = tok.split_once('=') else {
                return Err(err(line, section, ManifestErrorKind::Syntax(format!("expected key=value, got `{tok}`"))));
            };
            if pairs.iter().any(|(pk, _)| *pk == k) {
                return Err(err(line, section, ManifestErrorKind::DuplicateKey(k.to_string())));
            }
            pairs.push((k, v));
        }
        Ok(Pairs { line, section, pairs })
    }

    pub(crate) fn take(&mut self, key: &str) -> Option<&'a str> {
        let i = self.pairs.iter().position(|(k, _)| *k == key)?;
        Some(self.pairs.remove(i).1)
    }

    pub(crate) fn require(&mut self, key: &'static str) -> Result<&'a str, ManifestError> {
        self.take(key)
            .ok_or_else(|| err(self.line, self.section, ManifestErrorKind::MissingKey(key)))
    }

    pub(crate) fn parsed<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T, ManifestError> {
        value.parse().map_err(|_| self.invalid(key, value))
    }

    pub(crate) fn invalid(&self, key: &str, value: &str) -> ManifestError {
        err(
            self.line,
            self.section,
            ManifestErrorKind::InvalidValue {
                key: key.to_string(),
                value: value.to_string(),
            },
        )
    }

    pub(crate) fn finish(self) -> Result<(), ManifestError> {
        match self.pairs.first() {
            Some((k, _)) => Err(err(self.line, self.section, ManifestErrorKind::UnknownKey(k.to_string()))),
            None => Ok(()),
        }
    }
}

pub(crate) fn err(line: usize, section: &str, kind: ManifestErrorKind) -> ManifestError {
    ManifestError {
        line,
        section: section.to_string(),
        kind,
    }
}

pub(crate) struct Directive<'a> {
    pub(crate) line: usize,
    pub(crate) keyword: &'a str,
    pub(crate) args: Vec<&'a str>,
}

pub(crate) struct Section<'a> {
    pub(crate) name: &'a str,
    pub(crate) line: usize,
    pub(crate) tokens: Vec<&'a str>,
    pub(crate) directives: Vec<Directive<'a>>,
}

/// Section names with the directives each accepts.
pub(crate) type Grammar<'g> = &'g [(&'g str, &'g [&'g str])];

const MANIFEST_GRAMMAR: Grammar<'static> = &[
    ("scenario", &[]),
    ("module", &["param"]),
    ("gateway", &["rule", "allow"]),
    ("experiment", &["guard", "metric"]),
];

pub(crate) fn sections<'a>(text: &'a str, grammar: Grammar<'_>) -> Result<Vec<Section<'a>>, ManifestError> {
    let mut out: Vec<Section<'a>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let Some((name, tail)) = rest.split_once(']') else {
                return Err(err(line, "", ManifestErrorKind::Syntax("unterminated section header".into())));
            };
            if !grammar.iter().any(|(n, _)| *n == name) {
                return Err(err(line, name, ManifestErrorKind::UnknownSection(name.to_string())));
            }
            out.push(Section {
                name,
                line,
                tokens: tail.split_whitespace().collect(),
                directives: Vec::new(),
            });
            continue;
        }
        let mut words = trimmed.split_whitespace();
        let keyword = words.next().expect("line is not blank");
        let Some(section) = out.last_mut() else {
            return Err(err(line, "", ManifestErrorKind::Misplaced(keyword.to_string())));
        };
        let allowed = grammar
            .iter()
            .find(|(n, _)| *n == section.name)
            .map_or(&[][..], |(_, d)| *d);
        if !allowed.contains(&keyword) {
            let kind = if grammar.iter().any(|(_, d)| d.contains(&keyword)) {
                ManifestErrorKind::Misplaced(keyword.to_string())
            } else {
                ManifestErrorKind::UnknownDirective(keyword.to_string())
            };
            return Err(err(line, section.name, kind));
        }
        section.directives.push(Directive {
            line,
            keyword,
            args: words.collect(),
        });
    }
    Ok(out)
}

pub(crate) fn parse_id(p: &Pairs<'_>, key: &str, s: &str) -> Result<MessageId, ManifestError> {
    s.parse::<MessageId>()
        .ok()
        .filter(|id| *id > 0)
        .ok_or_else(|| p.invalid(key, s))
}

fn parse_subscriptions(p: &Pairs<'_>, s: &str) -> Result<Subscriptions, ManifestError> {
    match s {
        "*" => return Ok(Subscriptions::All),
        "-" => return Ok(Subscriptions::none()),
        _ => {}
    }
    let mut ids = BTreeSet::new();
    for part in s.split(',') {
        ids.insert(parse_id(p, "subs", part)?);
    }
    Ok(Subscriptions::Only(ids))
}

fn parse_module(sec: &Section<'_>) -> Result<ModuleSpec, ManifestError> {
    let mut p = Pairs::new(sec.line, sec.name, &sec.tokens)?;
    let name = p.require("name")?.to_string();
    if name.is_empty() {
        return Err(p.invalid("name", ""));
    }
    let layer_s = p.require("layer")?;
    let layer: LayerDigest = p.parsed("layer", layer_s)?;
    let version = p.require("version")?.to_string();
    let frequency_hz = match p.take("hz") {
        Some(v) => p.parsed("hz", v)?,
        None => 1,
    };
    let priority = match p.take("prio") {
        Some(v) => p.parsed("prio", v)?,
        None => 0,
    };
    let subscriptions = match p.take("subs") {
        Some(v) => parse_subscriptions(&p, v)?,
        None => Subscriptions::All,
    };
    let experimental = match p.take("experimental") {
        None | Some("0") => false,
        Some("1") => true,
        Some(v) => return Err(p.invalid("experimental", v)),
    };
    p.finish()?;
    let mut params = BTreeMap::new();
    for d in &sec.directives {
        let [kv] = d.args.as_slice() else {
            return Err(err(d.line, sec.name, ManifestErrorKind::Syntax("expected `param key=value`".into())));
        };
        let Some((k, v)) = kv.split_once('=').filter(|(k, _)| !k.is_empty()) else {
            return Err(err(d.line, sec.name, ManifestErrorKind::Syntax("expected `param key=value`".into())));
        };
        if params.insert(k.to_string(), v.to_string()).is_some() {
            return Err(err(d.line, sec.name, ManifestErrorKind::DuplicateKey(k.to_string())));
        }
    }
    Ok(ModuleSpec {
        name,
        layer,
        version,
        frequency_hz,
        priority,
        subscriptions,
        params,
        experimental,
        line: sec.line,
    })
}

fn parse_gateway(sec: &Section<'_>) -> Result<GatewaySpec, ManifestError> {
    let mut p = Pairs::new(sec.line, sec.name, &sec.tokens)?;
    let capacity_s = p.require("capacity")?;
    let capacity_bytes = p.parsed("capacity", capacity_s)?;
    let budget_s = p.require("budget")?;
    let budget_bytes_per_window = p.parsed("budget", budget_s)?;
    let window_s = p.require("window_us")?;
    let window_us = p.parsed("window_us", window_s)?;
    let server = p.take("server").map(str::to_string);
    p.finish()?;
    let mut rules = Vec::new();
    let mut allow = BTreeSet::new();
    for d in &sec.directives {
        let dp = Pairs {
            line: d.line,
            section: sec.name,
            pairs: Vec::new(),
        };
        match d.keyword {
            "rule" => {
                let (id, mode, rest) = match d.args.as_slice() {
                    [id, mode, rest @ ..] => (*id, *mode, rest),
                    _ => {
                        return Err(err(
                            d.line,
                            sec.name,
                            ManifestErrorKind::Syntax("expected `rule <id> <relay|sample:N|drop> prio=<n>`".into()),
                        ))
                    }
                };
                let message_id = parse_id(&dp, "rule", id)?;
                let mode = match mode {
                    "relay" => FilterMode::Relay,
                    "drop" => FilterMode::Drop,
                    m => match m.strip_prefix("sample:").and_then(|n| n.parse::<u32>().ok()) {
                        Some(n) if n >= 1 => FilterMode::Sample(n),
                        _ => return Err(dp.invalid("mode", m)),
                    },
                };
                let mut rp = Pairs::new(d.line, sec.name, rest)?;
                let priority = match rp.take("prio") {
                    Some(v) => rp.parsed("prio", v)?,
                    None => 0,
                };
                rp.finish()?;
                if rules.iter().any(|r: &FilterRule| r.message_id == message_id) {
                    return Err(err(d.line, sec.name, ManifestErrorKind::DuplicateKey(format!("rule {message_id}"))));
                }
                rules.push(FilterRule {
                    message_id,
                    mode,
                    priority,
                });
            }
            _ => {
                let [id] = d.args.as_slice() else {
                    return Err(err(d.line, sec.name, ManifestErrorKind::Syntax("expected `allow <id>`".into())));
                };
                allow.insert(parse_id(&dp, "allow", id)?);
            }
        }
    }
    Ok(GatewaySpec {
        capacity_bytes,
        budget_bytes_per_window,
        window_us,
        server,
        rules,
        allow,
    })
}

impl ScenarioManifest {
    pub fn parse(text: &str) -> Result<ScenarioManifest, ManifestError> {
        let secs = sections(text, MANIFEST_GRAMMAR)?;
        let Some(first) = secs.first().filter(|s| s.name == "scenario") else {
            let line = secs.first().map_or(1, |s| s.line);
            return Err(err(line, "", ManifestErrorKind::MissingSection("scenario")));
        };
        let mut p = Pairs::new(first.line, first.name, &first.tokens)?;
        let name = p.require("name")?.to_string();
        let schema_s = p.require("schema")?;
        let schema_digest = p.parsed("schema", schema_s)?;
        p.finish()?;
        let mut modules = Vec::new();
        let mut gateway = None;
        for sec in &secs[1..] {
            match sec.name {
                "module" => modules.push(parse_module(sec)?),
                "gateway" if gateway.is_none() => gateway = Some(parse_gateway(sec)?),
                other => return Err(err(sec.line, other, ManifestErrorKind::Misplaced(format!("[{other}]")))),
            }
        }
        Ok(ScenarioManifest {
            name,
            schema_digest,
            modules,
            gateway,
        })
    }
}

impl ExperimentManifest {
    pub fn parse(text: &str) -> Result<ExperimentManifest, ManifestError> {
        let secs = sections(text, MANIFEST_GRAMMAR)?;
        let Some(first) = secs.first().filter(|s| s.name == "experiment") else {
            let line = secs.first().map_or(1, |s| s.line);
            return Err(err(line, "", ManifestErrorKind::MissingSection("experiment")));
        };
        let mut p = Pairs::new(first.line, first.name, &first.tokens)?;
        let id = p.require("id")?.to_string();
        let base = p.require("base")?.to_string();
        let fraction_s = p.require("fraction")?;
        let fraction: f64 = p.parsed("fraction", fraction_s)?;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(p.invalid("fraction", fraction_s));
        }
        let seed_s = p.require("seed")?;
        let seed = p.parsed("seed", seed_s)?;
        let duration_s = p.require("duration_us")?;
        let duration_us = p.parsed("duration_us", duration_s)?;
        p.finish()?;
        let mut metrics = BTreeSet::new();
        let mut guards = Vec::new();
        for d in &first.directives {
            match d.keyword {
                "metric" => {
                    let dp = Pairs {
                        line: d.line,
                        section: first.name,
                        pairs: Vec::new(),
                    };
                    let [id] = d.args.as_slice() else {
                        return Err(err(d.line, first.name, ManifestErrorKind::Syntax("expected `metric <id>`".into())));
                    };
                    metrics.insert(parse_id(&dp, "metric", id)?);
                }
                _ => {
                    let mut gp = Pairs::new(d.line, first.name, &d.args)?;
                    let msg_s = gp.require("msg")?;
                    let message_id = parse_id(&gp, "msg", msg_s)?;
                    let field_path = gp.require("field")?.to_string();
                    let op_s = gp.require("op")?;
                    let op = Comparator::parse(op_s).ok_or_else(|| gp.invalid("op", op_s))?;
                    let th_s = gp.require("threshold")?;
                    let threshold: f64 = gp.parsed("threshold", th_s)?;
                    if !threshold.is_finite() {
                        return Err(gp.invalid("threshold", th_s));
                    }
                    let sustain_us = match gp.take("sustain_us") {
                        Some(v) => gp.parsed("sustain_us", v)?,
                        None => 0,
                    };
                    gp.finish()?;
                    guards.push(GuardPredicate {
                        message_id,
                        field_path,
                        op,
                        threshold,
                        sustain_us,
                    });
                }
            }
        }
        let mut delta = Vec::new();
        for sec in &secs[1..] {
            match sec.name {
                "module" => {
                    let mut m = parse_module(sec)?;
                    m.experimental = true;
                    delta.push(m);
                }
                other => return Err(err(sec.line, other, ManifestErrorKind::Misplaced(format!("[{other}]")))),
            }
        }
        Ok(ExperimentManifest {
            id,
            base,
            fraction,
            seed,
            duration_us,
            delta,
            metrics,
            guards,
        })
    }
}

// ---------------------------------------------------------------------------
// Printing

fn subs_text(s: &Subscriptions) -> String {
    match s {
        Subscriptions::All => "*".to_string(),
        Subscriptions::Only(ids) if ids.is_empty() => "-".to_string(),
        Subscriptions::Only(ids) => ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
    }
}

fn write_module(out: &mut String, m: &ModuleSpec) {
    let _ = writeln!(
        out,
        "[module] name={} layer={} version={} hz={} prio={} subs={} experimental={}",
        m.name,
        m.layer,
        m.version,
        m.frequency_hz,
        m.priority,
        subs_text(&m.subscriptions),
        u8::from(m.experimental)
    );
    for (k, v) in &m.params {
        let _ = writeln!(out, "  param {k}={v}");
    }
}

impl fmt::Display for ScenarioManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = format!("[scenario] name={} schema={}\n", self.name, self.schema_digest);
        for m in &self.modules {
            write_module(&mut out, m);
        }
        if let Some(g) = &self.gateway {
            let _ = write!(
                out,
                "[gateway] capacity={} budget={} window_us={}",
                g.capacity_bytes, g.budget_bytes_per_window, g.window_us
            );
            if let Some(s) = &g.server {
                let _ = write!(out, " server={s}");
            }
            out.push('\n');
            for r in &g.rules {
                let mode = match r.mode {
                    FilterMode::Relay => "relay".to_string(),
                    FilterMode::Drop => "drop".to_string(),
                    FilterMode::Sample(n) => format!("sample:{n}"),
                };
                let _ = writeln!(out, "  rule {} {} prio={}", r.message_id, mode, r.priority);
            }
            for id in &g.allow {
                let _ = writeln!(out, "  allow {id}");
            }
        }
        f.write_str(&out)
    }
}

impl fmt::Display for ExperimentManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = format!(
            "[experiment] id={} base={} fraction={} seed={} duration_us={}\n",
            self.id, self.base, self.fraction, self.seed, self.duration_us
        );
        for g in &self.guards {
            let _ = writeln!(
                out,
                "  guard msg={} field={} op={} threshold={} sustain_us={}",
                g.message_id,
                g.field_path,
                g.op.keyword(),
                g.threshold,
                g.sustain_us
            );
        }
        for m in &self.metrics {
            let _ = writeln!(out, "  metric {m}");
        }
        for m in &self.delta {
            write_module(&mut out, m);
        }
        f.write_str(&out)
    }
}
