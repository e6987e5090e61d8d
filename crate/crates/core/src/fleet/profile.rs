//! Fleet profile files: data rates, fleet size and per-vehicle connectivity.
//!
//! ```text
//! [fleet]   n=10 seed=42 duration_us=30000000 tick_us=100000 prefix=veh-
//! [profile] name=camera-radar downlink_bytes_per_s=2000000
//!   rate msg=100 hz=30 bytes=8000000
//! [vehicle] id=veh-03
//!   online from_us=0 to_us=5000000
//!   estop at_us=12000000
//! ```
//!
//! Vehicles without a `[vehicle]` section, or with one but no `online`
//! lines, are online throughout.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::experiment::manifest::{err, parse_id, sections, Grammar, ManifestErrorKind, Pairs};
use crate::experiment::ManifestError;
use crate::idl::MessageId;

const PROFILE_GRAMMAR: Grammar<'static> = &[
    ("fleet", &[]),
    ("profile", &["rate"]),
    ("vehicle", &["online", "estop"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rate {
    pub message_id: MessageId,
    pub frequency_hz: u32,
    pub payload_bytes: usize,
}

/// Half-open online interval `[from_us, to_us)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct OnlineInterval {
    pub from_us: u64,
    pub to_us: u64,
}

/// Sorted, non-overlapping online intervals. `None` means always online.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConnectivitySchedule {
    intervals: Option<Vec<OnlineInterval>>,
}

impl ConnectivitySchedule {
    pub fn always() -> ConnectivitySchedule {
        ConnectivitySchedule { intervals: None }
    }

    pub fn new(mut intervals: Vec<OnlineInterval>) -> Result<ConnectivitySchedule, String> {
        intervals.sort();
        for w in intervals.windows(2) {
            if w[1].from_us < w[0].to_us {
                return Err(format!(
                    "online intervals [{}, {}) and [{}, {}) overlap",
                    w[0].from_us, w[0].to_us, w[1].from_us, w[1].to_us
                ));
            }
        }
        if let Some(i) = intervals.iter().find(|i| i.from_us >= i.to_us) {
            return Err(format!("empty online interval [{}, {})", i.from_us, i.to_us));
        }
        Ok(ConnectivitySchedule {
            intervals: Some(intervals),
        })
    }

    pub fn intervals(&self) -> Option<&[OnlineInterval]> {
        self.intervals.as_deref()
    }

    pub fn online_at(&self, t_us: u64) -> bool {
        match &self.intervals {
            None => true,
            Some(iv) => {
                let i = iv.partition_point(|i| i.to_us <= t_us);
                iv.get(i).is_some_and(|i| i.from_us <= t_us)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VehicleOverrides {
    pub schedule: ConnectivitySchedule,
    pub estops_us: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FleetProfile {
    pub name: String,
    pub n: usize,
    pub seed: u64,
    pub duration_us: u64,
    pub tick_us: u64,
    pub prefix: String,
    /// Downlink rate for deploys; `None` is unlimited.
    pub downlink_bytes_per_s: Option<u64>,
    pub rates: Vec<Rate>,
    pub vehicles: BTreeMap<String, VehicleOverrides>,
}

impl Default for FleetProfile {
    fn default() -> FleetProfile {
        FleetProfile {
            name: "default".into(),
            n: 1,
            seed: 0,
            duration_us: 10_000_000,
            tick_us: 100_000,
            prefix: "veh-".into(),
            downlink_bytes_per_s: None,
            rates: Vec::new(),
            vehicles: BTreeMap::new(),
        }
    }
}

impl FleetProfile {
    /// Vehicle ids `prefix00`, `prefix01`, ... zero-padded to at least two digits.
    pub fn vehicle_ids(&self) -> Vec<String> {
        let width = self.n.saturating_sub(1).to_string().len().max(2);
        (0..self.n).map(|i| format!("{}{:0width$}", self.prefix, i)).collect()
    }

    pub fn overrides(&self, vehicle_id: &str) -> VehicleOverrides {
        self.vehicles.get(vehicle_id).cloned().unwrap_or_default()
    }

    /// Nominal offered load in bytes per second, payloads only.
    pub fn nominal_bytes_per_s(&self) -> u64 {
        self.rates
            .iter()
            .map(|r| u64::from(r.frequency_hz) * r.payload_bytes as u64)
            .sum()
    }

    pub fn parse(text: &str) -> Result<FleetProfile, ManifestError> {
        let mut out = FleetProfile::default();
        for sec in sections(text, PROFILE_GRAMMAR)? {
            let mut p = Pairs::new(sec.line, sec.name, &sec.tokens)?;
            match sec.name {
                "fleet" => {
                    if let Some(v) = p.take("n") {
                        out.n = p.parsed("n", v)?;
                        if out.n == 0 {
                            return Err(p.invalid("n", v));
                        }
                    }
                    if let Some(v) = p.take("seed") {
                        out.seed = p.parsed("seed", v)?;
                    }
                    if let Some(v) = p.take("duration_us") {
                        out.duration_us = p.parsed("duration_us", v)?;
                    }
                    if let Some(v) = p.take("tick_us") {
                        out.tick_us = p.parsed("tick_us", v)?;
                        if out.tick_us == 0 {
                            return Err(p.invalid("tick_us", v));
                        }
                    }
                    if let Some(v) = p.take("prefix") {
                        out.prefix = v.to_string();
                    }
                    p.finish()?;
                }
                "profile" => {
                    if let Some(v) = p.take("name") {
                        out.name = v.to_string();
                    }
                    if let Some(v) = p.take("downlink_bytes_per_s") {
                        out.downlink_bytes_per_s = Some(p.parsed("downlink_bytes_per_s", v)?);
                    }
                    p.finish()?;
                    for d in &sec.directives {
                        let mut rp = Pairs::new(d.line, sec.name, &d.args)?;
                        let msg = rp.require("msg")?;
                        let message_id = parse_id(&rp, "msg", msg)?;
                        let hz = rp.require("hz")?;
                        let frequency_hz = rp.parsed("hz", hz)?;
                        let payload_bytes = match rp.take("bytes") {
                            Some(v) => rp.parsed("bytes", v)?,
                            None => 0,
                        };
                        rp.finish()?;
                        out.rates.push(Rate {
                            message_id,
                            frequency_hz,
                            payload_bytes,
                        });
                    }
                }
                _ => {
                    let id = p.require("id")?.to_string();
                    p.finish()?;
                    let mut intervals = Vec::new();
                    let mut estops_us = Vec::new();
                    for d in &sec.directives {
                        let mut dp = Pairs::new(d.line, sec.name, &d.args)?;
                        if d.keyword == "online" {
                            let f = dp.require("from_us")?;
                            let from_us = dp.parsed("from_us", f)?;
                            let t = dp.require("to_us")?;
                            let to_us = dp.parsed("to_us", t)?;
                            intervals.push(OnlineInterval { from_us, to_us });
                        } else {
                            let a = dp.require("at_us")?;
                            estops_us.push(dp.parsed("at_us", a)?);
                        }
                        dp.finish()?;
                    }
                    let schedule = if intervals.is_empty() {
                        ConnectivitySchedule::always()
                    } else {
                        ConnectivitySchedule::new(intervals)
                            .map_err(|m| err(sec.line, sec.name, ManifestErrorKind::Syntax(m)))?
                    };
                    estops_us.sort_unstable();
                    if out
                        .vehicles
                        .insert(id.clone(), VehicleOverrides { schedule, estops_us })
                        .is_some()
                    {
                        return Err(err(sec.line, sec.name, ManifestErrorKind::DuplicateKey(format!("vehicle {id}"))));
                    }
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for FleetProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "[fleet] n={} seed={} duration_us={} tick_us={} prefix={}",
            self.n, self.seed, self.duration_us, self.tick_us, self.prefix
        );
        let _ = write!(s, "[profile] name={}", self.name);
        if let Some(d) = self.downlink_bytes_per_s {
            let _ = write!(s, " downlink_bytes_per_s={d}");
        }
        s.push('\n');
        for r in &self.rates {
            let _ = writeln!(s, "  rate msg={} hz={} bytes={}", r.message_id, r.frequency_hz, r.payload_bytes);
        }
        for (id, v) in &self.vehicles {
            let _ = writeln!(s, "[vehicle] id={id}");
            for i in v.schedule.intervals().unwrap_or(&[]) {
                let _ = writeln!(s, "  online from_us={} to_us={}", i.from_us, i.to_us);
            }
            for t in &v.estops_us {
                let _ = writeln!(s, "  estop at_us={t}");
            }
        }
        f.write_str(&s)
    }
}
