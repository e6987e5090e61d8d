//! Server-side aggregation of what cohort vehicles sent back.

use std::collections::BTreeMap;
use std::fmt;

use super::{CompletionStatus, ExperimentError};
use crate::codec::{decode_message, Envelope, Record, Value};
use crate::idl::{FieldType, MessageId, MessageSchema, SchemaSet};

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleFeedback {
    pub experiment_id: String,
    pub vehicle_id: String,
    pub status: CompletionStatus,
    pub guard_incidents: u64,
    /// Uplinked metric envelopes, in arrival order.
    pub metrics: Vec<Envelope>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldStats {
    pub count: u64,
    pub min: f64,
    pub max: f64,
    pub sum: f64,
}

impl FieldStats {
    fn single(v: f64) -> FieldStats {
        FieldStats {
            count: 1,
            min: v,
            max: v,
            sum: v,
        }
    }

    fn add(&mut self, v: f64) {
        self.count += 1;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.sum += v;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VehicleSummary {
    pub vehicle_id: String,
    pub envelopes_received: u64,
    pub guard_incidents: u64,
    pub status: CompletionStatus,
}

/// Key of one numeric leaf: message id plus dotted field names.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct MetricField {
    pub message_id: MessageId,
    pub path: String,
}

impl fmt::Display for MetricField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.message_id, self.path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub experiment_id: String,
    pub cohort_size: usize,
    pub vehicles: Vec<VehicleSummary>,
    pub status_tally: BTreeMap<CompletionStatus, usize>,
    pub envelopes_by_id: BTreeMap<MessageId, u64>,
    pub fields: BTreeMap<MetricField, FieldStats>,
    /// Metric envelopes that did not decode against the schema.
    pub undecodable: u64,
}

impl ExperimentSummary {
    pub fn total_envelopes(&self) -> u64 {
        self.envelopes_by_id.values().sum()
    }

    pub fn field(&self, message_id: MessageId, path: &str) -> Option<&FieldStats> {
        self.fields.get(&MetricField {
            message_id,
            path: path.to_string(),
        })
    }
}

fn collect_leaves(
    schema: &SchemaSet,
    msg: &MessageSchema,
    rec: &Record,
    prefix: &str,
    out: &mut Vec<(String, f64)>,
) {
    for field in &msg.fields {
        let Some(value) = rec.get(field.id) else { continue };
        let path = if prefix.is_empty() {
            field.name.clone()
        } else {
            format!("{prefix}.{}", field.name)
        };
        match (&field.ty, value) {
            (FieldType::Message(id), Value::Message(inner)) => {
                if let Some(inner_schema) = schema.get(*id) {
                    collect_leaves(schema, inner_schema, inner, &path, out);
                }
            }
            (ty, v) if ty.is_numeric() => {
                if let Some(x) = v.as_f64() {
                    out.push((path, x));
                }
            }
            _ => {}
        }
    }
}

/// Folds per-vehicle reports into one summary. Vehicles are listed in id order
/// so the result does not depend on report order.
pub fn aggregate_feedback(
    experiment_id: &str,
    schema: &SchemaSet,
    reports: &[VehicleFeedback],
) -> Result<ExperimentSummary, ExperimentError> {
    if let Some(r) = reports.iter().find(|r| r.experiment_id != experiment_id) {
        return Err(ExperimentError::MixedExperimentIds {
            expected: experiment_id.to_string(),
            found: r.experiment_id.clone(),
        });
    }
    let mut ordered: Vec<&VehicleFeedback> = reports.iter().collect();
    ordered.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id));

    let mut summary = ExperimentSummary {
        experiment_id: experiment_id.to_string(),
        cohort_size: reports.len(),
        vehicles: Vec::with_capacity(reports.len()),
        status_tally: BTreeMap::new(),
        envelopes_by_id: BTreeMap::new(),
        fields: BTreeMap::new(),
        undecodable: 0,
    };
    let mut leaves = Vec::new();
    for r in ordered {
        summary.vehicles.push(VehicleSummary {
            vehicle_id: r.vehicle_id.clone(),
            envelopes_received: r.metrics.len() as u64,
            guard_incidents: r.guard_incidents,
            status: r.status,
        });
        *summary.status_tally.entry(r.status).or_insert(0) += 1;
        for env in &r.metrics {
            *summary.envelopes_by_id.entry(env.message_id).or_insert(0) += 1;
            let decoded = schema
                .get(env.message_id)
                .and_then(|m| decode_message(schema, m, &env.payload).ok().map(|rec| (m, rec)));
            let Some((msg, rec)) = decoded else {
                summary.undecodable += 1;
                continue;
            };
            leaves.clear();
            collect_leaves(schema, msg, &rec, "", &mut leaves);
            for (path, v) in leaves.drain(..) {
                summary
                    .fields
                    .entry(MetricField {
                        message_id: env.message_id,
                        path,
                    })
                    .and_modify(|s| s.add(v))
                    .or_insert_with(|| FieldStats::single(v));
            }
        }
    }
    Ok(summary)
}

impl fmt::Display for ExperimentSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "experiment {}  cohort {}", self.experiment_id, self.cohort_size)?;
        for (status, n) in &self.status_tally {
            writeln!(f, "  {status}: {n}")?;
        }
        writeln!(f, "{:<10} {:>9} {:>7} status", "vehicle", "envelopes", "guards")?;
        for v in &self.vehicles {
            writeln!(
                f,
                "{:<10} {:>9} {:>7} {}",
                v.vehicle_id, v.envelopes_received, v.guard_incidents, v.status
            )?;
        }
        writeln!(f, "{:<24} {:>8} {:>12} {:>12} {:>12}", "field", "count", "min", "max", "mean")?;
        for (k, s) in &self.fields {
            writeln!(
                f,
                "{:<24} {:>8} {:>12.3} {:>12.3} {:>12.3}",
                k.to_string(),
                s.count,
                s.min,
                s.max,
                s.mean()
            )?;
        }
        Ok(())
    }
}
