//! Messages the experiment machinery exchanges over the bus and the gateway.
//! Vehicle schemas include [`CONTROL_IDL`] to take part.

use crate::codec::{decode_message, Record, Value};
use crate::idl::{MessageId, SchemaSet};

pub const EXPERIMENT_COMMAND_ID: MessageId = 9001;
pub const EXPERIMENT_STATUS_ID: MessageId = 9002;
pub const EMERGENCY_STOP_ID: MessageId = 9003;

pub const CONTROL_IDL: &str = "\
// experiment control plane
message ExperimentCommand [id = 9001] {
  string experiment_id [id = 1];
  uint32 action [id = 2];
}

message ExperimentStatus [id = 9002] {
  string experiment_id [id = 1];
  uint32 status [id = 2];
  uint64 at_us [id = 3];
}

message EmergencyStop [id = 9003] {
  uint64 requested_at_us [id = 1];
}
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandAction {
    Activate = 0,
    Deactivate = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentCommand {
    pub experiment_id: String,
    pub action: CommandAction,
}

impl ExperimentCommand {
    pub fn to_record(&self) -> Record {
        Record::new()
            .with(1, Value::String(self.experiment_id.clone()))
            .with(2, Value::Uint32(self.action as u32))
    }

    pub fn decode(schema: &SchemaSet, payload: &[u8]) -> Option<ExperimentCommand> {
        let rec = decode_message(schema, schema.get(EXPERIMENT_COMMAND_ID)?, payload).ok()?;
        let Some(Value::String(experiment_id)) = rec.get(1) else {
            return None;
        };
        let action = match rec.get(2) {
            Some(Value::Uint32(0)) => CommandAction::Activate,
            Some(Value::Uint32(1)) => CommandAction::Deactivate,
            _ => return None,
        };
        Some(ExperimentCommand {
            experiment_id: experiment_id.clone(),
            action,
        })
    }
}

/// Lifecycle codes carried by `ExperimentStatus`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusCode {
    Staged = 0,
    Active = 1,
    Completed = 2,
    GuardStopped = 3,
    EmergencyStopped = 4,
}

pub fn status_record(experiment_id: &str, status: StatusCode, at_us: u64) -> Record {
    Record::new()
        .with(1, Value::String(experiment_id.to_string()))
        .with(2, Value::Uint32(status as u32))
        .with(3, Value::Uint64(at_us))
}

pub fn emergency_stop_record(at_us: u64) -> Record {
    Record::new().with(1, Value::Uint64(at_us))
}
