//! Deterministic discrete-event simulation of a whole network.
//!
//! One seeded RNG stream drives every random draw, messages are delivered in
//! `(deliver_tick, insertion order)`, and the resulting [`SimReport`] is
//! byte-identical for identical `(config, scenario)` inputs.

mod message;
mod report;
mod scenario;
mod sim;

pub use message::{Message, SimEvent};
pub use report::{
    CapturedMessage, FaultOutcome, FaultReport, Metrics, QuarantineEntry, RoleSnapshot, ShareAttempt, ShareDelivery,
    SimReport, SimStats, TRACE_HEADER,
};
pub use scenario::{Action, DigestRef, FaultKind, FaultSpec, NodeDecl, ParseError, Scenario, ScheduledAction};
pub use sim::{inject_fault, metrics, new_sim, Sim};

use thiserror::Error;

use crate::credit::{
    CommitteeConfig, CreditError, DEFAULT_EPOCH_LENGTH_BLOCKS, DEFAULT_MAX_RECORDERS, DEFAULT_MAX_SUPERVISORS,
};
use crate::datastore::DEFAULT_REPLICATION_FACTOR;
use crate::record_protocol::DEFAULT_BLOCK_INTERVAL_TICKS;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error("{kind} targets unknown {what} {target}")]
    UnknownTarget {
        kind: FaultKind,
        what: &'static str,
        target: u32,
    },
    #[error("fault activation tick {at} is before the current tick {now}")]
    PastActivation { at: u64, now: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    pub network_id: String,
    pub max_recorders: usize,
    pub max_supervisors: usize,
    pub initial_credit: i64,
    pub block_interval_ticks: u64,
    pub epoch_length_blocks: u64,
    pub replication_factor: usize,
    pub storage_units: u32,
    pub message_delay_ticks: u64,
    /// Only used when rendering ticks as wall time.
    pub tick_length_seconds: u64,
    /// Keep a copy of every message sent, for wire inspection.
    pub capture_wire: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            network_id: "gridledger-sim".into(),
            max_recorders: DEFAULT_MAX_RECORDERS,
            max_supervisors: DEFAULT_MAX_SUPERVISORS,
            initial_credit: 0,
            block_interval_ticks: DEFAULT_BLOCK_INTERVAL_TICKS,
            epoch_length_blocks: DEFAULT_EPOCH_LENGTH_BLOCKS,
            replication_factor: DEFAULT_REPLICATION_FACTOR,
            storage_units: 5,
            message_delay_ticks: 1,
            tick_length_seconds: 1,
            capture_wire: false,
        }
    }
}

impl SimConfig {
    /// Defaults overridden by the scenario's `config` lines.
    pub fn from_scenario(scenario: &Scenario) -> Result<Self, ParseError> {
        let mut c = SimConfig::default();
        for (key, value, line) in &scenario.settings {
            let line = *line;
            let int = || -> Result<u64, ParseError> {
                value.parse().map_err(|_| ParseError {
                    line,
                    message: format!("config {key} expects an integer, found '{value}'"),
                })
            };
            match key.as_str() {
                "seed" => c.seed = int()?,
                "recorders" => c.max_recorders = int()? as usize,
                "supervisors" => c.max_supervisors = int()? as usize,
                "interval" => c.block_interval_ticks = int()?,
                "epoch" => c.epoch_length_blocks = int()?,
                "replication" => c.replication_factor = int()? as usize,
                "units" => c.storage_units = int()? as u32,
                "delay" => c.message_delay_ticks = int()?,
                "tick-seconds" => c.tick_length_seconds = int()?,
                "network" => c.network_id = value.clone(),
                _ => unreachable!("keys are checked by the parser"),
            }
        }
        c.validate().map_err(|message| ParseError {
            line: scenario.settings.last().map_or(0, |s| s.2),
            message,
        })?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            (self.max_recorders >= 1, "recorders must be at least 1"),
            (self.block_interval_ticks >= 1, "interval must be at least 1"),
            (self.epoch_length_blocks >= 1, "epoch must be at least 1"),
            (self.replication_factor >= 1, "replication must be at least 1"),
            (self.message_delay_ticks >= 1, "delay must be at least 1"),
            (self.tick_length_seconds >= 1, "tick-seconds must be at least 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(msg.to_string()),
            None => Ok(()),
        }
    }

    pub fn committee(&self) -> CommitteeConfig {
        CommitteeConfig {
            max_recorders: self.max_recorders,
            max_supervisors: self.max_supervisors,
            initial_credit: self.initial_credit,
            epoch_length_blocks: self.epoch_length_blocks,
        }
    }

    /// `tick` as `h:mm:ss` of simulated time.
    pub fn render_tick(&self, tick: u64) -> String {
        let s = tick * self.tick_length_seconds;
        format!("{}:{:02}:{:02}", s / 3600, s / 60 % 60, s % 60)
    }
}
