// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Deterministic simulation of homes, the ISP edge and the VNF, driven by
//! scenario files.

mod bench;
mod config;
mod oracle;
mod report;
mod scenario;
mod world;

pub use bench::{bench, BenchConfig, BenchResult};
pub use config::{Config, CpeSettings, RouterSettings};
pub use oracle::{oracle_check, OracleDiff, OracleResult};
pub use report::{
    DeliveredRecord, DeviceRecord, LocalRecord, ProfileRecord, RunReport, SignupRecord, VerdictRecord,
    ZoneRecord, REPORT_SCHEMA,
};
pub use scenario::{Event, InboundEvent, PacketEvent, Proto, Scenario, TimedEvent, UserKind};
pub use world::{HarnessError, SendOutcome, World};
