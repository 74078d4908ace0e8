// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

use crate::control::{Alert, AlertReason, Outcome};
use crate::cpe_wlm::LocalDecision;
use crate::mud::{AclEntry, ProfileId};
use crate::net::{ConnKey, CustomerId, MacAddr, Packet, Tick};
use crate::wle::AclExport;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::Ipv4Addr;

pub const REPORT_SCHEMA: u32 = 1;

/// One pipeline decision and what the controller made of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerdictRecord {
    /// Position in the run's combined verdict/zone history.
    pub seq: u64,
    pub ts: Tick,
    pub customer: CustomerId,
    /// Sending device as known to the simulation (not to the VNF).
    pub mac: Option<MacAddr>,
    pub conn_key: ConnKey,
    pub dscp: u8,
    pub verdict: &'static str,
    pub outcome: Outcome,
    pub profile: Option<ProfileId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dns_query: Option<String>,
}

/// One gateway-local decision. `conn_key` is oriented device → peer, in
/// public addresses for WAN flows and LAN addresses for LAN flows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LocalRecord {
    pub ts: Tick,
    pub customer: CustomerId,
    pub mac: MacAddr,
    pub conn_key: ConnKey,
    pub decision: LocalDecision,
}

/// A packet that reached its destination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveredRecord {
    /// `internet`, or `lan:<customer>:<mac>`.
    pub at: String,
    pub packet: Packet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ZoneRecord {
    pub seq: u64,
    pub ts: Tick,
    pub name: String,
    /// Empty when the record was withdrawn.
    pub addrs: Vec<Ipv4Addr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProfileRecord {
    pub id: ProfileId,
    pub mud_url: String,
    pub entries: Vec<AclEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceRecord {
    pub customer: CustomerId,
    pub mac: MacAddr,
    /// MUD URL the device announced, if any.
    pub declared_mud_url: Option<String>,
    pub status: String,
    pub profile: Option<ProfileId>,
    pub mark: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SignupRecord {
    pub ts: Tick,
    pub account: String,
    pub customer: CustomerId,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FilterCountPoint {
    pub ts: Tick,
    pub filter_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub schema: u32,
    pub seed: u64,
    pub vnf_attached: bool,
    pub final_ts: Tick,
    pub filter_count: Option<usize>,
    pub filter_count_history: Vec<FilterCountPoint>,
    pub alerts: Vec<Alert>,
    pub acls: Vec<AclExport>,
    pub counters: BTreeMap<String, u64>,
    pub verdict_log: Vec<VerdictRecord>,
    pub local_log: Vec<LocalRecord>,
    pub delivered: Vec<DeliveredRecord>,
    pub zone_log: Vec<ZoneRecord>,
    pub profiles: Vec<ProfileRecord>,
    pub devices: Vec<DeviceRecord>,
    pub signups: Vec<SignupRecord>,
    pub owner_domains: BTreeMap<String, String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat `key value` lines, sorted by key.
    pub fn metrics_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.counters {
            let _ = writeln!(out, "{k} {v}");
        }
        out
    }

    pub fn violation_alerts(&self) -> usize {
        self.alerts.iter().filter(|a| a.reason == AlertReason::WhitelistViolation).count()
    }

    /// 0 on a clean run, 2 when whitelist violations were raised.
    pub fn exit_code(&self) -> i32 {
        if self.violation_alerts() > 0 {
            2
        } else {
            0
        }
    }

    /// Delivered packets as canonical bytes, for comparing runs.
    pub fn delivered_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.delivered).expect("serializable")
    }
}
