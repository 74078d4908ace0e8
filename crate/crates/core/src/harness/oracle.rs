// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Brute-force re-check of every VNF judgement in a report.
//!
//! The oracle knows nothing about tables, marks or resolver caches. It
//! replays the authoritative zone history and scans the device's profile
//! entries one by one.

use super::report::{ProfileRecord, RunReport, VerdictRecord};
use crate::control::Outcome;
use crate::dns::normalize;
use crate::mud::{AclEntry, Direction, Endpoint, ProfileId};
use crate::net::{ConnKey, Tick};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OracleDiff {
    /// Position in the verdict log.
    pub index: usize,
    pub seq: u64,
    pub ts: Tick,
    pub conn_key: ConnKey,
    pub profile: ProfileId,
    /// Whether the whitelist admits the connection.
    pub expected: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OracleResult {
    pub checked: usize,
    pub diffs: Vec<OracleDiff>,
}

impl OracleResult {
    pub fn pass(&self) -> bool {
        self.diffs.is_empty()
    }
}

/// What the controller concluded, as allowed/denied. `None` for outcomes
/// that carry no whitelist judgement.
fn judged(outcome: Outcome) -> Option<bool> {
    match outcome {
        Outcome::Legitimate | Outcome::Suppressed => Some(true),
        Outcome::Alerted | Outcome::AlreadyBlocked => Some(false),
        _ => None,
    }
}

fn entry_admits(e: &AclEntry, k: &ConnKey, zone: &BTreeMap<String, BTreeSet<Ipv4Addr>>) -> bool {
    if e.protocol.is_some_and(|p| p != k.protocol) {
        return false;
    }
    let peer_ok = match &e.endpoint {
        None => true,
        Some(Endpoint::Ip(a)) => *a == k.dst_ip,
        Some(Endpoint::Domain(d)) => zone.get(&normalize(d)).is_some_and(|s| s.contains(&k.dst_ip)),
        // Unsubstituted: the owner is unknown, nothing matches.
        Some(Endpoint::Placeholder(_)) => false,
    };
    if !peer_ok {
        return false;
    }
    match (e.dst_port, e.direction) {
        (None, _) => true,
        (Some(p), Direction::DeviceToCloud) => p == k.dst_port,
        (Some(p), Direction::CloudToDevice) => p == k.src_port,
    }
}

fn expected(v: &VerdictRecord, p: &ProfileRecord, zone: &BTreeMap<String, BTreeSet<Ipv4Addr>>) -> bool {
    if let Some(q) = &v.dns_query {
        let q = normalize(q);
        return p.entries.iter().any(|e| e.domain().is_some_and(|d| normalize(d) == q));
    }
    p.entries.iter().any(|e| entry_admits(e, &v.conn_key, zone))
}

/// Re-derives the verdict of every judged packet sent by a device that
/// announced a MUD URL.
pub fn oracle_check(report: &RunReport) -> OracleResult {
    let profiles: BTreeMap<ProfileId, &ProfileRecord> = report.profiles.iter().map(|p| (p.id, p)).collect();
    let declared: BTreeSet<_> = report
        .devices
        .iter()
        .filter(|d| d.declared_mud_url.is_some())
        .map(|d| (d.customer, d.mac))
        .collect();

    let mut zone: BTreeMap<String, BTreeSet<Ipv4Addr>> = BTreeMap::new();
    let mut zi = 0;
    let mut out = OracleResult::default();
    for (index, v) in report.verdict_log.iter().enumerate() {
        while zi < report.zone_log.len() && report.zone_log[zi].seq < v.seq {
            let z = &report.zone_log[zi];
            zone.insert(z.name.clone(), z.addrs.iter().copied().collect());
            zi += 1;
        }
        let (Some(pid), Some(mac)) = (v.profile, v.mac) else { continue };
        if !declared.contains(&(v.customer, mac)) {
            continue;
        }
        let Some(got) = judged(v.outcome) else { continue };
        let Some(p) = profiles.get(&pid) else { continue };
        out.checked += 1;
        let want = expected(v, p, &zone);
        if want != got {
            out.diffs.push(OracleDiff {
                index,
                seq: v.seq,
                ts: v.ts,
                conn_key: v.conn_key,
                profile: pid,
                expected: want,
                outcome: v.outcome,
            });
        }
    }
    out
}
