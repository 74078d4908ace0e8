// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Whitelist enforcement at the ISP border router.
//!
//! The router forwards live traffic, drops whatever an installed ACL
//! matches, and mirrors outbound packets of monitored customers to the
//! WLM tap whether or not they were dropped.

use crate::net::{ConnKey, Packet, Tick};
use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateDirection {
    To,
    From,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum AclScope {
    Connection { key: ConnKey, bidirectional: bool },
    Aggregate { net: Ipv4Net, direction: AggregateDirection },
}

impl AclScope {
    pub fn matches(&self, p: &Packet) -> bool {
        match self {
            AclScope::Connection { key, bidirectional } => {
                let k = p.key();
                k == *key || (*bidirectional && k == key.reverse())
            }
            AclScope::Aggregate { net, direction } => match direction {
                AggregateDirection::To => net.contains(&p.dst_ip),
                AggregateDirection::From => net.contains(&p.src_ip),
                AggregateDirection::Both => net.contains(&p.dst_ip) || net.contains(&p.src_ip),
            },
        }
    }
}

/// A blocking request from the controller or the gateway enforcer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AclRequest {
    pub scope: AclScope,
    pub ts: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AclId(pub u64);

#[derive(Debug)]
pub struct AclRule {
    pub id: AclId,
    pub scope: AclScope,
    pub installed_at: Tick,
    hits: AtomicU64,
    last_hit: AtomicU64,
}

impl AclRule {
    pub fn hits(&self) -> u64 {
        self.hits.load(Relaxed)
    }
}

/// Export line for one rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AclExport {
    pub id: AclId,
    #[serde(flatten)]
    pub scope: AclScope,
    pub installed_at: Tick,
    pub hits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Forwarded {
    Delivered,
    Blocked { rule: AclId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RouterConfig {
    /// Drop rules that have not matched for this many ticks.
    pub idle_expiry: Option<Tick>,
    /// Rewrite DSCP to 0 on packets leaving the ISP towards the Internet.
    pub bleach_dscp: bool,
}

#[derive(Debug, Default)]
pub struct BorderRouter {
    config: RouterConfig,
    /// Most recently installed first.
    acls: Vec<AclRule>,
    next_id: u64,
    monitored: BTreeSet<Ipv4Addr>,
    enforcing: bool,
    delivered: AtomicU64,
    blocked: AtomicU64,
    mirrored: AtomicU64,
}

impl BorderRouter {
    pub fn new(config: RouterConfig) -> Self {
        BorderRouter { config, enforcing: true, ..Default::default() }
    }

    /// With enforcement off, rules are kept and exported but never drop.
    pub fn set_enforcing(&mut self, on: bool) {
        self.enforcing = on;
    }

    pub fn monitor(&mut self, customer_ip: Ipv4Addr) {
        self.monitored.insert(customer_ip);
    }

    pub fn unmonitor(&mut self, customer_ip: Ipv4Addr) {
        self.monitored.remove(&customer_ip);
    }

    pub fn is_monitored(&self, ip: Ipv4Addr) -> bool {
        self.monitored.contains(&ip)
    }

    /// Installs a rule, or returns the existing one with the same scope.
    pub fn apply_acl(&mut self, req: AclRequest) -> AclId {
        if let Some(r) = self.acls.iter().find(|r| r.scope == req.scope) {
            return r.id;
        }
        let id = AclId(self.next_id);
        self.next_id += 1;
        self.acls.insert(
            0,
            AclRule {
                id,
                scope: req.scope,
                installed_at: req.ts,
                hits: AtomicU64::new(0),
                last_hit: AtomicU64::new(req.ts),
            },
        );
        id
    }

    pub fn remove_acl(&mut self, id: AclId) -> bool {
        let before = self.acls.len();
        self.acls.retain(|r| r.id != id);
        self.acls.len() != before
    }

    pub fn acl_count(&self) -> usize {
        self.acls.len()
    }

    pub fn acls(&self) -> &[AclRule] {
        &self.acls
    }

    /// Removes rules idle for longer than the configured expiry.
    pub fn expire(&mut self, now: Tick) -> usize {
        let Some(idle) = self.config.idle_expiry else {
            return 0;
        };
        let before = self.acls.len();
        self.acls.retain(|r| now.saturating_sub(r.last_hit.load(Relaxed)) < idle);
        before - self.acls.len()
    }

    /// Forwards one live packet. Returns the forwarding decision and, for
    /// outbound packets of monitored customers, the copy for the tap.
    pub fn forward(&self, p: &Packet, outbound: bool) -> (Forwarded, Option<Packet>) {
        let copy = (outbound && self.monitored.contains(&p.src_ip)).then(|| p.clone());
        if copy.is_some() {
            self.mirrored.fetch_add(1, Relaxed);
        }
        if self.enforcing {
            if let Some(r) = self.acls.iter().find(|r| r.scope.matches(p)) {
                r.hits.fetch_add(1, Relaxed);
                r.last_hit.fetch_max(p.ts, Relaxed);
                self.blocked.fetch_add(1, Relaxed);
                return (Forwarded::Blocked { rule: r.id }, copy);
            }
        }
        self.delivered.fetch_add(1, Relaxed);
        (Forwarded::Delivered, copy)
    }

    /// Packet as it appears past the border.
    pub fn egress_rewrite(&self, mut p: Packet) -> Packet {
        if self.config.bleach_dscp {
            p.dscp = crate::net::Dscp::ZERO;
        }
        p
    }

    pub fn export(&self) -> Vec<AclExport> {
        let mut out: Vec<AclExport> = self
            .acls
            .iter()
            .map(|r| AclExport { id: r.id, scope: r.scope, installed_at: r.installed_at, hits: r.hits() })
            .collect();
        out.sort_by_key(|e| e.id);
        out
    }

    /// One JSON object per line, ordered by rule id.
    pub fn export_json_lines(&self) -> String {
        self.export()
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect()
    }

    pub fn stats(&self) -> (u64, u64, u64) {
        (self.delivered.load(Relaxed), self.blocked.load(Relaxed), self.mirrored.load(Relaxed))
    }
}

/// The connection key in both orientations.
pub fn both_ways(k: ConnKey) -> [ConnKey; 2] {
    [k, k.reverse()]
}
