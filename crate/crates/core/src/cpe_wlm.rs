// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Gateway-local whitelist monitor and enforcer for P2P and LAN traffic.
//!
//! Rules are kept per device MAC. Peers are named by MAC, by LAN address,
//! or by a domain (the owner domain handed out by the SVM) that is resolved
//! around caches whenever a check misses.

use crate::dns::{DnsUniverse, ResolverView};
use crate::mud::{AclEntry, Direction, Endpoint, MudProfile};
use crate::net::{ConnKey, MacAddr, Packet, Tick};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Peer {
    Mac(MacAddr),
    Ip(Ipv4Addr),
    Domain(String),
}

/// One local rule of a device. `port` follows [`AclEntry::dst_port`]: the
/// peer's port for device-to-cloud, the device's own port otherwise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocalRule {
    pub peer: Peer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalDecision {
    Permit,
    Block,
    /// Not this component's traffic; passes unjudged.
    OutOfScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    #[default]
    Block,
    AlertOnly,
    /// Local monitor switched off; every flow passes unjudged.
    Off,
}

/// The traffic shapes the local monitor is asked about.
#[derive(Debug, Clone, Copy)]
pub enum LocalFlow<'a> {
    /// LAN to LAN, both ends known.
    Lan { packet: &'a Packet, src_mac: MacAddr, dst_mac: MacAddr },
    /// Device to WAN, before NAT.
    Outbound { packet: &'a Packet, mac: MacAddr },
    /// WAN to device through a port forward, after translation.
    Forwarded { packet: &'a Packet, mac: MacAddr },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LocalAlert {
    pub ts: Tick,
    pub mac: MacAddr,
    pub conn_key: ConnKey,
    pub enforced: bool,
}

pub fn is_lan_addr(ip: Ipv4Addr) -> bool {
    ip.is_private()
}

/// Splits a (substituted) profile between the gateway and the VNF. Entries
/// naming an owner domain or a LAN address become local rules; everything
/// else stays in the returned VNF profile.
pub fn split_whitelist(profile: &MudProfile, owner_domains: &[&str]) -> (Option<MudProfile>, Vec<LocalRule>) {
    let is_local = |e: &AclEntry| match &e.endpoint {
        Some(Endpoint::Domain(d)) => owner_domains.contains(&d.as_str()),
        Some(Endpoint::Ip(ip)) => is_lan_addr(*ip),
        Some(Endpoint::Placeholder(_)) => true,
        None => false,
    };
    let local = profile
        .entries()
        .iter()
        .filter(|e| is_local(e))
        .filter_map(|e| {
            let peer = match &e.endpoint {
                Some(Endpoint::Domain(d)) => Peer::Domain(d.clone()),
                Some(Endpoint::Ip(ip)) => Peer::Ip(*ip),
                _ => return None,
            };
            Some(LocalRule { peer, protocol: e.protocol, port: e.dst_port, direction: e.direction })
        })
        .collect();
    (profile.retain(|e| !is_local(e)), local)
}

/// Endpoints of one packet seen from a device.
struct Sides {
    peer_ip: Ipv4Addr,
    peer_mac: Option<MacAddr>,
    device_port: u16,
    peer_port: u16,
    protocol: u8,
}

#[derive(Debug, Clone)]
pub struct CpeWlm {
    rules: BTreeMap<MacAddr, BTreeSet<LocalRule>>,
    mode: LocalMode,
    resolver: ResolverView,
    answers: BTreeMap<String, BTreeSet<Ipv4Addr>>,
    alerts: Vec<LocalAlert>,
    permits: u64,
    blocks: u64,
}

impl CpeWlm {
    pub fn new(seed: u64) -> Self {
        CpeWlm {
            rules: BTreeMap::new(),
            mode: LocalMode::default(),
            resolver: ResolverView::new(true, seed),
            answers: BTreeMap::new(),
            alerts: Vec::new(),
            permits: 0,
            blocks: 0,
        }
    }

    pub fn mode(&self) -> LocalMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: LocalMode) {
        self.mode = mode;
    }

    pub fn set_rules(&mut self, mac: MacAddr, rules: impl IntoIterator<Item = LocalRule>) {
        let rules: BTreeSet<_> = rules.into_iter().collect();
        if rules.is_empty() {
            self.rules.remove(&mac);
        } else {
            self.rules.insert(mac, rules);
        }
    }

    pub fn rules(&self, mac: MacAddr) -> Option<&BTreeSet<LocalRule>> {
        self.rules.get(&mac)
    }

    pub fn has_rules(&self) -> bool {
        self.mode != LocalMode::Off && !self.rules.is_empty()
    }

    pub fn clear(&mut self) {
        self.rules.clear();
        self.answers.clear();
    }

    pub fn alerts(&self) -> &[LocalAlert] {
        &self.alerts
    }

    pub fn drain_alerts(&mut self) -> Vec<LocalAlert> {
        std::mem::take(&mut self.alerts)
    }

    pub fn permits(&self) -> u64 {
        self.permits
    }

    pub fn blocks(&self) -> u64 {
        self.blocks
    }

    pub fn dns_queries(&self) -> u64 {
        self.resolver.upstream_queries()
    }

    fn rule_matches(&self, rule: &LocalRule, s: &Sides, answers: Option<&BTreeSet<Ipv4Addr>>) -> bool {
        let peer_ok = match &rule.peer {
            Peer::Mac(m) => s.peer_mac == Some(*m),
            Peer::Ip(ip) => *ip == s.peer_ip,
            Peer::Domain(_) => answers.is_some_and(|a| a.contains(&s.peer_ip)),
        };
        if !peer_ok || rule.protocol.is_some_and(|p| p != s.protocol) {
            return false;
        }
        match (rule.port, rule.direction) {
            (None, _) => true,
            (Some(p), Direction::DeviceToCloud) => p == s.peer_port,
            (Some(p), Direction::CloudToDevice) => p == s.device_port,
        }
    }

    /// True if any of `mac`'s rules admits the peer. Domain peers are
    /// re-resolved once when the cached answer does not match.
    fn device_permits(&mut self, mac: MacAddr, s: &Sides, dns: &DnsUniverse, now: Tick) -> bool {
        let Some(rules) = self.rules.get(&mac).cloned() else {
            return false;
        };
        for rule in &rules {
            let domain = match &rule.peer {
                Peer::Domain(d) => Some(d.clone()),
                _ => None,
            };
            if self.rule_matches(rule, s, domain.as_ref().and_then(|d| self.answers.get(d))) {
                return true;
            }
            if let Some(d) = domain {
                if let Ok(fresh) = self.resolver.resolve(dns, &d, true, now) {
                    self.answers.insert(d.clone(), fresh);
                }
                if self.rule_matches(rule, s, self.answers.get(&d)) {
                    return true;
                }
            }
        }
        false
    }

    /// Judges one packet. Violations are recorded as alerts; the caller
    /// drops the packet only when [`LocalMode::Block`] is active.
    pub fn check_local(&mut self, flow: LocalFlow<'_>, dns: &DnsUniverse, now: Tick) -> LocalDecision {
        let decision = match flow {
            LocalFlow::Lan { packet, src_mac, dst_mac } => {
                let involved = self.rules.contains_key(&src_mac) || self.rules.contains_key(&dst_mac);
                if !involved {
                    return LocalDecision::OutOfScope;
                }
                let as_src = Sides {
                    peer_ip: packet.dst_ip,
                    peer_mac: Some(dst_mac),
                    device_port: packet.src_port,
                    peer_port: packet.dst_port,
                    protocol: packet.protocol,
                };
                let as_dst = Sides {
                    peer_ip: packet.src_ip,
                    peer_mac: Some(src_mac),
                    device_port: packet.dst_port,
                    peer_port: packet.src_port,
                    protocol: packet.protocol,
                };
                if self.device_permits(src_mac, &as_src, dns, now)
                    || self.device_permits(dst_mac, &as_dst, dns, now)
                {
                    LocalDecision::Permit
                } else {
                    LocalDecision::Block
                }
            }
            LocalFlow::Outbound { packet, mac } => {
                let s = Sides {
                    peer_ip: packet.dst_ip,
                    peer_mac: None,
                    device_port: packet.src_port,
                    peer_port: packet.dst_port,
                    protocol: packet.protocol,
                };
                if self.device_permits(mac, &s, dns, now) {
                    LocalDecision::Permit
                } else {
                    LocalDecision::OutOfScope
                }
            }
            LocalFlow::Forwarded { packet, mac } => {
                if !self.rules.contains_key(&mac) {
                    return LocalDecision::OutOfScope;
                }
                let s = Sides {
                    peer_ip: packet.src_ip,
                    peer_mac: None,
                    device_port: packet.dst_port,
                    peer_port: packet.src_port,
                    protocol: packet.protocol,
                };
                if self.device_permits(mac, &s, dns, now) {
                    LocalDecision::Permit
                } else {
                    LocalDecision::Block
                }
            }
        };
        match decision {
            LocalDecision::Permit => self.permits += 1,
            LocalDecision::Block => {
                self.blocks += 1;
                let (packet, mac) = match flow {
                    LocalFlow::Lan { packet, src_mac, .. } => (packet, src_mac),
                    LocalFlow::Outbound { packet, mac } | LocalFlow::Forwarded { packet, mac } => (packet, mac),
                };
                self.alerts.push(LocalAlert {
                    ts: now,
                    mac,
                    conn_key: packet.key(),
                    enforced: self.mode == LocalMode::Block,
                });
            }
            LocalDecision::OutOfScope => {}
        }
        decision
    }
}
