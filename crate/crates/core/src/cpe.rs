// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Simulated home gateway: DHCP host table, NAT, per-MAC DSCP marking,
//! port forwarding, an optional local whitelist enforcer, and a flat
//! TR-069-style parameter tree with active notifications.
//!
//! Parameter paths:
//!
//! | path | access |
//! |------|--------|
//! | `WANIPConnection.ExternalIPAddress` | read, notify |
//! | `Hosts.HostNumberOfEntries` | read, notify |
//! | `Hosts.Host.<mac>.{HostName,IPAddress,InterfaceType,Active,MUDURL}` | read |
//! | `QueueManagement.Classification.<mac>.DSCPMark` | read/write, `-1` = leave unchanged |
//! | `QueueManagement.Classification.<mac>.Status` | read, `Enabled` or `Pending` |
//! | `QueueManagement.DefaultDSCPMark` | read/write, `-1` = disabled |
//! | `LANHostConfigManagement.DNSDirect` | read/write |
//! | `PortMapping.NumberOfEntries` | read, notify |
//! | `PortMapping.<port>/<proto>` | read, `<mac>:<port>` |
//! | `X_WLM.ResetPassMark` | read/write |
//! | `X_WLM.Mode` | read/write, `block` or `alert` |
//! | `X_WLM.LocalWhitelist.<mac>` | read/write, JSON rule list |

use crate::cpe_wlm::{CpeWlm, LocalDecision, LocalFlow, LocalMode, LocalRule};
use crate::dns::DnsUniverse;
use crate::net::{
    classify_dscp, ConnKey, CustomerId, Dscp, DscpClass, MacAddr, Packet, Payload, Tick, PASS_MARK,
};
use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use thiserror::Error;

pub const PATH_EXTERNAL_IP: &str = "WANIPConnection.ExternalIPAddress";
pub const PATH_HOST_COUNT: &str = "Hosts.HostNumberOfEntries";
pub const PATH_DEFAULT_MARK: &str = "QueueManagement.DefaultDSCPMark";
pub const PATH_DNS_DIRECT: &str = "LANHostConfigManagement.DNSDirect";
pub const PATH_PORTMAP_COUNT: &str = "PortMapping.NumberOfEntries";
pub const PATH_RESET_PASS_MARK: &str = "X_WLM.ResetPassMark";
pub const PATH_WLM_MODE: &str = "X_WLM.Mode";

pub fn host_path(mac: MacAddr, leaf: &str) -> String {
    format!("Hosts.Host.{mac}.{leaf}")
}

pub fn mark_path(mac: MacAddr) -> String {
    format!("QueueManagement.Classification.{mac}.DSCPMark")
}

pub fn mark_status_path(mac: MacAddr) -> String {
    format!("QueueManagement.Classification.{mac}.Status")
}

pub fn local_whitelist_path(mac: MacAddr) -> String {
    format!("X_WLM.LocalWhitelist.{mac}")
}

const NAT_FIRST_PORT: u16 = 40000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CpeError {
    #[error("unknown parameter path {0}")]
    UnknownPath(String),
    #[error("parameter {0} is read-only")]
    ReadOnly(String),
    #[error("invalid value {value:?} for {path}")]
    InvalidValue { path: String, value: String },
    #[error("unknown host {0}")]
    UnknownMac(MacAddr),
    #[error("NAT port pool exhausted")]
    NatExhausted,
    #[error("LAN address pool exhausted")]
    LanExhausted,
    #[error("configuration interface unreachable")]
    ConfigUnreachable,
    #[error("packet has no LAN source")]
    NotFromLan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Medium {
    Wired,
    Wireless,
}

impl Medium {
    fn interface_type(self) -> &'static str {
        match self {
            Medium::Wired => "Ethernet",
            Medium::Wireless => "802.11",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HostRecord {
    pub mac: MacAddr,
    pub hostname: String,
    pub medium: Medium,
    pub mud_url: Option<String>,
    pub ip: Ipv4Addr,
    pub active: bool,
    pub first_seen: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MarkAction {
    SetDscp(Dscp),
    NoChange,
}

#[derive(Debug, Clone, Copy)]
struct MarkingRule {
    action: MarkAction,
    effective_at: Tick,
    prior: Option<MarkAction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct PortForward {
    pub mac: MacAddr,
    pub internal_port: u16,
}

/// Pushed to the subscribed controller when a watched parameter changes
/// for a reason other than the controller itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Notification {
    pub customer: CustomerId,
    pub path: String,
    pub value: String,
    pub ts: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectOutcome {
    New(Ipv4Addr),
    Reconnected(Ipv4Addr),
}

/// DSCP value after each egress stage, for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgressTrace {
    pub local: Option<LocalDecision>,
    pub after_mark: Dscp,
    pub after_pass: Dscp,
    pub after_reset: Dscp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Egress {
    /// Leaves towards the ISP, translated.
    Wan { packet: Packet, trace: EgressTrace },
    /// Stays inside the home.
    Lan { packet: Packet, to: MacAddr, local: Option<LocalDecision> },
    /// Stopped by the local enforcer.
    Blocked { local: LocalDecision },
    /// No such LAN destination.
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ingress {
    Delivered { packet: Packet, to: MacAddr, local: Option<LocalDecision> },
    Blocked,
    Dropped,
}

/// Remote configuration surface, as used by the controller.
pub trait CpeConfig {
    fn get_param(&self, path: &str) -> Result<String, CpeError>;
    fn set_param(&mut self, path: &str, value: &str) -> Result<(), CpeError>;
    fn set_notification(&mut self, path: &str, active: bool) -> Result<(), CpeError>;
    fn param_names(&self, prefix: &str) -> Result<Vec<String>, CpeError>;
}

#[derive(Debug, Clone)]
pub struct CpeSim {
    customer: CustomerId,
    external_ip: Ipv4Addr,
    lan: Ipv4Net,
    own_mac: MacAddr,
    hosts: BTreeMap<MacAddr, HostRecord>,
    by_ip: BTreeMap<Ipv4Addr, MacAddr>,
    nat_out: BTreeMap<ConnKey, ConnKey>,
    nat_in: BTreeMap<ConnKey, ConnKey>,
    next_port: u32,
    marking: BTreeMap<MacAddr, MarkingRule>,
    default_mark: Option<Dscp>,
    dns_direct: bool,
    reset_pass_mark: bool,
    port_forwards: BTreeMap<(u16, u8), PortForward>,
    notify: BTreeSet<String>,
    notifications: Vec<Notification>,
    wlm: CpeWlm,
    reachable: bool,
    mark_latency: Tick,
    now: Tick,
}

impl CpeSim {
    pub fn new(customer: CustomerId, external_ip: Ipv4Addr, seed: u64) -> Self {
        let own_mac = MacAddr([0x02, 0xcc, 0, 0, (customer.0 >> 8) as u8, customer.0 as u8]);
        CpeSim {
            customer,
            external_ip,
            lan: "192.168.1.0/24".parse().expect("static net"),
            own_mac,
            hosts: BTreeMap::new(),
            by_ip: BTreeMap::new(),
            nat_out: BTreeMap::new(),
            nat_in: BTreeMap::new(),
            next_port: NAT_FIRST_PORT as u32,
            marking: BTreeMap::new(),
            default_mark: None,
            dns_direct: false,
            reset_pass_mark: false,
            port_forwards: BTreeMap::new(),
            notify: BTreeSet::new(),
            notifications: Vec::new(),
            wlm: CpeWlm::new(seed),
            reachable: true,
            mark_latency: 0,
            now: 0,
        }
    }

    /// Delay between a marking rule being written and taking effect.
    pub fn with_mark_latency(mut self, ticks: Tick) -> Self {
        self.mark_latency = ticks;
        self
    }

    pub fn customer(&self) -> CustomerId {
        self.customer
    }

    pub fn external_ip(&self) -> Ipv4Addr {
        self.external_ip
    }

    pub fn gateway_ip(&self) -> Ipv4Addr {
        self.lan.hosts().next().expect("non-empty lan")
    }

    pub fn own_mac(&self) -> MacAddr {
        self.own_mac
    }

    pub fn lan(&self) -> Ipv4Net {
        self.lan
    }

    pub fn hosts(&self) -> impl Iterator<Item = &HostRecord> {
        self.hosts.values()
    }

    pub fn host(&self, mac: MacAddr) -> Option<&HostRecord> {
        self.hosts.get(&mac)
    }

    pub fn host_by_ip(&self, ip: Ipv4Addr) -> Option<&HostRecord> {
        self.by_ip.get(&ip).and_then(|m| self.hosts.get(m))
    }

    pub fn set_reachable(&mut self, reachable: bool) {
        self.reachable = reachable;
    }

    pub fn wlm(&self) -> &CpeWlm {
        &self.wlm
    }

    pub fn wlm_mut(&mut self) -> &mut CpeWlm {
        &mut self.wlm
    }

    pub fn dns_direct(&self) -> bool {
        self.dns_direct
    }

    pub fn nat_bindings(&self) -> usize {
        self.nat_out.len()
    }

    pub fn advance(&mut self, now: Tick) {
        self.now = self.now.max(now);
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn drain_notifications(&mut self) -> Vec<Notification> {
        std::mem::take(&mut self.notifications)
    }

    fn changed_externally(&mut self, path: &str) {
        if self.notify.contains(path) {
            let value = self.get_param(path).unwrap_or_default();
            self.notifications.push(Notification {
                customer: self.customer,
                path: path.to_string(),
                value,
                ts: self.now,
            });
        }
    }

    /// DHCP on the WAN side handed out a new address. Existing NAT
    /// bindings die with the old address.
    pub fn set_external_ip(&mut self, ip: Ipv4Addr) {
        if ip == self.external_ip {
            return;
        }
        self.external_ip = ip;
        self.nat_out.clear();
        self.nat_in.clear();
        self.changed_externally(PATH_EXTERNAL_IP);
    }

    /// A device associates. Only the first association of a MAC counts as
    /// a new host; later ones just reactivate the kept record.
    pub fn connect_device(
        &mut self,
        mac: MacAddr,
        hostname: &str,
        medium: Medium,
        mud_url: Option<&str>,
    ) -> Result<ConnectOutcome, CpeError> {
        if let Some(h) = self.hosts.get_mut(&mac) {
            h.active = true;
            return Ok(ConnectOutcome::Reconnected(h.ip));
        }
        let ip = self
            .lan
            .hosts()
            .skip(1)
            .find(|a| !self.by_ip.contains_key(a))
            .ok_or(CpeError::LanExhausted)?;
        self.hosts.insert(
            mac,
            HostRecord {
                mac,
                hostname: hostname.to_string(),
                medium,
                mud_url: mud_url.map(str::to_string),
                ip,
                active: true,
                first_seen: self.now,
            },
        );
        self.by_ip.insert(ip, mac);
        self.changed_externally(PATH_HOST_COUNT);
        Ok(ConnectOutcome::New(ip))
    }

    pub fn disconnect(&mut self, mac: MacAddr) -> Result<(), CpeError> {
        let h = self.hosts.get_mut(&mac).ok_or(CpeError::UnknownMac(mac))?;
        h.active = false;
        Ok(())
    }

    /// LAN device an inbound `(port, protocol)` is forwarded to.
    pub fn port_forward_target(&self, external_port: u16, protocol: u8) -> Option<MacAddr> {
        self.port_forwards.get(&(external_port, protocol)).map(|f| f.mac)
    }

    pub fn add_port_forward(&mut self, external_port: u16, protocol: u8, mac: MacAddr, internal_port: u16) -> Result<(), CpeError> {
        if !self.hosts.contains_key(&mac) {
            return Err(CpeError::UnknownMac(mac));
        }
        self.port_forwards.insert((external_port, protocol), PortForward { mac, internal_port });
        self.changed_externally(PATH_PORTMAP_COUNT);
        Ok(())
    }

    /// Stops marking `mac` while keeping its classification object, so the
    /// default mark does not apply to it either.
    pub fn remove_mark(&mut self, mac: MacAddr) -> Result<(), CpeError> {
        if !self.hosts.contains_key(&mac) && mac != self.own_mac {
            return Err(CpeError::UnknownMac(mac));
        }
        self.set_mark(mac, MarkAction::NoChange);
        Ok(())
    }

    fn set_mark(&mut self, mac: MacAddr, action: MarkAction) {
        let prior = self.active_action(mac);
        self.marking.insert(
            mac,
            MarkingRule { action, effective_at: self.now + self.mark_latency, prior },
        );
    }

    /// Clears every piece of configuration and the host table.
    pub fn factory_reset(&mut self) {
        self.hosts.clear();
        self.by_ip.clear();
        self.nat_out.clear();
        self.nat_in.clear();
        self.next_port = NAT_FIRST_PORT as u32;
        self.marking.clear();
        self.default_mark = None;
        self.dns_direct = false;
        self.reset_pass_mark = false;
        self.port_forwards.clear();
        self.notify.clear();
        self.wlm.clear();
        self.wlm.set_mode(LocalMode::default());
    }

    fn active_action(&self, mac: MacAddr) -> Option<MarkAction> {
        let r = self.marking.get(&mac)?;
        if r.effective_at <= self.now {
            Some(r.action)
        } else {
            r.prior
        }
    }

    /// Marking stage on its own.
    pub fn stage_mark(&self, p: &Packet) -> Dscp {
        let mac = p.src_mac.unwrap_or(self.own_mac);
        if p.dns_query().is_some() && !self.dns_direct && mac != self.own_mac {
            // Relayed by the gateway's own resolver: leaves unclassified.
            return Dscp::ZERO;
        }
        match self.active_action(mac) {
            Some(MarkAction::SetDscp(d)) => d,
            Some(MarkAction::NoChange) => p.dscp,
            None => self.default_mark.unwrap_or(p.dscp),
        }
    }

    fn nat(&mut self, mut p: Packet) -> Result<Packet, CpeError> {
        let mac = p.src_mac.take();
        if let Some(mac) = mac {
            if let Some((&(ext, _), _)) = self
                .port_forwards
                .iter()
                .find(|((_, proto), f)| *proto == p.protocol && f.mac == mac && f.internal_port == p.src_port)
            {
                p.src_ip = self.external_ip;
                p.src_port = ext;
                return Ok(p);
            }
        }
        let internal = p.key();
        let external = match self.nat_out.get(&internal) {
            Some(k) => *k,
            None => {
                if self.next_port > u16::MAX as u32 {
                    return Err(CpeError::NatExhausted);
                }
                let k = ConnKey::new(self.external_ip, self.next_port as u16, p.dst_ip, p.dst_port, p.protocol);
                self.next_port += 1;
                self.nat_out.insert(internal, k);
                self.nat_in.insert(k, internal);
                k
            }
        };
        p.src_ip = external.src_ip;
        p.src_port = external.src_port;
        Ok(p)
    }

    /// Sends a LAN-originated packet through the gateway. Packets without a
    /// source MAC are the gateway's own traffic.
    pub fn egress(&mut self, p: &Packet, dns: &DnsUniverse) -> Result<Egress, CpeError> {
        if let Some(mac) = p.src_mac {
            if !self.hosts.contains_key(&mac) {
                return Err(CpeError::UnknownMac(mac));
            }
        }
        if self.lan.contains(&p.dst_ip) {
            let Some(&dst_mac) = self.by_ip.get(&p.dst_ip) else {
                return Ok(Egress::Dropped);
            };
            if !self.hosts[&dst_mac].active {
                return Ok(Egress::Dropped);
            }
            let src_mac = p.src_mac.unwrap_or(self.own_mac);
            let local = self.wlm.has_rules().then(|| {
                self.wlm.check_local(LocalFlow::Lan { packet: p, src_mac, dst_mac }, dns, self.now)
            });
            if local == Some(LocalDecision::Block) && self.wlm.mode() == LocalMode::Block {
                return Ok(Egress::Blocked { local: LocalDecision::Block });
            }
            return Ok(Egress::Lan { packet: p.clone(), to: dst_mac, local });
        }

        let local = match p.src_mac {
            Some(mac) if self.wlm.has_rules() => {
                Some(self.wlm.check_local(LocalFlow::Outbound { packet: p, mac }, dns, self.now))
            }
            _ => None,
        };
        let after_mark = self.stage_mark(p);
        let after_pass = if local == Some(LocalDecision::Permit) {
            Dscp::new(PASS_MARK).expect("valid")
        } else {
            after_mark
        };
        let after_reset = if self.reset_pass_mark && after_pass.value() == PASS_MARK {
            Dscp::ZERO
        } else {
            after_pass
        };
        let out = self.nat(p.clone().with_dscp(after_reset))?;
        Ok(Egress::Wan { packet: out, trace: EgressTrace { local, after_mark, after_pass, after_reset } })
    }

    /// Accepts a packet from the WAN side.
    pub fn ingress(&mut self, p: &Packet, dns: &DnsUniverse) -> Ingress {
        if p.dst_ip != self.external_ip {
            return Ingress::Dropped;
        }
        if let Some(internal) = self.nat_in.get(&p.key().reverse()) {
            let mut q = p.clone();
            q.dst_ip = internal.src_ip;
            q.dst_port = internal.src_port;
            let to = self.by_ip.get(&q.dst_ip).copied().unwrap_or(self.own_mac);
            return Ingress::Delivered { packet: q, to, local: None };
        }
        let Some(fwd) = self.port_forwards.get(&(p.dst_port, p.protocol)).copied() else {
            return Ingress::Dropped;
        };
        let Some(host) = self.hosts.get(&fwd.mac) else {
            return Ingress::Dropped;
        };
        if !host.active {
            return Ingress::Dropped;
        }
        let mut q = p.clone();
        q.dst_ip = host.ip;
        q.dst_port = fwd.internal_port;
        let local = self.wlm.has_rules().then(|| {
            self.wlm.check_local(LocalFlow::Forwarded { packet: &q, mac: fwd.mac }, dns, self.now)
        });
        if local == Some(LocalDecision::Block) && self.wlm.mode() == LocalMode::Block {
            return Ingress::Blocked;
        }
        Ingress::Delivered { packet: q, to: fwd.mac, local }
    }

    fn parse_mac_path<'a>(&self, path: &'a str, prefix: &str) -> Option<(MacAddr, &'a str)> {
        let rest = path.strip_prefix(prefix)?;
        // MAC has 17 characters, then ".<leaf>" (or nothing).
        let (mac, leaf) = if rest.len() > 17 { rest.split_at(17) } else { (rest, "") };
        let mac: MacAddr = mac.parse().ok()?;
        Some((mac, leaf.strip_prefix('.').unwrap_or(leaf)))
    }

    fn classified(&self, mac: MacAddr) -> bool {
        self.hosts.contains_key(&mac) || mac == self.own_mac
    }
}

fn bool_str(b: bool) -> String {
    if b { "true" } else { "false" }.to_string()
}

fn parse_bool(path: &str, v: &str) -> Result<bool, CpeError> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(CpeError::InvalidValue { path: path.into(), value: v.into() }),
    }
}

impl CpeConfig for CpeSim {
    fn get_param(&self, path: &str) -> Result<String, CpeError> {
        if !self.reachable {
            return Err(CpeError::ConfigUnreachable);
        }
        let unknown = || CpeError::UnknownPath(path.to_string());
        match path {
            PATH_EXTERNAL_IP => return Ok(self.external_ip.to_string()),
            PATH_HOST_COUNT => return Ok(self.hosts.len().to_string()),
            PATH_DEFAULT_MARK => {
                return Ok(self.default_mark.map_or("-1".into(), |d| d.value().to_string()))
            }
            PATH_DNS_DIRECT => return Ok(bool_str(self.dns_direct)),
            PATH_PORTMAP_COUNT => return Ok(self.port_forwards.len().to_string()),
            PATH_RESET_PASS_MARK => return Ok(bool_str(self.reset_pass_mark)),
            PATH_WLM_MODE => {
                return Ok(match self.wlm.mode() {
                    LocalMode::Block => "block",
                    LocalMode::AlertOnly => "alert",
                    LocalMode::Off => "off",
                }
                .into())
            }
            _ => {}
        }
        if let Some((mac, leaf)) = self.parse_mac_path(path, "Hosts.Host.") {
            let h = self.hosts.get(&mac).ok_or_else(unknown)?;
            return match leaf {
                "HostName" => Ok(h.hostname.clone()),
                "IPAddress" => Ok(h.ip.to_string()),
                "InterfaceType" => Ok(h.medium.interface_type().into()),
                "Active" => Ok(bool_str(h.active)),
                "MUDURL" => Ok(h.mud_url.clone().unwrap_or_default()),
                _ => Err(unknown()),
            };
        }
        if let Some((mac, leaf)) = self.parse_mac_path(path, "QueueManagement.Classification.") {
            let r = self.marking.get(&mac).ok_or_else(unknown)?;
            return match leaf {
                "DSCPMark" => Ok(match r.action {
                    MarkAction::SetDscp(d) => d.value().to_string(),
                    MarkAction::NoChange => "-1".into(),
                }),
                "Status" => Ok(if r.effective_at <= self.now { "Enabled" } else { "Pending" }.into()),
                _ => Err(unknown()),
            };
        }
        if let Some((mac, "")) = self.parse_mac_path(path, "X_WLM.LocalWhitelist.") {
            let rules: Vec<&LocalRule> = self.wlm.rules(mac).ok_or_else(unknown)?.iter().collect();
            return Ok(serde_json::to_string(&rules).expect("serializable"));
        }
        if let Some(rest) = path.strip_prefix("PortMapping.") {
            let (port, proto) = rest.split_once('/').ok_or_else(unknown)?;
            let key = (port.parse().map_err(|_| unknown())?, proto.parse().map_err(|_| unknown())?);
            let f = self.port_forwards.get(&key).ok_or_else(unknown)?;
            return Ok(format!("{}:{}", f.mac, f.internal_port));
        }
        Err(unknown())
    }

    fn set_param(&mut self, path: &str, value: &str) -> Result<(), CpeError> {
        if !self.reachable {
            return Err(CpeError::ConfigUnreachable);
        }
        let invalid = || CpeError::InvalidValue { path: path.into(), value: value.into() };
        match path {
            PATH_EXTERNAL_IP | PATH_HOST_COUNT | PATH_PORTMAP_COUNT => {
                return Err(CpeError::ReadOnly(path.into()))
            }
            PATH_DEFAULT_MARK => {
                self.default_mark = match value {
                    "-1" => None,
                    v => {
                        let d = v.parse::<u8>().ok().and_then(|v| Dscp::new(v).ok()).ok_or_else(invalid)?;
                        if classify_dscp(d) == DscpClass::CommonlyUsed {
                            return Err(invalid());
                        }
                        Some(d)
                    }
                };
                return Ok(());
            }
            PATH_DNS_DIRECT => {
                self.dns_direct = parse_bool(path, value)?;
                return Ok(());
            }
            PATH_RESET_PASS_MARK => {
                self.reset_pass_mark = parse_bool(path, value)?;
                return Ok(());
            }
            PATH_WLM_MODE => {
                let mode = match value {
                    "block" => LocalMode::Block,
                    "alert" => LocalMode::AlertOnly,
                    "off" => LocalMode::Off,
                    _ => return Err(invalid()),
                };
                self.wlm.set_mode(mode);
                return Ok(());
            }
            _ => {}
        }
        if let Some((mac, leaf)) = self.parse_mac_path(path, "QueueManagement.Classification.") {
            if leaf != "DSCPMark" {
                return Err(if leaf == "Status" {
                    CpeError::ReadOnly(path.into())
                } else {
                    CpeError::UnknownPath(path.into())
                });
            }
            if !self.classified(mac) {
                return Err(CpeError::UnknownPath(path.into()));
            }
            let action = if value == "-1" {
                MarkAction::NoChange
            } else {
                let d = value.parse::<u8>().ok().and_then(|v| Dscp::new(v).ok()).ok_or_else(invalid)?;
                if !matches!(classify_dscp(d), DscpClass::DeviceMark(_)) || d.value() == PASS_MARK {
                    return Err(invalid());
                }
                // Marks identify devices, so they must stay distinct.
                let clash = self
                    .marking
                    .iter()
                    .any(|(m, r)| *m != mac && r.action == MarkAction::SetDscp(d));
                if clash {
                    return Err(invalid());
                }
                MarkAction::SetDscp(d)
            };
            self.set_mark(mac, action);
            return Ok(());
        }
        if let Some((mac, "")) = self.parse_mac_path(path, "X_WLM.LocalWhitelist.") {
            if !self.classified(mac) {
                return Err(CpeError::UnknownPath(path.into()));
            }
            let rules: Vec<LocalRule> = if value.is_empty() {
                Vec::new()
            } else {
                serde_json::from_str(value).map_err(|_| invalid())?
            };
            self.wlm.set_rules(mac, rules);
            return Ok(());
        }
        if path.starts_with("Hosts.") || path.starts_with("PortMapping.") {
            return Err(CpeError::ReadOnly(path.into()));
        }
        Err(CpeError::UnknownPath(path.into()))
    }

    fn set_notification(&mut self, path: &str, active: bool) -> Result<(), CpeError> {
        if !self.reachable {
            return Err(CpeError::ConfigUnreachable);
        }
        match path {
            PATH_EXTERNAL_IP | PATH_HOST_COUNT | PATH_PORTMAP_COUNT => {
                if active {
                    self.notify.insert(path.to_string());
                } else {
                    self.notify.remove(path);
                }
                Ok(())
            }
            _ => Err(CpeError::UnknownPath(path.into())),
        }
    }

    fn param_names(&self, prefix: &str) -> Result<Vec<String>, CpeError> {
        if !self.reachable {
            return Err(CpeError::ConfigUnreachable);
        }
        let mut names = vec![
            PATH_EXTERNAL_IP.to_string(),
            PATH_HOST_COUNT.to_string(),
            PATH_DEFAULT_MARK.to_string(),
            PATH_DNS_DIRECT.to_string(),
            PATH_PORTMAP_COUNT.to_string(),
            PATH_RESET_PASS_MARK.to_string(),
            PATH_WLM_MODE.to_string(),
        ];
        for mac in self.hosts.keys() {
            for leaf in ["HostName", "IPAddress", "InterfaceType", "Active", "MUDURL"] {
                names.push(host_path(*mac, leaf));
            }
        }
        for mac in self.marking.keys() {
            names.push(mark_path(*mac));
            names.push(mark_status_path(*mac));
        }
        for (port, proto) in self.port_forwards.keys() {
            names.push(format!("PortMapping.{port}/{proto}"));
        }
        for mac in self.hosts.keys().chain(std::iter::once(&self.own_mac)) {
            if self.wlm.rules(*mac).is_some() {
                names.push(local_whitelist_path(*mac));
            }
        }
        names.retain(|n| n.starts_with(prefix));
        names.sort();
        Ok(names)
    }
}

/// Hosts listed under `Hosts.Host.` as seen through the config surface.
pub fn list_host_macs(cpe: &dyn CpeConfig) -> Result<Vec<MacAddr>, CpeError> {
    let mut macs: Vec<MacAddr> = cpe
        .param_names("Hosts.Host.")?
        .iter()
        .filter_map(|n| n.strip_prefix("Hosts.Host.")?.get(..17)?.parse().ok())
        .collect();
    macs.dedup();
    Ok(macs)
}

/// True if `p` carries a DNS query (used by callers routing relays).
pub fn is_dns(p: &Packet) -> bool {
    matches!(p.payload, Payload::DnsQuery { .. })
}
