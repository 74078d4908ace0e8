// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! MUD files and the whitelists compiled from them.
//!
//! Only the part of the RFC 8520 / `ietf-access-control-list` model that the
//! VNF pipeline can match on is accepted: IPv4 ACEs naming a peer either by
//! DNS name (`ietf-acldns:{src,dst}-dnsname`) or by a /32 literal, plus an
//! optional protocol and TCP/UDP destination port. Anything else is rejected
//! with [`MudError::UnsupportedAcl`] rather than silently ignored.
//!
//! A profile may carry the owner placeholder `$owner-unique-domain$` in a
//! dnsname field. It stays unresolved until [`MudProfile::substitute_placeholder`]
//! swaps in the owner's tracking domain.

use crate::net::Packet;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::sync::Arc;
use thiserror::Error;

pub const OWNER_DOMAIN_TOKEN: &str = "$owner-unique-domain$";

/// Placeholder for the owner's LAN-side record (dual-record internal
/// traffic). Local extension; not part of the upstream token set.
pub const OWNER_INTERNAL_TOKEN: &str = "$owner-internal-id$";

const DST_DNSNAME: &str = "ietf-acldns:dst-dnsname";
const SRC_DNSNAME: &str = "ietf-acldns:src-dnsname";
const DST_NETWORK: &str = "destination-ipv4-network";
const SRC_NETWORK: &str = "source-ipv4-network";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MudError {
    #[error("malformed MUD file: {0}")]
    MalformedJson(String),
    #[error("unsupported ACL construct: {0}")]
    UnsupportedAcl(String),
    #[error("invalid ACE '{ace}': {reason}")]
    InvalidAce { ace: String, reason: String },
    #[error("MUD file whitelists nothing")]
    EmptyWhitelist,
    #[error("profile has no owner placeholder")]
    NoPlaceholder,
    #[error("invalid domain name '{0}'")]
    InvalidDomain(String),
}

/// Stable identifier of one device type's whitelist.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProfileId(pub u64);

impl fmt::Display for ProfileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl fmt::Debug for ProfileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ProfileId({self})")
    }
}

impl ProfileId {
    fn digest(parts: &[&str]) -> ProfileId {
        let mut h = Sha256::new();
        for (i, p) in parts.iter().enumerate() {
            if i > 0 {
                h.update([0u8]);
            }
            h.update(p.as_bytes());
        }
        let out = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&out[..8]);
        ProfileId(u64::from_be_bytes(b))
    }

    /// Id derived from the canonical form of a MUD URL.
    pub fn for_url(mud_url: &str) -> ProfileId {
        ProfileId::digest(&[&canonical_url(mud_url)])
    }
}

/// Lowercases scheme and host and drops default ports. Strings that do not
/// parse as URLs are only trimmed.
pub fn canonical_url(raw: &str) -> String {
    match url::Url::parse(raw.trim()) {
        Ok(u) => u.as_str().trim_end_matches('/').to_string(),
        Err(_) => raw.trim().to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    DeviceToCloud,
    CloudToDevice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placeholder {
    OwnerDomain,
    OwnerInternal,
}

impl Placeholder {
    pub fn token(self) -> &'static str {
        match self {
            Placeholder::OwnerDomain => OWNER_DOMAIN_TOKEN,
            Placeholder::OwnerInternal => OWNER_INTERNAL_TOKEN,
        }
    }

    fn from_token(s: &str) -> Option<Placeholder> {
        match s {
            OWNER_DOMAIN_TOKEN => Some(Placeholder::OwnerDomain),
            OWNER_INTERNAL_TOKEN => Some(Placeholder::OwnerInternal),
            _ => None,
        }
    }
}

/// The remote peer an ACE names.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Domain(String),
    Placeholder(Placeholder),
    Ip(Ipv4Addr),
}

/// One accepted ACE. `dst_port` is the port on the receiving side of the
/// ACE's direction: the cloud port for device-to-cloud, the device's own
/// port for cloud-to-device.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AclEntry {
    pub direction: Direction,
    pub endpoint: Option<Endpoint>,
    pub protocol: Option<u8>,
    pub dst_port: Option<u16>,
}

impl AclEntry {
    pub fn domain(&self) -> Option<&str> {
        match &self.endpoint {
            Some(Endpoint::Domain(d)) => Some(d),
            _ => None,
        }
    }

    pub fn placeholder(&self) -> Option<Placeholder> {
        match self.endpoint {
            Some(Endpoint::Placeholder(p)) => Some(p),
            _ => None,
        }
    }

    fn validate(&self, ace: &str) -> Result<(), MudError> {
        if self.endpoint.is_none() && (self.dst_port.is_none() || self.protocol.is_none()) {
            return Err(MudError::InvalidAce {
                ace: ace.to_string(),
                reason: "needs a dnsname, an address, or a (port, protocol) pair".into(),
            });
        }
        if self.dst_port.is_some() && !matches!(self.protocol, Some(6) | Some(17)) {
            return Err(MudError::InvalidAce {
                ace: ace.to_string(),
                reason: "port given without tcp/udp protocol".into(),
            });
        }
        Ok(())
    }
}

/// A device type's whitelist as declared by its MUD file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MudProfile {
    id: ProfileId,
    mud_url: String,
    systeminfo: Option<String>,
    entries: BTreeSet<AclEntry>,
    owner_domain: Option<String>,
}

impl MudProfile {
    /// Builds a profile directly. Fails on an empty entry set.
    pub fn new(
        mud_url: &str,
        entries: impl IntoIterator<Item = AclEntry>,
    ) -> Result<MudProfile, MudError> {
        let entries: BTreeSet<AclEntry> = entries.into_iter().collect();
        if entries.is_empty() {
            return Err(MudError::EmptyWhitelist);
        }
        for e in &entries {
            e.validate("<constructed>")?;
        }
        Ok(MudProfile {
            id: ProfileId::for_url(mud_url),
            mud_url: mud_url.to_string(),
            systeminfo: None,
            entries,
            owner_domain: None,
        })
    }

    pub fn id(&self) -> ProfileId {
        self.id
    }

    pub fn mud_url(&self) -> &str {
        &self.mud_url
    }

    pub fn systeminfo(&self) -> Option<&str> {
        self.systeminfo.as_deref()
    }

    pub fn entries(&self) -> &BTreeSet<AclEntry> {
        &self.entries
    }

    /// The owner domain this profile was specialised with, if any.
    pub fn owner_domain(&self) -> Option<&str> {
        self.owner_domain.as_deref()
    }

    pub fn has_placeholder(&self) -> bool {
        self.placeholder_count(Placeholder::OwnerDomain) > 0
    }

    pub fn has_internal_placeholder(&self) -> bool {
        self.placeholder_count(Placeholder::OwnerInternal) > 0
    }

    pub fn placeholder_count(&self, which: Placeholder) -> usize {
        self.entries.iter().filter(|e| e.placeholder() == Some(which)).count()
    }

    /// Every concrete domain named by the profile.
    pub fn domains(&self) -> BTreeSet<&str> {
        self.entries.iter().filter_map(AclEntry::domain).collect()
    }

    /// Replaces every owner placeholder with `owner_domain`. The result is a
    /// distinct profile (its id folds in the domain) that is otherwise an
    /// ordinary placeholder-free profile.
    pub fn substitute_placeholder(&self, owner_domain: &str) -> Result<MudProfile, MudError> {
        if !self.has_placeholder() {
            return Err(MudError::NoPlaceholder);
        }
        let owner_domain = validate_domain(owner_domain)?;
        let entries = self
            .entries
            .iter()
            .cloned()
            .map(|mut e| {
                if e.placeholder() == Some(Placeholder::OwnerDomain) {
                    e.endpoint = Some(Endpoint::Domain(owner_domain.clone()));
                }
                e
            })
            .collect();
        Ok(MudProfile {
            id: ProfileId::digest(&[&canonical_url(&self.mud_url), &owner_domain]),
            mud_url: self.mud_url.clone(),
            systeminfo: self.systeminfo.clone(),
            entries,
            owner_domain: Some(owner_domain),
        })
    }

    /// Same as [`substitute_placeholder`](Self::substitute_placeholder) for
    /// the internal-record token. Leaves the profile id untouched when the
    /// owner placeholder was already substituted.
    pub fn substitute_internal(&self, internal_domain: &str) -> Result<MudProfile, MudError> {
        if !self.has_internal_placeholder() {
            return Err(MudError::NoPlaceholder);
        }
        let internal = validate_domain(internal_domain)?;
        let mut out = self.clone();
        out.entries = self
            .entries
            .iter()
            .cloned()
            .map(|mut e| {
                if e.placeholder() == Some(Placeholder::OwnerInternal) {
                    e.endpoint = Some(Endpoint::Domain(internal.clone()));
                }
                e
            })
            .collect();
        Ok(out)
    }

    /// Copy of this profile restricted to `keep`. Used to split a profile
    /// between the gateway-local enforcer and the VNF.
    pub fn retain(&self, keep: impl Fn(&AclEntry) -> bool) -> Option<MudProfile> {
        let entries: BTreeSet<AclEntry> = self.entries.iter().filter(|e| keep(e)).cloned().collect();
        if entries.is_empty() {
            return None;
        }
        Some(MudProfile { entries, ..self.clone() })
    }

    /// Renders the profile back into the accepted MUD JSON shape.
    pub fn to_json(&self) -> Value {
        let mut from = Vec::new();
        let mut to = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            let ace = entry_to_ace(i, e);
            match e.direction {
                Direction::DeviceToCloud => from.push(ace),
                Direction::CloudToDevice => to.push(ace),
            }
        }
        let mut acls = Vec::new();
        let mut mud = Map::new();
        mud.insert("mud-version".into(), json!(1));
        mud.insert("mud-url".into(), json!(self.mud_url));
        if let Some(info) = &self.systeminfo {
            mud.insert("systeminfo".into(), json!(info));
        }
        if !from.is_empty() {
            mud.insert(
                "from-device-policy".into(),
                json!({"access-lists": {"access-list": [{"name": "from-device"}]}}),
            );
            acls.push(json!({"name": "from-device", "type": "ipv4-acl-type", "aces": {"ace": from}}));
        }
        if !to.is_empty() {
            mud.insert(
                "to-device-policy".into(),
                json!({"access-lists": {"access-list": [{"name": "to-device"}]}}),
            );
            acls.push(json!({"name": "to-device", "type": "ipv4-acl-type", "aces": {"ace": to}}));
        }
        json!({
            "ietf-mud:mud": Value::Object(mud),
            "ietf-access-control-list:acls": {"acl": acls},
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(&self.to_json()).expect("json value serializes")
    }
}

fn entry_to_ace(i: usize, e: &AclEntry) -> Value {
    let mut ipv4 = Map::new();
    match &e.endpoint {
        Some(Endpoint::Domain(d)) => {
            ipv4.insert(dns_key(e.direction).into(), json!(d));
        }
        Some(Endpoint::Placeholder(p)) => {
            ipv4.insert(dns_key(e.direction).into(), json!(p.token()));
        }
        Some(Endpoint::Ip(ip)) => {
            let key = match e.direction {
                Direction::DeviceToCloud => DST_NETWORK,
                Direction::CloudToDevice => SRC_NETWORK,
            };
            ipv4.insert(key.into(), json!(format!("{ip}/32")));
        }
        None => {}
    }
    if let Some(p) = e.protocol {
        ipv4.insert("protocol".into(), json!(p));
    }
    let mut matches = Map::new();
    if !ipv4.is_empty() {
        matches.insert("ipv4".into(), Value::Object(ipv4));
    }
    if let Some(port) = e.dst_port {
        let l4 = if e.protocol == Some(17) { "udp" } else { "tcp" };
        matches.insert(
            l4.into(),
            json!({"destination-port": {"operator": "eq", "port": port}}),
        );
    }
    json!({
        "name": format!("ace-{i}"),
        "matches": Value::Object(matches),
        "actions": {"forwarding": "accept"},
    })
}

fn dns_key(d: Direction) -> &'static str {
    match d {
        Direction::DeviceToCloud => DST_DNSNAME,
        Direction::CloudToDevice => SRC_DNSNAME,
    }
}

/// Checks hostname syntax and returns the lowercased name.
pub fn validate_domain(name: &str) -> Result<String, MudError> {
    let lower = name.trim_end_matches('.').to_ascii_lowercase();
    let bad = || MudError::InvalidDomain(name.to_string());
    if lower.is_empty() || lower.len() > 253 {
        return Err(bad());
    }
    for label in lower.split('.') {
        if label.is_empty() || label.len() > 63 {
            return Err(bad());
        }
        if label.starts_with('-') || label.ends_with('-') {
            return Err(bad());
        }
        if !label.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_') {
            return Err(bad());
        }
    }
    Ok(lower)
}

fn malformed(msg: impl Into<String>) -> MudError {
    MudError::MalformedJson(msg.into())
}

fn unsupported(msg: impl Into<String>) -> MudError {
    MudError::UnsupportedAcl(msg.into())
}

fn invalid(ace: &str, reason: impl Into<String>) -> MudError {
    MudError::InvalidAce { ace: ace.to_string(), reason: reason.into() }
}

fn obj<'a>(v: &'a Value, what: &str) -> Result<&'a Map<String, Value>, MudError> {
    v.as_object().ok_or_else(|| malformed(format!("{what} is not an object")))
}

fn policy_acl_names(mud: &Map<String, Value>, key: &str) -> Result<BTreeSet<String>, MudError> {
    let mut out = BTreeSet::new();
    let Some(policy) = mud.get(key) else {
        return Ok(out);
    };
    let list = policy
        .pointer("/access-lists/access-list")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(format!("{key} lacks access-lists/access-list")))?;
    for item in list {
        let name = item
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(format!("{key} entry without name")))?;
        out.insert(name.to_string());
    }
    Ok(out)
}

/// Parses a MUD file. See the module docs for the accepted subset.
pub fn parse_mud(bytes: &[u8]) -> Result<MudProfile, MudError> {
    let text = std::str::from_utf8(bytes).map_err(|e| malformed(format!("not UTF-8: {e}")))?;
    let root: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let root = obj(&root, "document")?;

    let mud = obj(
        root.get("ietf-mud:mud").ok_or_else(|| malformed("missing ietf-mud:mud"))?,
        "ietf-mud:mud",
    )?;
    let mud_url = mud
        .get("mud-url")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing mud-url"))?;
    if url::Url::parse(mud_url).is_err() {
        return Err(malformed(format!("mud-url '{mud_url}' is not a URL")));
    }
    let systeminfo = mud.get("systeminfo").and_then(Value::as_str).map(str::to_string);
    let from_names = policy_acl_names(mud, "from-device-policy")?;
    let to_names = policy_acl_names(mud, "to-device-policy")?;

    let mut entries = BTreeSet::new();
    if let Some(acls) = root.get("ietf-access-control-list:acls") {
        let list = acls
            .get("acl")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("acls lacks an acl list"))?;
        for acl in list {
            let acl = obj(acl, "acl")?;
            let name = acl.get("name").and_then(Value::as_str).unwrap_or("");
            if let Some(ty) = acl.get("type").and_then(Value::as_str) {
                if ty != "ipv4-acl-type" {
                    return Err(unsupported(format!("acl '{name}' has type {ty}")));
                }
            }
            let policy_dir = match (from_names.contains(name), to_names.contains(name)) {
                (true, false) => Some(Direction::DeviceToCloud),
                (false, true) => Some(Direction::CloudToDevice),
                (true, true) => {
                    return Err(malformed(format!("acl '{name}' bound to both policies")))
                }
                (false, false) => None,
            };
            let Some(aces) = acl.get("aces") else { continue };
            let aces = aces
                .get("ace")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed(format!("acl '{name}' aces lacks an ace list")))?;
            for ace in aces {
                entries.insert(parse_ace(ace, policy_dir)?);
            }
        }
    }
    if entries.is_empty() {
        return Err(MudError::EmptyWhitelist);
    }
    Ok(MudProfile {
        id: ProfileId::for_url(mud_url),
        mud_url: mud_url.to_string(),
        systeminfo,
        entries,
        owner_domain: None,
    })
}

fn parse_u64(v: &Value, ace: &str, what: &str, max: u64) -> Result<u64, MudError> {
    let n = v.as_u64().ok_or_else(|| invalid(ace, format!("{what} is not an integer")))?;
    if n > max {
        return Err(invalid(ace, format!("{what} {n} exceeds {max}")));
    }
    Ok(n)
}

fn parse_ace(ace: &Value, policy_dir: Option<Direction>) -> Result<AclEntry, MudError> {
    let ace = obj(ace, "ace")?;
    let name = ace.get("name").and_then(Value::as_str).unwrap_or("<unnamed>");

    if let Some(actions) = ace.get("actions") {
        let fwd = actions.get("forwarding").and_then(Value::as_str);
        if fwd != Some("accept") {
            return Err(unsupported(format!("ace '{name}' action {actions}")));
        }
    }

    let matches = obj(
        ace.get("matches").ok_or_else(|| invalid(name, "missing matches"))?,
        "matches",
    )?;

    let mut endpoint: Option<(Endpoint, Direction)> = None;
    let mut protocol: Option<u8> = None;
    let mut dst_port: Option<u16> = None;
    let mut set_endpoint = |ep: Endpoint, dir: Direction| -> Result<(), MudError> {
        if endpoint.is_some() {
            return Err(invalid(name, "more than one peer (dnsname/network) given"));
        }
        endpoint = Some((ep, dir));
        Ok(())
    };

    for (key, val) in matches {
        match key.as_str() {
            "ipv4" => {
                for (field, fv) in obj(val, "ipv4")? {
                    match field.as_str() {
                        DST_DNSNAME | SRC_DNSNAME => {
                            let dir = if field == DST_DNSNAME {
                                Direction::DeviceToCloud
                            } else {
                                Direction::CloudToDevice
                            };
                            let s = fv.as_str().ok_or_else(|| invalid(name, "dnsname not a string"))?;
                            let ep = match Placeholder::from_token(s) {
                                Some(p) => Endpoint::Placeholder(p),
                                None => Endpoint::Domain(
                                    validate_domain(s).map_err(|_| invalid(name, format!("bad dnsname '{s}'")))?,
                                ),
                            };
                            set_endpoint(ep, dir)?;
                        }
                        DST_NETWORK | SRC_NETWORK => {
                            let dir = if field == DST_NETWORK {
                                Direction::DeviceToCloud
                            } else {
                                Direction::CloudToDevice
                            };
                            let s = fv.as_str().ok_or_else(|| invalid(name, "network not a string"))?;
                            let (addr, len) = s.split_once('/').unwrap_or((s, "32"));
                            if len != "32" {
                                return Err(unsupported(format!(
                                    "ace '{name}' network prefix /{len} (only /32 literals)"
                                )));
                            }
                            let ip: Ipv4Addr = addr
                                .parse()
                                .map_err(|_| invalid(name, format!("bad address '{s}'")))?;
                            set_endpoint(Endpoint::Ip(ip), dir)?;
                        }
                        "protocol" => {
                            protocol = Some(parse_u64(fv, name, "protocol", 255)? as u8);
                        }
                        other => {
                            return Err(unsupported(format!("ace '{name}' ipv4 field '{other}'")))
                        }
                    }
                }
            }
            "tcp" | "udp" => {
                let l4_proto = if key == "tcp" { 6 } else { 17 };
                if let Some(p) = protocol {
                    if p != l4_proto {
                        return Err(invalid(name, format!("{key} match with protocol {p}")));
                    }
                }
                protocol = Some(l4_proto);
                for (field, fv) in obj(val, key)? {
                    match field.as_str() {
                        "destination-port" => {
                            let op = fv.get("operator").and_then(Value::as_str).unwrap_or("eq");
                            if op != "eq" {
                                return Err(unsupported(format!("ace '{name}' port operator '{op}'")));
                            }
                            let port = fv.get("port").ok_or_else(|| invalid(name, "port missing"))?;
                            dst_port = Some(parse_u64(port, name, "port", 65535)? as u16);
                        }
                        other => {
                            return Err(unsupported(format!("ace '{name}' {key} field '{other}'")))
                        }
                    }
                }
            }
            "eth" => {
                return Err(unsupported(format!(
                    "ace '{name}' uses layer-2 match 'eth'; MAC fields are not visible upstream"
                )))
            }
            other => return Err(unsupported(format!("ace '{name}' match '{other}'"))),
        }
    }
    // The ipv4 protocol can precede tcp/udp in document order; re-check.
    if let (Some(p), Some(_)) = (protocol, dst_port) {
        if p != 6 && p != 17 {
            return Err(invalid(name, format!("port with protocol {p}")));
        }
    }

    let field_dir = endpoint.as_ref().map(|(_, d)| *d);
    let direction = match (policy_dir, field_dir) {
        (Some(p), Some(f)) if p != f => {
            return Err(invalid(name, "peer field direction contradicts its policy"))
        }
        (Some(p), _) => p,
        (None, Some(f)) => f,
        (None, None) => Direction::DeviceToCloud,
    };
    let entry = AclEntry {
        direction,
        endpoint: endpoint.map(|(e, _)| e),
        protocol,
        dst_port,
    };
    entry.validate(name)?;
    Ok(entry)
}

/// One match row of a compiled whitelist. `addr == None` rows match any
/// peer on the given (port, protocol).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WhitelistRow {
    pub addr: Option<Ipv4Addr>,
    pub protocol: Option<u8>,
    pub port: Option<u16>,
    pub direction: Direction,
}

impl WhitelistRow {
    /// Checks an outbound packet (device is the source). For
    /// cloud-to-device rows the peer initiated, so the device's port is
    /// the packet's source port.
    pub fn matches(&self, p: &Packet) -> bool {
        if let Some(a) = self.addr {
            if a != p.dst_ip {
                return false;
            }
        }
        if let Some(proto) = self.protocol {
            if proto != p.protocol {
                return false;
            }
        }
        if let Some(port) = self.port {
            let seen = match self.direction {
                Direction::DeviceToCloud => p.dst_port,
                Direction::CloudToDevice => p.src_port,
            };
            if port != seen {
                return false;
            }
        }
        true
    }
}

impl fmt::Display for WhitelistRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.addr {
            Some(a) => write!(f, "nw_dst={a}")?,
            None => write!(f, "nw_dst=*")?,
        }
        if let Some(p) = self.protocol {
            write!(f, ",nw_proto={p}")?;
        }
        if let Some(p) = self.port {
            match self.direction {
                Direction::DeviceToCloud => write!(f, ",tp_dst={p}")?,
                Direction::CloudToDevice => write!(f, ",tp_src={p}")?,
            }
        }
        Ok(())
    }
}

/// A profile's whitelist with every domain replaced by its last answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedWhitelist {
    pub profile_id: ProfileId,
    pub rows: BTreeSet<WhitelistRow>,
    pub resolved_at: u64,
}

impl ResolvedWhitelist {
    /// Compiles `profile` given the current answer for each domain.
    /// Domains without an answer and unsubstituted placeholders contribute
    /// no rows.
    pub fn compile<'a, F>(profile: &MudProfile, mut answer: F, resolved_at: u64) -> ResolvedWhitelist
    where
        F: FnMut(&str) -> Option<&'a BTreeSet<Ipv4Addr>>,
    {
        let mut rows = BTreeSet::new();
        for e in profile.entries() {
            let base = WhitelistRow {
                addr: None,
                protocol: e.protocol,
                port: e.dst_port,
                direction: e.direction,
            };
            match &e.endpoint {
                None => {
                    rows.insert(base);
                }
                Some(Endpoint::Ip(ip)) => {
                    rows.insert(WhitelistRow { addr: Some(*ip), ..base });
                }
                Some(Endpoint::Domain(d)) => {
                    if let Some(addrs) = answer(d) {
                        rows.extend(addrs.iter().map(|a| WhitelistRow { addr: Some(*a), ..base }));
                    }
                }
                Some(Endpoint::Placeholder(_)) => {}
            }
        }
        ResolvedWhitelist { profile_id: profile.id(), rows, resolved_at }
    }

    pub fn addrs(&self) -> BTreeSet<Ipv4Addr> {
        self.rows.iter().filter_map(|r| r.addr).collect()
    }

    pub fn permits(&self, p: &Packet) -> bool {
        self.rows.iter().any(|r| r.matches(p))
    }
}

/// Installed profiles, one per device type (or per owner for substituted
/// placeholder profiles).
#[derive(Debug, Default, Clone)]
pub struct ProfileStore {
    by_id: BTreeMap<ProfileId, Arc<MudProfile>>,
}

impl ProfileStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores the profile; returns `true` when it was not present yet.
    pub fn insert(&mut self, profile: MudProfile) -> (Arc<MudProfile>, bool) {
        let id = profile.id();
        if let Some(p) = self.by_id.get(&id) {
            return (p.clone(), false);
        }
        let p = Arc::new(profile);
        self.by_id.insert(id, p.clone());
        (p, true)
    }

    pub fn get(&self, id: ProfileId) -> Option<&Arc<MudProfile>> {
        self.by_id.get(&id)
    }

    pub fn by_url(&self, mud_url: &str) -> Option<&Arc<MudProfile>> {
        self.by_id.get(&ProfileId::for_url(mud_url))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<MudProfile>> {
        self.by_id.values()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(aces: Value) -> Vec<u8> {
        serde_json::to_vec(&json!({
            "ietf-mud:mud": {
                "mud-version": 1,
                "mud-url": "https://cam.example/mud/cam.json",
                "to-device-policy": {"access-lists": {"access-list": [{"name": "to"}]}}
            },
            "ietf-access-control-list:acls": {"acl": [
                {"name": "to", "type": "ipv4-acl-type", "aces": {"ace": aces}}
            ]}
        }))
        .unwrap()
    }

    #[test]
    fn placeholder_token_is_detected_verbatim() {
        let bytes = doc(json!([{
            "name": "p2p",
            "matches": {"ipv4": {"ietf-acldns:src-dnsname": "$owner-unique-domain$", "protocol": 6}},
            "actions": {"forwarding": "accept"}
        }]));
        let p = parse_mud(&bytes).unwrap();
        assert!(p.has_placeholder());
        let e = p.entries().iter().next().unwrap();
        assert_eq!(e.endpoint, Some(Endpoint::Placeholder(Placeholder::OwnerDomain)));
        assert_eq!(e.protocol, Some(6));
        assert_eq!(e.direction, Direction::CloudToDevice);
        assert_eq!(OWNER_DOMAIN_TOKEN.len(), 21);
    }

    #[test]
    fn near_miss_token_is_not_a_placeholder() {
        let bytes = doc(json!([{
            "matches": {"ipv4": {"ietf-acldns:src-dnsname": "$owner-unique-domain", "protocol": 6}}
        }]));
        // '$' is not a hostname character, so this is rejected outright.
        assert!(matches!(parse_mud(&bytes), Err(MudError::InvalidAce { .. })));
    }

    #[test]
    fn zero_aces_is_empty_whitelist() {
        assert_eq!(parse_mud(&doc(json!([]))), Err(MudError::EmptyWhitelist));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse_mud(b"{not json"), Err(MudError::MalformedJson(_))));
        assert!(matches!(parse_mud(&[0xff, 0xfe]), Err(MudError::MalformedJson(_))));
        assert!(matches!(parse_mud(b"{}"), Err(MudError::MalformedJson(_))));
    }

    #[test]
    fn layer2_match_rejected() {
        let bytes = doc(json!([{
            "matches": {"eth": {"source-mac-address": "00:11:22:33:44:55"}}
        }]));
        assert!(matches!(parse_mud(&bytes), Err(MudError::UnsupportedAcl(m)) if m.contains("layer-2")));
    }

    #[test]
    fn ipv6_and_prefix_rejected() {
        let v6 = doc(json!([{"matches": {"ipv6": {"protocol": 6}}}]));
        assert!(matches!(parse_mud(&v6), Err(MudError::UnsupportedAcl(_))));
        let prefix = doc(json!([{"matches": {"ipv4": {"source-ipv4-network": "10.0.0.0/8"}}}]));
        assert!(matches!(parse_mud(&prefix), Err(MudError::UnsupportedAcl(_))));
    }

    #[test]
    fn dnsname_and_literal_are_exclusive() {
        let bytes = doc(json!([{"matches": {"ipv4": {
            "ietf-acldns:src-dnsname": "a.example",
            "source-ipv4-network": "1.2.3.4/32"
        }}}]));
        assert!(matches!(parse_mud(&bytes), Err(MudError::InvalidAce { .. })));
    }

    #[test]
    fn out_of_range_port_and_protocol() {
        let port = doc(json!([{"matches": {"tcp": {"destination-port": {"operator": "eq", "port": 70000}}}}]));
        assert!(matches!(parse_mud(&port), Err(MudError::InvalidAce { .. })));
        let proto = doc(json!([{"matches": {"ipv4": {"ietf-acldns:src-dnsname": "a.example", "protocol": 300}}}]));
        assert!(matches!(parse_mud(&proto), Err(MudError::InvalidAce { .. })));
    }

    #[test]
    fn port_only_entry_needs_protocol() {
        let ok = doc(json!([{"matches": {"udp": {"destination-port": {"operator": "eq", "port": 123}}}}]));
        let p = parse_mud(&ok).unwrap();
        let e = p.entries().iter().next().unwrap();
        assert_eq!((e.endpoint.clone(), e.protocol, e.dst_port), (None, Some(17), Some(123)));
        let bare = doc(json!([{"matches": {"ipv4": {"protocol": 6}}}]));
        assert!(matches!(parse_mud(&bare), Err(MudError::InvalidAce { .. })));
    }

    #[test]
    fn substitute_replaces_every_placeholder() {
        let bytes = doc(json!([
            {"name": "a", "matches": {"ipv4": {"ietf-acldns:src-dnsname": "$owner-unique-domain$", "protocol": 6}}},
            {"name": "b", "matches": {"ipv4": {"ietf-acldns:src-dnsname": "$owner-unique-domain$", "protocol": 17}}},
            {"name": "c", "matches": {"ipv4": {"ietf-acldns:src-dnsname": "push.cam.example"}}}
        ]));
        let p = parse_mud(&bytes).unwrap();
        assert_eq!(p.placeholder_count(Placeholder::OwnerDomain), 2);
        let s = p.substitute_placeholder("k7f3q.svm.example").unwrap();
        assert_eq!(s.placeholder_count(Placeholder::OwnerDomain), 0);
        assert!(!s.has_placeholder());
        assert_ne!(s.id(), p.id());
        assert_eq!(s.owner_domain(), Some("k7f3q.svm.example"));

        // The stored form re-parses as a plain profile.
        let again = parse_mud(&s.to_bytes()).unwrap();
        assert!(!again.has_placeholder());
        assert!(again.entries().contains(&AclEntry {
            direction: Direction::CloudToDevice,
            endpoint: Some(Endpoint::Domain("k7f3q.svm.example".into())),
            protocol: Some(6),
            dst_port: None,
        }));
        assert_eq!(again.entries(), s.entries());
    }

    #[test]
    fn substitute_without_placeholder_fails() {
        let bytes = doc(json!([{"matches": {"ipv4": {"ietf-acldns:src-dnsname": "a.example"}}}]));
        let p = parse_mud(&bytes).unwrap();
        assert_eq!(p.substitute_placeholder("x.svm.example"), Err(MudError::NoPlaceholder));
    }

    #[test]
    fn substitute_rejects_bad_domain() {
        let bytes = doc(json!([{"matches": {"ipv4": {"ietf-acldns:src-dnsname": "$owner-unique-domain$"}}}]));
        let p = parse_mud(&bytes).unwrap();
        assert!(matches!(p.substitute_placeholder("bad domain"), Err(MudError::InvalidDomain(_))));
    }

    #[test]
    fn same_url_same_id() {
        assert_eq!(
            ProfileId::for_url("https://Cam.Example:443/mud/cam.json"),
            ProfileId::for_url("https://cam.example/mud/cam.json")
        );
        assert_ne!(
            ProfileId::for_url("https://cam.example/mud/cam.json"),
            ProfileId::for_url("https://cam.example/mud/plug.json")
        );
    }

    #[test]
    fn store_dedups_by_url() {
        let a = MudProfile::new(
            "https://cam.example/m.json",
            [AclEntry { direction: Direction::DeviceToCloud, endpoint: Some(Endpoint::Domain("a.example".into())), protocol: None, dst_port: None }],
        )
        .unwrap();
        let mut store = ProfileStore::new();
        assert!(store.insert(a.clone()).1);
        assert!(!store.insert(a).1);
        assert_eq!(store.len(), 1);
        assert!(store.by_url("https://CAM.example/m.json").is_some());
    }

    #[test]
    fn compile_unions_answers() {
        let p = MudProfile::new(
            "https://cam.example/m.json",
            [
                AclEntry { direction: Direction::DeviceToCloud, endpoint: Some(Endpoint::Domain("a.example".into())), protocol: Some(6), dst_port: Some(443) },
                AclEntry { direction: Direction::DeviceToCloud, endpoint: Some(Endpoint::Domain("b.example".into())), protocol: None, dst_port: None },
                AclEntry { direction: Direction::DeviceToCloud, endpoint: Some(Endpoint::Ip(Ipv4Addr::new(9, 9, 9, 9))), protocol: None, dst_port: None },
            ],
        )
        .unwrap();
        let mut answers: BTreeMap<String, BTreeSet<Ipv4Addr>> = BTreeMap::new();
        answers.insert("a.example".into(), [Ipv4Addr::new(1, 1, 1, 1), Ipv4Addr::new(1, 1, 1, 2)].into());
        answers.insert("b.example".into(), [Ipv4Addr::new(2, 2, 2, 2)].into());
        let wl = ResolvedWhitelist::compile(&p, |d| answers.get(d), 5);
        assert_eq!(wl.rows.len(), 4);
        assert_eq!(
            wl.addrs(),
            [[1, 1, 1, 1], [1, 1, 1, 2], [2, 2, 2, 2], [9, 9, 9, 9]].map(Ipv4Addr::from).into()
        );
        let to = |ip: [u8; 4], port| Packet::data(([100, 64, 0, 1].into(), 40000), (ip.into(), port), 6);
        assert!(wl.permits(&to([1, 1, 1, 1], 443)));
        assert!(!wl.permits(&to([1, 1, 1, 1], 80)));
        assert!(wl.permits(&to([2, 2, 2, 2], 80)));
        assert!(!wl.permits(&to([3, 3, 3, 3], 443)));
    }

    fn arb_entry() -> impl Strategy<Value = AclEntry> {
        let endpoint = prop_oneof![
            Just(None),
            "[a-z]{1,8}\\.(example|svm\\.example)".prop_map(|d| Some(Endpoint::Domain(d))),
            any::<u32>().prop_map(|a| Some(Endpoint::Ip(a.into()))),
            Just(Some(Endpoint::Placeholder(Placeholder::OwnerDomain))),
            Just(Some(Endpoint::Placeholder(Placeholder::OwnerInternal))),
        ];
        let dir = prop_oneof![Just(Direction::DeviceToCloud), Just(Direction::CloudToDevice)];
        let l4 = prop_oneof![
            Just((None, None)),
            (any::<u8>()).prop_filter("not tcp/udp", |p| *p != 6 && *p != 17).prop_map(|p| (Some(p), None)),
            (prop_oneof![Just(6u8), Just(17u8)], proptest::option::of(any::<u16>())).prop_map(|(p, port)| (Some(p), port)),
        ];
        (dir, endpoint, l4)
            .prop_map(|(direction, endpoint, (protocol, dst_port))| AclEntry { direction, endpoint, protocol, dst_port })
            .prop_filter("valid", |e| e.validate("x").is_ok())
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(entries in proptest::collection::btree_set(arb_entry(), 1..12)) {
            let p = MudProfile::new("https://dev.example/mud/x.json", entries).unwrap();
            let back = parse_mud(&p.to_bytes()).unwrap();
            prop_assert_eq!(back.entries(), p.entries());
            prop_assert_eq!(back.id(), p.id());
            prop_assert_eq!(back.has_placeholder(), p.has_placeholder());
        }
    }
}
