// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Packet, address and connection primitives shared by every stage.
//!
//! Field encodings used by trace files: dotted-quad IPv4, decimal ports,
//! protocol and DSCP, and colon-separated lowercase hex for MAC addresses.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use thiserror::Error;

/// Logical simulation time. Monotone event counter, never wall clock.
pub type Tick = u64;

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

/// The 21 commonly-used DSCP code points: CS0..CS7, the twelve AF classes
/// and EF. Packets carrying one of these are treated as unmarked.
pub const COMMON_DSCP: [u8; 21] = [
    0, 8, 16, 24, 32, 40, 48, 56, // CS0..CS7
    10, 12, 14, // AF11 AF12 AF13
    18, 20, 22, // AF21 AF22 AF23
    26, 28, 30, // AF31 AF32 AF33
    34, 36, 38, // AF41 AF42 AF43
    46, // EF
];

/// Mark applied by a gateway to traffic of a host it has no rule for yet.
pub const DEFAULT_MARK: u8 = 60;

/// Mark the on-gateway enforcer stamps on packets it has already permitted.
pub const PASS_MARK: u8 = 58;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("dscp value {0} out of range 0..=63")]
    DscpRange(u16),
    #[error("invalid mac address '{0}'")]
    BadMac(String),
    #[error("invalid socket address '{0}'")]
    BadEndpoint(String),
}

/// A 6-bit DSCP code point.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize)]
#[serde(transparent)]
pub struct Dscp(u8);

impl Dscp {
    pub const ZERO: Dscp = Dscp(0);

    pub fn new(value: u8) -> Result<Self, NetError> {
        if value > 63 {
            return Err(NetError::DscpRange(value as u16));
        }
        Ok(Dscp(value))
    }

    pub const fn value(self) -> u8 {
        self.0
    }

    pub fn class(self) -> DscpClass {
        classify_dscp(self)
    }
}

impl<'de> Deserialize<'de> for Dscp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Dscp::new(v).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for Dscp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dscp({})", self.0)
    }
}

impl fmt::Display for Dscp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<u8> for Dscp {
    type Error = NetError;
    fn try_from(v: u8) -> Result<Self, NetError> {
        Dscp::new(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DscpClass {
    CommonlyUsed,
    DefaultMark,
    DeviceMark(u8),
}

pub fn is_common_dscp(value: u8) -> bool {
    COMMON_DSCP.contains(&value)
}

/// Partition of the DSCP space into unmarked, default-marked and
/// per-device marks.
pub fn classify_dscp(dscp: Dscp) -> DscpClass {
    let v = dscp.value();
    if is_common_dscp(v) {
        DscpClass::CommonlyUsed
    } else if v == DEFAULT_MARK {
        DscpClass::DefaultMark
    } else {
        DscpClass::DeviceMark(v)
    }
}

/// Identity of a monitored home, also used as its pipeline metadata value.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CustomerId(pub u32);

impl fmt::Display for CustomerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Debug for CustomerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomerId({})", self.0)
    }
}

/// A 48-bit hardware address. Only ever visible on the LAN side.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const fn new(bytes: [u8; 6]) -> Self {
        MacAddr(bytes)
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacAddr({self})")
    }
}

impl FromStr for MacAddr {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, NetError> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for slot in out.iter_mut() {
            let part = parts.next().ok_or_else(|| NetError::BadMac(s.to_string()))?;
            if part.len() != 2 {
                return Err(NetError::BadMac(s.to_string()));
            }
            *slot = u8::from_str_radix(part, 16).map_err(|_| NetError::BadMac(s.to_string()))?;
        }
        if parts.next().is_some() {
            return Err(NetError::BadMac(s.to_string()));
        }
        Ok(MacAddr(out))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Connection identity: every packet sharing this 5-tuple belongs to the
/// same connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConnKey {
    pub src_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_ip: Ipv4Addr,
    pub dst_port: u16,
    pub protocol: u8,
}

impl ConnKey {
    pub fn new(src_ip: Ipv4Addr, src_port: u16, dst_ip: Ipv4Addr, dst_port: u16, protocol: u8) -> Self {
        ConnKey { src_ip, src_port, dst_ip, dst_port, protocol }
    }

    /// The same connection seen from the other end.
    pub fn reverse(&self) -> ConnKey {
        ConnKey {
            src_ip: self.dst_ip,
            src_port: self.dst_port,
            dst_ip: self.src_ip,
            dst_port: self.src_port,
            protocol: self.protocol,
        }
    }
}

impl fmt::Display for ConnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}->{}:{}/{}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    #[default]
    Data,
    DnsQuery { domain: String },
    DnsResponse { domain: String, addrs: BTreeSet<Ipv4Addr> },
}

/// A simulated IPv4 packet. `src_mac` is only set while the packet is on
/// the LAN; the gateway strips it on egress.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Packet {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
    pub dscp: Dscp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_mac: Option<MacAddr>,
    #[serde(default)]
    pub payload: Payload,
    pub ts: Tick,
}

impl Packet {
    pub fn data(src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), protocol: u8) -> Self {
        Packet {
            src_ip: src.0,
            dst_ip: dst.0,
            src_port: src.1,
            dst_port: dst.1,
            protocol,
            dscp: Dscp::ZERO,
            src_mac: None,
            payload: Payload::Data,
            ts: 0,
        }
    }

    pub fn with_mac(mut self, mac: MacAddr) -> Self {
        self.src_mac = Some(mac);
        self
    }

    pub fn with_dscp(mut self, dscp: Dscp) -> Self {
        self.dscp = dscp;
        self
    }

    pub fn with_ts(mut self, ts: Tick) -> Self {
        self.ts = ts;
        self
    }

    pub fn with_payload(mut self, payload: Payload) -> Self {
        self.payload = payload;
        self
    }

    pub fn key(&self) -> ConnKey {
        ConnKey::new(self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol)
    }

    pub fn dns_query(&self) -> Option<&str> {
        match &self.payload {
            Payload::DnsQuery { domain } => Some(domain),
            _ => None,
        }
    }
}

/// Parse `a.b.c.d:port`.
pub fn parse_endpoint(s: &str) -> Result<(Ipv4Addr, u16), NetError> {
    let (ip, port) = s.rsplit_once(':').ok_or_else(|| NetError::BadEndpoint(s.to_string()))?;
    let ip = ip.parse().map_err(|_| NetError::BadEndpoint(s.to_string()))?;
    let port = port.parse().map_err(|_| NetError::BadEndpoint(s.to_string()))?;
    Ok((ip, port))
}
