// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Scenario files: a seed, fixture references and an ordered event list.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "profiles": ["../profiles/camera.json"],
//!   "zones": ["../zones/poc.zone"],
//!   "events": [
//!     {"type": "customer_join", "customer": 1, "ext_ip": "198.51.100.1"},
//!     {"type": "device_join", "customer": 1, "mac": "02:00:00:00:01:01",
//!      "mud_url": "https://camera.example/mud/cam-1.json"},
//!     {"ts": 5, "type": "packet", "customer": 1, "mac": "02:00:00:00:01:01",
//!      "dst": "192.0.2.10:443", "proto": "tcp", "count": 3}
//!   ]
//! }
//! ```
//!
//! A bare JSON array of events is accepted too. Bulk traffic may live in a
//! line-based trace referenced by a `trace` event; each non-comment line is
//! `ts customer mac dst_ip dst_port proto src_port dscp [count]`, where a
//! `src_port` of 0 lets the harness pick one.

use crate::control::ClassHint;
use crate::net::{MacAddr, Tick, PROTO_TCP, PROTO_UDP};
use crate::svm::Contact;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Proto(pub u8);

impl Default for Proto {
    fn default() -> Self {
        Proto(PROTO_TCP)
    }
}

impl Serialize for Proto {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            PROTO_TCP => s.serialize_str("tcp"),
            PROTO_UDP => s.serialize_str("udp"),
            n => s.serialize_u8(n),
        }
    }
}

impl<'de> Deserialize<'de> for Proto {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u8),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(Proto(n)),
            Raw::Name(s) => parse_proto(&s).map(Proto).ok_or_else(|| serde::de::Error::custom(format!("unknown protocol {s}"))),
        }
    }
}

fn parse_proto(s: &str) -> Option<u8> {
    match s.to_ascii_lowercase().as_str() {
        "tcp" => Some(PROTO_TCP),
        "udp" => Some(PROTO_UDP),
        n => n.parse().ok(),
    }
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

fn ttl() -> Tick {
    60
}

/// A device sends `count` packets of one connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketEvent {
    pub customer: u32,
    pub mac: MacAddr,
    /// `ip:port` of the remote end (or a LAN address).
    #[serde(default)]
    pub dst: Option<String>,
    /// LAN destination by MAC; needs `dst_port`.
    #[serde(default)]
    pub dst_mac: Option<MacAddr>,
    #[serde(default)]
    pub dst_port: Option<u16>,
    #[serde(default)]
    pub proto: Proto,
    #[serde(default)]
    pub src_port: Option<u16>,
    #[serde(default = "one")]
    pub count: u32,
    /// DSCP the device itself sets.
    #[serde(default)]
    pub dscp: u8,
    /// The remote end answers each packet.
    #[serde(default = "yes")]
    pub reply: bool,
}

/// A remote host sends to a customer's public address.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InboundEvent {
    pub customer: u32,
    pub src: String,
    pub ext_port: u16,
    #[serde(default)]
    pub proto: Proto,
    #[serde(default = "one")]
    pub count: u32,
    /// The LAN device answers each delivered packet.
    #[serde(default = "yes")]
    pub reply: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserKind {
    #[default]
    Honest,
    WrongCode,
    Silent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    CustomerJoin {
        customer: u32,
        ext_ip: Ipv4Addr,
    },
    DeviceJoin {
        customer: u32,
        mac: MacAddr,
        #[serde(default)]
        mud_url: Option<String>,
        #[serde(default)]
        hostname: Option<String>,
    },
    DeviceLeave {
        customer: u32,
        mac: MacAddr,
    },
    Packet(PacketEvent),
    Inbound(InboundEvent),
    DnsQuery {
        customer: u32,
        mac: MacAddr,
        domain: String,
    },
    DnsZoneSet {
        name: String,
        addrs: Vec<Ipv4Addr>,
        #[serde(default = "ttl")]
        ttl: Tick,
    },
    /// Bogus answer offered to insecure resolvers.
    Poison {
        name: String,
        addrs: Vec<Ipv4Addr>,
    },
    IpChange {
        customer: u32,
        ip: Ipv4Addr,
    },
    PortForward {
        customer: u32,
        ext_port: u16,
        #[serde(default)]
        proto: Proto,
        mac: MacAddr,
        int_port: u16,
    },
    /// The owner's phone joins `customer`'s LAN and signs up with the
    /// mapping service. `via` is where the app reaches the service from
    /// (defaults to the home's public address).
    IadSignup {
        customer: u32,
        mac: MacAddr,
        account: String,
        #[serde(default)]
        contact: Option<Contact>,
        #[serde(default)]
        user: UserKind,
        #[serde(default)]
        via: Option<Ipv4Addr>,
    },
    IadMove {
        account: String,
        ext_ip: Ipv4Addr,
        int_ip: Ipv4Addr,
    },
    Tick {
        n: Tick,
    },
    ClassifyOracleHint {
        mac: MacAddr,
        verdict: ClassHint,
    },
    Trace {
        file: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<Tick>,
    #[serde(flatten)]
    pub event: Event,
}

impl From<Event> for TimedEvent {
    fn from(event: Event) -> Self {
        TimedEvent { ts: None, event }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub profiles: Vec<PathBuf>,
    #[serde(default)]
    pub zones: Vec<PathBuf>,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, String> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Full(Scenario),
            Events(Vec<TimedEvent>),
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| {
            // Untagged errors are vague; retry the strict form for a useful message.
            serde_json::from_str::<Scenario>(text).err().map(|e| e.to_string()).unwrap_or(e.to_string())
        })?;
        let mut sc = match raw {
            Raw::Full(s) => s,
            Raw::Events(events) => Scenario { events, ..Scenario::default() },
        };
        let mut last = 0;
        for (i, ev) in sc.events.iter().enumerate() {
            if let Some(ts) = ev.ts {
                if ts < last {
                    return Err(format!("event {i}: ts {ts} is before {last}"));
                }
                last = ts;
            }
        }
        sc.base_dir = PathBuf::new();
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Scenario, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut sc = Scenario::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        sc.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(sc)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Parses a packet trace into events.
pub fn parse_trace(text: &str) -> Result<Vec<TimedEvent>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| format!("trace line {}: bad {what}", n + 1);
        if f.len() != 8 && f.len() != 9 {
            return Err(format!("trace line {}: expected 8 or 9 fields, got {}", n + 1, f.len()));
        }
        let ts: Tick = f[0].parse().map_err(|_| bad("ts"))?;
        let customer: u32 = f[1].parse().map_err(|_| bad("customer"))?;
        let mac: MacAddr = f[2].parse().map_err(|_| bad("mac"))?;
        let ip: Ipv4Addr = f[3].parse().map_err(|_| bad("dst_ip"))?;
        let port: u16 = f[4].parse().map_err(|_| bad("dst_port"))?;
        let proto = parse_proto(f[5]).ok_or_else(|| bad("proto"))?;
        let sport: u16 = f[6].parse().map_err(|_| bad("src_port"))?;
        let dscp: u8 = f[7].parse().map_err(|_| bad("dscp"))?;
        let count: u32 = match f.get(8) {
            Some(c) => c.parse().map_err(|_| bad("count"))?,
            None => 1,
        };
        out.push(TimedEvent {
            ts: Some(ts),
            event: Event::Packet(PacketEvent {
                customer,
                mac,
                dst: Some(format!("{ip}:{port}")),
                dst_mac: None,
                dst_port: None,
                proto: Proto(proto),
                src_port: (sport != 0).then_some(sport),
                count,
                dscp,
                reply: true,
            }),
        });
    }
    Ok(out)
}
