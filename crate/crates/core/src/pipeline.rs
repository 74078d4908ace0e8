// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! The VNF data plane: a multi-table match-action classifier that judges
//! *copies* of the first packet of each outbound connection.
//!
//! ```text
//! table 0   dscp commonly-used          -> drop (not monitored)
//!           otherwise                   -> goto 1
//! table 1   src ip of customer C        -> metadata := C, goto 2
//! table 2   dscp == default mark        -> controller
//!           (metadata, dscp) unknown    -> controller
//!           (metadata, dscp) identified -> goto table of its profile
//! table X   dst ip in WL_X              -> drop (legitimate)
//!           (port, proto) in WL_X       -> drop (legitimate)
//!           otherwise                   -> output 1 (violation)
//! ```
//!
//! Filter accounting: table 0 holds 21 drops plus a fallthrough, table 2
//! one global default-mark filter, table 1 one filter per customer, table 2
//! one per device, and each profile table one filter per whitelist row plus
//! its "otherwise" default. The total is therefore
//! `23 + sum(d_i + 1) + sum(p_j + 1)`.
//!
//! When profiles outnumber the table budget, several profiles share a
//! table and are told apart by a selector carried from table 2.

use crate::mud::{ProfileId, WhitelistRow};
use crate::net::{
    classify_dscp, ConnKey, CustomerId, DscpClass, Packet, COMMON_DSCP, DEFAULT_MARK,
};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::net::Ipv4Addr;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PipelineError {
    #[error("unknown customer {0}")]
    UnknownCustomer(CustomerId),
    #[error("no device filter for {0} mark {1}")]
    UnknownDevice(CustomerId, u8),
    #[error("no table installed for profile {0}")]
    UnknownTable(ProfileId),
    #[error("device filter for {0} mark {1} already installed")]
    DuplicateDevice(CustomerId, u8),
    #[error("address {0} already belongs to customer {1}")]
    AddressInUse(Ipv4Addr, CustomerId),
    #[error("mark {0} is not a device mark")]
    NotADeviceMark(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TableId(pub u16);

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Where a profile's rows live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProfileSlot {
    pub table: TableId,
    /// Metadata value distinguishing profiles sharing one table.
    pub selector: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DeviceTarget {
    Controller,
    Profile(ProfileId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgnoreReason {
    Unmarked,
    UnknownSource,
}

/// Outcome of one packet through the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Ignored { reason: IgnoreReason },
    Legitimate { customer: CustomerId, mark: u8, profile: ProfileId },
    Violation { customer: CustomerId, mark: u8, profile: ProfileId, packet: Packet },
    Unidentified { customer: CustomerId, mark: u8, packet: Packet },
}

impl Verdict {
    pub fn kind(&self) -> &'static str {
        match self {
            Verdict::Ignored { .. } => "ignored",
            Verdict::Legitimate { .. } => "legitimate",
            Verdict::Violation { .. } => "violation",
            Verdict::Unidentified { .. } => "unidentified",
        }
    }
}

/// Stable identity of one installed filter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FilterKey {
    CommonDscp(u8),
    Fallthrough,
    Customer(CustomerId),
    DefaultMark,
    Device(CustomerId, u8),
    Row(ProfileId, WhitelistRow),
    ProfileDefault(ProfileId),
}

/// Everything about a filter except its counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterSpec {
    pub table: TableId,
    pub priority: u16,
    pub matches: String,
    pub action: String,
}

pub type Snapshot = BTreeMap<FilterKey, FilterSpec>;

/// Number of filters that were added, removed, or rewritten between two
/// snapshots.
pub fn snapshot_distance(before: &Snapshot, after: &Snapshot) -> usize {
    let removed_or_changed = before
        .iter()
        .filter(|(k, v)| after.get(*k) != Some(*v))
        .count();
    let added = after.keys().filter(|k| !before.contains_key(*k)).count();
    removed_or_changed + added
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    /// Number of table ids available, including tables 0..=2.
    pub table_budget: u16,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { table_budget: 256 }
    }
}

#[cfg(feature = "fault-injection")]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Port constraints on rows are ignored.
    IgnorePorts,
    /// Every table-X lookup reports a violation.
    AlwaysViolate,
}

#[derive(Debug)]
struct CustomerFilter {
    ip: Ipv4Addr,
    hits: AtomicU64,
}

#[derive(Debug)]
struct DeviceFilter {
    target: DeviceTarget,
    hits: AtomicU64,
}

#[derive(Debug)]
struct ProfileTable {
    slot: ProfileSlot,
    rows: BTreeMap<WhitelistRow, AtomicU64>,
    by_addr: HashMap<Ipv4Addr, Vec<WhitelistRow>>,
    addrless: Vec<WhitelistRow>,
    misses: AtomicU64,
}

impl ProfileTable {
    fn new(slot: ProfileSlot) -> Self {
        ProfileTable {
            slot,
            rows: BTreeMap::new(),
            by_addr: HashMap::new(),
            addrless: Vec::new(),
            misses: AtomicU64::new(0),
        }
    }

    fn insert(&mut self, row: WhitelistRow) -> bool {
        if self.rows.contains_key(&row) {
            return false;
        }
        self.rows.insert(row, AtomicU64::new(0));
        match row.addr {
            Some(a) => self.by_addr.entry(a).or_default().push(row),
            None => self.addrless.push(row),
        }
        true
    }

    fn remove(&mut self, row: &WhitelistRow) -> bool {
        if self.rows.remove(row).is_none() {
            return false;
        }
        match row.addr {
            Some(a) => {
                if let Some(v) = self.by_addr.get_mut(&a) {
                    v.retain(|r| r != row);
                    if v.is_empty() {
                        self.by_addr.remove(&a);
                    }
                }
            }
            None => self.addrless.retain(|r| r != row),
        }
        true
    }

    fn lookup(&self, p: &Packet) -> Option<&WhitelistRow> {
        let addr_rows = self.by_addr.get(&p.dst_ip).map(Vec::as_slice).unwrap_or(&[]);
        addr_rows.iter().chain(self.addrless.iter()).find(|r| r.matches(p))
    }
}

/// The match-action pipeline. `process` takes `&self` and only touches
/// atomic counters, so it can be shared across threads; every mutation
/// takes `&mut self` and changes exactly one filter.
#[derive(Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    common_hits: [AtomicU64; 64],
    fallthrough_hits: AtomicU64,
    customers: BTreeMap<CustomerId, CustomerFilter>,
    customer_by_ip: HashMap<Ipv4Addr, CustomerId>,
    default_mark_hits: AtomicU64,
    devices: HashMap<(CustomerId, u8), DeviceFilter>,
    profiles: BTreeMap<ProfileId, ProfileTable>,
    table_load: BTreeMap<TableId, u32>,
    next_selector: BTreeMap<TableId, u32>,
    processed: AtomicU64,
    #[cfg(feature = "fault-injection")]
    fault: Option<Fault>,
}

impl Default for Pipeline {
    fn default() -> Self {
        Pipeline::new(PipelineConfig::default())
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        assert!(config.table_budget >= 4, "need at least one profile table");
        Pipeline {
            config,
            common_hits: std::array::from_fn(|_| AtomicU64::new(0)),
            fallthrough_hits: AtomicU64::new(0),
            customers: BTreeMap::new(),
            customer_by_ip: HashMap::new(),
            default_mark_hits: AtomicU64::new(0),
            devices: HashMap::new(),
            profiles: BTreeMap::new(),
            table_load: BTreeMap::new(),
            next_selector: BTreeMap::new(),
            processed: AtomicU64::new(0),
            #[cfg(feature = "fault-injection")]
            fault: None,
        }
    }

    #[cfg(feature = "fault-injection")]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Classifies one packet copy. Never forwards or mutates traffic.
    pub fn process(&self, p: &Packet) -> Verdict {
        self.processed.fetch_add(1, Relaxed);
        let dscp = p.dscp.value();
        if classify_dscp(p.dscp) == DscpClass::CommonlyUsed {
            self.common_hits[dscp as usize].fetch_add(1, Relaxed);
            return Verdict::Ignored { reason: IgnoreReason::Unmarked };
        }
        self.fallthrough_hits.fetch_add(1, Relaxed);

        let Some(&customer) = self.customer_by_ip.get(&p.src_ip) else {
            return Verdict::Ignored { reason: IgnoreReason::UnknownSource };
        };
        self.customers[&customer].hits.fetch_add(1, Relaxed);

        if dscp == DEFAULT_MARK {
            self.default_mark_hits.fetch_add(1, Relaxed);
            return Verdict::Unidentified { customer, mark: dscp, packet: p.clone() };
        }
        let Some(dev) = self.devices.get(&(customer, dscp)) else {
            // Table-2 miss goes to the controller like an unidentified device.
            return Verdict::Unidentified { customer, mark: dscp, packet: p.clone() };
        };
        dev.hits.fetch_add(1, Relaxed);
        let profile = match dev.target {
            DeviceTarget::Controller => {
                return Verdict::Unidentified { customer, mark: dscp, packet: p.clone() }
            }
            DeviceTarget::Profile(id) => id,
        };
        let table = &self.profiles[&profile];
        match self.lookup_row(table, p) {
            Some(row) => {
                table.rows[row].fetch_add(1, Relaxed);
                Verdict::Legitimate { customer, mark: dscp, profile }
            }
            None => {
                table.misses.fetch_add(1, Relaxed);
                Verdict::Violation { customer, mark: dscp, profile, packet: p.clone() }
            }
        }
    }

    fn lookup_row<'a>(&self, table: &'a ProfileTable, p: &Packet) -> Option<&'a WhitelistRow> {
        #[cfg(feature = "fault-injection")]
        match self.fault {
            Some(Fault::AlwaysViolate) => return None,
            Some(Fault::IgnorePorts) => {
                return table.rows.keys().find(|r| {
                    WhitelistRow { port: None, ..**r }.matches(p)
                })
            }
            None => {}
        }
        table.lookup(p)
    }

    /// Evaluates `p` against a profile table without touching counters.
    /// Used by the controller for default-marked packets it has attributed.
    pub fn check_profile(&self, profile: ProfileId, p: &Packet) -> Option<bool> {
        let table = self.profiles.get(&profile)?;
        Some(self.lookup_row(table, p).is_some())
    }

    pub fn processed(&self) -> u64 {
        self.processed.load(Relaxed)
    }

    pub fn install_customer(&mut self, customer: CustomerId, ip: Ipv4Addr) -> Result<(), PipelineError> {
        if let Some(&owner) = self.customer_by_ip.get(&ip) {
            if owner == customer {
                return Ok(());
            }
            return Err(PipelineError::AddressInUse(ip, owner));
        }
        if self.customers.contains_key(&customer) {
            return self.update_customer_ip(customer, ip);
        }
        self.customers.insert(customer, CustomerFilter { ip, hits: AtomicU64::new(0) });
        self.customer_by_ip.insert(ip, customer);
        Ok(())
    }

    /// Rewrites the customer's single table-1 filter.
    pub fn update_customer_ip(&mut self, customer: CustomerId, new_ip: Ipv4Addr) -> Result<(), PipelineError> {
        if let Some(&owner) = self.customer_by_ip.get(&new_ip) {
            if owner != customer {
                return Err(PipelineError::AddressInUse(new_ip, owner));
            }
        }
        let f = self
            .customers
            .get_mut(&customer)
            .ok_or(PipelineError::UnknownCustomer(customer))?;
        if f.ip == new_ip {
            return Ok(());
        }
        self.customer_by_ip.remove(&f.ip);
        f.ip = new_ip;
        self.customer_by_ip.insert(new_ip, customer);
        Ok(())
    }

    pub fn customer_ip(&self, customer: CustomerId) -> Option<Ipv4Addr> {
        self.customers.get(&customer).map(|c| c.ip)
    }

    pub fn install_device(
        &mut self,
        customer: CustomerId,
        mark: u8,
        target: DeviceTarget,
    ) -> Result<(), PipelineError> {
        if !self.customers.contains_key(&customer) {
            return Err(PipelineError::UnknownCustomer(customer));
        }
        if !matches!(classify_dscp(mark.try_into().map_err(|_| PipelineError::NotADeviceMark(mark))?), DscpClass::DeviceMark(_)) {
            return Err(PipelineError::NotADeviceMark(mark));
        }
        if let DeviceTarget::Profile(p) = target {
            if !self.profiles.contains_key(&p) {
                return Err(PipelineError::UnknownTable(p));
            }
        }
        if self.devices.contains_key(&(customer, mark)) {
            return Err(PipelineError::DuplicateDevice(customer, mark));
        }
        self.devices.insert((customer, mark), DeviceFilter { target, hits: AtomicU64::new(0) });
        Ok(())
    }

    /// Points an existing table-2 filter at `target`. Counter is kept.
    pub fn reassign_device(
        &mut self,
        customer: CustomerId,
        mark: u8,
        target: DeviceTarget,
    ) -> Result<(), PipelineError> {
        if let DeviceTarget::Profile(p) = target {
            if !self.profiles.contains_key(&p) {
                return Err(PipelineError::UnknownTable(p));
            }
        }
        let dev = self
            .devices
            .get_mut(&(customer, mark))
            .ok_or(PipelineError::UnknownDevice(customer, mark))?;
        dev.target = target;
        Ok(())
    }

    pub fn remove_device(&mut self, customer: CustomerId, mark: u8) -> Result<(), PipelineError> {
        self.devices
            .remove(&(customer, mark))
            .map(|_| ())
            .ok_or(PipelineError::UnknownDevice(customer, mark))
    }

    pub fn device_target(&self, customer: CustomerId, mark: u8) -> Option<DeviceTarget> {
        self.devices.get(&(customer, mark)).map(|d| d.target)
    }

    pub fn device_hits(&self, customer: CustomerId, mark: u8) -> Option<u64> {
        self.devices.get(&(customer, mark)).map(|d| d.hits.load(Relaxed))
    }

    fn allocate_slot(&mut self) -> ProfileSlot {
        let first = 3u16;
        let last = self.config.table_budget - 1;
        let table = (first..=last)
            .map(TableId)
            .find(|t| !self.table_load.contains_key(t))
            .unwrap_or_else(|| {
                // All ids taken: share the least loaded table.
                let (t, _) = self
                    .table_load
                    .iter()
                    .min_by_key(|(t, n)| (**n, **t))
                    .expect("budget has profile tables");
                *t
            });
        *self.table_load.entry(table).or_default() += 1;
        let sel = self.next_selector.entry(table).or_default();
        let selector = *sel;
        *sel += 1;
        ProfileSlot { table, selector }
    }

    /// Creates the profile's table (its default filter plus `rows`).
    /// Installing an existing profile is a no-op.
    pub fn install_profile(
        &mut self,
        profile: ProfileId,
        rows: impl IntoIterator<Item = WhitelistRow>,
    ) -> ProfileSlot {
        if let Some(t) = self.profiles.get(&profile) {
            return t.slot;
        }
        let slot = self.allocate_slot();
        let mut table = ProfileTable::new(slot);
        for r in rows {
            table.insert(r);
        }
        self.profiles.insert(profile, table);
        slot
    }

    pub fn has_profile(&self, profile: ProfileId) -> bool {
        self.profiles.contains_key(&profile)
    }

    pub fn profile_slot(&self, profile: ProfileId) -> Option<ProfileSlot> {
        self.profiles.get(&profile).map(|t| t.slot)
    }

    pub fn profile_rows(&self, profile: ProfileId) -> Option<impl Iterator<Item = &WhitelistRow>> {
        self.profiles.get(&profile).map(|t| t.rows.keys())
    }

    /// Adds one row. Returns `false` if it was already present.
    pub fn install_whitelist_entry(&mut self, profile: ProfileId, row: WhitelistRow) -> Result<bool, PipelineError> {
        let t = self.profiles.get_mut(&profile).ok_or(PipelineError::UnknownTable(profile))?;
        Ok(t.insert(row))
    }

    pub fn remove_whitelist_entry(&mut self, profile: ProfileId, row: &WhitelistRow) -> Result<bool, PipelineError> {
        let t = self.profiles.get_mut(&profile).ok_or(PipelineError::UnknownTable(profile))?;
        Ok(t.remove(row))
    }

    pub fn customer_count(&self) -> usize {
        self.customers.len()
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn profile_count(&self) -> usize {
        self.profiles.len()
    }

    /// Exact number of installed filters.
    pub fn filter_count(&self) -> usize {
        COMMON_DSCP.len()
            + 1 // table 0 fallthrough
            + 1 // table 2 default-mark filter
            + self.customers.len()
            + self.devices.len()
            + self.profiles.values().map(|t| t.rows.len() + 1).sum::<usize>()
    }

    /// Filters per table id.
    pub fn table_sizes(&self) -> BTreeMap<TableId, usize> {
        let mut out = BTreeMap::new();
        out.insert(TableId(0), COMMON_DSCP.len() + 1);
        out.insert(TableId(1), self.customers.len());
        out.insert(TableId(2), self.devices.len() + 1);
        for t in self.profiles.values() {
            *out.entry(t.slot.table).or_default() += t.rows.len() + 1;
        }
        out
    }

    fn specs(&self) -> Vec<(FilterKey, FilterSpec, u64)> {
        let mut out = Vec::new();
        for v in COMMON_DSCP {
            out.push((
                FilterKey::CommonDscp(v),
                FilterSpec { table: TableId(0), priority: 100, matches: format!("ip_dscp={v}"), action: "drop".into() },
                self.common_hits[v as usize].load(Relaxed),
            ));
        }
        out.push((
            FilterKey::Fallthrough,
            FilterSpec { table: TableId(0), priority: 0, matches: "*".into(), action: "goto_table:1".into() },
            self.fallthrough_hits.load(Relaxed),
        ));
        for (c, f) in &self.customers {
            out.push((
                FilterKey::Customer(*c),
                FilterSpec {
                    table: TableId(1),
                    priority: 100,
                    matches: format!("nw_src={}", f.ip),
                    action: format!("write_metadata:{},goto_table:2", c.0),
                },
                f.hits.load(Relaxed),
            ));
        }
        out.push((
            FilterKey::DefaultMark,
            FilterSpec {
                table: TableId(2),
                priority: 200,
                matches: format!("ip_dscp={DEFAULT_MARK}"),
                action: "controller".into(),
            },
            self.default_mark_hits.load(Relaxed),
        ));
        let mut devs: Vec<_> = self.devices.iter().collect();
        devs.sort_by_key(|(k, _)| **k);
        for ((c, m), d) in devs {
            let action = match d.target {
                DeviceTarget::Controller => "controller".to_string(),
                DeviceTarget::Profile(p) => {
                    let s = self.profiles[&p].slot;
                    format!("write_metadata:{},goto_table:{}", s.selector, s.table)
                }
            };
            out.push((
                FilterKey::Device(*c, *m),
                FilterSpec {
                    table: TableId(2),
                    priority: 100,
                    matches: format!("metadata={},ip_dscp={m}", c.0),
                    action,
                },
                d.hits.load(Relaxed),
            ));
        }
        for (p, t) in &self.profiles {
            for (row, hits) in &t.rows {
                out.push((
                    FilterKey::Row(*p, *row),
                    FilterSpec {
                        table: t.slot.table,
                        priority: if row.addr.is_some() { 100 } else { 90 },
                        matches: format!("metadata={},{row}", t.slot.selector),
                        action: "drop".into(),
                    },
                    hits.load(Relaxed),
                ));
            }
            out.push((
                FilterKey::ProfileDefault(*p),
                FilterSpec {
                    table: t.slot.table,
                    priority: 0,
                    matches: format!("metadata={}", t.slot.selector),
                    action: "output:1".into(),
                },
                t.misses.load(Relaxed),
            ));
        }
        out
    }

    pub fn snapshot(&self) -> Snapshot {
        self.specs().into_iter().map(|(k, s, _)| (k, s)).collect()
    }

    /// Text listing of every filter, ordered by table, then priority
    /// (highest first), then match.
    pub fn dump(&self) -> String {
        let mut specs = self.specs();
        specs.sort_by(|a, b| {
            a.1.table
                .cmp(&b.1.table)
                .then(b.1.priority.cmp(&a.1.priority))
                .then(a.1.matches.cmp(&b.1.matches))
        });
        let mut s = String::new();
        for (_, spec, n) in specs {
            let _ = writeln!(
                s,
                "table={} priority={} match={} action={} n_packets={}",
                spec.table, spec.priority, spec.matches, spec.action, n
            );
        }
        s
    }

    /// Flat counter map for the metrics export.
    pub fn counters(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        out.insert("pipeline.processed".into(), self.processed());
        for (key, spec, n) in self.specs() {
            let name = match key {
                FilterKey::CommonDscp(v) => format!("table0.dscp{v}"),
                FilterKey::Fallthrough => "table0.fallthrough".into(),
                FilterKey::Customer(c) => format!("table1.{c}"),
                FilterKey::DefaultMark => "table2.default_mark".into(),
                FilterKey::Device(c, m) => format!("table2.{c}.mark{m}"),
                FilterKey::Row(p, row) => format!("table{}.{p}.{row}", spec.table),
                FilterKey::ProfileDefault(p) => format!("table{}.{p}.otherwise", spec.table),
            };
            out.insert(name, n);
        }
        out
    }
}

/// Admits the first packet of every connection and suppresses the rest.
/// Bounded: when full, the least recently seen connection is forgotten and
/// its next packet is admitted again.
#[derive(Debug)]
pub struct FirstPacketFilter {
    seen: LruCache<ConnKey, ()>,
    evictions: u64,
    admitted: u64,
    suppressed: u64,
}

impl FirstPacketFilter {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("nonzero");
        FirstPacketFilter { seen: LruCache::new(cap), evictions: 0, admitted: 0, suppressed: 0 }
    }

    pub fn admit(&mut self, key: &ConnKey) -> bool {
        if self.seen.get(key).is_some() {
            self.suppressed += 1;
            return false;
        }
        if let Some((old, _)) = self.seen.push(*key, ()) {
            if old != *key {
                self.evictions += 1;
            }
        }
        self.admitted += 1;
        true
    }

    pub fn evict(&mut self, key: &ConnKey) {
        self.seen.pop(key);
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn admitted(&self) -> u64 {
        self.admitted
    }

    pub fn suppressed(&self) -> u64 {
        self.suppressed
    }
}

impl Default for FirstPacketFilter {
    fn default() -> Self {
        FirstPacketFilter::new(1 << 20)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mud::Direction;
    use crate::net::Dscp;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn row(addr: &str) -> WhitelistRow {
        WhitelistRow { addr: Some(ip(addr)), protocol: None, port: None, direction: Direction::DeviceToCloud }
    }

    fn pkt(src: &str, dst: &str, dport: u16, dscp: u8) -> Packet {
        Packet::data((ip(src), 40000), (ip(dst), dport), 6).with_dscp(Dscp::new(dscp).unwrap())
    }

    const CAM: ProfileId = ProfileId(0xca);
    const HOME: CustomerId = CustomerId(1);

    fn camera_setup() -> Pipeline {
        let mut p = Pipeline::default();
        p.install_customer(HOME, ip("100.64.0.1")).unwrap();
        p.install_profile(CAM, [row("192.0.2.10"), row("192.0.2.11")]);
        p.install_device(HOME, 13, DeviceTarget::Profile(CAM)).unwrap();
        p
    }

    #[test]
    fn empty_pipeline_has_23_filters() {
        assert_eq!(Pipeline::default().filter_count(), 23);
        assert_eq!(Pipeline::default().snapshot().len(), 23);
    }

    #[test]
    fn unmarked_is_ignored() {
        let p = camera_setup();
        assert_eq!(
            p.process(&pkt("100.64.0.1", "192.0.2.10", 443, 0)),
            Verdict::Ignored { reason: IgnoreReason::Unmarked }
        );
        assert_eq!(
            p.process(&pkt("100.64.0.1", "192.0.2.10", 443, 46)),
            Verdict::Ignored { reason: IgnoreReason::Unmarked }
        );
    }

    #[test]
    fn whitelisted_destination_is_legitimate_and_counted() {
        let p = camera_setup();
        let before = p.device_hits(HOME, 13).unwrap();
        assert_eq!(
            p.process(&pkt("100.64.0.1", "192.0.2.10", 443, 13)),
            Verdict::Legitimate { customer: HOME, mark: 13, profile: CAM }
        );
        assert_eq!(p.device_hits(HOME, 13).unwrap(), before + 1);
    }

    #[test]
    fn off_whitelist_destination_is_violation() {
        let p = camera_setup();
        let packet = pkt("100.64.0.1", "198.51.100.9", 23, 13);
        assert_eq!(
            p.process(&packet),
            Verdict::Violation { customer: HOME, mark: 13, profile: CAM, packet: packet.clone() }
        );
    }

    #[test]
    fn unknown_source_and_default_mark() {
        let p = camera_setup();
        assert_eq!(
            p.process(&pkt("100.64.9.9", "192.0.2.10", 443, 13)),
            Verdict::Ignored { reason: IgnoreReason::UnknownSource }
        );
        assert!(matches!(
            p.process(&pkt("100.64.0.1", "192.0.2.10", 443, DEFAULT_MARK)),
            Verdict::Unidentified { mark: 60, .. }
        ));
        assert!(matches!(
            p.process(&pkt("100.64.0.1", "192.0.2.10", 443, 15)),
            Verdict::Unidentified { mark: 15, .. }
        ));
    }

    #[test]
    fn port_only_row_matches_any_destination() {
        let mut p = camera_setup();
        p.install_whitelist_entry(
            CAM,
            WhitelistRow { addr: None, protocol: Some(17), port: Some(123), direction: Direction::DeviceToCloud },
        )
        .unwrap();
        let ntp = Packet::data((ip("100.64.0.1"), 40001), (ip("203.0.113.5"), 123), 17)
            .with_dscp(Dscp::new(13).unwrap());
        assert!(matches!(p.process(&ntp), Verdict::Legitimate { .. }));
    }

    #[test]
    fn filter_count_formula_example() {
        // C=2 with d=(2,3), P=2 with p=(4,6): 23 + (3+4) + (5+7) = 42.
        let mut p = Pipeline::default();
        p.install_customer(CustomerId(1), ip("100.64.0.1")).unwrap();
        p.install_customer(CustomerId(2), ip("100.64.0.2")).unwrap();
        let a = ProfileId(1);
        let b = ProfileId(2);
        p.install_profile(a, (1..=4).map(|i| row(&format!("192.0.2.{i}"))));
        p.install_profile(b, (1..=6).map(|i| row(&format!("198.51.100.{i}"))));
        p.install_device(CustomerId(1), 1, DeviceTarget::Profile(a)).unwrap();
        p.install_device(CustomerId(1), 2, DeviceTarget::Controller).unwrap();
        for m in [1, 2, 3] {
            p.install_device(CustomerId(2), m, DeviceTarget::Profile(b)).unwrap();
        }
        assert_eq!(p.filter_count(), 42);
        assert_eq!(p.snapshot().len(), 42);
        p.install_device(CustomerId(2), 4, DeviceTarget::Profile(b)).unwrap();
        assert_eq!(p.filter_count(), 43);
    }

    #[test]
    fn each_update_touches_one_filter() {
        let mut p = camera_setup();
        let s0 = p.snapshot();
        p.update_customer_ip(HOME, ip("100.64.0.2")).unwrap();
        let s1 = p.snapshot();
        assert_eq!(snapshot_distance(&s0, &s1), 1);
        p.install_whitelist_entry(CAM, row("192.0.2.12")).unwrap();
        let s2 = p.snapshot();
        assert_eq!(snapshot_distance(&s1, &s2), 1);
        p.install_device(HOME, 17, DeviceTarget::Controller).unwrap();
        let s3 = p.snapshot();
        assert_eq!(snapshot_distance(&s2, &s3), 1);
        p.reassign_device(HOME, 17, DeviceTarget::Profile(CAM)).unwrap();
        let s4 = p.snapshot();
        assert_eq!(snapshot_distance(&s3, &s4), 1);
        p.remove_device(HOME, 17).unwrap();
        assert_eq!(snapshot_distance(&s4, &p.snapshot()), 1);
    }

    #[test]
    fn ip_change_moves_monitoring() {
        let mut p = camera_setup();
        p.update_customer_ip(HOME, ip("100.64.0.2")).unwrap();
        assert_eq!(
            p.process(&pkt("100.64.0.1", "192.0.2.10", 443, 13)),
            Verdict::Ignored { reason: IgnoreReason::UnknownSource }
        );
        assert!(matches!(p.process(&pkt("100.64.0.2", "192.0.2.10", 443, 13)), Verdict::Legitimate { .. }));
        // same address again is a no-op
        let s = p.snapshot();
        p.update_customer_ip(HOME, ip("100.64.0.2")).unwrap();
        assert_eq!(snapshot_distance(&s, &p.snapshot()), 0);
    }

    #[test]
    fn mutation_errors() {
        let mut p = camera_setup();
        assert_eq!(p.update_customer_ip(CustomerId(9), ip("1.1.1.1")), Err(PipelineError::UnknownCustomer(CustomerId(9))));
        assert_eq!(p.remove_device(HOME, 20), Err(PipelineError::UnknownDevice(HOME, 20)));
        assert_eq!(
            p.install_whitelist_entry(ProfileId(7), row("1.1.1.1")),
            Err(PipelineError::UnknownTable(ProfileId(7)))
        );
        assert_eq!(
            p.install_device(HOME, 21, DeviceTarget::Profile(ProfileId(7))),
            Err(PipelineError::UnknownTable(ProfileId(7)))
        );
        assert_eq!(p.install_device(HOME, 13, DeviceTarget::Controller), Err(PipelineError::DuplicateDevice(HOME, 13)));
        assert_eq!(p.install_device(HOME, 0, DeviceTarget::Controller), Err(PipelineError::NotADeviceMark(0)));
        assert_eq!(p.install_device(HOME, 60, DeviceTarget::Controller), Err(PipelineError::NotADeviceMark(60)));
    }

    #[test]
    fn second_device_of_a_type_adds_only_table2_filter() {
        let mut p = camera_setup();
        let before = p.table_sizes();
        p.install_device(HOME, 17, DeviceTarget::Profile(CAM)).unwrap();
        let after = p.table_sizes();
        let t = p.profile_slot(CAM).unwrap().table;
        assert_eq!(after[&TableId(2)], before[&TableId(2)] + 1);
        assert_eq!(after[&t], before[&t]);
    }

    #[test]
    fn reassign_redirects_verdicts() {
        let mut p = camera_setup();
        p.install_device(HOME, 17, DeviceTarget::Controller).unwrap();
        let packet = pkt("100.64.0.1", "192.0.2.11", 443, 17);
        assert!(matches!(p.process(&packet), Verdict::Unidentified { .. }));
        p.reassign_device(HOME, 17, DeviceTarget::Profile(CAM)).unwrap();
        assert!(matches!(p.process(&packet), Verdict::Legitimate { .. }));
    }

    #[test]
    fn tables_are_shared_beyond_budget() {
        let mut p = Pipeline::new(PipelineConfig { table_budget: 5 });
        p.install_customer(HOME, ip("100.64.0.1")).unwrap();
        let slots: Vec<_> = (0..5u64)
            .map(|i| p.install_profile(ProfileId(i), [row(&format!("192.0.2.{}", i + 1))]))
            .collect();
        assert_eq!(slots[0].table, TableId(3));
        assert_eq!(slots[1].table, TableId(4));
        assert!(slots[2..].iter().all(|s| s.table.0 == 3 || s.table.0 == 4));
        let mut seen = std::collections::BTreeSet::new();
        for s in &slots {
            assert!(seen.insert((s.table, s.selector)));
        }
        for (i, m) in (0..5u64).zip([1u8, 2, 3, 4, 5]) {
            p.install_device(HOME, m, DeviceTarget::Profile(ProfileId(i))).unwrap();
        }
        // Each device only sees its own profile's rows even when sharing.
        for i in 0..5u64 {
            let m = [1u8, 2, 3, 4, 5][i as usize];
            let own = pkt("100.64.0.1", &format!("192.0.2.{}", i + 1), 443, m);
            let other = pkt("100.64.0.1", &format!("192.0.2.{}", ((i + 1) % 5) + 1), 443, m);
            assert!(matches!(p.process(&own), Verdict::Legitimate { .. }));
            assert!(matches!(p.process(&other), Verdict::Violation { .. }));
        }
        assert_eq!(p.filter_count(), 23 + 1 + 5 + 5 * 2);
    }

    #[test]
    fn dump_is_stable_and_ordered() {
        let p = camera_setup();
        p.process(&pkt("100.64.0.1", "192.0.2.10", 443, 13));
        let d1 = p.dump();
        let d2 = p.dump();
        assert_eq!(d1, d2);
        let lines: Vec<&str> = d1.lines().collect();
        assert_eq!(lines.len(), p.filter_count());
        assert!(lines[0].starts_with("table=0 priority=100 match=ip_dscp=0 action=drop"));
        assert!(d1.contains("table=1 priority=100 match=nw_src=100.64.0.1 action=write_metadata:1,goto_table:2 n_packets=1"));
        assert!(d1.contains("table=3 priority=100 match=metadata=0,nw_dst=192.0.2.10 action=drop n_packets=1"));
        assert!(lines.last().unwrap().starts_with("table=3 priority=0 match=metadata=0 action=output:1"));
    }

    #[test]
    fn first_packet_filter_admits_once() {
        let mut f = FirstPacketFilter::new(16);
        let k = ConnKey::new(ip("10.0.0.1"), 1, ip("10.0.0.2"), 2, 6);
        assert!(f.admit(&k));
        assert!(!f.admit(&k));
        assert!(f.admit(&k.reverse()));
        f.evict(&k);
        assert!(f.admit(&k));
    }

    #[test]
    fn first_packet_filter_eviction_readmits() {
        let mut f = FirstPacketFilter::new(2);
        let k = |n: u16| ConnKey::new(ip("10.0.0.1"), n, ip("10.0.0.2"), 80, 6);
        assert!(f.admit(&k(1)));
        assert!(f.admit(&k(2)));
        assert!(f.admit(&k(3)));
        assert_eq!(f.evictions(), 1);
        assert!(f.admit(&k(1)));
        assert!(!f.admit(&k(3)));
    }
}
