// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Simulated DNS: authoritative zones, a caching resolver, and the active
//! query loop that keeps compiled whitelists current.

use crate::mud::{MudProfile, ProfileId, ResolvedWhitelist, WhitelistRow};
use crate::net::Tick;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DnsError {
    #[error("NXDOMAIN for {0}")]
    NxDomain(String),
    #[error("'{caller}' is not the authority for {name}")]
    NotAuthority { caller: String, name: String },
    #[error("{name} is outside zone {apex}")]
    OutOfZone { name: String, apex: String },
    #[error("empty answer for {0}")]
    EmptyAnswer(String),
    #[error("zone file line {line}: {reason}")]
    ZoneSyntax { line: usize, reason: String },
}

pub fn normalize(name: &str) -> String {
    name.trim_end_matches('.').to_ascii_lowercase()
}

fn in_zone(name: &str, apex: &str) -> bool {
    apex.is_empty() || name == apex || name.ends_with(&format!(".{apex}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsRecord {
    pub addrs: BTreeSet<Ipv4Addr>,
    pub ttl: Tick,
}

/// Records under one apex, writable only by its authority.
#[derive(Debug, Clone)]
pub struct DnsZone {
    apex: String,
    authority: String,
    records: BTreeMap<String, DnsRecord>,
    strips_random_label: bool,
}

impl DnsZone {
    pub fn new(apex: &str, authority: &str) -> Self {
        DnsZone {
            apex: normalize(apex),
            authority: authority.to_string(),
            records: BTreeMap::new(),
            strips_random_label: false,
        }
    }

    /// Answers `<random>.<name>` with the record of `<name>`.
    pub fn with_label_stripping(mut self) -> Self {
        self.strips_random_label = true;
        self
    }

    pub fn apex(&self) -> &str {
        &self.apex
    }

    pub fn authority(&self) -> &str {
        &self.authority
    }

    pub fn strips_random_label(&self) -> bool {
        self.strips_random_label
    }

    /// Atomically replaces the address set of `name`.
    pub fn update_record(
        &mut self,
        caller: &str,
        name: &str,
        addrs: BTreeSet<Ipv4Addr>,
        ttl: Tick,
    ) -> Result<(), DnsError> {
        let name = normalize(name);
        if caller != self.authority {
            return Err(DnsError::NotAuthority { caller: caller.to_string(), name });
        }
        if !in_zone(&name, &self.apex) {
            return Err(DnsError::OutOfZone { name, apex: self.apex.clone() });
        }
        if addrs.is_empty() {
            return Err(DnsError::EmptyAnswer(name));
        }
        self.records.insert(name, DnsRecord { addrs, ttl });
        Ok(())
    }

    pub fn remove_record(&mut self, caller: &str, name: &str) -> Result<(), DnsError> {
        let name = normalize(name);
        if caller != self.authority {
            return Err(DnsError::NotAuthority { caller: caller.to_string(), name });
        }
        self.records.remove(&name);
        Ok(())
    }

    pub fn record(&self, name: &str) -> Option<&DnsRecord> {
        self.records.get(name)
    }

    fn answer(&self, qname: &str) -> Option<&DnsRecord> {
        if let Some(r) = self.records.get(qname) {
            return Some(r);
        }
        if self.strips_random_label {
            let (_, rest) = qname.split_once('.')?;
            return self.records.get(rest);
        }
        None
    }

    pub fn records(&self) -> impl Iterator<Item = (&String, &DnsRecord)> {
        self.records.iter()
    }
}

/// Every zone in the simulated Internet, plus the attacker-controlled
/// channel that feeds insecure resolvers.
#[derive(Debug, Clone, Default)]
pub struct DnsUniverse {
    zones: Vec<DnsZone>,
    poisoned: BTreeMap<String, BTreeSet<Ipv4Addr>>,
}

pub const WORLD_AUTHORITY: &str = "world";

impl DnsUniverse {
    /// A universe with a catch-all root zone owned by [`WORLD_AUTHORITY`].
    pub fn new() -> Self {
        DnsUniverse { zones: vec![DnsZone::new("", WORLD_AUTHORITY)], poisoned: BTreeMap::new() }
    }

    pub fn add_zone(&mut self, zone: DnsZone) {
        self.zones.retain(|z| z.apex != zone.apex);
        self.zones.push(zone);
        // Longest apex first so lookups pick the most specific zone.
        self.zones.sort_by(|a, b| b.apex.len().cmp(&a.apex.len()).then(a.apex.cmp(&b.apex)));
    }

    pub fn zone_for(&self, name: &str) -> Option<&DnsZone> {
        let name = normalize(name);
        self.zones.iter().find(|z| in_zone(&name, &z.apex))
    }

    pub fn zone_for_mut(&mut self, name: &str) -> Option<&mut DnsZone> {
        let name = normalize(name);
        self.zones.iter_mut().find(|z| in_zone(&name, &z.apex))
    }

    /// Authority-checked record update in whichever zone owns `name`.
    pub fn update_record(
        &mut self,
        caller: &str,
        name: &str,
        addrs: impl IntoIterator<Item = Ipv4Addr>,
        ttl: Tick,
    ) -> Result<(), DnsError> {
        let zone = self
            .zone_for_mut(name)
            .ok_or_else(|| DnsError::NxDomain(normalize(name)))?;
        zone.update_record(caller, name, addrs.into_iter().collect(), ttl)
    }

    /// Convenience for fixtures: write into the root zone as the world.
    pub fn set(&mut self, name: &str, addrs: impl IntoIterator<Item = Ipv4Addr>, ttl: Tick) -> Result<(), DnsError> {
        self.update_record(WORLD_AUTHORITY, name, addrs, ttl)
    }

    /// Current authoritative answer for `qname`.
    pub fn authoritative(&self, qname: &str) -> Option<&DnsRecord> {
        let qname = normalize(qname);
        self.zone_for(&qname)?.answer(&qname)
    }

    /// Injects a bogus answer that only insecure resolvers will accept.
    pub fn poison(&mut self, name: &str, addrs: impl IntoIterator<Item = Ipv4Addr>) {
        self.poisoned.entry(normalize(name)).or_default().extend(addrs);
    }

    fn poisoned(&self, name: &str) -> Option<&BTreeSet<Ipv4Addr>> {
        self.poisoned.get(name)
    }

    /// Loads `name TTL A addr[,addr...]` lines into the world zone.
    pub fn load_zone_file(&mut self, text: &str) -> Result<usize, DnsError> {
        let entries = parse_zone_file(text)?;
        let n = entries.len();
        for (name, rec) in entries {
            let zone = self.zone_for_mut(&name).ok_or_else(|| DnsError::NxDomain(name.clone()))?;
            let authority = zone.authority.clone();
            zone.update_record(&authority, &name, rec.addrs, rec.ttl)?;
        }
        Ok(n)
    }
}

/// Parses the fixture zone format. `#` starts a comment.
pub fn parse_zone_file(text: &str) -> Result<Vec<(String, DnsRecord)>, DnsError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: &str| DnsError::ZoneSyntax { line: i + 1, reason: reason.to_string() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, ttl, ty, addrs] = fields[..] else {
            return Err(err("expected 'name TTL A addr[,addr...]'"));
        };
        if !ty.eq_ignore_ascii_case("A") {
            return Err(err("only A records are supported"));
        }
        let ttl: Tick = ttl.parse().map_err(|_| err("bad TTL"))?;
        let addrs = addrs
            .split(',')
            .map(|a| a.parse::<Ipv4Addr>())
            .collect::<Result<BTreeSet<_>, _>>()
            .map_err(|_| err("bad address"))?;
        if addrs.is_empty() {
            return Err(err("no addresses"));
        }
        out.push((normalize(name), DnsRecord { addrs, ttl }));
    }
    Ok(out)
}

pub fn format_zone_file<'a>(records: impl IntoIterator<Item = (&'a String, &'a DnsRecord)>) -> String {
    let mut s = String::new();
    for (name, rec) in records {
        let addrs: Vec<String> = rec.addrs.iter().map(Ipv4Addr::to_string).collect();
        let _ = writeln!(s, "{name} {} A {}", rec.ttl, addrs.join(","));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BypassMethod {
    /// Prepend a fresh random label; zones that strip it answer from the
    /// live record. Other zones are queried directly.
    #[default]
    RandomLabel,
    /// Always ask the owning authority directly.
    DirectAuthority,
}

#[derive(Debug, Clone)]
struct CachedAnswer {
    addrs: BTreeSet<Ipv4Addr>,
    expires: Tick,
}

/// A recursive resolver as seen from the VNF.
#[derive(Debug, Clone)]
pub struct ResolverView {
    secure: bool,
    bypass: BypassMethod,
    cache: HashMap<String, CachedAnswer>,
    rng: ChaCha8Rng,
    last_qname: Option<String>,
    upstream_queries: u64,
}

const BASE32: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz234567";

impl ResolverView {
    pub fn new(secure: bool, seed: u64) -> Self {
        ResolverView {
            secure,
            bypass: BypassMethod::default(),
            cache: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_qname: None,
            upstream_queries: 0,
        }
    }

    pub fn with_bypass(mut self, method: BypassMethod) -> Self {
        self.bypass = method;
        self
    }

    pub fn is_secure(&self) -> bool {
        self.secure
    }

    /// Name actually put on the wire by the last resolution.
    pub fn last_qname(&self) -> Option<&str> {
        self.last_qname.as_deref()
    }

    pub fn upstream_queries(&self) -> u64 {
        self.upstream_queries
    }

    fn random_label(&mut self) -> String {
        (0..12).map(|_| BASE32[self.rng.gen_range(0..32)] as char).collect()
    }

    pub fn resolve(
        &mut self,
        world: &DnsUniverse,
        name: &str,
        bypass_cache: bool,
        now: Tick,
    ) -> Result<BTreeSet<Ipv4Addr>, DnsError> {
        let name = normalize(name);
        if bypass_cache {
            let strips = world.zone_for(&name).is_some_and(DnsZone::strips_random_label);
            let qname = if strips && self.bypass == BypassMethod::RandomLabel {
                format!("{}.{name}", self.random_label())
            } else {
                name.clone()
            };
            self.upstream_queries += 1;
            let answer = world
                .authoritative(&qname)
                .map(|r| r.addrs.clone())
                .ok_or_else(|| DnsError::NxDomain(name.clone()));
            self.last_qname = Some(qname);
            return answer;
        }

        self.last_qname = Some(name.clone());
        if let Some(c) = self.cache.get(&name) {
            if c.expires > now {
                return Ok(c.addrs.clone());
            }
        }
        self.upstream_queries += 1;
        if !self.secure {
            if let Some(bogus) = world.poisoned(&name) {
                let addrs = bogus.clone();
                self.cache.insert(name, CachedAnswer { addrs: addrs.clone(), expires: now + 300 });
                return Ok(addrs);
            }
        }
        match world.authoritative(&name) {
            Some(rec) => {
                self.cache.insert(
                    name,
                    CachedAnswer { addrs: rec.addrs.clone(), expires: now + rec.ttl },
                );
                Ok(rec.addrs.clone())
            }
            None => {
                self.cache.remove(&name);
                Err(DnsError::NxDomain(name))
            }
        }
    }
}

/// Rows gained and lost by one profile's whitelist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WhitelistDiff {
    pub profile_id: ProfileId,
    pub added: BTreeSet<WhitelistRow>,
    pub removed: BTreeSet<WhitelistRow>,
}

impl WhitelistDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }

    pub fn added_addrs(&self) -> BTreeSet<Ipv4Addr> {
        self.added.iter().filter_map(|r| r.addr).collect()
    }

    pub fn removed_addrs(&self) -> BTreeSet<Ipv4Addr> {
        self.removed.iter().filter_map(|r| r.addr).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RefreshOutcome {
    pub diffs: Vec<WhitelistDiff>,
    /// Queries issued per domain during this refresh.
    pub queries: BTreeMap<String, u32>,
    pub failed: Vec<String>,
}

/// Keeps one [`ResolvedWhitelist`] per installed profile by querying every
/// whitelisted domain once per refresh, no matter how many devices use it.
#[derive(Debug, Clone)]
pub struct ActiveResolver {
    view: ResolverView,
    bypass_suffixes: Vec<String>,
    answers: BTreeMap<String, BTreeSet<Ipv4Addr>>,
    resolved: BTreeMap<ProfileId, ResolvedWhitelist>,
}

impl ActiveResolver {
    pub fn new(view: ResolverView, bypass_suffixes: Vec<String>) -> Self {
        ActiveResolver {
            view,
            bypass_suffixes: bypass_suffixes.iter().map(|s| normalize(s)).collect(),
            answers: BTreeMap::new(),
            resolved: BTreeMap::new(),
        }
    }

    pub fn view(&self) -> &ResolverView {
        &self.view
    }

    /// Names under a bypass suffix are always resolved around caches.
    pub fn needs_bypass(&self, name: &str) -> bool {
        self.bypass_suffixes.iter().any(|s| in_zone(name, s))
    }

    pub fn whitelist(&self, id: ProfileId) -> Option<&ResolvedWhitelist> {
        self.resolved.get(&id)
    }

    pub fn whitelists(&self) -> impl Iterator<Item = &ResolvedWhitelist> {
        self.resolved.values()
    }

    pub fn answer(&self, domain: &str) -> Option<&BTreeSet<Ipv4Addr>> {
        self.answers.get(domain)
    }

    fn query(&mut self, world: &DnsUniverse, domain: &str, force_bypass: bool, now: Tick) -> Result<(), DnsError> {
        let bypass = force_bypass || self.needs_bypass(domain);
        let addrs = self.view.resolve(world, domain, bypass, now)?;
        self.answers.insert(domain.to_string(), addrs);
        Ok(())
    }

    fn recompile(&mut self, profile: &MudProfile, now: Tick) -> WhitelistDiff {
        let answers = &self.answers;
        let fresh = ResolvedWhitelist::compile(profile, |d| answers.get(d), now);
        let old = self.resolved.get(&profile.id()).map(|w| &w.rows);
        let (added, removed) = match old {
            Some(old) => (
                fresh.rows.difference(old).copied().collect(),
                old.difference(&fresh.rows).copied().collect(),
            ),
            None => (fresh.rows.clone(), BTreeSet::new()),
        };
        self.resolved.insert(profile.id(), fresh);
        WhitelistDiff { profile_id: profile.id(), added, removed }
    }

    /// Compiles a newly installed profile, querying only domains that have
    /// no answer yet.
    pub fn install(&mut self, world: &DnsUniverse, profile: &MudProfile, now: Tick) -> &ResolvedWhitelist {
        for d in profile.domains() {
            if !self.answers.contains_key(d) {
                if let Err(e) = self.query(world, d, false, now) {
                    tracing::debug!("initial resolution of {d} failed: {e}");
                }
            }
        }
        self.recompile(profile, now);
        &self.resolved[&profile.id()]
    }

    pub fn uninstall(&mut self, id: ProfileId) {
        self.resolved.remove(&id);
    }

    /// Periodic refresh over all installed profiles. Failed domains keep
    /// their previous answer.
    pub fn refresh_whitelists<'a>(
        &mut self,
        world: &DnsUniverse,
        profiles: impl IntoIterator<Item = &'a MudProfile>,
        now: Tick,
    ) -> RefreshOutcome {
        let profiles: Vec<&MudProfile> = profiles.into_iter().collect();
        let domains: BTreeSet<String> = profiles
            .iter()
            .flat_map(|p| p.domains())
            .map(str::to_string)
            .collect();
        let mut out = RefreshOutcome::default();
        for d in &domains {
            *out.queries.entry(d.clone()).or_default() += 1;
            if self.query(world, d, false, now).is_err() {
                out.failed.push(d.clone());
            }
        }
        for p in profiles {
            let diff = self.recompile(p, now);
            if !diff.is_empty() {
                out.diffs.push(diff);
            }
        }
        out
    }

    /// Immediately re-resolves every domain of `target` around caches and
    /// recompiles all profiles sharing any of those domains.
    pub fn reresolve<'a>(
        &mut self,
        world: &DnsUniverse,
        target: &MudProfile,
        all: impl IntoIterator<Item = &'a MudProfile>,
        now: Tick,
    ) -> RefreshOutcome {
        let domains: BTreeSet<String> = target.domains().into_iter().map(str::to_string).collect();
        let mut out = RefreshOutcome::default();
        for d in &domains {
            *out.queries.entry(d.clone()).or_default() += 1;
            if self.query(world, d, true, now).is_err() {
                out.failed.push(d.clone());
            }
        }
        for p in all {
            if p.id() == target.id() || p.domains().iter().any(|d| domains.contains(*d)) {
                let diff = self.recompile(p, now);
                if !diff.is_empty() {
                    out.diffs.push(diff);
                }
            }
        }
        out
    }
}
