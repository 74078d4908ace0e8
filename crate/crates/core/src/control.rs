// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! The VNF control plane.
//!
//! It reacts to gateway notifications, keeps the pipeline in step with
//! customers, devices and resolved whitelists, classifies unidentified
//! devices from what they look up, and turns confirmed violations into
//! alerts and blocking requests.

use crate::cpe::{
    host_path, list_host_macs, local_whitelist_path, mark_path, mark_status_path, CpeConfig, CpeError,
    CpeSim, Notification, PATH_DEFAULT_MARK, PATH_DNS_DIRECT, PATH_EXTERNAL_IP, PATH_HOST_COUNT,
    PATH_PORTMAP_COUNT, PATH_RESET_PASS_MARK,
};
use crate::cpe_wlm::{split_whitelist, LocalRule};
use crate::dns::{normalize, ActiveResolver, BypassMethod, DnsUniverse, RefreshOutcome, ResolverView};
use crate::mud::{canonical_url, parse_mud, MudProfile, ProfileId, ProfileStore, WhitelistRow};
use crate::net::{is_common_dscp, ConnKey, CustomerId, MacAddr, Packet, Tick, DEFAULT_MARK, PASS_MARK};
use crate::pipeline::{DeviceTarget, Pipeline, PipelineConfig, PipelineError, Verdict};
use crate::wle::{AclRequest, AclScope, AggregateDirection};
use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::net::Ipv4Addr;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ControlError {
    #[error("unknown customer {0}")]
    UnknownCustomer(CustomerId),
    #[error("gateway of {0} is unreachable")]
    ConfigUnreachable(CustomerId),
    #[error("gateway configuration failed: {0}")]
    Config(#[from] CpeError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("no free device mark on {0}")]
    MarksExhausted(CustomerId),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    #[error("not found")]
    NotFound,
    #[error("server unreachable")]
    Unreachable,
    /// The server accepted the request but has no answer yet.
    #[error("pending")]
    Pending,
    #[error("rejected: {0}")]
    Rejected(String),
}

/// Where MUD files come from.
pub trait MudSource {
    fn fetch(&mut self, url: &str, requester: Ipv4Addr, now: Tick) -> Result<Vec<u8>, FetchError>;
}

/// Static url → file map.
impl MudSource for BTreeMap<String, Vec<u8>> {
    fn fetch(&mut self, url: &str, _requester: Ipv4Addr, _now: Tick) -> Result<Vec<u8>, FetchError> {
        self.get(&canonical_url(url)).or_else(|| self.get(url)).cloned().ok_or(FetchError::NotFound)
    }
}

/// Access to each customer's gateway configuration surface.
pub trait CpeDirectory {
    fn config(&mut self, customer: CustomerId) -> Option<&mut dyn CpeConfig>;
}

impl CpeDirectory for BTreeMap<CustomerId, CpeSim> {
    fn config(&mut self, customer: CustomerId) -> Option<&mut dyn CpeConfig> {
        self.get_mut(&customer).map(|c| c as &mut dyn CpeConfig)
    }
}

/// Everything the control plane touches but does not own.
pub struct Ctx<'a> {
    pub cpes: &'a mut dyn CpeDirectory,
    pub mud: &'a mut dyn MudSource,
    pub dns: &'a DnsUniverse,
    pub now: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P2pMode {
    /// All rules live in the VNF.
    #[default]
    Vnf,
    /// Owner-domain and LAN rules live on the gateway.
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub refresh_period: Tick,
    pub min_observations: usize,
    pub dwell: Tick,
    pub triggered_resolution: bool,
    pub fetch_max_attempts: u32,
    pub fetch_backoff: Tick,
    pub aggregate_threshold: usize,
    pub aggregate_prefix: u8,
    pub non_iot_domain_threshold: usize,
    pub p2p_mode: P2pMode,
    pub svm_parent: String,
    pub bypass_suffixes: Vec<String>,
    pub bypass_method: BypassMethod,
    pub secure_resolver: bool,
    pub cpe_mud_url: Option<String>,
    pub table_budget: u16,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            refresh_period: 300,
            min_observations: 3,
            dwell: 100,
            triggered_resolution: true,
            fetch_max_attempts: 5,
            fetch_backoff: 10,
            aggregate_threshold: 8,
            aggregate_prefix: 24,
            non_iot_domain_threshold: 10,
            p2p_mode: P2pMode::Vnf,
            svm_parent: "svm.example".into(),
            bypass_suffixes: vec!["svm.example".into()],
            bypass_method: BypassMethod::RandomLabel,
            secure_resolver: true,
            cpe_mud_url: None,
            table_budget: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DeviceStatus {
    Unidentified,
    Identified { profile: ProfileId },
    NonIot,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceState {
    pub customer: CustomerId,
    pub mac: MacAddr,
    pub mark: Option<u8>,
    pub status: DeviceStatus,
    pub mud_url: Option<String>,
    /// The device type's own profile, before owner specialisation.
    pub type_profile: Option<ProfileId>,
    pub observed_domains: BTreeSet<String>,
    pub observed_endpoints: BTreeSet<Ipv4Addr>,
    pub first_observed: Option<Tick>,
    pub joined_at: Tick,
    #[serde(skip)]
    seen: HashSet<ConnKey>,
    #[serde(skip)]
    new_iot_reported: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CustomerState {
    pub id: CustomerId,
    pub ip: Ipv4Addr,
    pub owner_domain: Option<String>,
    pub internal_domain: Option<String>,
    pub devices: BTreeMap<MacAddr, DeviceState>,
    #[serde(skip)]
    marks: BTreeMap<u8, MacAddr>,
    #[serde(skip)]
    violation_targets: BTreeMap<Ipv4Net, BTreeSet<Ipv4Addr>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertReason {
    WhitelistViolation,
    NewDevice,
    UnidentifiedEndpoint,
    LocalViolation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Alert {
    pub ts: Tick,
    pub customer_id: CustomerId,
    pub mac: Option<MacAddr>,
    pub profile_id: Option<ProfileId>,
    pub conn_key: Option<ConnKey>,
    pub reason: AlertReason,
}

/// What the control plane made of one pipeline verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ignored,
    Legitimate,
    /// Violation cleared by fresh resolution.
    Suppressed,
    Alerted,
    AlreadyBlocked,
    /// Recorded for an unidentified device.
    Observed,
    /// Repeat of an already observed connection.
    Duplicate,
    /// Default-marked or stale-marked packet with no unique owner.
    Unattributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassHint {
    Iot,
    NonIot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    MatchedProfile { profile: ProfileId },
    NewIot,
    NonIot,
}

/// Pluggable IoT / non-IoT oracle for devices matching no known profile.
pub trait DeviceClassifier {
    fn classify(&self, device: &DeviceState) -> Option<ClassHint>;
}

/// Calls a device non-IoT once it has looked up more than `threshold`
/// distinct registered domains.
#[derive(Debug, Clone, Copy)]
pub struct DomainSpreadClassifier {
    pub threshold: usize,
}

/// Last two labels of a name. Good enough for the simulated namespace.
pub fn registered_domain(name: &str) -> String {
    let labels: Vec<&str> = name.trim_end_matches('.').rsplitn(3, '.').collect();
    match labels.as_slice() {
        [tld, sld, ..] => format!("{sld}.{tld}"),
        _ => name.to_string(),
    }
}

impl DeviceClassifier for DomainSpreadClassifier {
    fn classify(&self, device: &DeviceState) -> Option<ClassHint> {
        let spread: BTreeSet<String> = device.observed_domains.iter().map(|d| registered_domain(d)).collect();
        (spread.len() > self.threshold).then_some(ClassHint::NonIot)
    }
}

#[derive(Debug, Clone)]
struct PendingFetch {
    customer: CustomerId,
    mac: MacAddr,
    url: String,
    attempts: u32,
    next_at: Tick,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ControlStats {
    pub fetches: u64,
    pub fetch_failures: u64,
    pub refreshes: u64,
    pub refresh_queries: u64,
    pub last_refresh_queries: u64,
    pub reresolutions: u64,
    pub suppressed: u64,
    pub observations: u64,
    pub unattributed: u64,
    pub acl_requests: u64,
}

pub struct ControlPlane {
    cfg: ControlConfig,
    pipeline: Pipeline,
    store: ProfileStore,
    types: BTreeMap<String, Arc<MudProfile>>,
    resolver: ActiveResolver,
    customers: BTreeMap<CustomerId, CustomerState>,
    alerts: Vec<Alert>,
    acl_outbox: Vec<AclRequest>,
    blocked: BTreeSet<ConnKey>,
    aggregated: BTreeSet<Ipv4Net>,
    classifier: Box<dyn DeviceClassifier + Send + Sync>,
    hints: BTreeMap<MacAddr, ClassHint>,
    pending: Vec<PendingFetch>,
    next_refresh: Tick,
    last_reresolve: BTreeMap<ProfileId, Tick>,
    last_refresh: Option<RefreshOutcome>,
    stats: ControlStats,
}

impl std::fmt::Debug for ControlPlane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlPlane")
            .field("customers", &self.customers.len())
            .field("profiles", &self.store.len())
            .field("filters", &self.pipeline.filter_count())
            .finish()
    }
}

/// Smallest value usable as a per-device mark not yet in `used`.
pub fn allocate_mark(used: impl Fn(u8) -> bool) -> Option<u8> {
    (1..64u8).find(|&v| !is_common_dscp(v) && v != DEFAULT_MARK && v != PASS_MARK && !used(v))
}

impl ControlPlane {
    pub fn new(cfg: ControlConfig, seed: u64) -> Self {
        let view = ResolverView::new(cfg.secure_resolver, seed).with_bypass(cfg.bypass_method);
        let resolver = ActiveResolver::new(view, cfg.bypass_suffixes.clone());
        let pipeline = Pipeline::new(PipelineConfig { table_budget: cfg.table_budget });
        let classifier = Box::new(DomainSpreadClassifier { threshold: cfg.non_iot_domain_threshold });
        ControlPlane {
            next_refresh: cfg.refresh_period,
            cfg,
            pipeline,
            store: ProfileStore::new(),
            types: BTreeMap::new(),
            resolver,
            customers: BTreeMap::new(),
            alerts: Vec::new(),
            acl_outbox: Vec::new(),
            blocked: BTreeSet::new(),
            aggregated: BTreeSet::new(),
            classifier,
            hints: BTreeMap::new(),
            pending: Vec::new(),
            last_reresolve: BTreeMap::new(),
            last_refresh: None,
            stats: ControlStats::default(),
        }
    }

    pub fn with_classifier(mut self, c: Box<dyn DeviceClassifier + Send + Sync>) -> Self {
        self.classifier = c;
        self
    }

    pub fn config(&self) -> &ControlConfig {
        &self.cfg
    }

    pub fn set_triggered_resolution(&mut self, on: bool) {
        self.cfg.triggered_resolution = on;
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    #[cfg(feature = "fault-injection")]
    pub fn pipeline_mut(&mut self) -> &mut Pipeline {
        &mut self.pipeline
    }

    pub fn resolver(&self) -> &ActiveResolver {
        &self.resolver
    }

    pub fn profiles(&self) -> &ProfileStore {
        &self.store
    }

    pub fn customers(&self) -> impl Iterator<Item = &CustomerState> {
        self.customers.values()
    }

    pub fn customer(&self, c: CustomerId) -> Option<&CustomerState> {
        self.customers.get(&c)
    }

    pub fn device(&self, c: CustomerId, mac: MacAddr) -> Option<&DeviceState> {
        self.customers.get(&c)?.devices.get(&mac)
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn drain_acl_requests(&mut self) -> Vec<AclRequest> {
        std::mem::take(&mut self.acl_outbox)
    }

    pub fn stats(&self) -> &ControlStats {
        &self.stats
    }

    pub fn last_refresh(&self) -> Option<&RefreshOutcome> {
        self.last_refresh.as_ref()
    }

    pub fn hint(&mut self, mac: MacAddr, hint: ClassHint) {
        self.hints.insert(mac, hint);
    }

    /// Records an alert raised elsewhere (the gateway enforcer) in the
    /// common alert stream.
    pub fn record_alert(&mut self, alert: Alert) {
        self.alerts.push(alert);
    }

    fn cpe<'c>(ctx: &'c mut Ctx<'_>, c: CustomerId) -> Result<&'c mut dyn CpeConfig, ControlError> {
        ctx.cpes.config(c).ok_or(ControlError::UnknownCustomer(c))
    }

    fn lift(c: CustomerId) -> impl Fn(CpeError) -> ControlError {
        move |e| match e {
            CpeError::ConfigUnreachable => ControlError::ConfigUnreachable(c),
            e => ControlError::Config(e),
        }
    }

    pub fn on_notification(&mut self, ctx: &mut Ctx<'_>, n: &Notification) -> Result<(), ControlError> {
        match n.path.as_str() {
            PATH_EXTERNAL_IP => {
                let ip: Ipv4Addr = n.value.parse().map_err(|_| {
                    ControlError::Config(CpeError::InvalidValue { path: n.path.clone(), value: n.value.clone() })
                })?;
                self.on_ip_changed(n.customer, ip)
            }
            PATH_HOST_COUNT => {
                let macs = list_host_macs(Self::cpe(ctx, n.customer)?).map_err(Self::lift(n.customer))?;
                for mac in macs {
                    self.on_new_device(ctx, n.customer, mac)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Registers a gateway: reads its address, arms notifications, sets up
    /// marking for every known host. Calling it again is a no-op.
    pub fn on_new_customer(&mut self, ctx: &mut Ctx<'_>, c: CustomerId) -> Result<(), ControlError> {
        if self.customers.contains_key(&c) {
            return Ok(());
        }
        let lift = Self::lift(c);
        let hybrid = self.cfg.p2p_mode == P2pMode::Hybrid;
        let cpe = Self::cpe(ctx, c)?;
        let ip: Ipv4Addr = cpe
            .get_param(PATH_EXTERNAL_IP)
            .map_err(&lift)?
            .parse()
            .map_err(|_| ControlError::Config(CpeError::UnknownPath(PATH_EXTERNAL_IP.into())))?;
        for path in [PATH_EXTERNAL_IP, PATH_HOST_COUNT, PATH_PORTMAP_COUNT] {
            cpe.set_notification(path, true).map_err(&lift)?;
        }
        cpe.set_param(PATH_DEFAULT_MARK, &DEFAULT_MARK.to_string()).map_err(&lift)?;
        cpe.set_param(PATH_DNS_DIRECT, "true").map_err(&lift)?;
        if hybrid {
            cpe.set_param(PATH_RESET_PASS_MARK, "true").map_err(&lift)?;
        }
        let hosts = list_host_macs(cpe).map_err(&lift)?;
        self.pipeline.install_customer(c, ip)?;
        self.customers.insert(
            c,
            CustomerState {
                id: c,
                ip,
                owner_domain: None,
                internal_domain: None,
                devices: BTreeMap::new(),
                marks: BTreeMap::new(),
                violation_targets: BTreeMap::new(),
            },
        );
        for mac in hosts {
            self.on_new_device(ctx, c, mac)?;
        }
        Ok(())
    }

    /// Registers the gateway's own stack as a monitored device.
    pub fn register_gateway(&mut self, ctx: &mut Ctx<'_>, c: CustomerId, own_mac: MacAddr) -> Result<(), ControlError> {
        let Some(url) = self.cfg.cpe_mud_url.clone() else {
            return Ok(());
        };
        self.add_device(ctx, c, own_mac, Some(url))
    }

    pub fn on_ip_changed(&mut self, c: CustomerId, ip: Ipv4Addr) -> Result<(), ControlError> {
        let cust = self.customers.get_mut(&c).ok_or(ControlError::UnknownCustomer(c))?;
        if cust.ip == ip {
            return Ok(());
        }
        self.pipeline.update_customer_ip(c, ip)?;
        cust.ip = ip;
        Ok(())
    }

    /// First sighting of a host on a gateway. Known MACs are ignored.
    pub fn on_new_device(&mut self, ctx: &mut Ctx<'_>, c: CustomerId, mac: MacAddr) -> Result<(), ControlError> {
        let cust = self.customers.get(&c).ok_or(ControlError::UnknownCustomer(c))?;
        if cust.devices.contains_key(&mac) {
            return Ok(());
        }
        let url = Self::cpe(ctx, c)?
            .get_param(&host_path(mac, "MUDURL"))
            .map_err(Self::lift(c))?;
        self.add_device(ctx, c, mac, (!url.is_empty()).then_some(url))
    }

    fn add_device(&mut self, ctx: &mut Ctx<'_>, c: CustomerId, mac: MacAddr, url: Option<String>) -> Result<(), ControlError> {
        let cust = self.customers.get_mut(&c).ok_or(ControlError::UnknownCustomer(c))?;
        if cust.devices.contains_key(&mac) {
            return Ok(());
        }
        let mark = allocate_mark(|v| cust.marks.contains_key(&v)).ok_or(ControlError::MarksExhausted(c))?;
        ctx.cpes
            .config(c)
            .ok_or(ControlError::UnknownCustomer(c))?
            .set_param(&mark_path(mac), &mark.to_string())
            .map_err(Self::lift(c))?;
        self.pipeline.install_device(c, mark, DeviceTarget::Controller)?;
        cust.marks.insert(mark, mac);
        cust.devices.insert(
            mac,
            DeviceState {
                customer: c,
                mac,
                mark: Some(mark),
                status: DeviceStatus::Unidentified,
                mud_url: url.clone(),
                type_profile: None,
                observed_domains: BTreeSet::new(),
                observed_endpoints: BTreeSet::new(),
                first_observed: None,
                joined_at: ctx.now,
                seen: HashSet::new(),
                new_iot_reported: false,
            },
        );
        if let Some(url) = url {
            let job = PendingFetch { customer: c, mac, url, attempts: 0, next_at: ctx.now };
            self.run_fetch(ctx, job)?;
        }
        Ok(())
    }

    fn is_svm_url(&self, url: &str) -> bool {
        url::Url::parse(url)
            .ok()
            .and_then(|u| u.host_str().map(normalize))
            .is_some_and(|h| {
                let parent = normalize(&self.cfg.svm_parent);
                h == parent || h.ends_with(&format!(".{parent}"))
            })
    }

    fn run_fetch(&mut self, ctx: &mut Ctx<'_>, mut job: PendingFetch) -> Result<(), ControlError> {
        let svm = self.is_svm_url(&job.url);
        if !svm {
            if let Some(p) = self.types.get(&canonical_url(&job.url)).cloned() {
                return self.identify(ctx, job.customer, job.mac, &p);
            }
        }
        let requester = self.customers[&job.customer].ip;
        self.stats.fetches += 1;
        match ctx.mud.fetch(&job.url, requester, ctx.now) {
            Ok(bytes) => match parse_mud(&bytes) {
                Ok(profile) if svm => self.accept_svm_file(ctx, job.customer, job.mac, &profile),
                Ok(profile) => {
                    let p = Arc::new(profile);
                    self.types.insert(canonical_url(&job.url), p.clone());
                    self.identify(ctx, job.customer, job.mac, &p)
                }
                Err(e) => {
                    tracing::warn!("MUD file at {} rejected: {e}", job.url);
                    self.stats.fetch_failures += 1;
                    Ok(())
                }
            },
            Err(FetchError::Pending) => {
                job.next_at = ctx.now + self.cfg.fetch_backoff;
                self.pending.push(job);
                Ok(())
            }
            Err(FetchError::Rejected(why)) => {
                tracing::info!("MUD fetch of {} rejected: {why}", job.url);
                self.stats.fetch_failures += 1;
                Ok(())
            }
            Err(e) => {
                self.stats.fetch_failures += 1;
                job.attempts += 1;
                if job.attempts < self.cfg.fetch_max_attempts {
                    job.next_at = ctx.now + self.cfg.fetch_backoff * (1 << (job.attempts - 1));
                    tracing::debug!("fetch of {} failed ({e}), retry at {}", job.url, job.next_at);
                    self.pending.push(job);
                }
                Ok(())
            }
        }
    }

    /// Retries every queued fetch for `mac` right away, regardless of
    /// backoff.
    pub fn retry_fetch_now(&mut self, ctx: &mut Ctx<'_>, c: CustomerId, mac: MacAddr) -> Result<(), ControlError> {
        let (now, later): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.pending).into_iter().partition(|j| j.customer == c && j.mac == mac);
        self.pending = later;
        for job in now {
            self.run_fetch(ctx, job)?;
        }
        Ok(())
    }

    pub fn pending_fetches(&self) -> usize {
        self.pending.len()
    }

    /// Applies the SVM's answer: the phone is not an IoT device, and its
    /// account domain becomes the customer's owner domain.
    fn accept_svm_file(&mut self, ctx: &mut Ctx<'_>, c: CustomerId, mac: MacAddr, file: &MudProfile) -> Result<(), ControlError> {
        let parent = normalize(&self.cfg.svm_parent);
        let internal_suffix = format!(".int.{parent}");
        let mut owner = None;
        let mut internal = None;
        for d in file.domains() {
            if d.ends_with(&internal_suffix) {
                internal = Some(d.to_string());
            } else if d.ends_with(&format!(".{parent}")) {
                owner = Some(d.to_string());
            }
        }
        let Some(owner) = owner else {
            tracing::warn!("SVM file for {mac} carries no owner domain");
            return Ok(());
        };
        self.set_non_iot(ctx, c, mac)?;
        self.set_owner_domain(ctx, c, &owner, internal.as_deref())
    }

    /// Stores the customer's owner domain and specialises every device
    /// whose type profile carries a placeholder.
    pub fn set_owner_domain(
        &mut self,
        ctx: &mut Ctx<'_>,
        c: CustomerId,
        owner: &str,
        internal: Option<&str>,
    ) -> Result<(), ControlError> {
        let cust = self.customers.get_mut(&c).ok_or(ControlError::UnknownCustomer(c))?;
        cust.owner_domain = Some(normalize(owner));
        cust.internal_domain = internal.map(normalize);
        let targets: Vec<(MacAddr, ProfileId)> = cust
            .devices
            .values()
            .filter(|d| matches!(d.status, DeviceStatus::Identified { .. }))
            .filter_map(|d| d.type_profile.map(|t| (d.mac, t)))
            .collect();
        for (mac, tid) in targets {
            let Some(p) = self.types.values().find(|p| p.id() == tid).cloned() else {
                continue;
            };
            if p.has_placeholder() || p.has_internal_placeholder() {
                self.identify(ctx, c, mac, &p)?;
            }
        }
        Ok(())
    }

    /// Builds what the VNF enforces for a device of type `generic` at
    /// customer `c`: the VNF profile (absent when every rule is local in
    /// hybrid mode), its pipeline id, and the gateway-local rules.
    fn effective_profile(&self, c: CustomerId, generic: &MudProfile) -> (Option<MudProfile>, ProfileId, Vec<LocalRule>) {
        let cust = &self.customers[&c];
        let mut p = generic.clone();
        if let Some(owner) = &cust.owner_domain {
            if p.has_placeholder() {
                p = p.substitute_placeholder(owner).unwrap_or(p);
            }
        }
        if let Some(internal) = &cust.internal_domain {
            if p.has_internal_placeholder() {
                p = p.substitute_internal(internal).unwrap_or(p);
            }
        }
        let id = p.id();
        if self.cfg.p2p_mode == P2pMode::Hybrid {
            let owners: Vec<&str> =
                cust.owner_domain.iter().chain(cust.internal_domain.iter()).map(String::as_str).collect();
            let (vnf, local) = split_whitelist(&p, &owners);
            return (vnf, id, local);
        }
        (Some(p), id, Vec::new())
    }

    /// Points the device at the enforced form of `generic`.
    fn identify(&mut self, ctx: &mut Ctx<'_>, c: CustomerId, mac: MacAddr, generic: &Arc<MudProfile>) -> Result<(), ControlError> {
        if matches!(self.device(c, mac).map(|d| &d.status), Some(DeviceStatus::NonIot) | None) {
            return Ok(());
        }
        let (vnf, id, local) = self.effective_profile(c, generic);
        if !self.pipeline.has_profile(id) {
            let rows: Vec<WhitelistRow> = match vnf {
                Some(vnf) => {
                    let (stored, _) = self.store.insert(vnf);
                    self.resolver.install(ctx.dns, &stored, ctx.now).rows.iter().copied().collect()
                }
                // Nothing for the VNF to permit: any marked upstream
                // traffic of this device is a violation.
                None => Vec::new(),
            };
            self.pipeline.install_profile(id, rows);
        }
        if self.cfg.p2p_mode == P2pMode::Hybrid {
            let json = if local.is_empty() { String::new() } else { serde_json::to_string(&local).expect("serializable") };
            Self::cpe(ctx, c)?.set_param(&local_whitelist_path(mac), &json).map_err(Self::lift(c))?;
        }
        let cust = self.customers.get_mut(&c).ok_or(ControlError::UnknownCustomer(c))?;
        let dev = cust.devices.get_mut(&mac).expect("checked above");
        if let Some(mark) = dev.mark {
            self.pipeline.reassign_device(c, mark, DeviceTarget::Profile(id))?;
        }
        dev.status = DeviceStatus::Identified { profile: id };
        dev.type_profile = Some(generic.id());
        Ok(())
    }

    fn set_non_iot(&mut self, ctx: &mut Ctx<'_>, c: CustomerId, mac: MacAddr) -> Result<(), ControlError> {
        let cust = self.customers.get_mut(&c).ok_or(ControlError::UnknownCustomer(c))?;
        let Some(dev) = cust.devices.get_mut(&mac) else {
            return Ok(());
        };
        if !matches!(dev.status, DeviceStatus::Unidentified) {
            return Ok(());
        }
        ctx.cpes
            .config(c)
            .ok_or(ControlError::UnknownCustomer(c))?
            .set_param(&mark_path(mac), "-1")
            .map_err(Self::lift(c))?;
        if let Some(mark) = dev.mark.take() {
            self.pipeline.remove_device(c, mark)?;
            cust.marks.remove(&mark);
        }
        dev.status = DeviceStatus::NonIot;
        self.pending.retain(|j| !(j.customer == c && j.mac == mac));
        Ok(())
    }

    /// Runs periodic work due at `ctx.now`: whitelist refresh, fetch
    /// retries, and dwell-gated analysis.
    pub fn tick(&mut self, ctx: &mut Ctx<'_>) -> Result<(), ControlError> {
        if ctx.now >= self.next_refresh {
            self.refresh(ctx);
            while self.next_refresh <= ctx.now {
                self.next_refresh += self.cfg.refresh_period.max(1);
            }
        }
        let (due, later): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.pending).into_iter().partition(|j| j.next_at <= ctx.now);
        self.pending = later;
        for job in due {
            self.run_fetch(ctx, job)?;
        }
        let waiting: Vec<(CustomerId, MacAddr)> = self
            .customers
            .values()
            .flat_map(|c| c.devices.values())
            .filter(|d| matches!(d.status, DeviceStatus::Unidentified) && d.first_observed.is_some())
            .map(|d| (d.customer, d.mac))
            .collect();
        for (c, mac) in waiting {
            self.analyze_and_apply(ctx, c, mac)?;
        }
        Ok(())
    }

    /// Active resolution of every installed profile.
    pub fn refresh(&mut self, ctx: &Ctx<'_>) -> &RefreshOutcome {
        let profiles: Vec<Arc<MudProfile>> = self.store.iter().cloned().collect();
        let out = self.resolver.refresh_whitelists(ctx.dns, profiles.iter().map(|p| p.as_ref()), ctx.now);
        self.apply_diffs(&out);
        let q: u64 = out.queries.values().map(|&n| n as u64).sum();
        self.stats.refreshes += 1;
        self.stats.refresh_queries += q;
        self.stats.last_refresh_queries = q;
        self.last_refresh = Some(out);
        self.last_refresh.as_ref().expect("just set")
    }

    fn apply_diffs(&mut self, out: &RefreshOutcome) {
        for diff in &out.diffs {
            if !self.pipeline.has_profile(diff.profile_id) {
                continue;
            }
            for row in &diff.removed {
                let _ = self.pipeline.remove_whitelist_entry(diff.profile_id, row);
            }
            for row in &diff.added {
                let _ = self.pipeline.install_whitelist_entry(diff.profile_id, *row);
            }
        }
    }

    fn alert(&mut self, ts: Tick, c: CustomerId, mac: Option<MacAddr>, profile: Option<ProfileId>, key: Option<ConnKey>, reason: AlertReason) {
        self.alerts.push(Alert { ts, customer_id: c, mac, profile_id: profile, conn_key: key, reason });
    }

    /// Feeds one pipeline verdict into the control logic.
    pub fn on_verdict(&mut self, ctx: &mut Ctx<'_>, v: &Verdict) -> Result<Outcome, ControlError> {
        match v {
            Verdict::Ignored { .. } => Ok(Outcome::Ignored),
            Verdict::Legitimate { .. } => Ok(Outcome::Legitimate),
            Verdict::Violation { customer, mark, profile, packet } => {
                let mac = self.customers.get(customer).and_then(|c| c.marks.get(mark).copied());
                self.handle_violation(ctx, *customer, mac, *profile, packet)
            }
            Verdict::Unidentified { customer, mark, packet } => {
                let Some(cust) = self.customers.get(customer) else {
                    return Ok(Outcome::Unattributed);
                };
                let mac = if *mark == DEFAULT_MARK {
                    self.attribute_default(ctx, *customer)
                } else {
                    cust.marks.get(mark).copied()
                };
                let Some(mac) = mac else {
                    self.stats.unattributed += 1;
                    return Ok(Outcome::Unattributed);
                };
                let status = self.customers[customer].devices[&mac].status.clone();
                match status {
                    DeviceStatus::Identified { profile } => {
                        if self.pipeline.check_profile(profile, packet) == Some(true) {
                            Ok(Outcome::Legitimate)
                        } else {
                            self.handle_violation(ctx, *customer, Some(mac), profile, packet)
                        }
                    }
                    DeviceStatus::NonIot => Ok(Outcome::Ignored),
                    DeviceStatus::Unidentified => self.observe(ctx, *customer, mac, packet),
                }
            }
        }
    }

    /// The one device whose marking rule has not taken effect yet, if
    /// exactly one exists.
    fn attribute_default(&mut self, ctx: &mut Ctx<'_>, c: CustomerId) -> Option<MacAddr> {
        let macs: Vec<MacAddr> = self.customers[&c]
            .devices
            .values()
            .filter(|d| d.mark.is_some())
            .map(|d| d.mac)
            .collect();
        let cpe = ctx.cpes.config(c)?;
        let pending: Vec<MacAddr> = macs
            .into_iter()
            .filter(|m| cpe.get_param(&mark_status_path(*m)).map(|s| s == "Pending").unwrap_or(false))
            .collect();
        match pending.as_slice() {
            [one] => Some(*one),
            _ => None,
        }
    }

    fn observe(&mut self, ctx: &mut Ctx<'_>, c: CustomerId, mac: MacAddr, p: &Packet) -> Result<Outcome, ControlError> {
        let dev = self
            .customers
            .get_mut(&c)
            .and_then(|cu| cu.devices.get_mut(&mac))
            .expect("attributed device exists");
        if !dev.seen.insert(p.key()) {
            return Ok(Outcome::Duplicate);
        }
        self.stats.observations += 1;
        match p.dns_query() {
            Some(d) => {
                dev.observed_domains.insert(normalize(d));
            }
            None => {
                dev.observed_endpoints.insert(p.dst_ip);
            }
        }
        dev.first_observed.get_or_insert(ctx.now);
        self.analyze_and_apply(ctx, c, mac)?;
        Ok(Outcome::Observed)
    }

    /// Decides what an unidentified device is, once enough has been seen.
    pub fn analyze_unidentified(&self, c: CustomerId, mac: MacAddr, now: Tick) -> Option<Decision> {
        let dev = self.device(c, mac)?;
        if !matches!(dev.status, DeviceStatus::Unidentified) {
            return None;
        }
        let since = dev.first_observed?;
        if dev.observed_domains.len() < self.cfg.min_observations || now < since + self.cfg.dwell {
            return None;
        }
        let matching: Vec<&Arc<MudProfile>> = self
            .types
            .values()
            .filter(|p| {
                let wld = p.domains();
                dev.observed_domains.iter().all(|d| wld.contains(d.as_str()))
            })
            .collect();
        match matching.as_slice() {
            [one] => return Some(Decision::MatchedProfile { profile: one.id() }),
            [] => {}
            _ => return None,
        }
        let hint = self.hints.get(&mac).copied().or_else(|| self.classifier.classify(dev));
        match hint? {
            ClassHint::NonIot => Some(Decision::NonIot),
            ClassHint::Iot => Some(Decision::NewIot),
        }
    }

    fn analyze_and_apply(&mut self, ctx: &mut Ctx<'_>, c: CustomerId, mac: MacAddr) -> Result<(), ControlError> {
        match self.analyze_unidentified(c, mac, ctx.now) {
            Some(Decision::MatchedProfile { profile }) => {
                let p = self.types.values().find(|p| p.id() == profile).cloned().expect("matched a known type");
                self.identify(ctx, c, mac, &p)
            }
            Some(Decision::NonIot) => self.set_non_iot(ctx, c, mac),
            Some(Decision::NewIot) => {
                let dev = self.customers.get_mut(&c).and_then(|cu| cu.devices.get_mut(&mac)).expect("exists");
                if !dev.new_iot_reported {
                    dev.new_iot_reported = true;
                    self.alert(ctx.now, c, Some(mac), None, None, AlertReason::NewDevice);
                }
                Ok(())
            }
            None => Ok(()),
        }
    }

    /// Confirms a violation against freshly resolved whitelists, then
    /// alerts and requests blocking if it stands.
    pub fn handle_violation(
        &mut self,
        ctx: &mut Ctx<'_>,
        c: CustomerId,
        mac: Option<MacAddr>,
        profile: ProfileId,
        p: &Packet,
    ) -> Result<Outcome, ControlError> {
        let key = p.key();
        if self.blocked.contains(&key) {
            return Ok(Outcome::AlreadyBlocked);
        }
        if let Some(domain) = p.dns_query() {
            // Lookups go to the ISP resolver; judge the name, never block.
            let allowed = self.store.get(profile).is_some_and(|pr| pr.domains().contains(normalize(domain).as_str()));
            if allowed {
                return Ok(Outcome::Legitimate);
            }
            self.alert(ctx.now, c, mac, Some(profile), Some(key), AlertReason::WhitelistViolation);
            return Ok(Outcome::Alerted);
        }
        if self.cfg.triggered_resolution {
            if let Some(target) = self.store.get(profile).cloned() {
                if self.last_reresolve.get(&profile) != Some(&ctx.now) {
                    self.last_reresolve.insert(profile, ctx.now);
                    self.stats.reresolutions += 1;
                    let all: Vec<Arc<MudProfile>> = self.store.iter().cloned().collect();
                    let out = self.resolver.reresolve(ctx.dns, &target, all.iter().map(|p| p.as_ref()), ctx.now);
                    self.apply_diffs(&out);
                }
                if self.pipeline.check_profile(profile, p) == Some(true) {
                    self.stats.suppressed += 1;
                    return Ok(Outcome::Suppressed);
                }
            }
        }
        self.alert(ctx.now, c, mac, Some(profile), Some(key), AlertReason::WhitelistViolation);
        self.blocked.insert(key);
        self.request(AclScope::Connection { key, bidirectional: true }, ctx.now);

        let prefix = self.cfg.aggregate_prefix.min(32);
        let net = Ipv4Net::new(p.dst_ip, prefix).expect("prefix clamped").trunc();
        if !self.aggregated.contains(&net) {
            let targets = self
                .customers
                .get_mut(&c)
                .map(|cu| {
                    let s = cu.violation_targets.entry(net).or_default();
                    s.insert(p.dst_ip);
                    s.len()
                })
                .unwrap_or(0);
            if targets >= self.cfg.aggregate_threshold {
                self.aggregated.insert(net);
                self.request(AclScope::Aggregate { net, direction: AggregateDirection::Both }, ctx.now);
            }
        }
        Ok(Outcome::Alerted)
    }

    fn request(&mut self, scope: AclScope, ts: Tick) {
        self.stats.acl_requests += 1;
        self.acl_outbox.push(AclRequest { scope, ts });
    }
}
