// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

use super::config::Config;
use super::report::{
    DeliveredRecord, DeviceRecord, FilterCountPoint, LocalRecord, ProfileRecord, RunReport, SignupRecord,
    VerdictRecord, ZoneRecord, REPORT_SCHEMA,
};
use super::scenario::{parse_trace, Event, InboundEvent, PacketEvent, Scenario, TimedEvent, UserKind};
use crate::control::{Alert, AlertReason, ControlError, ControlPlane, Ctx, DeviceStatus};
use crate::cpe::{CpeError, CpeSim, Egress, Ingress, Medium};
use crate::cpe_wlm::LocalDecision;
use crate::dns::{DnsError, DnsUniverse};
use crate::mud::{canonical_url, parse_mud, MudError, ProfileId};
use crate::net::{parse_endpoint, CustomerId, Dscp, MacAddr, NetError, Packet, Payload, Tick, PROTO_UDP};
use crate::pipeline::{FirstPacketFilter, Verdict};
use crate::svm::{
    AccountState, Attachment, Contact, HonestUser, MappingService, ReportOutcome, SilentUser, SplitSource, SvmError,
    TrackingClient, TwoFactorUser, WrongCodeUser,
};
use crate::wle::{BorderRouter, Forwarded};
use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown customer {0}")]
    UnknownCustomer(CustomerId),
    #[error("unknown account alias {0}")]
    UnknownAccount(String),
    #[error(transparent)]
    Cpe(#[from] CpeError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Dns(#[from] DnsError),
    #[error(transparent)]
    Mud(#[from] MudError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// What happened to one packet sent by a LAN device.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SendOutcome {
    pub local: Option<LocalDecision>,
    /// The packet reached its destination.
    pub delivered: bool,
    /// The answer made it back to the device.
    pub reply_delivered: bool,
    /// The VNF's judgement, if its copy was inspected.
    pub verdict: Option<VerdictRecord>,
}

const EPHEMERAL_BASE: u16 = 49152;

/// Homes, ISP edge, VNF and the outside world, advanced by events.
pub struct World {
    cfg: Config,
    seed: u64,
    now: Tick,
    base_dir: PathBuf,
    dns: DnsUniverse,
    cpes: BTreeMap<CustomerId, CpeSim>,
    mud_files: BTreeMap<String, Vec<u8>>,
    svm: MappingService,
    accounts: BTreeMap<String, String>,
    clients: BTreeMap<String, TrackingClient>,
    router: BorderRouter,
    fpf: FirstPacketFilter,
    control: Option<ControlPlane>,
    tapped: BTreeMap<CustomerId, Ipv4Addr>,
    next_port: BTreeMap<(CustomerId, MacAddr), u16>,
    declared: BTreeMap<(CustomerId, MacAddr), Option<String>>,
    verdict_log: Vec<VerdictRecord>,
    local_log: Vec<LocalRecord>,
    delivered: Vec<DeliveredRecord>,
    zone_log: Vec<ZoneRecord>,
    filter_history: Vec<FilterCountPoint>,
    signups: Vec<SignupRecord>,
    local_alerts: Vec<Alert>,
    seq: u64,
}

impl World {
    pub fn new(cfg: Config, seed: u64) -> Self {
        let seed = cfg.seed.unwrap_or(seed);
        let mut dns = DnsUniverse::new();
        let svm = MappingService::new(cfg.svm.clone(), seed ^ 0x5356_4d00);
        svm.install_zone(&mut dns);
        let mut router = BorderRouter::new(cfg.router.router_config());
        router.set_enforcing(cfg.router.enforce);
        let control = cfg.vnf_attached.then(|| ControlPlane::new(cfg.control.clone(), seed));
        let mut w = World {
            fpf: FirstPacketFilter::new(cfg.first_packet_capacity),
            cfg,
            seed,
            now: 0,
            base_dir: PathBuf::new(),
            dns,
            cpes: BTreeMap::new(),
            mud_files: BTreeMap::new(),
            svm,
            accounts: BTreeMap::new(),
            clients: BTreeMap::new(),
            router,
            control,
            tapped: BTreeMap::new(),
            next_port: BTreeMap::new(),
            declared: BTreeMap::new(),
            verdict_log: Vec::new(),
            local_log: Vec::new(),
            delivered: Vec::new(),
            zone_log: Vec::new(),
            filter_history: Vec::new(),
            signups: Vec::new(),
            local_alerts: Vec::new(),
            seq: 0,
        };
        w.note_filter_count();
        w
    }

    /// Builds a world with the scenario's fixtures loaded.
    pub fn for_scenario(cfg: Config, sc: &Scenario) -> Result<Self, HarnessError> {
        let mut w = World::new(cfg, sc.seed);
        w.base_dir = sc.base_dir.clone();
        for p in &sc.profiles {
            let path = sc.resolve(p);
            let bytes = std::fs::read(&path).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
            w.add_mud_file(&bytes)?;
        }
        for z in &sc.zones {
            let path = sc.resolve(z);
            let text = std::fs::read_to_string(&path).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
            w.load_zone(&text)?;
        }
        Ok(w)
    }

    /// Runs a whole scenario and returns its report.
    pub fn run(cfg: Config, sc: &Scenario) -> Result<RunReport, HarnessError> {
        let mut w = World::for_scenario(cfg, sc)?;
        for ev in &sc.events {
            w.apply(ev)?;
        }
        Ok(w.report())
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn control(&self) -> Option<&ControlPlane> {
        self.control.as_ref()
    }

    pub fn control_mut(&mut self) -> Option<&mut ControlPlane> {
        self.control.as_mut()
    }

    pub fn router(&self) -> &BorderRouter {
        &self.router
    }

    pub fn router_mut(&mut self) -> &mut BorderRouter {
        &mut self.router
    }

    pub fn fpf(&self) -> &FirstPacketFilter {
        &self.fpf
    }

    pub fn dns(&self) -> &DnsUniverse {
        &self.dns
    }

    pub fn svm(&self) -> &MappingService {
        &self.svm
    }

    pub fn cpe(&self, c: CustomerId) -> Option<&CpeSim> {
        self.cpes.get(&c)
    }

    pub fn cpe_mut(&mut self, c: CustomerId) -> Option<&mut CpeSim> {
        self.cpes.get_mut(&c)
    }

    pub fn account_id(&self, alias: &str) -> Option<&str> {
        self.accounts.get(alias).map(String::as_str)
    }

    pub fn verdict_log(&self) -> &[VerdictRecord] {
        &self.verdict_log
    }

    pub fn local_log(&self) -> &[LocalRecord] {
        &self.local_log
    }

    pub fn delivered(&self) -> &[DeliveredRecord] {
        &self.delivered
    }

    /// Registers a MUD file under the URL it declares.
    pub fn add_mud_file(&mut self, bytes: &[u8]) -> Result<ProfileId, HarnessError> {
        let p = parse_mud(bytes)?;
        self.mud_files.insert(canonical_url(p.mud_url()), bytes.to_vec());
        Ok(p.id())
    }

    /// Serves `bytes` at `url` regardless of what the file declares.
    pub fn serve_mud_file(&mut self, url: &str, bytes: &[u8]) {
        self.mud_files.insert(canonical_url(url), bytes.to_vec());
    }

    pub fn load_zone(&mut self, text: &str) -> Result<(), HarnessError> {
        for (name, rec) in crate::dns::parse_zone_file(text)? {
            self.set_record(&name, rec.addrs.iter().copied().collect(), rec.ttl)?;
        }
        Ok(())
    }

    pub fn set_record(&mut self, name: &str, addrs: Vec<Ipv4Addr>, ttl: Tick) -> Result<(), HarnessError> {
        self.dns.set(name, addrs.iter().copied(), ttl)?;
        self.log_zone(name);
        Ok(())
    }

    fn log_zone(&mut self, name: &str) {
        let addrs = self.dns.authoritative(name).map(|r| r.addrs.iter().copied().collect()).unwrap_or_default();
        self.seq += 1;
        self.zone_log.push(ZoneRecord { seq: self.seq, ts: self.now, name: crate::dns::normalize(name), addrs });
    }

    fn with_control<R>(&mut self, f: impl FnOnce(&mut ControlPlane, &mut Ctx<'_>) -> R) -> Option<R> {
        let control = self.control.as_mut()?;
        let mut source = SplitSource { svm: &mut self.svm, rest: &mut self.mud_files };
        let mut ctx = Ctx { cpes: &mut self.cpes, mud: &mut source, dns: &self.dns, now: self.now };
        Some(f(control, &mut ctx))
    }

    fn note_filter_count(&mut self) {
        let Some(cp) = &self.control else { return };
        let fc = cp.pipeline().filter_count();
        if self.filter_history.last().map(|p| p.filter_count) != Some(fc) {
            self.filter_history.push(FilterCountPoint { ts: self.now, filter_count: fc });
        }
    }

    /// Delivers pending gateway notifications and controller requests.
    fn pump(&mut self) -> Result<(), HarnessError> {
        let notes: Vec<_> = self.cpes.values_mut().flat_map(|c| c.drain_notifications()).collect();
        for n in notes {
            if let Some(r) = self.with_control(|cp, ctx| cp.on_notification(ctx, &n)) {
                r?;
            }
        }
        if let Some(cp) = &mut self.control {
            for req in cp.drain_acl_requests() {
                self.router.apply_acl(req);
            }
            for c in cp.customers() {
                let old = self.tapped.insert(c.id, c.ip);
                if old != Some(c.ip) {
                    if let Some(old) = old {
                        self.router.unmonitor(old);
                    }
                    self.router.monitor(c.ip);
                }
            }
        }
        for cpe in self.cpes.values_mut() {
            let c = cpe.customer();
            for a in cpe.wlm_mut().drain_alerts() {
                self.local_alerts.push(Alert {
                    ts: a.ts,
                    customer_id: c,
                    mac: Some(a.mac),
                    profile_id: None,
                    conn_key: Some(a.conn_key),
                    reason: AlertReason::LocalViolation,
                });
            }
        }
        self.note_filter_count();
        Ok(())
    }

    /// Moves the clock forward one tick at a time to `t`.
    pub fn advance_to(&mut self, t: Tick) -> Result<(), HarnessError> {
        while self.now < t {
            self.now += 1;
            let now = self.now;
            for cpe in self.cpes.values_mut() {
                cpe.advance(now);
            }
            self.poll_clients()?;
            if let Some(r) = self.with_control(|cp, ctx| cp.tick(ctx)) {
                r?;
            }
            self.router.expire(now);
            self.pump()?;
        }
        Ok(())
    }

    fn poll_clients(&mut self) -> Result<(), HarnessError> {
        let now = self.now;
        let reports: Vec<_> = self.clients.values_mut().filter_map(|c| c.poll(now)).collect();
        for r in reports {
            if self.svm.report(&r, &mut self.dns)? == ReportOutcome::DnsUpdated {
                let owner = self.svm.owner_domain(&r.account_id).expect("reporting account exists");
                self.log_zone(&owner);
                if self.svm.config().dual_records {
                    let internal = self.svm.internal_domain(&r.account_id).expect("exists");
                    self.log_zone(&internal);
                }
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, ev: &TimedEvent) -> Result<(), HarnessError> {
        if let Some(ts) = ev.ts {
            if ts < self.now {
                return Err(HarnessError::Scenario(format!("event at {ts} arrives after {}", self.now)));
            }
            self.advance_to(ts)?;
        }
        self.apply_event(&ev.event)?;
        self.pump()
    }

    fn cpe_or_err(&mut self, c: CustomerId) -> Result<&mut CpeSim, HarnessError> {
        self.cpes.get_mut(&c).ok_or(HarnessError::UnknownCustomer(c))
    }

    fn apply_event(&mut self, ev: &Event) -> Result<(), HarnessError> {
        match ev {
            Event::CustomerJoin { customer, ext_ip } => self.join_customer(CustomerId(*customer), *ext_ip),
            Event::DeviceJoin { customer, mac, mud_url, hostname } => {
                let c = CustomerId(*customer);
                let name = hostname.clone().unwrap_or_else(|| format!("host-{mac}"));
                self.cpe_or_err(c)?.connect_device(*mac, &name, Medium::Wireless, mud_url.as_deref())?;
                self.declared.entry((c, *mac)).or_insert_with(|| mud_url.clone());
                Ok(())
            }
            Event::DeviceLeave { customer, mac } => Ok(self.cpe_or_err(CustomerId(*customer))?.disconnect(*mac)?),
            Event::Packet(p) => self.packet_event(p).map(|_| ()),
            Event::Inbound(i) => self.inbound_event(i),
            Event::DnsQuery { customer, mac, domain } => {
                self.dns_query(CustomerId(*customer), *mac, domain).map(|_| ())
            }
            Event::DnsZoneSet { name, addrs, ttl } => self.set_record(name, addrs.clone(), *ttl),
            Event::Poison { name, addrs } => {
                self.dns.poison(name, addrs.iter().copied());
                Ok(())
            }
            Event::IpChange { customer, ip } => {
                let cpe = self.cpe_or_err(CustomerId(*customer))?;
                let old = cpe.external_ip();
                cpe.set_external_ip(*ip);
                // Phones at home now leave from the new address.
                for c in self.clients.values_mut() {
                    if c.current.ext_ip == old {
                        c.move_to(Attachment { ext_ip: *ip, int_ip: c.current.int_ip });
                    }
                }
                self.poll_clients()
            }
            Event::PortForward { customer, ext_port, proto, mac, int_port } => {
                Ok(self.cpe_or_err(CustomerId(*customer))?.add_port_forward(*ext_port, proto.0, *mac, *int_port)?)
            }
            Event::IadSignup { customer, mac, account, contact, user, via } => {
                self.signup_flow(CustomerId(*customer), *mac, account, contact.clone(), *user, *via).map(|_| ())
            }
            Event::IadMove { account, ext_ip, int_ip } => {
                let Some(client) = self.clients.get_mut(account) else {
                    if self.accounts.contains_key(account) {
                        // Sign-up never completed, so there is no app reporting.
                        tracing::debug!(account = %account, "move ignored: no active tracking client");
                        return Ok(());
                    }
                    return Err(HarnessError::UnknownAccount(account.clone()));
                };
                client.move_to(Attachment { ext_ip: *ext_ip, int_ip: *int_ip });
                self.poll_clients()
            }
            Event::Tick { n } => self.advance_to(self.now + n),
            Event::ClassifyOracleHint { mac, verdict } => {
                if let Some(cp) = &mut self.control {
                    cp.hint(*mac, *verdict);
                }
                Ok(())
            }
            Event::Trace { file } => {
                let path = if file.is_absolute() { file.clone() } else { self.base_dir.join(file) };
                let text =
                    std::fs::read_to_string(&path).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
                for ev in parse_trace(&text).map_err(HarnessError::Scenario)? {
                    self.apply(&ev)?;
                }
                Ok(())
            }
        }
    }

    pub fn join_customer(&mut self, c: CustomerId, ext_ip: Ipv4Addr) -> Result<(), HarnessError> {
        if self.cpes.contains_key(&c) {
            return Ok(());
        }
        let mut cpe = CpeSim::new(c, ext_ip, self.seed ^ ((c.0 as u64) << 32))
            .with_mark_latency(self.cfg.cpe.mark_latency);
        cpe.wlm_mut().set_mode(self.cfg.cpe.wlm_mode);
        cpe.advance(self.now);
        let own = cpe.own_mac();
        self.cpes.insert(c, cpe);
        if self.control.is_some() {
            self.with_control(|cp, ctx| cp.on_new_customer(ctx, c)).expect("attached")?;
            if self.cfg.control.cpe_mud_url.is_some() {
                self.declared.insert((c, own), self.cfg.control.cpe_mud_url.clone());
                self.with_control(|cp, ctx| cp.register_gateway(ctx, c, own)).expect("attached")?;
            }
        }
        self.pump()
    }

    fn ephemeral(&mut self, c: CustomerId, mac: MacAddr) -> u16 {
        let p = self.next_port.entry((c, mac)).or_insert(EPHEMERAL_BASE);
        let out = *p;
        *p = if *p == u16::MAX { EPHEMERAL_BASE } else { *p + 1 };
        out
    }

    fn packet_event(&mut self, ev: &PacketEvent) -> Result<SendOutcome, HarnessError> {
        let c = CustomerId(ev.customer);
        let (dst_ip, dst_port) = match (&ev.dst, ev.dst_mac) {
            (Some(d), _) => parse_endpoint(d)?,
            (None, Some(m)) => {
                let host = self.cpe_or_err(c)?.host(m).ok_or(CpeError::UnknownMac(m))?;
                let port = ev.dst_port.ok_or_else(|| HarnessError::Scenario("dst_mac needs dst_port".into()))?;
                (host.ip, port)
            }
            (None, None) => return Err(HarnessError::Scenario("packet needs dst or dst_mac".into())),
        };
        let sport = match ev.src_port {
            Some(p) => p,
            None => self.ephemeral(c, ev.mac),
        };
        let dscp = Dscp::new(ev.dscp).map_err(|_| HarnessError::Scenario(format!("bad dscp {}", ev.dscp)))?;
        let mut last = SendOutcome::default();
        for _ in 0..ev.count {
            last = self.send(c, ev.mac, (dst_ip, dst_port), ev.proto.0, sport, dscp, Payload::Data, ev.reply)?;
        }
        Ok(last)
    }

    /// One packet from a LAN device, with optional answer.
    #[allow(clippy::too_many_arguments)]
    pub fn send(
        &mut self,
        c: CustomerId,
        mac: MacAddr,
        dst: (Ipv4Addr, u16),
        proto: u8,
        sport: u16,
        dscp: Dscp,
        payload: Payload,
        reply: bool,
    ) -> Result<SendOutcome, HarnessError> {
        let host = self.cpe_or_err(c)?.host(mac).ok_or(CpeError::UnknownMac(mac))?;
        let p = Packet::data((host.ip, sport), dst, proto)
            .with_mac(mac)
            .with_dscp(dscp)
            .with_payload(payload)
            .with_ts(self.now);
        let out = self.send_lan(c, p, reply)?;
        self.pump()?;
        Ok(out)
    }

    /// Convenience: one plain data packet from a fresh source port.
    pub fn send_simple(&mut self, c: CustomerId, mac: MacAddr, dst: &str, proto: u8) -> Result<SendOutcome, HarnessError> {
        let dst = parse_endpoint(dst)?;
        let sport = self.ephemeral(c, mac);
        self.send(c, mac, dst, proto, sport, Dscp::ZERO, Payload::Data, true)
    }

    pub fn dns_query(&mut self, c: CustomerId, mac: MacAddr, domain: &str) -> Result<SendOutcome, HarnessError> {
        let sport = self.ephemeral(c, mac);
        let resolver = self.cfg.isp_resolver;
        let payload = Payload::DnsQuery { domain: crate::dns::normalize(domain) };
        self.send(c, mac, (resolver, 53), PROTO_UDP, sport, Dscp::ZERO, payload, true)
    }

    fn send_lan(&mut self, c: CustomerId, p: Packet, reply: bool) -> Result<SendOutcome, HarnessError> {
        let mac = p.src_mac;
        let egress = {
            let cpe = self.cpes.get_mut(&c).ok_or(HarnessError::UnknownCustomer(c))?;
            cpe.egress(&p, &self.dns)?
        };
        let mut out = SendOutcome::default();
        match egress {
            Egress::Lan { packet, to, local } => {
                out.local = local;
                if let (Some(d), Some(m)) = (local, mac) {
                    self.local_log.push(LocalRecord { ts: self.now, customer: c, mac: m, conn_key: packet.key(), decision: d });
                }
                self.delivered.push(DeliveredRecord { at: format!("lan:{c}:{to}"), packet: packet.clone() });
                out.delivered = true;
                if reply {
                    let mut back = answer(&packet, &self.dns).with_mac(to);
                    back.src_mac = Some(to);
                    out.reply_delivered = self.send_lan(c, back, false)?.delivered;
                }
            }
            Egress::Blocked { local } => {
                out.local = Some(local);
                if let Some(m) = mac {
                    self.local_log.push(LocalRecord { ts: self.now, customer: c, mac: m, conn_key: p.key(), decision: local });
                }
            }
            Egress::Dropped => {}
            Egress::Wan { packet, trace } => {
                out.local = trace.local;
                if let (Some(d), Some(m)) = (trace.local, mac) {
                    self.local_log.push(LocalRecord { ts: self.now, customer: c, mac: m, conn_key: packet.key(), decision: d });
                }
                let (fwd, copy) = self.router.forward(&packet, true);
                if let Some(copy) = copy {
                    out.verdict = self.inspect(c, mac, copy)?;
                }
                if fwd == Forwarded::Delivered {
                    out.delivered = true;
                    let seen = self.router.egress_rewrite(packet.clone());
                    self.delivered.push(DeliveredRecord { at: "internet".into(), packet: seen });
                    if reply {
                        let back = answer(&packet, &self.dns);
                        out.reply_delivered = self.receive(c, back, false)?;
                    }
                }
            }
        }
        Ok(out)
    }

    /// A packet from the Internet towards customer `c`. Returns whether a
    /// LAN host got it.
    fn receive(&mut self, c: CustomerId, p: Packet, reply: bool) -> Result<bool, HarnessError> {
        let (fwd, _) = self.router.forward(&p, false);
        if fwd != Forwarded::Delivered {
            return Ok(false);
        }
        let ingress = {
            let cpe = self.cpes.get_mut(&c).ok_or(HarnessError::UnknownCustomer(c))?;
            cpe.ingress(&p, &self.dns)
        };
        match ingress {
            Ingress::Delivered { packet, to, local } => {
                if let Some(d) = local {
                    self.local_log.push(LocalRecord { ts: self.now, customer: c, mac: to, conn_key: p.key().reverse(), decision: d });
                }
                self.delivered.push(DeliveredRecord { at: format!("lan:{c}:{to}"), packet: packet.clone() });
                if reply {
                    let back = answer(&packet, &self.dns).with_mac(to);
                    self.send_lan(c, back, false)?;
                }
                Ok(true)
            }
            Ingress::Blocked => {
                let to = self.cpes[&c]
                    .port_forward_target(p.dst_port, p.protocol)
                    .unwrap_or(MacAddr([0; 6]));
                self.local_log.push(LocalRecord {
                    ts: self.now,
                    customer: c,
                    mac: to,
                    conn_key: p.key().reverse(),
                    decision: LocalDecision::Block,
                });
                Ok(false)
            }
            Ingress::Dropped => Ok(false),
        }
    }

    fn inbound_event(&mut self, ev: &InboundEvent) -> Result<(), HarnessError> {
        let c = CustomerId(ev.customer);
        let (ip, port) = parse_endpoint(&ev.src)?;
        let ext = self.cpe_or_err(c)?.external_ip();
        for _ in 0..ev.count {
            let p = Packet::data((ip, port), (ext, ev.ext_port), ev.proto.0).with_ts(self.now);
            self.receive(c, p, ev.reply)?;
            self.pump()?;
        }
        Ok(())
    }

    /// Hands a tap copy to the VNF.
    fn inspect(&mut self, c: CustomerId, mac: Option<MacAddr>, copy: Packet) -> Result<Option<VerdictRecord>, HarnessError> {
        let Some(cp) = &self.control else { return Ok(None) };
        if !self.fpf.admit(&copy.key()) {
            return Ok(None);
        }
        let verdict = cp.pipeline().process(&copy);
        let outcome = self.with_control(|cp, ctx| cp.on_verdict(ctx, &verdict)).expect("attached")?;
        let profile = match &verdict {
            Verdict::Legitimate { profile, .. } | Verdict::Violation { profile, .. } => Some(*profile),
            _ => None,
        };
        self.seq += 1;
        let rec = VerdictRecord {
            seq: self.seq,
            ts: self.now,
            customer: c,
            mac,
            conn_key: copy.key(),
            dscp: copy.dscp.value(),
            verdict: verdict.kind(),
            outcome,
            profile,
            dns_query: copy.dns_query().map(str::to_string),
        };
        self.verdict_log.push(rec.clone());
        if let Some(cp) = &mut self.control {
            for req in cp.drain_acl_requests() {
                self.router.apply_acl(req);
            }
        }
        Ok(Some(rec))
    }

    /// The owner's phone joins the home and signs up. Returns whether the
    /// VNF ended up with the account's owner domain.
    pub fn signup_flow(
        &mut self,
        c: CustomerId,
        mac: MacAddr,
        alias: &str,
        contact: Option<Contact>,
        user: UserKind,
        via: Option<Ipv4Addr>,
    ) -> Result<bool, HarnessError> {
        let acct = match self.accounts.get(alias) {
            Some(id) => id.clone(),
            None => {
                let contact = contact.unwrap_or_else(|| Contact::email(&format!("{alias}@example.net")));
                let id = self.svm.create_account(contact)?;
                self.accounts.insert(alias.to_string(), id.clone());
                id
            }
        };
        let home = self.cpe_or_err(c)?.external_ip();
        let origin = via.unwrap_or(home);
        self.svm.begin_signup(&acct, origin)?;
        let url = self.svm.mud_url(&acct);
        // (i) the app announces the account's MUD URL on the home LAN;
        // (ii) the VNF fetches it, which (iii) starts the confirmation.
        self.cpe_or_err(c)?.connect_device(mac, "iad", Medium::Wireless, Some(&url))?;
        self.declared.insert((c, mac), Some(url));
        self.pump()?;
        let mut who: Box<dyn TwoFactorUser> = match user {
            UserKind::Honest => Box::new(HonestUser),
            UserKind::WrongCode => Box::new(WrongCodeUser),
            UserKind::Silent => Box::new(SilentUser),
        };
        let confirmed = self.svm.two_factor(&acct, who.as_mut(), self.now);
        if confirmed.is_ok() {
            // (iv) the service now answers; (v) the VNF takes the domain.
            if let Some(r) = self.with_control(|cp, ctx| cp.retry_fetch_now(ctx, c, mac)) {
                r?;
            }
            self.pump()?;
        }
        let owner = self.svm.owner_domain(&acct);
        let completed = self.control.as_ref().and_then(|cp| cp.customer(c)).and_then(|s| s.owner_domain.clone())
            == owner
            && owner.is_some();
        let reason = if completed {
            None
        } else if origin != home {
            Some(SvmError::NotOnLan.to_string())
        } else if let Err(e) = &confirmed {
            Some(e.to_string())
        } else {
            Some("fetch did not complete".to_string())
        };
        self.signups.push(SignupRecord { ts: self.now, account: alias.to_string(), customer: c, completed, reason });
        if self.svm.account(&acct).map(|a| &a.state) == Some(&AccountState::Active) && !self.clients.contains_key(alias) {
            let int_ip = self.cpes[&c].host(mac).map(|h| h.ip).unwrap_or(Ipv4Addr::UNSPECIFIED);
            let sub = owner.expect("account exists");
            let interval = self.svm.config().report_interval;
            let client = TrackingClient::new(&acct, &sub, 0, Attachment { ext_ip: origin, int_ip }, interval);
            self.clients.insert(alias.to_string(), client);
            self.poll_clients()?;
            self.pump()?;
        }
        Ok(completed)
    }

    pub fn report(&self) -> RunReport {
        let mut counters = BTreeMap::new();
        let (delivered, blocked, mirrored) = self.router.stats();
        counters.insert("router.delivered".to_string(), delivered);
        counters.insert("router.blocked".to_string(), blocked);
        counters.insert("router.mirrored".to_string(), mirrored);
        counters.insert("router.acls".to_string(), self.router.acl_count() as u64);
        counters.insert("fpf.admitted".to_string(), self.fpf.admitted());
        counters.insert("fpf.suppressed".to_string(), self.fpf.suppressed());
        counters.insert("fpf.evictions".to_string(), self.fpf.evictions());
        counters.insert("delivered.total".to_string(), self.delivered.len() as u64);
        counters.insert("verdicts.total".to_string(), self.verdict_log.len() as u64);
        let permits = self.local_log.iter().filter(|r| r.decision == LocalDecision::Permit).count();
        let blocks = self.local_log.iter().filter(|r| r.decision == LocalDecision::Block).count();
        counters.insert("local.permit".to_string(), permits as u64);
        counters.insert("local.block".to_string(), blocks as u64);

        let mut alerts: Vec<Alert> = Vec::new();
        let mut profiles = Vec::new();
        let mut devices = Vec::new();
        let mut owner_domains = BTreeMap::new();
        let mut filter_count = None;
        if let Some(cp) = &self.control {
            for (k, v) in cp.pipeline().counters() {
                counters.insert(format!("pipeline.{k}"), v);
            }
            counters.insert("pipeline.filter_count".into(), cp.pipeline().filter_count() as u64);
            counters.insert("pipeline.processed".into(), cp.pipeline().processed());
            if let Ok(serde_json::Value::Object(m)) = serde_json::to_value(cp.stats()) {
                for (k, v) in m {
                    counters.insert(format!("control.{k}"), v.as_u64().unwrap_or(0));
                }
            }
            filter_count = Some(cp.pipeline().filter_count());
            alerts.extend(cp.alerts().iter().cloned());
            let mut ids: std::collections::BTreeSet<ProfileId> = cp.profiles().iter().map(|p| p.id()).collect();
            ids.extend(self.verdict_log.iter().filter_map(|v| v.profile));
            for id in ids {
                let rec = match cp.profiles().get(id) {
                    Some(p) => ProfileRecord { id, mud_url: p.mud_url().to_string(), entries: p.entries().iter().cloned().collect() },
                    None => ProfileRecord { id, mud_url: String::new(), entries: Vec::new() },
                };
                profiles.push(rec);
            }
            for c in cp.customers() {
                if let Some(d) = &c.owner_domain {
                    owner_domains.insert(c.id.to_string(), d.clone());
                }
            }
        }
        alerts.extend(self.local_alerts.iter().cloned());
        alerts.sort_by_key(|a| a.ts);
        counters.insert("alerts.total".into(), alerts.len() as u64);
        counters.insert(
            "alerts.whitelist_violation".into(),
            alerts.iter().filter(|a| a.reason == AlertReason::WhitelistViolation).count() as u64,
        );

        for ((c, mac), url) in &self.declared {
            let state = self.control.as_ref().and_then(|cp| cp.device(*c, *mac));
            let (status, profile) = match state.map(|d| &d.status) {
                Some(DeviceStatus::Identified { profile }) => ("identified".to_string(), Some(*profile)),
                Some(DeviceStatus::Unidentified) => ("unidentified".to_string(), None),
                Some(DeviceStatus::NonIot) => ("non_iot".to_string(), None),
                None => ("unknown".to_string(), None),
            };
            devices.push(DeviceRecord {
                customer: *c,
                mac: *mac,
                declared_mud_url: url.clone(),
                status,
                profile,
                mark: state.and_then(|d| d.mark),
            });
        }

        RunReport {
            schema: REPORT_SCHEMA,
            seed: self.seed,
            vnf_attached: self.control.is_some(),
            final_ts: self.now,
            filter_count,
            filter_count_history: self.filter_history.clone(),
            alerts,
            acls: self.router.export(),
            counters,
            verdict_log: self.verdict_log.clone(),
            local_log: self.local_log.clone(),
            delivered: self.delivered.clone(),
            zone_log: self.zone_log.clone(),
            profiles,
            devices,
            signups: self.signups.clone(),
            owner_domains,
        }
    }
}

/// The remote end's answer to `p`.
fn answer(p: &Packet, dns: &DnsUniverse) -> Packet {
    let payload = match &p.payload {
        Payload::DnsQuery { domain } => Payload::DnsResponse {
            domain: domain.clone(),
            addrs: dns.authoritative(domain).map(|r| r.addrs.clone()).unwrap_or_default(),
        },
        _ => Payload::Data,
    };
    Packet::data((p.dst_ip, p.dst_port), (p.src_ip, p.src_port), p.protocol)
        .with_payload(payload)
        .with_ts(p.ts)
}

impl World {
    /// Directory relative trace paths resolve against.
    pub fn set_base_dir(&mut self, dir: &Path) {
        self.base_dir = dir.to_path_buf();
    }
}
