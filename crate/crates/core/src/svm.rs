// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Secure vector mapping: a per-account DNS name that always points at the
//! owner's current home address, so peer-to-peer rules can name it.
//!
//! The owner's phone signs up from inside the home. The VNF then fetches
//! the account's MUD file from the service, which only answers if the
//! request comes from the same home and the owner confirms a one-time
//! code. A tracking client on the phone keeps the records current.

use crate::control::{FetchError, MudSource};
use crate::dns::{normalize, DnsError, DnsUniverse, DnsZone};
use crate::mud::{AclEntry, Direction, Endpoint, MudProfile};
use crate::net::{Tick, PROTO_TCP, PROTO_UDP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use thiserror::Error;

pub const SVM_AUTHORITY: &str = "svm";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SvmError {
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error("an account needs an email address or a phone number")]
    EmptyContact,
    #[error("request does not come from the owner's home network")]
    NotOnLan,
    #[error("no confirmation is outstanding")]
    NoChallenge,
    #[error("confirmation failed")]
    TwoFactorFailed,
    #[error("confirmation timed out")]
    TwoFactorTimeout,
    #[error("account has not completed sign-up")]
    InactiveAccount,
    #[error("report names {got}, account owns {expected}")]
    SubdomainMismatch { expected: String, got: String },
    #[error(transparent)]
    Dns(#[from] DnsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub parent: String,
    pub max_attempts: u32,
    pub challenge_timeout: Tick,
    pub report_interval: Tick,
    pub record_ttl: Tick,
    /// Also publish `<sub>.int.<parent>` with the owner's LAN address.
    pub dual_records: bool,
    /// Port the owner's app uses for peer traffic.
    pub p2p_port: u16,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            parent: "svm.example".into(),
            max_attempts: 3,
            challenge_timeout: 120,
            report_interval: 15,
            record_ttl: 30,
            dual_records: true,
            p2p_port: 5000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub email: Option<String>,
    pub phone: Option<String>,
}

impl Contact {
    pub fn email(addr: &str) -> Self {
        Contact { email: Some(addr.into()), phone: None }
    }

    fn is_empty(&self) -> bool {
        self.email.as_deref().unwrap_or("").is_empty() && self.phone.as_deref().unwrap_or("").is_empty()
    }
}

/// One-time code sent to the account owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub account_id: String,
    pub code: String,
    pub attempt: u32,
}

/// The human on the other end of the confirmation step. `None` means no
/// answer arrived.
pub trait TwoFactorUser {
    fn respond(&mut self, challenge: &Challenge) -> Option<String>;
}

/// Always types the code it was sent.
#[derive(Debug, Default, Clone, Copy)]
pub struct HonestUser;

impl TwoFactorUser for HonestUser {
    fn respond(&mut self, c: &Challenge) -> Option<String> {
        Some(c.code.clone())
    }
}

/// Never knows the code.
#[derive(Debug, Default, Clone, Copy)]
pub struct WrongCodeUser;

impl TwoFactorUser for WrongCodeUser {
    fn respond(&mut self, _c: &Challenge) -> Option<String> {
        Some("not-the-code".into())
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SilentUser;

impl TwoFactorUser for SilentUser {
    fn respond(&mut self, _c: &Challenge) -> Option<String> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum AccountState {
    Created,
    PendingTwoFactor { issued_at: Tick, attempts: u32, locked: bool },
    Active,
}

/// Wire form of a tracking report. `client` tells apart several phones
/// sharing one account.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub account_id: String,
    pub subdomain: String,
    pub ext_ip: Ipv4Addr,
    pub int_ip: Ipv4Addr,
    pub ts: Tick,
    #[serde(default)]
    pub client: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportOutcome {
    DnsUpdated,
    NoChange,
}

#[derive(Debug, Clone, Serialize)]
pub struct SvmAccount {
    pub account_id: String,
    pub unique_subdomain: String,
    pub contact: Contact,
    pub state: AccountState,
    pub last_report: Option<ReportMetadata>,
    /// Public address the owner's app started sign-up from.
    pub signup_origin: Option<Ipv4Addr>,
    #[serde(skip)]
    code: Option<String>,
    #[serde(skip)]
    clients: BTreeMap<u32, (Ipv4Addr, Ipv4Addr)>,
}

const BASE32: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz234567";

#[derive(Debug)]
pub struct MappingService {
    cfg: SvmConfig,
    rng: ChaCha8Rng,
    accounts: BTreeMap<String, SvmAccount>,
    fetches: u64,
}

impl MappingService {
    pub fn new(cfg: SvmConfig, seed: u64) -> Self {
        MappingService { cfg, rng: ChaCha8Rng::seed_from_u64(seed), accounts: BTreeMap::new(), fetches: 0 }
    }

    pub fn config(&self) -> &SvmConfig {
        &self.cfg
    }

    /// Adds the service's zone to `dns`. Its answers ignore a random
    /// leading label, so lookups can bypass caches.
    pub fn install_zone(&self, dns: &mut DnsUniverse) {
        dns.add_zone(DnsZone::new(&self.cfg.parent, SVM_AUTHORITY).with_label_stripping());
    }

    fn label(&mut self, len: usize) -> String {
        (0..len).map(|_| char::from(BASE32[self.rng.gen_range(0..32)])).collect()
    }

    pub fn create_account(&mut self, contact: Contact) -> Result<String, SvmError> {
        if contact.is_empty() {
            return Err(SvmError::EmptyContact);
        }
        loop {
            let id = self.label(10);
            let sub = format!("{}.{}", self.label(8), normalize(&self.cfg.parent));
            if self.accounts.contains_key(&id) || self.accounts.values().any(|a| a.unique_subdomain == sub) {
                continue;
            }
            self.accounts.insert(
                id.clone(),
                SvmAccount {
                    account_id: id.clone(),
                    unique_subdomain: sub,
                    contact,
                    state: AccountState::Created,
                    last_report: None,
                    signup_origin: None,
                    code: None,
                    clients: BTreeMap::new(),
                },
            );
            return Ok(id);
        }
    }

    pub fn account(&self, id: &str) -> Option<&SvmAccount> {
        self.accounts.get(id)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &SvmAccount> {
        self.accounts.values()
    }

    pub fn fetches(&self) -> u64 {
        self.fetches
    }

    pub fn mud_url(&self, id: &str) -> String {
        format!("https://{}/mud/{id}", self.cfg.parent)
    }

    pub fn owner_domain(&self, id: &str) -> Option<String> {
        self.accounts.get(id).map(|a| a.unique_subdomain.clone())
    }

    pub fn internal_domain(&self, id: &str) -> Option<String> {
        let a = self.accounts.get(id)?;
        let label = a.unique_subdomain.split('.').next()?;
        Some(format!("{label}.int.{}", normalize(&self.cfg.parent)))
    }

    fn get_mut(&mut self, id: &str) -> Result<&mut SvmAccount, SvmError> {
        self.accounts.get_mut(id).ok_or_else(|| SvmError::UnknownAccount(id.into()))
    }

    /// The owner's app opens sign-up; `origin` is the public address the
    /// service sees it coming from.
    pub fn begin_signup(&mut self, id: &str, origin: Ipv4Addr) -> Result<(), SvmError> {
        let acct = self.get_mut(id)?;
        acct.signup_origin = Some(origin);
        Ok(())
    }

    /// Clears a locked or stale confirmation so sign-up can start over.
    pub fn reset(&mut self, id: &str) -> Result<(), SvmError> {
        let acct = self.get_mut(id)?;
        if acct.state != AccountState::Active {
            acct.state = AccountState::Created;
            acct.code = None;
            acct.signup_origin = None;
        }
        Ok(())
    }

    /// Runs the confirmation dialogue with the owner.
    pub fn two_factor(&mut self, id: &str, user: &mut dyn TwoFactorUser, now: Tick) -> Result<(), SvmError> {
        let max = self.cfg.max_attempts;
        let timeout = self.cfg.challenge_timeout;
        let acct = self.get_mut(id)?;
        let AccountState::PendingTwoFactor { issued_at, mut attempts, locked } = acct.state else {
            return Err(SvmError::NoChallenge);
        };
        if locked {
            return Err(SvmError::TwoFactorFailed);
        }
        if now > issued_at + timeout {
            acct.state = AccountState::Created;
            acct.code = None;
            return Err(SvmError::TwoFactorTimeout);
        }
        let code = acct.code.clone().expect("pending accounts hold a code");
        while attempts < max {
            attempts += 1;
            let challenge = Challenge { account_id: id.to_string(), code: code.clone(), attempt: attempts };
            match user.respond(&challenge) {
                Some(answer) if answer == code => {
                    acct.state = AccountState::Active;
                    acct.code = None;
                    return Ok(());
                }
                Some(_) => {
                    acct.state = AccountState::PendingTwoFactor { issued_at, attempts, locked: attempts >= max };
                }
                None => {
                    acct.state = AccountState::Created;
                    acct.code = None;
                    return Err(SvmError::TwoFactorTimeout);
                }
            }
        }
        Err(SvmError::TwoFactorFailed)
    }

    /// The MUD file of an active account: the owner's app may reach peer
    /// devices on its port via the public name (and the LAN name when dual
    /// records are on).
    pub fn mud_file(&self, id: &str) -> Option<Vec<u8>> {
        let owner = self.owner_domain(id)?;
        let port = self.cfg.p2p_port;
        let entry = |d: &str, proto| AclEntry {
            direction: Direction::DeviceToCloud,
            endpoint: Some(Endpoint::Domain(d.to_string())),
            protocol: Some(proto),
            dst_port: Some(port),
        };
        let mut entries = vec![entry(&owner, PROTO_UDP), entry(&owner, PROTO_TCP)];
        if self.cfg.dual_records {
            entries.push(entry(&self.internal_domain(id)?, PROTO_UDP));
        }
        MudProfile::new(&self.mud_url(id), entries).ok().map(|p| p.to_bytes())
    }

    pub fn account_from_url(&self, url: &str) -> Option<String> {
        let u = url::Url::parse(url).ok()?;
        if normalize(u.host_str()?) != normalize(&self.cfg.parent) {
            return None;
        }
        let mut segs = u.path_segments()?;
        match (segs.next(), segs.next(), segs.next()) {
            (Some("mud"), Some(id), None) => Some(id.to_string()),
            _ => None,
        }
    }

    /// Applies a tracking report. The owner record holds the public
    /// addresses of every phone on the account.
    pub fn report(&mut self, r: &ReportMetadata, dns: &mut DnsUniverse) -> Result<ReportOutcome, SvmError> {
        let ttl = self.cfg.record_ttl;
        let dual = self.cfg.dual_records;
        let internal = self.internal_domain(&r.account_id);
        let acct = self.get_mut(&r.account_id)?;
        if acct.state != AccountState::Active {
            return Err(SvmError::InactiveAccount);
        }
        if normalize(&r.subdomain) != acct.unique_subdomain {
            return Err(SvmError::SubdomainMismatch { expected: acct.unique_subdomain.clone(), got: r.subdomain.clone() });
        }
        let prev = acct.clients.insert(r.client, (r.ext_ip, r.int_ip));
        acct.last_report = Some(r.clone());
        if prev == Some((r.ext_ip, r.int_ip)) {
            return Ok(ReportOutcome::NoChange);
        }
        let ext: BTreeSet<Ipv4Addr> = acct.clients.values().map(|(e, _)| *e).collect();
        let int: BTreeSet<Ipv4Addr> = acct.clients.values().map(|(_, i)| *i).collect();
        let owner = acct.unique_subdomain.clone();
        dns.update_record(SVM_AUTHORITY, &owner, ext, ttl)?;
        if dual {
            dns.update_record(SVM_AUTHORITY, &internal.expect("account exists"), int, ttl)?;
        }
        Ok(ReportOutcome::DnsUpdated)
    }
}

impl MudSource for MappingService {
    fn fetch(&mut self, url: &str, requester: Ipv4Addr, now: Tick) -> Result<Vec<u8>, FetchError> {
        self.fetches += 1;
        let id = self.account_from_url(url).ok_or(FetchError::NotFound)?;
        let timeout = self.cfg.challenge_timeout;
        let code = format!("{:06}", self.rng.gen_range(0..1_000_000u32));
        let acct = self.accounts.get_mut(&id).ok_or(FetchError::NotFound)?;
        if acct.signup_origin != Some(requester) {
            return Err(FetchError::Rejected(SvmError::NotOnLan.to_string()));
        }
        match acct.state {
            AccountState::Created => {
                // Step (iii): ask the owner to confirm.
                acct.state = AccountState::PendingTwoFactor { issued_at: now, attempts: 0, locked: false };
                acct.code = Some(code);
                Err(FetchError::Pending)
            }
            AccountState::PendingTwoFactor { locked: true, .. } => {
                Err(FetchError::Rejected(SvmError::TwoFactorFailed.to_string()))
            }
            AccountState::PendingTwoFactor { issued_at, .. } if now > issued_at + timeout => {
                acct.state = AccountState::Created;
                acct.code = None;
                Err(FetchError::Rejected(SvmError::TwoFactorTimeout.to_string()))
            }
            AccountState::PendingTwoFactor { .. } => Err(FetchError::Pending),
            AccountState::Active => self.mud_file(&id).ok_or(FetchError::NotFound),
        }
    }
}

/// Routes SVM URLs to the mapping service and everything else to a
/// second source.
pub struct SplitSource<'a> {
    pub svm: &'a mut MappingService,
    pub rest: &'a mut dyn MudSource,
}

impl MudSource for SplitSource<'_> {
    fn fetch(&mut self, url: &str, requester: Ipv4Addr, now: Tick) -> Result<Vec<u8>, FetchError> {
        if self.svm.account_from_url(url).is_some() {
            self.svm.fetch(url, requester, now)
        } else {
            self.rest.fetch(url, requester, now)
        }
    }
}

/// Where a phone currently sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub ext_ip: Ipv4Addr,
    pub int_ip: Ipv4Addr,
}

/// The phone-side reporter: sends on every change of public address and
/// at least once per interval.
#[derive(Debug, Clone)]
pub struct TrackingClient {
    pub account_id: String,
    pub subdomain: String,
    pub client: u32,
    pub current: Attachment,
    pub report_interval: Tick,
    last_sent: Option<(Tick, Attachment)>,
}

impl TrackingClient {
    pub fn new(account_id: &str, subdomain: &str, client: u32, at: Attachment, report_interval: Tick) -> Self {
        TrackingClient {
            account_id: account_id.into(),
            subdomain: subdomain.into(),
            client,
            current: at,
            report_interval,
            last_sent: None,
        }
    }

    pub fn move_to(&mut self, at: Attachment) {
        self.current = at;
    }

    /// The report to send now, if one is due.
    pub fn poll(&mut self, now: Tick) -> Option<ReportMetadata> {
        let due = match self.last_sent {
            None => true,
            Some((t, at)) => now >= t + self.report_interval || at != self.current,
        };
        if !due {
            return None;
        }
        self.last_sent = Some((now, self.current));
        Some(ReportMetadata {
            account_id: self.account_id.clone(),
            subdomain: self.subdomain.clone(),
            ext_ip: self.current.ext_ip,
            int_ip: self.current.int_ip,
            ts: now,
            client: self.client,
        })
    }
}
