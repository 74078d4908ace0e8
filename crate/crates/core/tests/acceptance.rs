// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Thresholds are fixed below.

use mudguard::control::{ClassHint, DeviceStatus, Outcome, P2pMode};
use mudguard::cpe_wlm::{LocalDecision, LocalMode};
use mudguard::harness::{
    bench, oracle_check, BenchConfig, Config, Event, InboundEvent, RunReport, Scenario, TimedEvent, UserKind, World,
};
use mudguard::mud::{AclEntry, Direction, Endpoint, MudProfile, ProfileId, ResolvedWhitelist, WhitelistRow};
use mudguard::net::{ConnKey, CustomerId, Dscp, MacAddr, Packet, Payload, PROTO_TCP, PROTO_UDP};
use mudguard::pipeline::{snapshot_distance, DeviceTarget, Pipeline, PipelineConfig, TableId, Verdict};
use mudguard::wle::AclScope;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

// Pinned thresholds.
const C1_SEQUENCES: usize = 200;
const C1_EVENTS_PER_SEQUENCE: usize = 120;
const C1_MAX_CUSTOMERS: usize = 20;
const C1_MAX_DEVICES: usize = 10;
const C1_MAX_PROFILES: usize = 15;
const C1_MAX_ENTRIES: usize = 20;
const C1_BUDGET: Duration = Duration::from_secs(10);
const C3_PACKETS: usize = 10_000;
const C3_MIN_DEVICES: usize = 20;
const C3_PROFILES: usize = 5;
const C3_BUDGET: Duration = Duration::from_secs(5);
const C4_CONNECTIONS: u16 = 1_000;
const C4_PACKETS_PER_CONNECTION: usize = 50;
const C8_MOVES: usize = 5;
const C12_MIN_PPS: f64 = 100_000.0;
const C12_BENCH_PACKETS: usize = 500_000;

type Check = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(&root().join("scenarios").join(name)).expect("shipped scenario parses")
}

fn hybrid_config() -> Config {
    let mut cfg = Config::default();
    cfg.control.p2p_mode = P2pMode::Hybrid;
    cfg
}

/// Every shipped scenario with the config it is meant for.
fn shipped() -> Vec<(&'static str, Config)> {
    vec![
        ("empty.json", Config::default()),
        ("poc_two_homes.json", Config::default()),
        ("mirai_probe.json", Config::default()),
        ("ip_rotation.json", Config::default()),
        ("svm_p2p.json", Config::default()),
        ("hybrid_p2p.json", hybrid_config()),
        ("bulk_trace.json", Config::default()),
    ]
}

fn run(name: &str, cfg: Config) -> RunReport {
    World::run(cfg, &scenario(name)).expect("scenario runs")
}

fn at(w: &mut World, event: Event) {
    w.apply(&TimedEvent { ts: None, event }).expect("event applies");
}

fn mac(c: u8, i: u8) -> MacAddr {
    MacAddr([2, 0, 0, 0, c, i])
}

fn join(w: &mut World, c: u32, ip: [u8; 4]) {
    at(w, Event::CustomerJoin { customer: c, ext_ip: Ipv4Addr::from(ip) });
}

fn device(w: &mut World, c: u32, m: MacAddr, url: Option<&str>) {
    at(w, Event::DeviceJoin { customer: c, mac: m, mud_url: url.map(str::to_string), hostname: None });
}

const CAMERA: &str = "https://camera.example/mud/cam-1.json";
const P2P_CAMERA: &str = "https://p2pcam.example/mud/p2p-cam.json";

fn fixture_world(cfg: Config) -> World {
    World::for_scenario(cfg, &scenario("poc_two_homes.json").without_events()).expect("fixtures load")
}

trait WithoutEvents {
    fn without_events(self) -> Self;
}

impl WithoutEvents for Scenario {
    fn without_events(mut self) -> Self {
        self.events.clear();
        self
    }
}

// ---------------------------------------------------------------------
// 1 and 2: filter arithmetic over randomized control-event sequences.

#[derive(Default)]
struct Model {
    customers: BTreeMap<CustomerId, (Ipv4Addr, BTreeSet<u8>)>,
    profiles: BTreeMap<ProfileId, BTreeSet<WhitelistRow>>,
}

impl Model {
    fn expected_filters(&self) -> usize {
        23 + self.customers.values().map(|(_, d)| d.len() + 1).sum::<usize>()
            + self.profiles.values().map(|p| p.len() + 1).sum::<usize>()
    }
}

fn device_marks() -> Vec<u8> {
    const COMMON: [u8; 21] = [0, 8, 10, 12, 14, 16, 18, 20, 22, 24, 26, 28, 30, 32, 34, 36, 38, 40, 44, 46, 48];
    (0..64u8).filter(|m| !COMMON.contains(m) && *m != 58 && *m != 60).collect()
}

fn random_row(rng: &mut ChaCha8Rng) -> WhitelistRow {
    WhitelistRow {
        addr: if rng.gen_bool(0.95) { Some(Ipv4Addr::new(203, 0, rng.gen_range(0..4), rng.gen())) } else { None },
        protocol: Some(if rng.gen_bool(0.7) { PROTO_TCP } else { PROTO_UDP }),
        port: Some(*[443u16, 80, 123, 8883, 5000].choose(rng).unwrap()),
        direction: if rng.gen_bool(0.9) { Direction::DeviceToCloud } else { Direction::CloudToDevice },
    }
}

#[derive(Default)]
struct SequenceTally {
    events: usize,
    checked: [usize; 4],
}

/// One randomized sequence; checks the formula after every event and the
/// one-filter delta for the four update kinds.
fn filter_sequence(seed: u64, tally: &mut SequenceTally) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pl = Pipeline::new(PipelineConfig::default());
    let mut m = Model::default();
    let marks = device_marks();
    let check = |pl: &Pipeline, m: &Model, what: &str| -> Result<(), String> {
        if pl.filter_count() != m.expected_filters() {
            return Err(format!("seed {seed} after {what}: filter_count {} != {}", pl.filter_count(), m.expected_filters()));
        }
        Ok(())
    };
    check(&pl, &m, "start")?;
    for _ in 0..C1_EVENTS_PER_SEQUENCE {
        tally.events += 1;
        match rng.gen_range(0..8) {
            0 if m.customers.len() < C1_MAX_CUSTOMERS => {
                let c = CustomerId(m.customers.len() as u32 + 1);
                let ip = Ipv4Addr::new(198, 51, 100, c.0 as u8);
                pl.install_customer(c, ip).map_err(|e| e.to_string())?;
                m.customers.insert(c, (ip, BTreeSet::new()));
                check(&pl, &m, "customer join")?;
            }
            1 if !m.customers.is_empty() => {
                // Customer IP change.
                let c = **m.customers.keys().collect::<Vec<_>>().choose(&mut rng).unwrap();
                let ip = loop {
                    let ip = Ipv4Addr::new(100, 64, rng.gen(), rng.gen());
                    if m.customers.values().all(|(old, _)| *old != ip) {
                        break ip;
                    }
                };
                let before = pl.snapshot();
                pl.update_customer_ip(c, ip).map_err(|e| e.to_string())?;
                m.customers.get_mut(&c).unwrap().0 = ip;
                let d = snapshot_distance(&before, &pl.snapshot());
                if d != 1 {
                    return Err(format!("seed {seed}: IP change touched {d} filters"));
                }
                tally.checked[0] += 1;
                check(&pl, &m, "ip change")?;
            }
            2 | 3 if !m.customers.is_empty() => {
                // Device join.
                let c = **m.customers.keys().collect::<Vec<_>>().choose(&mut rng).unwrap();
                let used = &m.customers[&c].1;
                if used.len() >= C1_MAX_DEVICES {
                    continue;
                }
                let mark = *marks.iter().find(|x| !used.contains(x)).unwrap();
                let target = match m.profiles.keys().collect::<Vec<_>>().choose(&mut rng) {
                    Some(p) if rng.gen_bool(0.8) => DeviceTarget::Profile(**p),
                    _ => DeviceTarget::Controller,
                };
                let before = pl.snapshot();
                pl.install_device(c, mark, target).map_err(|e| e.to_string())?;
                m.customers.get_mut(&c).unwrap().1.insert(mark);
                let d = snapshot_distance(&before, &pl.snapshot());
                if d != 1 {
                    return Err(format!("seed {seed}: device join touched {d} filters"));
                }
                tally.checked[1] += 1;
                check(&pl, &m, "device join")?;
            }
            4 if m.profiles.len() < C1_MAX_PROFILES => {
                let id = ProfileId(rng.gen());
                let n = rng.gen_range(1..=C1_MAX_ENTRIES);
                let rows: BTreeSet<WhitelistRow> = (0..n).map(|_| random_row(&mut rng)).collect();
                pl.install_profile(id, rows.iter().copied());
                m.profiles.insert(id, rows);
                check(&pl, &m, "profile install")?;
            }
            5 if !m.profiles.is_empty() => {
                // New whitelist address for an existing domain.
                let id = **m.profiles.keys().collect::<Vec<_>>().choose(&mut rng).unwrap();
                if m.profiles[&id].len() >= C1_MAX_ENTRIES {
                    continue;
                }
                let row = random_row(&mut rng);
                if m.profiles[&id].contains(&row) {
                    continue;
                }
                let before = pl.snapshot();
                let added = pl.install_whitelist_entry(id, row).map_err(|e| e.to_string())?;
                m.profiles.get_mut(&id).unwrap().insert(row);
                let d = snapshot_distance(&before, &pl.snapshot());
                if !added || d != 1 {
                    return Err(format!("seed {seed}: new address touched {d} filters"));
                }
                tally.checked[2] += 1;
                check(&pl, &m, "new address")?;
            }
            6 => {
                // Non-IoT reclassification: the device leaves table 2.
                let with_devices: Vec<CustomerId> =
                    m.customers.iter().filter(|(_, (_, d))| !d.is_empty()).map(|(c, _)| *c).collect();
                let Some(&c) = with_devices.choose(&mut rng) else { continue };
                let mark = *m.customers[&c].1.iter().collect::<Vec<_>>().choose(&mut rng).unwrap();
                let mark = *mark;
                let before = pl.snapshot();
                pl.remove_device(c, mark).map_err(|e| e.to_string())?;
                m.customers.get_mut(&c).unwrap().1.remove(&mark);
                let d = snapshot_distance(&before, &pl.snapshot());
                if d != 1 {
                    return Err(format!("seed {seed}: non-IoT reclassification touched {d} filters"));
                }
                tally.checked[3] += 1;
                check(&pl, &m, "non-IoT")?;
            }
            7 if !m.profiles.is_empty() => {
                // Address withdrawn.
                let id = **m.profiles.keys().collect::<Vec<_>>().choose(&mut rng).unwrap();
                let Some(row) = m.profiles[&id].iter().next().copied() else { continue };
                pl.remove_whitelist_entry(id, &row).map_err(|e| e.to_string())?;
                m.profiles.get_mut(&id).unwrap().remove(&row);
                check(&pl, &m, "address withdrawn")?;
            }
            _ => {}
        }
    }
    Ok(())
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut tally = SequenceTally::default();
    for seed in 0..C1_SEQUENCES as u64 {
        filter_sequence(seed, &mut tally)?;
    }
    let took = start.elapsed();
    if took > C1_BUDGET {
        return Err(format!("took {took:?} > {C1_BUDGET:?}"));
    }
    Ok(format!("{C1_SEQUENCES} sequences, {} events, formula exact after each, {took:.2?}", tally.events))
}

/// The four update kinds driven through the real control path.
fn single_update_end_to_end() -> Result<String, String> {
    let mut w = fixture_world(Config::default());
    join(&mut w, 1, [198, 51, 100, 1]);
    device(&mut w, 1, mac(1, 1), Some(CAMERA));
    let snap = |w: &World| w.control().unwrap().pipeline().snapshot();

    let before = snap(&w);
    device(&mut w, 1, mac(1, 2), Some(CAMERA));
    let d_join = snapshot_distance(&before, &snap(&w));

    let before = snap(&w);
    at(&mut w, Event::IpChange { customer: 1, ip: Ipv4Addr::new(198, 51, 100, 77) });
    let d_ip = snapshot_distance(&before, &snap(&w));

    // A non-IoT host: three off-profile names, then the classifier's say.
    let laptop = mac(1, 9);
    device(&mut w, 1, laptop, None);
    for name in ["www.news.example", "mail.example", "video.example"] {
        w.dns_query(CustomerId(1), laptop, name).map_err(|e| e.to_string())?;
    }
    at(&mut w, Event::ClassifyOracleHint { mac: laptop, verdict: ClassHint::NonIot });
    let mut d_non_iot = None;
    for _ in 0..250 {
        let before = snap(&w);
        let t = w.now() + 1;
        w.advance_to(t).map_err(|e| e.to_string())?;
        let status = w.control().unwrap().device(CustomerId(1), laptop).map(|d| d.status.clone());
        if status == Some(DeviceStatus::NonIot) {
            d_non_iot = Some(snapshot_distance(&before, &snap(&w)));
            break;
        }
    }
    let d_non_iot = d_non_iot.ok_or("laptop never reclassified")?;

    // One more address behind a whitelisted name, picked up at refresh.
    at(
        &mut w,
        Event::DnsZoneSet {
            name: "api.camera.example".into(),
            addrs: vec![Ipv4Addr::new(203, 0, 113, 10), Ipv4Addr::new(203, 0, 113, 60)],
            ttl: 60,
        },
    );
    let mut d_addr = None;
    for _ in 0..400 {
        let before = snap(&w);
        let refreshes = w.control().unwrap().stats().refreshes;
        let t = w.now() + 1;
        w.advance_to(t).map_err(|e| e.to_string())?;
        if w.control().unwrap().stats().refreshes > refreshes {
            d_addr = Some(snapshot_distance(&before, &snap(&w)));
            break;
        }
    }
    let d_addr = d_addr.ok_or("no refresh happened")?;
    let got = [d_ip, d_join, d_addr, d_non_iot];
    if got != [1, 1, 1, 1] {
        return Err(format!("control path deltas (ip, join, address, non-IoT) = {got:?}"));
    }
    Ok("control path deltas (ip, join, address, non-IoT) = [1, 1, 1, 1]".into())
}

fn criterion_2() -> Check {
    let mut tally = SequenceTally::default();
    for seed in 0..C1_SEQUENCES as u64 {
        filter_sequence(seed, &mut tally)?;
    }
    if tally.checked.iter().any(|&n| n == 0) {
        return Err(format!("some update kind never exercised: {:?}", tally.checked));
    }
    let e2e = single_update_end_to_end()?;
    Ok(format!(
        "ip/join/address/non-IoT updates checked {:?}, each exactly one filter; {e2e}",
        tally.checked
    ))
}

// ---------------------------------------------------------------------
// 3: pipeline against a linear scan of the profile entries.

fn oracle_admits(p: &MudProfile, zone: &BTreeMap<String, BTreeSet<Ipv4Addr>>, pkt: &Packet) -> bool {
    for e in p.entries() {
        if let Some(proto) = e.protocol {
            if proto != pkt.protocol {
                continue;
            }
        }
        let peer_ok = match &e.endpoint {
            None => true,
            Some(Endpoint::Ip(a)) => *a == pkt.dst_ip,
            Some(Endpoint::Domain(d)) => zone.get(d).map_or(false, |s| s.contains(&pkt.dst_ip)),
            Some(Endpoint::Placeholder(_)) => false,
        };
        if !peer_ok {
            continue;
        }
        let port_ok = match e.dst_port {
            None => true,
            Some(port) if e.direction == Direction::DeviceToCloud => port == pkt.dst_port,
            Some(port) => port == pkt.src_port,
        };
        if port_ok {
            return true;
        }
    }
    false
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c3);
    let domains: Vec<String> = (0..30).map(|i| format!("svc{i}.cloud{}.example", i % 7)).collect();
    let mut zone: BTreeMap<String, BTreeSet<Ipv4Addr>> = BTreeMap::new();
    for (i, d) in domains.iter().enumerate() {
        let n = rng.gen_range(1..=3);
        zone.insert(d.clone(), (0..n).map(|k| Ipv4Addr::new(203, 0, 113, (i * 3 + k) as u8 + 1)).collect());
    }
    let mut profiles = Vec::new();
    for j in 0..C3_PROFILES {
        let mut entries = Vec::new();
        for _ in 0..rng.gen_range(4..12) {
            let endpoint = match rng.gen_range(0..10) {
                0 => Some(Endpoint::Ip(Ipv4Addr::new(192, 0, 2, rng.gen_range(1..20)))),
                1 => None,
                _ => Some(Endpoint::Domain(domains.choose(&mut rng).unwrap().clone())),
            };
            let port = if endpoint.is_none() || rng.gen_bool(0.85) {
                Some(*[443u16, 80, 123, 8883, 5000].choose(&mut rng).unwrap())
            } else {
                None
            };
            let protocol = if port.is_some() || rng.gen_bool(0.5) {
                Some(if rng.gen_bool(0.7) { PROTO_TCP } else { PROTO_UDP })
            } else {
                None
            };
            let direction = if rng.gen_bool(0.85) { Direction::DeviceToCloud } else { Direction::CloudToDevice };
            entries.push(AclEntry { direction, endpoint, protocol, dst_port: port });
        }
        profiles.push(MudProfile::new(&format!("https://vendor{j}.example/mud/dev.json"), entries).unwrap());
    }
    let mut pl = Pipeline::new(PipelineConfig::default());
    for p in &profiles {
        let wl = ResolvedWhitelist::compile(p, |d| zone.get(d), 0);
        pl.install_profile(p.id(), wl.rows);
    }
    let marks = device_marks();
    let mut devices = Vec::new();
    for c in 0..5u32 {
        let ip = Ipv4Addr::new(198, 51, 100, c as u8 + 1);
        pl.install_customer(CustomerId(c), ip).unwrap();
        for k in 0..5 {
            let prof = (c as usize + k) % C3_PROFILES;
            pl.install_device(CustomerId(c), marks[k], DeviceTarget::Profile(profiles[prof].id())).unwrap();
            devices.push((ip, marks[k], prof));
        }
    }
    if devices.len() < C3_MIN_DEVICES {
        return Err(format!("only {} devices", devices.len()));
    }
    let candidate_addrs: Vec<Ipv4Addr> = zone.values().flatten().copied().chain((1..20).map(|i| Ipv4Addr::new(192, 0, 2, i))).collect();
    let (mut agree, mut legit) = (0, 0);
    for _ in 0..C3_PACKETS {
        let (ip, mark, prof) = devices[rng.gen_range(0..devices.len())];
        let dst = if rng.gen_bool(0.85) {
            *candidate_addrs.choose(&mut rng).unwrap()
        } else {
            Ipv4Addr::new(rng.gen_range(1..224), rng.gen(), rng.gen(), rng.gen())
        };
        let ports = [443u16, 80, 123, 8883, 5000, rng.gen_range(1024..65535)];
        let sport = if rng.gen_bool(0.3) { *ports.choose(&mut rng).unwrap() } else { rng.gen_range(1024..65535) };
        let proto = if rng.gen_bool(0.7) { PROTO_TCP } else { PROTO_UDP };
        let pkt = Packet::data((ip, sport), (dst, *ports.choose(&mut rng).unwrap()), proto)
            .with_dscp(Dscp::new(mark).unwrap());
        let want = oracle_admits(&profiles[prof], &zone, &pkt);
        let got = match pl.process(&pkt) {
            Verdict::Legitimate { .. } => true,
            Verdict::Violation { .. } => false,
            other => return Err(format!("unexpected verdict {}", other.kind())),
        };
        if want != got {
            return Err(format!("disagreement on {:?}: oracle {want}, pipeline {got}", pkt.key()));
        }
        agree += 1;
        legit += usize::from(want);
    }
    let took = start.elapsed();
    if took > C3_BUDGET {
        return Err(format!("took {took:?} > {C3_BUDGET:?}"));
    }
    Ok(format!(
        "{agree}/{C3_PACKETS} agree ({legit} legitimate), {} devices / {C3_PROFILES} profiles, {took:.2?}",
        devices.len()
    ))
}

// ---------------------------------------------------------------------

fn criterion_4() -> Check {
    let mut w = fixture_world(Config::default());
    join(&mut w, 1, [198, 51, 100, 1]);
    let cam = mac(1, 1);
    device(&mut w, 1, cam, Some(CAMERA));
    let before = w.control().unwrap().pipeline().processed();
    let dst = (Ipv4Addr::new(203, 0, 113, 11), 443);
    for conn in 0..C4_CONNECTIONS {
        for _ in 0..C4_PACKETS_PER_CONNECTION {
            w.send(CustomerId(1), cam, dst, PROTO_TCP, 20_000 + conn, Dscp::ZERO, Payload::Data, false)
                .map_err(|e| e.to_string())?;
        }
    }
    let ran = w.control().unwrap().pipeline().processed() - before;
    if ran != u64::from(C4_CONNECTIONS) {
        return Err(format!("process() ran {ran} times for {C4_CONNECTIONS} connections"));
    }
    Ok(format!("{} packets over {C4_CONNECTIONS} connections, process() ran {ran} times",
        C4_CONNECTIONS as usize * C4_PACKETS_PER_CONNECTION))
}

fn criterion_5() -> Check {
    let mut off = Config::default();
    off.control.triggered_resolution = false;
    let without = run("ip_rotation.json", off);
    let with = run("ip_rotation.json", Config::default());
    let (a_off, a_on) = (without.violation_alerts(), with.alerts.len());
    let oracle_on = oracle_check(&with);
    let oracle_off = oracle_check(&without);
    if a_off < 1 || a_on != 0 || !oracle_on.pass() || oracle_off.pass() {
        return Err(format!(
            "alerts without={a_off} with={a_on}; oracle diffs without={} with={}",
            oracle_off.diffs.len(),
            oracle_on.diffs.len()
        ));
    }
    Ok(format!(
        "rotation: {a_off} alerts without triggered re-resolution, {a_on} with it; oracle passes only with it ({} diffs without)",
        oracle_off.diffs.len()
    ))
}

fn criterion_6() -> Check {
    let mut w = fixture_world(Config::default());
    join(&mut w, 1, [198, 51, 100, 1]);
    let cam = mac(1, 1);
    device(&mut w, 1, cam, Some(CAMERA));
    let c = CustomerId(1);

    // Control: a whitelisted connection's answers do come back.
    let ok = w
        .send(c, cam, (Ipv4Addr::new(203, 0, 113, 10), 443), PROTO_TCP, 30_000, Dscp::ZERO, Payload::Data, true)
        .map_err(|e| e.to_string())?;
    if !ok.reply_delivered {
        return Err("legitimate connection got no answer".into());
    }

    let probe = (Ipv4Addr::new(198, 18, 23, 1), 23);
    let first = w.send(c, cam, probe, PROTO_TCP, 30_001, Dscp::ZERO, Payload::Data, false).map_err(|e| e.to_string())?;
    let v = first.verdict.ok_or("probe not inspected")?;
    if v.outcome != Outcome::Alerted {
        return Err(format!("probe outcome {:?}", v.outcome));
    }
    let k: ConnKey = v.conn_key;
    let has_acl = w.router().export().iter().any(|a| {
        matches!(a.scope, AclScope::Connection { key, bidirectional: true } if key == k)
    });
    if !has_acl {
        return Err("no bidirectional ACL for the probe".into());
    }
    let delivered_before = w.delivered().len();
    const REPLAYS: u32 = 20;
    for _ in 0..REPLAYS {
        w.send(c, cam, probe, PROTO_TCP, 30_001, Dscp::ZERO, Payload::Data, false).map_err(|e| e.to_string())?;
    }
    at(
        &mut w,
        Event::Inbound(InboundEvent {
            customer: 1,
            src: format!("{}:{}", k.dst_ip, k.dst_port),
            ext_port: k.src_port,
            proto: mudguard::harness::Proto(PROTO_TCP),
            count: REPLAYS,
            reply: false,
        }),
    );
    let leaked = w.delivered().len() - delivered_before;
    if leaked != 0 {
        return Err(format!("{leaked} packets of k or reverse(k) delivered after the ACL"));
    }

    let mirai = run("mirai_probe.json", Config::default());
    let aggregate = mirai.acls.iter().any(|a| matches!(a.scope, AclScope::Aggregate { .. }));
    if !aggregate {
        return Err("mirai scan produced no aggregate ACL".into());
    }
    Ok(format!("{REPLAYS}+{REPLAYS} replays of k and reverse(k) after the ACL, 0 delivered; mirai scan aggregated"))
}

fn criterion_7() -> Check {
    let build = |per_home: u8| -> World {
        let mut w = fixture_world(Config::default());
        for c in 1..=2u8 {
            join(&mut w, c as u32, [198, 51, 100, c]);
            for i in 0..per_home {
                device(&mut w, c as u32, mac(c, i + 1), Some(CAMERA));
            }
        }
        w.advance_to(650).unwrap();
        w
    };
    let (a, b) = (build(3), build(6));
    let (pa, pb) = (a.control().unwrap(), b.control().unwrap());
    let (sa, sb) = (pa.pipeline().table_sizes(), pb.pipeline().table_sizes());
    let others_equal = sa.iter().filter(|(t, _)| **t != TableId(2)).eq(sb.iter().filter(|(t, _)| **t != TableId(2)));
    let t2 = sb[&TableId(2)] as i64 - sa[&TableId(2)] as i64;
    let (qa, qb) = (pa.stats().last_refresh_queries, pb.stats().last_refresh_queries);
    let (ta, tb) = (pa.stats().refresh_queries, pb.stats().refresh_queries);
    if !others_equal || t2 != 6 || qa != qb || ta != tb || qa == 0 {
        return Err(format!("tables {sa:?} vs {sb:?}; refresh queries {qa}/{ta} vs {qb}/{tb}"));
    }
    Ok(format!("6 -> 12 cameras: table 2 +{t2}, other tables unchanged, {qa} refresh queries per refresh either way"))
}

// ---------------------------------------------------------------------

fn svm_world() -> World {
    let mut w = fixture_world(Config::default());
    join(&mut w, 1, [198, 51, 100, 1]);
    device(&mut w, 1, mac(1, 5), Some(P2P_CAMERA));
    at(
        &mut w,
        Event::PortForward { customer: 1, ext_port: 5000, proto: mudguard::harness::Proto(PROTO_TCP), mac: mac(1, 5), int_port: 5000 },
    );
    w
}

/// Judgement of the camera's answer to a peer at `src`.
fn p2p_from(w: &mut World, src: Ipv4Addr, port: u16) -> Result<(String, Outcome), String> {
    let n = w.verdict_log().len();
    at(
        w,
        Event::Inbound(InboundEvent {
            customer: 1,
            src: format!("{src}:{port}"),
            ext_port: 5000,
            proto: mudguard::harness::Proto(PROTO_TCP),
            count: 1,
            reply: true,
        }),
    );
    let v = w.verdict_log()[n..].iter().find(|v| v.conn_key.dst_ip == src).ok_or("camera answer not inspected")?;
    Ok((v.verdict.to_string(), v.outcome))
}

fn criterion_8() -> Check {
    let mut w = svm_world();
    let phone = mac(1, 10);
    let ok = w.signup_flow(CustomerId(1), phone, "alice", None, UserKind::Honest, None).map_err(|e| e.to_string())?;
    if !ok {
        return Err("honest sign-up from home did not complete".into());
    }
    let mut prior: Option<Ipv4Addr> = None;
    for i in 0..C8_MOVES {
        let here = Ipv4Addr::new(192, 0, 2, 101 + i as u8);
        w.advance_to(w.now() + 20).map_err(|e| e.to_string())?;
        at(&mut w, Event::IadMove { account: "alice".into(), ext_ip: here, int_ip: Ipv4Addr::new(10, 20, 0, 7) });
        let (verdict, outcome) = p2p_from(&mut w, here, 41_000 + i as u16)?;
        if !matches!(outcome, Outcome::Legitimate | Outcome::Suppressed) {
            return Err(format!("move {i}: traffic from new address was {verdict}/{outcome:?}"));
        }
        if let Some(old) = prior {
            let (verdict, outcome) = p2p_from(&mut w, old, 42_000 + i as u16)?;
            if verdict != "violation" || outcome != Outcome::Alerted {
                return Err(format!("move {i}: traffic from prior address was {verdict}/{outcome:?}"));
            }
        }
        prior = Some(here);
    }

    // Sign-ups that must not substitute the placeholder.
    let generic = ProfileId::for_url(P2P_CAMERA);
    let cases: [(&str, UserKind, Option<Ipv4Addr>); 3] = [
        ("outside", UserKind::Honest, Some(Ipv4Addr::new(203, 0, 113, 99))),
        ("wrong-code", UserKind::WrongCode, None),
        ("silent", UserKind::Silent, None),
    ];
    for (name, user, via) in cases {
        let mut w = svm_world();
        let done = w.signup_flow(CustomerId(1), phone, name, None, user, via).map_err(|e| e.to_string())?;
        w.advance_to(w.now() + 300).map_err(|e| e.to_string())?;
        let cp = w.control().unwrap();
        let owner = cp.customer(CustomerId(1)).and_then(|c| c.owner_domain.clone());
        let cam = cp.device(CustomerId(1), mac(1, 5)).map(|d| d.status.clone());
        if done || owner.is_some() || cam != Some(DeviceStatus::Identified { profile: generic }) {
            return Err(format!("{name} sign-up substituted the placeholder (owner {owner:?}, camera {cam:?})"));
        }
    }
    Ok(format!(
        "sign-up then {C8_MOVES} moves: new address legitimate, prior address violation each time; outside/wrong-code/silent sign-ups left the placeholder"
    ))
}

fn criterion_9() -> Check {
    let both = run("hybrid_p2p.json", hybrid_config());
    let permitted: BTreeSet<ConnKey> =
        both.local_log.iter().filter(|r| r.decision == LocalDecision::Permit).map(|r| r.conn_key).collect();
    if permitted.is_empty() {
        return Err("hybrid scenario produced no local permits".into());
    }
    let flagged: BTreeSet<ConnKey> =
        both.verdict_log.iter().filter(|v| v.verdict == "violation").map(|v| v.conn_key).collect();
    let conflicts = permitted.intersection(&flagged).count();
    if conflicts != 0 {
        return Err(format!("{conflicts} connections permitted locally and flagged by the VNF"));
    }

    // Local monitor off: VNF verdicts on its own traffic are unchanged.
    let mut no_local = hybrid_config();
    no_local.cpe.wlm_mode = LocalMode::Off;
    let vnf_only = run("hybrid_p2p.json", no_local);
    let vnf_view = |r: &RunReport| -> Vec<(ConnKey, &'static str, Outcome)> {
        r.verdict_log
            .iter()
            .filter(|v| !permitted.contains(&v.conn_key))
            .map(|v| (v.conn_key, v.verdict, v.outcome))
            .collect()
    };
    if vnf_view(&both) != vnf_view(&vnf_only) {
        return Err("VNF verdicts changed when the local monitor was switched off".into());
    }

    // VNF not enforcing: local decisions are unchanged.
    let mut no_vnf = hybrid_config();
    no_vnf.router.enforce = false;
    let local_only = run("hybrid_p2p.json", no_vnf);
    if both.local_log != local_only.local_log {
        return Err("local decisions changed when VNF enforcement was off".into());
    }
    Ok(format!(
        "{} locally permitted connections, 0 flagged by the VNF; each side unchanged with the other disabled",
        permitted.len()
    ))
}

fn criterion_10() -> Check {
    let mut checked = Vec::new();
    for (name, cfg) in shipped() {
        let mut detached = cfg.clone();
        detached.vnf_attached = false;
        detached.cpe.wlm_mode = LocalMode::AlertOnly;
        let mut attached = cfg;
        attached.router.enforce = false;
        attached.cpe.wlm_mode = LocalMode::AlertOnly;
        let a = run(name, attached);
        let d = run(name, detached);
        if a.delivered_bytes() != d.delivered_bytes() {
            let first = a.delivered.iter().zip(&d.delivered).position(|(x, y)| x != y);
            return Err(format!(
                "{name}: delivered sets differ ({} vs {} packets, first difference at {first:?})",
                a.delivered.len(),
                d.delivered.len()
            ));
        }
        checked.push(format!("{name}:{}", a.delivered.len()));
    }
    Ok(format!("byte-identical deliveries with and without the VNF [{}]", checked.join(" ")))
}

fn poisoned_run(secure: bool) -> Result<(bool, Option<Outcome>), String> {
    let mut cfg = Config::default();
    cfg.control.secure_resolver = secure;
    let mut w = fixture_world(cfg);
    let bogus = Ipv4Addr::new(6, 6, 6, 6);
    join(&mut w, 1, [198, 51, 100, 1]);
    let cam = mac(1, 1);
    device(&mut w, 1, cam, Some(CAMERA));
    for name in ["api.camera.example", "stream.camera.example", "time.ntp-pool.example"] {
        at(&mut w, Event::Poison { name: name.into(), addrs: vec![bogus] });
    }
    let mut learned = false;
    for t in (50..=1500).step_by(50) {
        w.advance_to(t).map_err(|e| e.to_string())?;
        let cp = w.control().unwrap();
        learned |= cp.resolver().whitelists().any(|wl| wl.addrs().contains(&bogus));
        learned |= cp.profiles().iter().any(|p| {
            cp.pipeline().profile_rows(p.id()).is_some_and(|mut rows| rows.any(|r| r.addr == Some(bogus)))
        });
    }
    let out = w
        .send(CustomerId(1), cam, (bogus, 443), PROTO_TCP, 33_000, Dscp::ZERO, Payload::Data, false)
        .map_err(|e| e.to_string())?;
    Ok((learned, out.verdict.map(|v| v.outcome)))
}

fn criterion_11() -> Check {
    let (learned, outcome) = poisoned_run(true)?;
    if learned || outcome != Some(Outcome::Alerted) {
        return Err(format!("secure resolution learned bogus address: {learned}, traffic to it {outcome:?}"));
    }
    let (insecure_learned, _) = poisoned_run(false)?;
    if !insecure_learned {
        return Err("the insecure channel never served the bogus answer; the check has no teeth".into());
    }
    Ok("bogus answers absent from every resolved whitelist over 30 refresh checkpoints (the insecure channel does learn them)".into())
}

fn criterion_12() -> Check {
    for (name, cfg) in shipped() {
        let a = run(name, cfg.clone()).to_json();
        let b = run(name, cfg).to_json();
        if a != b {
            return Err(format!("{name}: reports differ between identical runs"));
        }
    }
    let res = bench(&BenchConfig { packets: C12_BENCH_PACKETS, ..BenchConfig::default() });
    if res.packets_per_sec < C12_MIN_PPS {
        return Err(format!("{:.0} packets/s < {C12_MIN_PPS:.0} (artifact target)", res.packets_per_sec));
    }
    Ok(format!(
        "{} scenarios byte-identical on rerun; bench {:.0} packets/s single-threaded (artifact target {C12_MIN_PPS:.0})",
        shipped().len(),
        res.packets_per_sec
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 12] = [
        ("filter-count formula", criterion_1),
        ("single-update property", criterion_2),
        ("oracle equivalence", criterion_3),
        ("first-packet economy", criterion_4),
        ("false-positive elimination", criterion_5),
        ("bidirectional enforcement", criterion_6),
        ("per-type resource scaling", criterion_7),
        ("SVM end-to-end", criterion_8),
        ("hybrid non-conflict", criterion_9),
        ("off-path safety", criterion_10),
        ("DNS-poisoning immunity", criterion_11),
        ("determinism and throughput", criterion_12),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
