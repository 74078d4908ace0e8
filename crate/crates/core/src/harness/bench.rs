// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

//! Raw `process()` throughput on a synthetic population.

use crate::control::allocate_mark;
use crate::mud::{Direction, ProfileId, WhitelistRow};
use crate::net::{CustomerId, Dscp, Packet, PROTO_TCP, PROTO_UDP};
use crate::pipeline::{DeviceTarget, Pipeline, PipelineConfig, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::net::Ipv4Addr;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub packets: usize,
    pub customers: u32,
    pub devices_per_customer: usize,
    pub profiles: usize,
    pub entries_per_profile: usize,
    /// Worker threads; packets are sharded round-robin.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 7,
            packets: 1_000_000,
            customers: 50,
            devices_per_customer: 8,
            profiles: 10,
            entries_per_profile: 20,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub packets: usize,
    pub threads: usize,
    pub elapsed_secs: f64,
    pub packets_per_sec: f64,
    pub legitimate: u64,
    pub violations: u64,
    pub filter_count: usize,
}

fn profile_addr(p: usize, e: usize) -> Ipv4Addr {
    Ipv4Addr::new(198, 18, p as u8, e as u8 + 1)
}

/// Builds the population, generates the packets, then times only the
/// `process()` calls.
pub fn bench(cfg: &BenchConfig) -> BenchResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pl = Pipeline::new(PipelineConfig::default());
    let profiles = cfg.profiles.max(1);
    for p in 0..profiles {
        let rows = (0..cfg.entries_per_profile).map(|e| WhitelistRow {
            addr: Some(profile_addr(p, e)),
            protocol: Some(PROTO_TCP),
            port: Some(443),
            direction: Direction::DeviceToCloud,
        });
        pl.install_profile(ProfileId(p as u64 + 1), rows);
    }
    let mut devices = Vec::new();
    for c in 0..cfg.customers {
        let ip = Ipv4Addr::from(0x0a00_0000 + c + 1);
        pl.install_customer(CustomerId(c), ip).expect("fresh customer");
        let mut used = Vec::new();
        for _ in 0..cfg.devices_per_customer {
            let Some(mark) = allocate_mark(|m| used.contains(&m)) else { break };
            used.push(mark);
            let profile = rng.gen_range(0..profiles);
            pl.install_device(CustomerId(c), mark, DeviceTarget::Profile(ProfileId(profile as u64 + 1)))
                .expect("valid mark");
            devices.push((ip, mark, profile));
        }
    }
    let packets: Vec<Packet> = (0..cfg.packets)
        .map(|i| {
            let (ip, mark, profile) = devices[rng.gen_range(0..devices.len())];
            let hit = rng.gen_bool(0.8);
            let dst = if hit {
                profile_addr(profile, rng.gen_range(0..cfg.entries_per_profile.max(1)))
            } else {
                Ipv4Addr::new(203, 0, 113, rng.gen())
            };
            let proto = if rng.gen_bool(0.9) { PROTO_TCP } else { PROTO_UDP };
            Packet::data((ip, 1024 + (i % 60000) as u16), (dst, 443), proto)
                .with_dscp(Dscp::new(mark).expect("device mark"))
        })
        .collect();

    let threads = cfg.threads.max(1);
    let start = Instant::now();
    let tallies: Vec<(u64, u64)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let pl = &pl;
                let packets = &packets;
                s.spawn(move || {
                    let (mut ok, mut bad) = (0, 0);
                    for p in packets.iter().skip(t).step_by(threads) {
                        match pl.process(p) {
                            Verdict::Legitimate { .. } => ok += 1,
                            Verdict::Violation { .. } => bad += 1,
                            _ => {}
                        }
                    }
                    (ok, bad)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker")).collect()
    });
    let elapsed = start.elapsed().as_secs_f64();
    BenchResult {
        packets: packets.len(),
        threads,
        elapsed_secs: elapsed,
        packets_per_sec: packets.len() as f64 / elapsed.max(1e-9),
        legitimate: tallies.iter().map(|t| t.0).sum(),
        violations: tallies.iter().map(|t| t.1).sum(),
        filter_count: pl.filter_count(),
    }
}
