// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mudguard::harness::{bench, oracle_check, BenchConfig, Config, Scenario, World};
use mudguard::mud::parse_mud;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mudguard", version, about = "ISP-side MUD whitelist enforcement simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario. Exits 2 if whitelist violations were raised.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the JSON report; metrics go next to it as `.metrics`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also re-check every verdict with the brute-force oracle.
        #[arg(long)]
        oracle: bool,
    },
    /// Parse a MUD file and print the accepted entries.
    ValidateMud { file: PathBuf },
    /// Print the VNF filter tables, optionally after running a scenario.
    DumpPipeline {
        scenario: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Measure pipeline throughput on a synthetic population.
    Bench {
        #[arg(long, default_value_t = 1_000_000)]
        packets: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else { return Ok(Config::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("config {}", path.display()))
}

fn run(scenario: &Path, config: Option<&Path>, report: Option<&Path>, oracle: bool) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let sc = Scenario::load(scenario).map_err(anyhow::Error::msg).with_context(|| format!("scenario {}", scenario.display()))?;
    let rep = World::run(cfg, &sc)?;
    match report {
        Some(out) => {
            std::fs::write(out, rep.to_json()).with_context(|| format!("writing {}", out.display()))?;
            let metrics = out.with_extension("metrics");
            std::fs::write(&metrics, rep.metrics_text()).with_context(|| format!("writing {}", metrics.display()))?;
        }
        None => println!("{}", rep.to_json()),
    }
    eprintln!(
        "alerts={} violations={} acls={} filter_count={}",
        rep.alerts.len(),
        rep.violation_alerts(),
        rep.acls.len(),
        rep.filter_count.map_or("-".to_string(), |n| n.to_string())
    );
    if oracle {
        let res = oracle_check(&rep);
        eprintln!("oracle: checked={} diffs={}", res.checked, res.diffs.len());
        for d in &res.diffs {
            eprintln!("  #{} ts={} {:?} expected={} got={:?}", d.index, d.ts, d.conn_key, d.expected, d.outcome);
        }
        if !res.pass() {
            return Ok(ExitCode::from(3));
        }
    }
    Ok(ExitCode::from(rep.exit_code() as u8))
}

fn main() -> Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::Run { scenario, config, report, oracle } => run(&scenario, config.as_deref(), report.as_deref(), oracle),
        Cmd::ValidateMud { file } => {
            let bytes = std::fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let p = parse_mud(&bytes)?;
            println!("mud-url {}", p.mud_url());
            println!("profile {}", p.id());
            for e in p.entries() {
                println!("{}", serde_json::to_string(e)?);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::DumpPipeline { scenario, config } => {
            let cfg = load_config(config.as_deref())?;
            let mut world = match &scenario {
                Some(path) => {
                    let sc = Scenario::load(path).map_err(anyhow::Error::msg).with_context(|| format!("scenario {}", path.display()))?;
                    let mut w = World::for_scenario(cfg, &sc)?;
                    for ev in &sc.events {
                        w.apply(ev)?;
                    }
                    w
                }
                None => World::new(cfg, 0),
            };
            let cp = world.control_mut().context("VNF is detached in this config")?;
            print!("{}", cp.pipeline().dump());
            println!("# filter_count {}", cp.pipeline().filter_count());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench { packets, threads, seed } => {
            let res = bench(&BenchConfig { packets, threads, seed, ..BenchConfig::default() });
            println!("{}", serde_json::to_string_pretty(&res)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
