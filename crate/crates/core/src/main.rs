use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use p2pvpn::experiments::churn::{churn_scenario, ChurnConfig};
use p2pvpn::experiments::crawl::crawl_all;
use p2pvpn::experiments::dataset::synthetic_latency;
use p2pvpn::experiments::relay_bench::{relay_benchmark, size_trend, summarize, to_csv, ExperimentConfig, RelaySide};
use p2pvpn::experiments::world::{build_overlay, seeded_ids};
use p2pvpn::overlay::OverlayConfig;
use p2pvpn::relays::RelayPolicy;
use p2pvpn::transport::{load_latency_matrix, ConnectivityPolicy};
use p2pvpn::vpn::tunnel::{tunnel_demo, TunnelConfig};
use p2pvpn::vpn::Approach;

#[derive(Parser)]
#[command(name = "p2pvpn", version, about = "Structured P2P VPN simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Attack {
    Spoof,
}

#[derive(Subcommand)]
enum Cmd {
    /// Overlay vs relay vs direct latency over an all-to-all matrix.
    RelayBench {
        /// King-format latency file, optionally gzipped. Without it a
        /// synthetic matrix is generated.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Hosts in the synthetic matrix.
        #[arg(long, default_value_t = 1740)]
        synthetic_hosts: usize,
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,200,400")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value = "latency")]
        policy: RelayPolicy,
        /// Whose closest peer relays a pair.
        #[arg(long, default_value = "source")]
        relay_side: RelaySide,
        #[arg(long, default_value_t = 0.0)]
        jitter_ms: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stabilize a ring and crawl it.
    Crawl {
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Consistency over time under arrivals and departures.
    Churn {
        /// Arrivals per minute.
        #[arg(long, default_value_t = 0.0)]
        arrival: f64,
        /// Fraction of live nodes departing per minute.
        #[arg(long, default_value_t = 0.1)]
        departure: f64,
        /// Seconds of churn.
        #[arg(long, default_value_t = 300)]
        duration: u64,
        #[arg(long, default_value_t = 200)]
        size: usize,
        /// Departing nodes vanish without notice.
        #[arg(long)]
        abrupt: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full-tunnel client on a sniffed LAN.
    TunnelDemo {
        #[arg(long, default_value = "2")]
        approach: Approach,
        #[arg(long, value_enum)]
        attack: Option<Attack>,
        #[arg(long, default_value_t = 120)]
        packets: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: &Option<PathBuf>, body: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(body.as_bytes())?;
            Ok(so.flush()?)
        }
    }
}

/// Ok(true) when every checked invariant held.
fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::RelayBench { dataset, synthetic_hosts, sizes, trials, policy, relay_side, jitter_ms, seed, out } => {
            let latency = match &dataset {
                Some(p) => load_latency_matrix(p).with_context(|| format!("loading {}", p.display()))?,
                None => synthetic_latency(synthetic_hosts, seed),
            };
            let cfg = ExperimentConfig {
                dataset_path: dataset.clone(),
                sizes,
                trials_per_size: trials,
                seed,
                relay_policy: policy,
                relay_side,
                jitter_ms,
                output_path: out.clone(),
                ..ExperimentConfig::default()
            };
            let rows = relay_benchmark(&latency, &cfg)?;
            emit(&out, &to_csv(&rows))?;
            let summary = summarize(&rows);
            let source = dataset.map_or_else(|| format!("synthetic({synthetic_hosts})"), |p| p.display().to_string());
            eprintln!("dataset={source} policy={policy} relay_side={relay_side:?}");
            eprintln!("improvement_pct = 100*(overlay-relay)/overlay; improvement_ratio_pct = 100*(overlay/relay-1)");
            let mut ok = true;
            for s in &summary {
                eprintln!(
                    "size={} median_pct={:?} median_ratio_pct={:?} order_violations={}",
                    s.size, s.median_improvement_pct, s.median_improvement_ratio_pct, s.order_violations
                );
                if s.size >= 50 && s.order_violations > 0 {
                    ok = false;
                }
            }
            eprintln!("trend(pct)={:?} trend(ratio)={:?}", size_trend(&summary, false), size_trend(&summary, true));
            Ok(ok)
        }
        Cmd::Crawl { size, seed, out } => {
            if size == 0 {
                bail!("size must be at least 1");
            }
            let ids = seeded_ids(size, seed);
            let mut ov = build_overlay(
                synthetic_latency(size, seed),
                ConnectivityPolicy::new(),
                OverlayConfig { seed, ..OverlayConfig::default() },
                &ids,
            )?;
            let steady = ov.stabilize_until_steady(500);
            let r = crawl_all(&ov);
            let mut body = String::from("size,seed,steady_after,visited,duration_hops,inconsistent\n");
            body.push_str(&format!(
                "{size},{seed},{},{},{},{}\n",
                steady.map(|s| s.to_string()).unwrap_or_default(),
                r.visited,
                r.duration_hops,
                r.inconsistent.len()
            ));
            emit(&out, &body)?;
            for (node, issue) in &r.inconsistent {
                eprintln!("{node}: {issue}");
            }
            Ok(r.is_consistent() && r.visited == size)
        }
        Cmd::Churn { arrival, departure, duration, size, abrupt, seed, out } => {
            let cfg = ChurnConfig {
                initial_size: size,
                arrival_rate: arrival,
                departure_rate: departure,
                duration: Duration::from_secs(duration),
                graceful: !abrupt,
                seed,
                ..ChurnConfig::default()
            };
            let r = churn_scenario(&cfg)?;
            emit(&out, &r.csv())?;
            eprintln!("arrivals={} departures={} converged_after={:?}", r.arrivals, r.departures, r.converged_after);
            Ok(r.converged_after.is_some())
        }
        Cmd::TunnelDemo { approach, attack, packets, seed, out } => {
            let mut cfg = TunnelConfig::new(approach, attack == Some(Attack::Spoof), seed);
            cfg.app_packets = packets;
            let r = tunnel_demo(&cfg)?;
            emit(&out, &r.csv())?;
            eprintln!(
                "leak={} plaintext_app_frames={} app_packets={} replies={}",
                r.leak(),
                r.plaintext_app_frames,
                r.app_sent,
                r.app_replies
            );
            // Approach 2 must never leak; approach 1 leaking is the expected flaw.
            Ok(approach == Approach::One || (!r.leak() && r.nonconforming_client_frames == 0))
        }
    }
}

fn main() -> ExitCode {
    // Exit status 2 is reserved for invariant violations, so usage errors
    // get 1 instead of clap's default.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("invariant violated");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
