//! Command-line driver: simulation, synchronization, full two-party
//! cycles (in-process or over TCP), the canned experiments, and file
//! tooling.
//!
//! Exit codes: 0 success, 2 protocol abort, 3 configuration error.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use qpc_core::config::SystemConfig;
use qpc_core::experiments::{
    fig4_table, fig5_round_table, fig5_table, run_fig4, run_fig5, run_table2, table2_table,
    Fig4Spec, Fig5Spec, Table2Spec,
};
use qpc_core::obfuscation::MappingTable;
use qpc_core::primitives::{generate_psk, PskLedger};
use qpc_core::protocol::metrics::{Codeblock, CycleMetrics};
use qpc_core::protocol::transport::TcpTransport;
use qpc_core::protocol::wire::ProtocolError;
use qpc_core::protocol::{run_cycle_pair, CycleReport, Mode, Session};
use qpc_core::sourcesim::generate;
use qpc_core::sync::run_sync;
use qpc_core::timetag::{
    coincidence_histogram, delay_grid, read_qtt, write_qtt, DetectorId, Party, TagEvent,
    TagStream, TimeTick,
};

#[derive(Parser)]
#[command(name = "qpc", version, about = "Hybrid QKD/post-quantum key establishment over a simulated entangled-pair source")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Options shared by every command that runs the two-party protocol.
#[derive(Args, Clone)]
struct ProtoOpts {
    /// System config TOML; defaults to the desk-scale configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pre-shared key file (see psk-gen); a built-in test PSK is derived
    /// from the seed when omitted.
    #[arg(long)]
    psk: Option<PathBuf>,
    /// Mapping table file (see table-gen); defaults to the standard
    /// four-entry table.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restore the full-scale source settings (10.3 dB arms, 200 s).
    #[arg(long)]
    paper_scale: bool,
    /// Write per-codeblock timing rows (mean +- std over --repeat runs).
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Repeat count for timing statistics.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a correlated pair of tag files from the source model.
    Sim {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paper_scale: bool,
        /// Output tag file for the Alice stream.
        #[arg(long, default_value = "alice.qtt")]
        out_alice: PathBuf,
        /// Output tag file for the Bob stream.
        #[arg(long, default_value = "bob.qtt")]
        out_bob: PathBuf,
    },
    /// Synchronize two tag files; emit the per-round correction trace and
    /// before/after coincidence histograms.
    Sync {
        alice: PathBuf,
        bob: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Correction trace output (TSV).
        #[arg(long, default_value = "sync_trace.tsv")]
        trace_out: PathBuf,
        /// Histogram output (TSV).
        #[arg(long, default_value = "sync_hist.tsv")]
        hist_out: PathBuf,
    },
    /// One full hybrid cycle with both parties in-process.
    Cycle {
        #[command(flatten)]
        opts: ProtoOpts,
        /// Message file to transfer; a demo payload when omitted.
        #[arg(long)]
        message: Option<PathBuf>,
        /// Pin the sequence identifier (e.g. 00); uniform random otherwise.
        #[arg(long)]
        is_id: Option<String>,
    },
    /// Standard-QKD baseline cycle (pad-only message encryption,
    /// cleartext classical traffic).
    Baseline {
        #[command(flatten)]
        opts: ProtoOpts,
        #[arg(long)]
        message: Option<PathBuf>,
    },
    /// Run the data receiver, listening for the sender over TCP.
    Alice {
        /// Listen address, e.g. 127.0.0.1:7001.
        #[arg(long)]
        listen: String,
        #[arg(long, value_parser = parse_mode, default_value = "hybrid")]
        mode: Mode,
        #[command(flatten)]
        opts: ProtoOpts,
    },
    /// Run the data sender, connecting to the receiver over TCP.
    Bob {
        /// Receiver address, host:port.
        #[arg(long)]
        connect: String,
        #[arg(long, value_parser = parse_mode, default_value = "hybrid")]
        mode: Mode,
        #[arg(long)]
        message: Option<PathBuf>,
        #[arg(long)]
        is_id: Option<String>,
        #[command(flatten)]
        opts: ProtoOpts,
    },
    /// Timing-error sweep: error rate and secret-key rate vs jitter.
    Fig4 {
        #[arg(long, default_value = "fig4.tsv")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synchronization demo: histograms before/after clock recovery.
    Fig5 {
        #[arg(long, default_value = "fig5.tsv")]
        out: PathBuf,
        /// Per-round correction trace output.
        #[arg(long)]
        rounds_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Overhead comparison: per-codeblock times, hybrid vs baseline.
    Table2 {
        #[arg(long, default_value = "table2.tsv")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        repeat: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a partitioned pre-shared key file.
    PskGen {
        #[arg(long, default_value = "keys.psk")]
        out: PathBuf,
        #[arg(long, default_value_t = 4096)]
        auth_bytes: usize,
        #[arg(long, default_value_t = 4096)]
        aes_bytes: usize,
        #[arg(long, default_value_t = 64)]
        pi_bytes: usize,
        /// Reproducible file from a seed; OS entropy when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the standard mapping table file.
    TableGen {
        #[arg(long, default_value = "mapping.table")]
        out: PathBuf,
    },
    /// Tag-file tooling.
    Tags {
        #[command(subcommand)]
        cmd: TagsCmd,
    },
}

#[derive(Subcommand)]
enum TagsCmd {
    /// Print records from a tag file.
    Dump {
        file: PathBuf,
        #[arg(long, default_value_t = 20)]
        limit: usize,
    },
    /// Convert between the binary tag format and tab-separated text
    /// (direction chosen from the input format).
    Convert { input: PathBuf, output: PathBuf },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "hybrid" => Ok(Mode::Hybrid),
        "baseline" => Ok(Mode::Baseline),
        other => Err(format!("unknown mode {other:?} (hybrid|baseline)")),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<ProtocolError>()
                .map(|_| 2)
                .or_else(|| e.downcast_ref::<ConfigFailure>().map(|_| 3))
                .unwrap_or(1);
            ExitCode::from(code)
        }
    }
}

/// Marker for failures that should exit with code 3.
#[derive(Debug)]
struct ConfigFailure(String);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigFailure(msg.into()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Command::Sim {
            config,
            seed,
            paper_scale,
            out_alice,
            out_bob,
        } => {
            let mut source = load_config(config.as_deref(), seed, paper_scale)?.source;
            if let Some(seed) = seed {
                source.seed = seed;
            }
            let (alice, bob, truth) = generate(&source).map_err(|e| config_err(e.to_string()))?;
            write_stream(&alice, &out_alice)?;
            write_stream(&bob, &out_bob)?;
            println!(
                "wrote {} ({} events) and {} ({} events); {} coincident pairs",
                out_alice.display(),
                alice.len(),
                out_bob.display(),
                bob.len(),
                truth.coincident_pairs.len()
            );
            Ok(())
        }

        Command::Sync {
            alice,
            bob,
            config,
            trace_out,
            hist_out,
        } => {
            let cfg = load_config(config.as_deref(), None, false)?;
            let a = read_stream(&alice)?;
            let b = read_stream(&bob)?;
            let grid = delay_grid(
                TimeTick::from_ns(-50),
                TimeTick::from_ns(50),
                TimeTick::from_ps(500),
            );
            let window = TimeTick::from_ps(500);
            let pre = coincidence_histogram(&a, &b, &grid, window);
            let (aligned, rounds) = run_sync(&a, &b, &cfg.sync)?;
            let post = coincidence_histogram(&a, &aligned, &grid, window);

            let mut trace = String::from("round\ttau_ps\ttau_accum_ps\n");
            for s in &rounds {
                trace.push_str(&format!(
                    "{}\t{}\t{}\n",
                    s.round,
                    s.last_tau.ps(),
                    s.tau_accum.ps()
                ));
            }
            fs::write(&trace_out, trace)?;
            let mut hist = String::from("delay_ps\tpre_count\tpost_count\n");
            for ((d, p), (_, q)) in pre.iter().zip(&post) {
                hist.push_str(&format!("{}\t{p}\t{q}\n", d.ps()));
            }
            fs::write(&hist_out, hist)?;
            let total: i64 = rounds.last().map(|s| s.tau_accum.ps()).unwrap_or(0);
            println!(
                "{} rounds, cumulative correction {total} ps; wrote {} and {}",
                rounds.len(),
                trace_out.display(),
                hist_out.display()
            );
            Ok(())
        }

        Command::Cycle { opts, message, is_id } => {
            run_local_cycles(Mode::Hybrid, &opts, message.as_deref(), is_id.as_deref())
        }
        Command::Baseline { opts, message } => {
            run_local_cycles(Mode::Baseline, &opts, message.as_deref(), None)
        }

        Command::Alice { listen, mode, opts } => {
            let mut session = build_session(Party::Alice, mode, &opts)?;
            let listener = TcpListener::bind(&listen)
                .with_context(|| format!("binding {listen}"))?;
            println!("listening on {listen}");
            let (stream, peer) = listener.accept()?;
            println!("sender connected from {peer}");
            let mut transport = TcpTransport::new(stream);
            let report = session.run_cycle_alice(&mut transport)?;
            print_report(Party::Alice, &report);
            if let Some(path) = &opts.metrics_out {
                write_metrics(path, &[("alice", mode_name(mode), report.metrics.clone())])?;
            }
            Ok(())
        }

        Command::Bob {
            connect,
            mode,
            message,
            is_id,
            opts,
        } => {
            let mut session = build_session(Party::Bob, mode, &opts)?;
            session.is_choice = parse_is_id(is_id.as_deref())?;
            let payload = load_message(message.as_deref())?;
            let stream = TcpStream::connect(&connect)
                .with_context(|| format!("connecting to {connect}"))?;
            let mut transport = TcpTransport::new(stream);
            let report = session.run_cycle_bob(&mut transport, &payload)?;
            print_report(Party::Bob, &report);
            if let Some(path) = &opts.metrics_out {
                write_metrics(path, &[("bob", mode_name(mode), report.metrics.clone())])?;
            }
            Ok(())
        }

        Command::Fig4 { out, seed } => {
            let mut spec = Fig4Spec::default();
            if let Some(seed) = seed {
                spec.source.seed = seed;
            }
            let rows = run_fig4(&spec)?;
            fs::write(&out, fig4_table(&rows))?;
            println!("wrote {} ({} grid points)", out.display(), rows.len());
            for r in &rows {
                println!(
                    "  jitter {:>5} ps  qber {:.4}  skr {:>8.2} bits/s",
                    r.jitter_ps, r.qber, r.skr_bits_per_s
                );
            }
            Ok(())
        }

        Command::Fig5 { out, rounds_out, seed } => {
            let mut spec = Fig5Spec::default();
            if let Some(seed) = seed {
                spec.source.seed = seed;
            }
            let result = run_fig5(&spec)?;
            fs::write(&out, fig5_table(&result))?;
            if let Some(path) = rounds_out {
                fs::write(&path, fig5_round_table(&result))?;
            }
            let peak_pre = result.pre.iter().max_by_key(|&&(_, c)| c).unwrap();
            let peak_post = result.post.iter().max_by_key(|&&(_, c)| c).unwrap();
            println!(
                "wrote {}; pre-sync peak {} at {} ps, post-sync peak {} at {} ps, \
                 residuals within one bin for {:.1}% of rounds",
                out.display(),
                peak_pre.1,
                peak_pre.0.ps(),
                peak_post.1,
                peak_post.0.ps(),
                result.residual_within_bin * 100.0
            );
            Ok(())
        }

        Command::Table2 { out, repeat, seed } => {
            let mut spec = Table2Spec::default();
            spec.repeats = repeat;
            if let Some(seed) = seed {
                spec.config.source.seed = seed;
            }
            let result = run_table2(&spec)?;
            fs::write(&out, table2_table(&result))?;
            println!(
                "wrote {}; overhead ratio alice {:.4}, bob {:.4}",
                out.display(),
                result.overhead_ratio[0],
                result.overhead_ratio[1]
            );
            Ok(())
        }

        Command::PskGen {
            out,
            auth_bytes,
            aes_bytes,
            pi_bytes,
            seed,
        } => {
            let bytes = generate_psk(auth_bytes, aes_bytes, pi_bytes, seed);
            fs::write(&out, &bytes)?;
            println!(
                "wrote {} ({} auth + {} aes + {} mask bytes)",
                out.display(),
                auth_bytes,
                aes_bytes,
                pi_bytes
            );
            Ok(())
        }

        Command::TableGen { out } => {
            let table = MappingTable::standard_four();
            fs::write(&out, table.to_table_string())?;
            println!(
                "wrote {} ({} entries, width {})",
                out.display(),
                table.len(),
                table.width()
            );
            Ok(())
        }

        Command::Tags { cmd } => match cmd {
            TagsCmd::Dump { file, limit } => {
                let stream = read_stream(&file)?;
                println!("party {}, {} events", stream.party(), stream.len());
                for ev in stream.events().iter().take(limit) {
                    println!("{}\tD{}", ev.tick.ps(), ev.detector.code());
                }
                if stream.len() > limit {
                    println!("... {} more", stream.len() - limit);
                }
                Ok(())
            }
            TagsCmd::Convert { input, output } => {
                let bytes = fs::read(&input)?;
                if bytes.starts_with(b"QTT1") {
                    let stream =
                        read_qtt(&bytes[..]).map_err(|e| config_err(e.to_string()))?;
                    let mut text = format!("# qpc tags v1\nparty {}\n", stream.party());
                    for ev in stream.events() {
                        text.push_str(&format!("{}\t{}\n", ev.tick.ps(), ev.detector.code()));
                    }
                    fs::write(&output, text)?;
                } else {
                    let text = String::from_utf8(bytes)
                        .map_err(|_| config_err("text tag file is not UTF-8"))?;
                    let stream = parse_text_tags(&text)?;
                    write_stream(&stream, &output)?;
                }
                println!("wrote {}", output.display());
                Ok(())
            }
        },
    }
}

fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    paper_scale: bool,
) -> anyhow::Result<SystemConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(|e| config_err(format!("{e:#}")))?;
            SystemConfig::from_toml(&text).map_err(|e| config_err(e.to_string()))?
        }
        None => SystemConfig::default(),
    };
    if paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(seed) = seed {
        cfg.source.seed = seed;
    }
    Ok(cfg)
}

fn build_session(role: Party, mode: Mode, opts: &ProtoOpts) -> anyhow::Result<Session> {
    let cfg = load_config(opts.config.as_deref(), opts.seed, opts.paper_scale)?;
    let table = match &opts.table {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(e.to_string()))?;
            MappingTable::from_table_string(&text).map_err(|e| config_err(e.to_string()))?
        }
        None => MappingTable::standard_four(),
    };
    let ledger = match &opts.psk {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| config_err(e.to_string()))?;
            PskLedger::read_from(&bytes[..]).map_err(|e| config_err(e.to_string()))?
        }
        None => {
            let bytes = qpc_core::protocol::default_psk(Some(cfg.source.seed));
            PskLedger::read_from(&bytes[..]).expect("built-in psk parses")
        }
    };
    Ok(Session::new(role, mode, cfg, table, ledger))
}

fn run_local_cycles(
    mode: Mode,
    opts: &ProtoOpts,
    message: Option<&Path>,
    is_id: Option<&str>,
) -> anyhow::Result<()> {
    let payload = load_message(message)?;
    let is_choice = parse_is_id(is_id)?;
    let mut collected: Vec<(&str, &str, CycleMetrics)> = Vec::new();
    let repeats = opts.repeat.max(1);
    for rep in 0..repeats {
        let mut rep_opts = opts.clone();
        if let Some(seed) = opts.seed {
            rep_opts.seed = Some(seed.wrapping_add(rep as u64));
        } else if repeats > 1 {
            rep_opts.seed = Some(SystemConfig::default().source.seed + rep as u64);
        }
        let mut alice = build_session(Party::Alice, mode, &rep_opts)?;
        let mut bob = build_session(Party::Bob, mode, &rep_opts)?;
        bob.is_choice = is_choice.clone();
        let out = run_cycle_pair(&mut alice, &mut bob, &payload);
        let a = out.alice?;
        let b = out.bob?;
        if rep == 0 {
            print_report(Party::Bob, &b);
            print_report(Party::Alice, &a);
            let delivered = a.delivered.as_deref().unwrap_or_default();
            if delivered != payload {
                bail!("delivered message does not match input");
            }
            println!("message delivered intact ({} bytes)", delivered.len());
        }
        collected.push(("alice", mode_name(mode), a.metrics));
        collected.push(("bob", mode_name(mode), b.metrics));
    }
    if let Some(path) = &opts.metrics_out {
        write_metrics(path, &collected)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Hybrid => "hybrid",
        Mode::Baseline => "baseline",
    }
}

fn print_report(party: Party, report: &CycleReport) {
    let qber = report
        .qber
        .map(|q| format!("{q:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "{party}: {} key sessions, qber {qber}, {} secret bits grown ({:.1} bits/s), cycle {:.2}s",
        report.sessions, report.key_bits_grown, report.skr, report.metrics.total_seconds
    );
}

/// One row per codeblock with mean and standard deviation over the runs
/// recorded for each (party, mode) pair.
fn write_metrics(path: &Path, runs: &[(&str, &str, CycleMetrics)]) -> anyhow::Result<()> {
    let mut out = String::from("codeblock\tmode\tparty\tmean_s\tstd_s\n");
    let mut groups: Vec<(&str, &str)> = runs.iter().map(|(p, m, _)| (*p, *m)).collect();
    groups.sort_unstable();
    groups.dedup();
    for (party, mode) in groups {
        let group: Vec<&CycleMetrics> = runs
            .iter()
            .filter(|(p, m, _)| *p == party && *m == mode)
            .map(|(_, _, metrics)| metrics)
            .collect();
        for block in Codeblock::ALL {
            let xs: Vec<f64> = group.iter().map(|m| m.get(block)).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            out.push_str(&format!(
                "{}\t{mode}\t{party}\t{mean:.6}\t{std:.6}\n",
                block.label()
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_message(path: Option<&Path>) -> anyhow::Result<Vec<u8>> {
    match path {
        Some(p) => fs::read(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(b"qpc demo message: sixty-four bytes of entirely mundane payload!".to_vec()),
    }
}

fn parse_is_id(s: Option<&str>) -> anyhow::Result<Option<Vec<u8>>> {
    match s {
        None => Ok(None),
        Some(s) => {
            let bits: Result<Vec<u8>, _> = s
                .chars()
                .map(|c| match c {
                    '0' => Ok(0u8),
                    '1' => Ok(1u8),
                    _ => Err(config_err(format!("identifier digit {c:?}"))),
                })
                .collect();
            Ok(Some(bits?))
        }
    }
}

fn write_stream(stream: &TagStream, path: &Path) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_qtt(stream, &mut buf).map_err(|e| config_err(e.to_string()))?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn read_stream(path: &Path) -> anyhow::Result<TagStream> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| config_err(format!("{e:#}")))?;
    read_qtt(&bytes[..]).map_err(|e| config_err(e.to_string()))
}

fn parse_text_tags(text: &str) -> anyhow::Result<TagStream> {
    let mut party = None;
    let mut events = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(p) = line.strip_prefix("party") {
            party = Some(match p.trim() {
                "alice" => Party::Alice,
                "bob" => Party::Bob,
                other => return Err(config_err(format!("unknown party {other:?}"))),
            });
            continue;
        }
        let mut cols = line.split_whitespace();
        let tick: i64 = cols
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| config_err(format!("bad tick in line {line:?}")))?;
        let det: u8 = cols
            .next()
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| config_err(format!("bad detector in line {line:?}")))?;
        events.push(TagEvent {
            tick: TimeTick::from_ps(tick),
            detector: DetectorId::from_code(det)
                .ok_or_else(|| config_err(format!("detector code {det}")))?,
        });
    }
    let party = party.ok_or_else(|| config_err("text tag file missing party line"))?;
    TagStream::from_unsorted(party, events).map_err(|e| config_err(e.to_string()))
}
