//! `gridledger` command-line tool.
//!
//! Exit codes: 0 success, 1 chain verification failure, 2 usage, parse or
//! I/O error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgGroup, Parser, Subcommand};

use gridledger::chain::{verify_export, Chain, RecordKind, TraceQuery};
use gridledger::credit::CreditReason;
use gridledger::crypto::{Digest, PublicKey};
use gridledger::datastore::DataStore;
use gridledger::simnet::{new_sim, Scenario, SimConfig, SimReport};

#[derive(Parser)]
#[command(name = "gridledger", version, about = "Grid data ledger simulator and chain tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its report files.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's `config seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "GRIDLEDGER_OUT", default_value = "gridledger-out")]
        out: PathBuf,
    },
    /// List the blocks of a chain export.
    Inspect {
        chain: PathBuf,
        #[arg(long, default_value_t = 1)]
        tick_seconds: u64,
    },
    /// Check every link, root and signature of a chain export.
    Verify { chain: PathBuf },
    /// Lineage of a payload digest or an uploader key.
    #[command(group(ArgGroup::new("selector").required(true).args(["digest", "key"])))]
    Trace {
        chain: PathBuf,
        #[arg(long)]
        digest: Option<String>,
        #[arg(long)]
        key: Option<String>,
    },
    /// Per-node credit totals from a report directory.
    Credits {
        dir: PathBuf,
        /// Print the raw audit log instead.
        #[arg(long)]
        log: bool,
    },
    /// Role assignment from a report directory.
    Roles {
        dir: PathBuf,
        /// Every epoch, not just the last.
        #[arg(long)]
        all: bool,
    },
    /// Replication audit of the data store in a report directory.
    Audit { dir: PathBuf },
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure { code: 2, err }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, seed, out } => run(&scenario, seed, &out),
        Command::Inspect { chain, tick_seconds } => inspect(&chain, tick_seconds),
        Command::Verify { chain } => verify(&chain),
        Command::Trace { chain, digest, key } => trace(&chain, digest.as_deref(), key.as_deref()),
        Command::Credits { dir, log } => credits(&dir, log),
        Command::Roles { dir, all } => roles(&dir, all),
        Command::Audit { dir } => audit(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn report_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        bail!("report directory {} does not exist", dir.display());
    }
    Ok(())
}

fn write_report(report: &SimReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let files = [
        ("chain.txt", report.chain_export()),
        ("credits.tsv", report.credit_log()),
        ("trace.tsv", report.trace_text()),
        ("metrics.txt", report.metrics_text()),
        ("roles.tsv", report.roles_text()),
        ("nodes.tsv", nodes_text(report)),
        ("quarantine.tsv", report.quarantine_text()),
        ("faults.tsv", report.faults_text()),
        ("audit.txt", report.audit_text()),
    ];
    for (name, body) in files {
        let path = out.join(name);
        fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn nodes_text(report: &SimReport) -> String {
    let mut out = String::from("node_id\tkind\tassessment\tpublic_key\n");
    for p in report.ledger.profiles() {
        let kind = if p.role == gridledger::credit::Role::External {
            "external"
        } else {
            "committee"
        };
        let _ = writeln!(out, "{}\t{}\t{}\t{}", p.node_id, kind, p.assessment, p.public_key.to_hex());
    }
    out
}

fn run(path: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let text = read(path)?;
    let scenario = Scenario::parse(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let mut config = SimConfig::from_scenario(&scenario).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let mut sim = new_sim(config, &scenario).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let report = sim.run_scenario();
    write_report(&report, out)?;
    let store_dir = out.join("store");
    if store_dir.exists() {
        fs::remove_dir_all(&store_dir).with_context(|| format!("cannot clear {}", store_dir.display()))?;
    }
    sim.store()
        .dump(&store_dir)
        .with_context(|| format!("cannot write {}", store_dir.display()))?;
    print!("{}", report.metrics_text());
    Ok(())
}

fn load_chain(path: &Path) -> Result<Chain> {
    Chain::import(&read(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

fn inspect(path: &Path, tick_seconds: u64) -> Result<(), Failure> {
    let chain = load_chain(path)?;
    let cfg = SimConfig {
        tick_length_seconds: tick_seconds.max(1),
        ..SimConfig::default()
    };
    println!("index\ttick\ttime\trecords\trecorder\tdigest");
    for (i, b) in chain.blocks().iter().enumerate() {
        let t = b.header.timestamp_tick;
        println!(
            "{i}\t{t}\t{}\t{}\t{}\t{}",
            cfg.render_tick(t),
            b.records.len(),
            b.header.recorder_public_key.short(),
            b.digest()
        );
    }
    Ok(())
}

fn verify(path: &Path) -> Result<(), Failure> {
    let text = read(path)?;
    let result = verify_export(&text).with_context(|| format!("cannot parse {}", path.display()))?;
    match result {
        Ok(()) => {
            let n = text.lines().filter(|l| !l.trim().is_empty()).count();
            println!("ok: {n} blocks verify");
            Ok(())
        }
        Err(v) => {
            println!("violation at block {}: {}", v.index, v.reason);
            Err(Failure {
                code: 1,
                err: anyhow!("chain does not verify"),
            })
        }
    }
}

/// Node ids from a `nodes.tsv` next to the chain, if present.
fn node_names(chain_path: &Path) -> BTreeMap<PublicKey, String> {
    let mut names = BTreeMap::new();
    let Some(dir) = chain_path.parent() else {
        return names;
    };
    if let Ok(text) = fs::read_to_string(dir.join("nodes.tsv")) {
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            if let [id, _, _, key] = f[..] {
                if let Ok(k) = PublicKey::from_hex(key) {
                    names.insert(k, format!("node:{id}"));
                }
            }
        }
    }
    names
}

fn trace(path: &Path, digest: Option<&str>, key: Option<&str>) -> Result<(), Failure> {
    let query = match (digest, key) {
        (Some(d), None) => TraceQuery::Digest(Digest::from_hex(d).map_err(|_| anyhow!("--digest expects 64 hex characters"))?),
        (None, Some(k)) => TraceQuery::Uploader(PublicKey::from_hex(k).map_err(|_| anyhow!("--key expects 128 hex characters"))?),
        _ => return Err(anyhow!("give exactly one of --digest or --key").into()),
    };
    let chain = load_chain(path)?;
    let entries = chain.trace(&query);
    if entries.is_empty() {
        println!("no records");
        return Ok(());
    }
    let names = node_names(path);
    let name = |k: &PublicKey| names.get(k).cloned().unwrap_or_else(|| k.short());
    println!("block\trecord\tkind\tparties\tdigest\ttick");
    for e in entries {
        let r = &e.record;
        let (parties, digest) = match &r.metadata.kind {
            RecordKind::GridData => (name(&r.uploader), r.payload_digest),
            RecordKind::ShareTransaction {
                receiver,
                shared_digest,
            } => (format!("{} -> {}", name(&r.uploader), name(receiver)), *shared_digest),
        };
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.block_index,
            e.record_index,
            r.metadata.kind.name(),
            parties,
            digest,
            r.metadata.created_tick
        );
    }
    Ok(())
}

fn credits(dir: &Path, log: bool) -> Result<(), Failure> {
    report_dir(dir)?;
    let text = read(&dir.join("credits.tsv"))?;
    if log {
        print!("{text}");
        return Ok(());
    }
    // node -> (credit, events)
    let mut totals: BTreeMap<u32, (i64, usize)> = BTreeMap::new();
    if let Ok(nodes) = fs::read_to_string(dir.join("nodes.tsv")) {
        for line in nodes.lines().skip(1) {
            if let Some(Ok(id)) = line.split('\t').next().map(str::parse) {
                totals.insert(id, (0, 0));
            }
        }
    }
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || anyhow!("credits.tsv line {}: malformed", i + 1);
        let f: Vec<&str> = line.split('\t').collect();
        let [_, id, delta, reason] = f[..] else {
            return Err(bad().into());
        };
        let id: u32 = id.parse().map_err(|_| bad())?;
        let delta: i64 = delta.parse().map_err(|_| bad())?;
        CreditReason::parse(reason).ok_or_else(bad)?;
        let e = totals.entry(id).or_default();
        e.0 += delta;
        e.1 += 1;
    }
    println!("node_id\tcredit\tevents");
    for (id, (credit, events)) in totals {
        println!("{id}\t{credit}\t{events}");
    }
    Ok(())
}

fn roles(dir: &Path, all: bool) -> Result<(), Failure> {
    report_dir(dir)?;
    let text = read(&dir.join("roles.tsv"))?;
    let mut rows: Vec<(u64, u64, u32, String)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || anyhow!("roles.tsv line {}: malformed", i + 1);
        let f: Vec<&str> = line.split('\t').collect();
        let [epoch, tick, id, role] = f[..] else {
            return Err(bad().into());
        };
        rows.push((
            epoch.parse().map_err(|_| bad())?,
            tick.parse().map_err(|_| bad())?,
            id.parse().map_err(|_| bad())?,
            role.to_string(),
        ));
    }
    let last = rows.iter().map(|r| r.0).max().unwrap_or(0);
    rows.sort();
    if all {
        println!("epoch\ttick\tnode_id\trole");
        for (epoch, tick, id, role) in rows {
            println!("{epoch}\t{tick}\t{id}\t{role}");
        }
    } else {
        println!("node_id\trole");
        for (_, _, id, role) in rows.into_iter().filter(|r| r.0 == last) {
            println!("{id}\t{role}");
        }
    }
    Ok(())
}

fn audit(dir: &Path) -> Result<(), Failure> {
    report_dir(dir)?;
    let store_dir = dir.join("store");
    let store = DataStore::load(&store_dir).with_context(|| format!("cannot load {}", store_dir.display()))?;
    print!("{}", store.audit().render());
    Ok(())
}
