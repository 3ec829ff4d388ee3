use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use protonet::bench::{
    self, process_items, run_models, stage_handler, BenchmarkConfig, PipelineModel,
};
use protonet::service::{ExecutionMode, ServiceNode};
use protonet::topology::{Network, TopologySpec, TreeShape};
use protonet::trace::TraceKind;
use protonet::transmission::TopologyNode;
use protonet::{NodeRole, RuntimeConfig};

const SWEEP_LEVELS: [u64; 4] = [1_000_000, 100_000, 10_000, 1_000];

#[derive(Parser)]
#[command(name = "protonet", version, about = "Drive the protonet runtime: benchmarks, dumps, health checks")]
struct Cli {
    /// Upper bound for every protocol wait, in milliseconds.
    #[arg(long, global = true)]
    timeout_ms: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the execution models and write the results table.
    Bench(BenchArgs),
    /// Print the connecting network.
    Topo(TopoArgs),
    /// Print every node's service registry after registration.
    Registry(TopoArgs),
    /// Health-check every node from the Master.
    Tick(TickArgs),
    /// Run one item through each model on the evaluation network and print traces.
    Demo(DemoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum DumpFormat {
    Text,
    Json,
}

#[derive(Args)]
struct BenchArgs {
    /// `all` or a comma-separated list of MONOTONE, SEQUENCE, PIPELINE, SUPER_PIPELINE.
    #[arg(long, default_value = "all")]
    model: String,
    /// Per-stage FMI counts `a,b,c`.
    #[arg(long, value_parser = parse_fmi)]
    fmi: Option<[u64; 3]>,
    #[arg(long, default_value_t = 100)]
    items: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Repeat the run for per-service FMI levels 1e6, 1e5, 1e4, 1e3 with Service2 doubled.
    #[arg(long, conflicts_with = "fmi")]
    sweep: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: TableFormat,
}

#[derive(Args)]
struct TopoArgs {
    /// JSON list of node records `{id, role, parent, services}`.
    #[arg(long, conflicts_with = "nodes")]
    config: Option<PathBuf>,
    /// Generate a random tree of this many nodes instead of the 7-node default.
    #[arg(long)]
    nodes: Option<usize>,
    /// Seed for generated trees.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    format: DumpFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TickArgs {
    #[command(flatten)]
    topo: TopoArgs,
    /// Suspend this node (by config id) before the check, to see a failure.
    #[arg(long)]
    suspend: Option<String>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, value_parser = parse_fmi, default_value = "1000000,2000000,1000000")]
    fmi: [u64; 3],
}

fn parse_fmi(s: &str) -> Result<[u64; 3], String> {
    let parts: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [a, b, c] if parts.iter().all(|&n| n > 0) => Ok([*a, *b, *c]),
        [_, _, _] => Err("FMI counts must be positive".into()),
        _ => Err(format!("expected three comma-separated counts, got {}", parts.len())),
    }
}

fn parse_models(s: &str) -> Result<Vec<PipelineModel>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(PipelineModel::ALL.to_vec());
    }
    let mut models = s
        .split(',')
        .map(|m| m.parse::<PipelineModel>().map_err(anyhow::Error::msg))
        .collect::<Result<Vec<_>>>()?;
    models.sort();
    models.dedup();
    Ok(models)
}

fn runtime_config(timeout_ms: Option<u64>) -> RuntimeConfig {
    match timeout_ms {
        Some(ms) => RuntimeConfig::default().with_timeouts(Duration::from_millis(ms)),
        None => RuntimeConfig::default(),
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn load_spec(args: &TopoArgs) -> Result<TopologySpec> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return TopologySpec::from_json(&text).with_context(|| format!("in {}", path.display()));
    }
    Ok(match args.nodes {
        Some(0) => bail!("--nodes must be at least 1"),
        Some(n) => TopologySpec::random_tree(n, args.seed, TreeShape::Recursive),
        None => TopologySpec::binary_tree(7),
    })
}

fn bench(args: BenchArgs, timeout_ms: Option<u64>) -> Result<()> {
    let models = parse_models(&args.model)?;
    let mut cfg = BenchmarkConfig {
        items: args.items,
        repeats: args.repeats,
        ..BenchmarkConfig::default()
    };
    if let Some(ms) = timeout_ms {
        cfg.timeout = Duration::from_millis(ms);
    }
    let fmis: Vec<[u64; 3]> = if args.sweep {
        SWEEP_LEVELS.iter().map(|&n| [n, 2 * n, n]).collect()
    } else {
        vec![args.fmi.unwrap_or(cfg.fmi)]
    };
    let mut results = Vec::new();
    for fmi in fmis {
        cfg.fmi = fmi;
        log::info!("running {models:?} with fmi {fmi:?}");
        results.extend(run_models(&models, &cfg)?);
    }
    let mut buf = Vec::new();
    match args.format {
        TableFormat::Csv => bench::write_csv(&bench::table(&results), &mut buf)?,
        TableFormat::Json => {
            bench::write_json(&results, &mut buf)?;
            buf.push(b'\n');
        }
    }
    emit(args.out.as_deref(), &buf)
}

fn topo_json(node: &TopologyNode, net: &Network) -> Value {
    json!({
        "address": node.address.to_string(),
        "id": net.id_of(node.address),
        "role": node.role.as_str(),
        "state": node.state.as_str(),
        "children": node.children.iter().map(|c| topo_json(c, net)).collect::<Vec<_>>(),
    })
}

fn topo_text(node: &TopologyNode, net: &Network, depth: usize, out: &mut String) {
    out.push_str(&format!(
        "{}{} [{}] {} {}\n",
        "  ".repeat(depth),
        node.address,
        net.id_of(node.address).unwrap_or("?"),
        node.role,
        node.state
    ));
    for c in &node.children {
        topo_text(c, net, depth + 1, out);
    }
}

fn topo(args: TopoArgs, timeout_ms: Option<u64>) -> Result<()> {
    let spec = load_spec(&args)?;
    let net = Network::start(&spec, runtime_config(timeout_ms))?;
    let tree = net.runtime().topology().context("network has no Master")?;
    let bytes = match args.format {
        DumpFormat::Json => format!("{:#}\n", topo_json(&tree, &net)).into_bytes(),
        DumpFormat::Text => {
            let mut s = String::new();
            topo_text(&tree, &net, 0, &mut s);
            s.into_bytes()
        }
    };
    net.shutdown()?;
    emit(args.out.as_deref(), &bytes)
}

fn registry(args: TopoArgs, timeout_ms: Option<u64>) -> Result<()> {
    let spec = load_spec(&args)?;
    let net = Network::start(&spec, runtime_config(timeout_ms))?;
    let mut text = String::new();
    let mut rows = Vec::new();
    for (id, address) in net.ids() {
        let node = net.node(id).expect("built node");
        let role = node.node().role();
        let descs = node.registry().all();
        text.push_str(&format!("{address} [{id}] {role} services={}\n", descs.len()));
        let mut services = Vec::new();
        for d in descs {
            let route: Vec<String> = d.route.iter().map(ToString::to_string).collect();
            text.push_str(&format!(
                "  {} provider={} route={} mode={} reentrant={}\n",
                d.name,
                d.provider,
                route.join(","),
                d.mode,
                d.reentrant
            ));
            services.push(json!({
                "name": d.name,
                "provider": d.provider.to_string(),
                "route": route,
                "mode": d.mode.to_string(),
                "reentrant": d.reentrant,
            }));
        }
        rows.push(json!({"address": address.to_string(), "id": id, "role": role.as_str(), "services": services}));
    }
    net.shutdown()?;
    let bytes = match args.format {
        DumpFormat::Json => format!("{:#}\n", Value::Array(rows)).into_bytes(),
        DumpFormat::Text => text.into_bytes(),
    };
    emit(args.out.as_deref(), &bytes)
}

fn tick(args: TickArgs, timeout_ms: Option<u64>) -> Result<()> {
    let spec = load_spec(&args.topo)?;
    let net = Network::start(&spec, runtime_config(timeout_ms))?;
    if let Some(id) = &args.suspend {
        let node = net.node(id).with_context(|| format!("no node {id:?}"))?;
        node.node().set_router_suspended(true);
    }
    let master = net.master().address();
    let mut lines = String::new();
    let mut failed = Vec::new();
    for (id, address) in net.ids() {
        let started = Instant::now();
        match net.runtime().tick(master, *address) {
            Ok(r) => lines.push_str(&format!(
                "OK {address} [{id}] state={} hops={} inbound={} delivered={} rtt_us={}\n",
                r.state,
                r.request_hops,
                r.inbound_len,
                r.delivered_len,
                started.elapsed().as_micros()
            )),
            Err(e) => {
                lines.push_str(&format!("UNREACHABLE {address} [{id}] {e}\n"));
                failed.push(id.clone());
            }
        }
    }
    if let Some(id) = &args.suspend {
        net.node(id).expect("checked").node().set_router_suspended(false);
    }
    net.shutdown()?;
    emit(args.topo.out.as_deref(), lines.as_bytes())?;
    if !failed.is_empty() {
        bail!("{} of {} nodes unreachable: {}", failed.len(), net.ids().len(), failed.join(", "));
    }
    Ok(())
}

fn print_trace(net: &Network) {
    for rec in net.runtime().trace().snapshot() {
        if matches!(rec.kind, TraceKind::Req | TraceKind::Ack | TraceKind::Route | TraceKind::Outlet) {
            let id = net.id_of(rec.node).unwrap_or("?");
            println!("  {rec} [{id}]");
        }
    }
}

fn demo(args: DemoArgs, timeout_ms: Option<u64>) -> Result<()> {
    let spec = TopologySpec::evaluation(args.fmi, false);
    let net = Network::start(&spec, runtime_config(timeout_ms))?;
    let mut tree = String::new();
    topo_text(&net.runtime().topology().context("network has no Master")?, &net, 0, &mut tree);
    print!("{tree}");
    let cfg = BenchmarkConfig {
        fmi: args.fmi,
        items: 1,
        repeats: 1,
        ..BenchmarkConfig::default()
    };
    let mut extra: Option<ServiceNode> = None;
    for model in PipelineModel::ALL {
        if model == PipelineModel::SuperPipeline {
            let s2b = ServiceNode::attach(net.runtime(), net.master().node(), NodeRole::Server)?;
            s2b.provide("Service2", ExecutionMode::Function, false, stage_handler(args.fmi[1]))?;
            net.master().run_registration()?;
            println!("attached second Service2 provider {}", s2b.address());
            extra = Some(s2b);
        }
        net.runtime().trace().clear();
        let started = Instant::now();
        let out = process_items(model, (model != PipelineModel::Monotone).then_some(&net), &cfg)?;
        let ms = started.elapsed().as_secs_f64() * 1000.0;
        let (item, value) = out.first().copied().context("no item came back")?;
        println!("== {model}: item {item} -> {value} in {ms:.2} ms");
        print_trace(&net);
    }
    drop(extra);
    net.shutdown()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Bench(a) => bench(a, cli.timeout_ms),
        Command::Topo(a) => topo(a, cli.timeout_ms),
        Command::Registry(a) => registry(a, cli.timeout_ms),
        Command::Tick(a) => tick(a, cli.timeout_ms),
        Command::Demo(a) => demo(a, cli.timeout_ms),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
