use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{ArgGroup, Args, Parser, Subcommand};

use batchscope::daemon::analysis::{run_analysis, AnalysisError, AnalysisOptions};
use batchscope::daemon::backend::ReplayBackend;
use batchscope::daemon::report::{predict_report, profile_report, to_pretty_json, PredictTarget};
use batchscope::daemon::server::{BackendConfig, ConfigError, Server, ServerConfig, Session, SessionConfig};
use batchscope::mutate::MutationTarget;
use batchscope::protocol::{DEFAULT_TCP_PORT, DEFAULT_WS_PORT};
use batchscope::trace::{generate_synthetic_trace, SyntheticSpec};

#[derive(Parser)]
#[command(name = "batchscope", version, about = "Batch-size profiler daemon for training scripts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the profiling daemon for one entry file.
    Serve(ServeArgs),
    /// Analyze a trace once and print key metrics and the top-level breakdown.
    Profile(ProfileArgs),
    /// Predict the batch size that meets a throughput or memory target.
    Predict(PredictArgs),
    /// Write a synthetic trace with known linear models.
    GenTrace(GenTraceArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("backend").required(true).args(["trace", "collector"])))]
struct ServeArgs {
    /// Project root directory.
    #[arg(long)]
    root: PathBuf,
    /// Entry file, relative to the root.
    #[arg(long)]
    entry: PathBuf,
    /// Replay this trace instead of running a collector.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Collector command line, run once per batch size.
    #[arg(long)]
    collector: Option<String>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "BATCHSCOPE_PORT", default_value_t = DEFAULT_TCP_PORT)]
    port: u16,
    /// WebSocket port; 0 picks a free port.
    #[arg(long, env = "BATCHSCOPE_WS_PORT", default_value_t = DEFAULT_WS_PORT)]
    ws_port: u16,
    #[arg(long)]
    no_ws: bool,
    #[arg(long, default_value = "input_provider")]
    provider: String,
    #[arg(long, default_value = "batch_size")]
    kwarg: String,
    /// Device capacity override in bytes.
    #[arg(long)]
    capacity: Option<u64>,
    /// Artificial delay per replayed batch, in milliseconds.
    #[arg(long, default_value_t = 0)]
    replay_delay_ms: u64,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    batch: u32,
    #[arg(long)]
    capacity: Option<u64>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("target").required(true).args(["target_throughput", "target_memory"])))]
struct PredictArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Samples per second.
    #[arg(long)]
    target_throughput: Option<f64>,
    /// Bytes.
    #[arg(long)]
    target_memory: Option<f64>,
    /// Batch size to plan around; defaults to the smallest in the trace.
    #[arg(long)]
    batch: Option<u32>,
    #[arg(long)]
    capacity: Option<u64>,
}

#[derive(Args)]
struct GenTraceArgs {
    /// Run time slope, ms per sample.
    #[arg(long)]
    a: f64,
    /// Run time intercept, ms.
    #[arg(long)]
    b: f64,
    /// Memory slope, bytes per sample.
    #[arg(long)]
    c: u64,
    /// Memory intercept, bytes.
    #[arg(long)]
    d: u64,
    #[arg(long, default_value_t = 8)]
    ops: u32,
    #[arg(long, default_value_t = 2)]
    depth: u32,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    capacity: u64,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    batches: Vec<u32>,
    /// Output file, or `-` for stdout.
    #[arg(long, default_value = "-")]
    out: String,
}

enum Failure {
    Operation(anyhow::Error),
    Backend(anyhow::Error),
    Bind(anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Operation(_) => 1,
            Failure::Backend(_) => 2,
            Failure::Bind(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Operation(e) | Failure::Backend(e) | Failure::Bind(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Operation(e)
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Backend(_) => Failure::Backend(e.into()),
            other => Failure::Operation(other.into()),
        }
    }
}

fn write_stdout(text: &str) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .context("cannot write to stdout")?;
    Ok(())
}

fn analyze_trace(
    trace: PathBuf,
    user_batch: Option<u32>,
    capacity: Option<u64>,
) -> Result<batchscope::daemon::analysis::AnalysisResult, Failure> {
    let backend = ReplayBackend::new(trace);
    let options = AnalysisOptions {
        user_batch,
        capacity_override: capacity,
        ..AnalysisOptions::default()
    };
    Ok(run_analysis(&backend, &options)?)
}

fn profile(args: ProfileArgs) -> Result<(), Failure> {
    let result = analyze_trace(args.trace, Some(args.batch), args.capacity)?;
    write_stdout(&to_pretty_json(&profile_report(&result)))
}

fn predict(args: PredictArgs) -> Result<(), Failure> {
    let target = match (args.target_throughput, args.target_memory) {
        (Some(t), None) => PredictTarget::Throughput(t),
        (None, Some(m)) => PredictTarget::Memory(m),
        _ => unreachable!("clap enforces exactly one target"),
    };
    let result = analyze_trace(args.trace, args.batch, args.capacity)?;
    let prediction = predict_report(&result, target).map_err(anyhow::Error::from)?;
    write_stdout(&to_pretty_json(&prediction))
}

fn gen_trace(args: GenTraceArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        a_ms_per_sample: args.a,
        b_ms: args.b,
        c_bytes_per_sample: args.c,
        d_bytes: args.d,
        op_count: args.ops,
        tree_depth: args.depth,
        noise_fraction: args.noise,
        seed: args.seed,
        capacity_bytes: args.capacity,
    };
    let bytes = generate_synthetic_trace(&spec, &args.batches).map_err(anyhow::Error::from)?;
    if args.out == "-" {
        let mut out = io::stdout().lock();
        out.write_all(&bytes).and_then(|_| out.flush()).context("cannot write to stdout")?;
    } else {
        fs::write(&args.out, &bytes).with_context(|| format!("cannot write {}", args.out))?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let backend = match (args.trace, args.collector) {
        (Some(trace_path), None) => BackendConfig::Replay {
            trace_path,
            delay: Duration::from_millis(args.replay_delay_ms),
        },
        (None, Some(command_line)) => BackendConfig::Subprocess { command_line },
        _ => unreachable!("clap enforces exactly one backend"),
    };
    let target = MutationTarget::new(&args.provider, &args.kwarg).map_err(anyhow::Error::from)?;
    let session = Session::new(SessionConfig {
        project_root: args.root,
        entry_file: args.entry,
        backend,
        target,
        capacity_override: args.capacity,
    })
    .map_err(|e| match e {
        ConfigError::Backend(_) => Failure::Backend(e.into()),
        other => Failure::Operation(other.into()),
    })?;

    let runtime = tokio::runtime::Runtime::new().context("cannot start async runtime")?;
    runtime.block_on(async move {
        let config = ServerConfig {
            host: args.host,
            tcp_port: args.port,
            ws_port: (!args.no_ws).then_some(args.ws_port),
        };
        let server = Server::bind(session, &config)
            .await
            .map_err(|e| Failure::Bind(anyhow::Error::from(e).context("cannot bind listener")))?;
        let tcp = server.tcp_addr().context("listener has no address")?;
        // Announce addresses on stdout so wrappers can pick up ephemeral ports.
        let mut banner = format!("listening tcp={tcp}");
        if let Some(Ok(ws)) = server.ws_addr() {
            banner.push_str(&format!(" ws={ws}"));
        }
        banner.push('\n');
        write_stdout(&banner)?;
        log::info!("session {} serving {}", server.session().id(), server.session().entry_file());
        server
            .run()
            .await
            .map_err(|e| Failure::Bind(anyhow::Error::from(e).context("listener failed")))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Serve(args) => serve(args),
        Command::Profile(args) => profile(args),
        Command::Predict(args) => predict(args),
        Command::GenTrace(args) => gen_trace(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.exit_code())
        }
    }
}
