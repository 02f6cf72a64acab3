use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ravel::pipeline::{self, PipelineError, RunConfig};
use ravel::server::{shutdown_signal, PreparedServer, ServeOptions};

#[derive(Parser)]
#[command(name = "ravel", version, about = "Cluster-level evaluation of generated image sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write a finalized bundle.
    Run(RunArgs),
    /// Validate the inputs (running the embedder if configured) and print counts.
    Ingest(ConfigArgs),
    /// Serve a finalized bundle over HTTP.
    Serve(ServeArgs),
    /// Print a bundle summary as JSON.
    Inspect { bundle: PathBuf },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; relative paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output bundle directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cluster counts, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "RAVEL_THREADS")]
    threads: Option<usize>,
    /// Skip thumbnail generation.
    #[arg(long)]
    no_thumbs: bool,
    /// Replace a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct ServeArgs {
    bundle: PathBuf,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Allow cross-origin requests.
    #[arg(long)]
    cors: bool,
    /// Static explorer files to serve under `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn fail(err: PipelineError) -> ExitCode {
    eprintln!("ravel: {err}");
    match err {
        PipelineError::Config(_) => ExitCode::from(2),
        PipelineError::Stage { .. } => ExitCode::from(1),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, PipelineError> {
    RunConfig::from_file(&args.config)
}

fn run(args: RunArgs) -> ExitCode {
    let mut config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    if !args.k.is_empty() {
        config.k_list = args.k;
    }
    if let Some(k) = args.knn_k {
        config.knn_k = k;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    if args.no_thumbs {
        config.thumbnails = false;
    }
    config.overwrite |= args.overwrite;
    match pipeline::run_all(&config) {
        Ok(bundle) => {
            println!("{}", bundle.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn ingest(args: ConfigArgs) -> ExitCode {
    let config = match load_config(&args) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match pipeline::ingest(&config) {
        Ok(ds) => {
            let out = serde_json::json!({
                "n_total": ds.len(),
                "n_left": ds.split_rows(ravel::Side::Left).len(),
                "n_right": ds.split_rows(ravel::Side::Right).len(),
                "dim": ds.embeddings().d(),
                "embedding_name": ds.embeddings().embedding_name(),
                "labels": ds.label_index().len(),
            });
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn inspect(bundle: PathBuf) -> ExitCode {
    match pipeline::inspect(&bundle) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn serve(args: ServeArgs) -> ExitCode {
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("ravel: {e}");
            return ExitCode::from(1);
        }
    };
    let options = ServeOptions {
        ui_dir: args.ui_dir,
        cors: args.cors,
    };
    runtime.block_on(async move {
        let addr = SocketAddr::new(args.host, args.port);
        let server = match PreparedServer::bind(&args.bundle, addr, options).await {
            Ok(s) => s,
            Err(e) => {
                eprintln!("ravel: {e}");
                return ExitCode::from(1);
            }
        };
        match server.local_addr() {
            Ok(addr) => println!("listening on http://{addr}"),
            Err(e) => eprintln!("ravel: {e}"),
        }
        let _ = std::io::stdout().flush();
        match server.serve(shutdown_signal()).await {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("ravel: {e}");
                ExitCode::from(1)
            }
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(args),
        Command::Ingest(args) => ingest(args),
        Command::Serve(args) => serve(args),
        Command::Inspect { bundle } => inspect(bundle),
    }
}
