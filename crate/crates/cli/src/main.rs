//! `visrecon`: reconstruct, evaluate and ablate through the reconstruction service.
//!
//! Without `--server` each command starts a private in-process server on a
//! loopback port and talks to it over HTTP like any other client.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use base64::Engine as _;
use clap::{Args, Parser, Subcommand};
use tokio::sync::oneshot;

use visrecon_client::{Client, ClientError};
use visrecon_core::api::{
    build_config, AblateRequest, AblationRun, CreateSession, EvaluateRequest, ReferenceSpec, SourceSpec,
};
use visrecon_core::fragmenter::write_scene_dataset;
use visrecon_core::synthscene::GroundTruthScene;

#[derive(Parser)]
#[command(
    name = "visrecon",
    version,
    about = "Sparse TSDF reconstruction from posed camera fragments"
)]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Reconstruct a scene or dataset and write mesh.ply, fragments.log and metrics.json.
    Reconstruct(ReconstructArgs),
    /// Score a predicted mesh against a reference mesh or scene.
    Evaluate(EvaluateArgs),
    /// Run every config in a directory and print one CSV row per config.
    Ablate(AblateArgs),
    /// Render depth images and poses of a synthetic scene into a dataset directory.
    RenderDataset {
        /// Scene file or built-in scene name.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        d_max: f64,
    },
}

#[derive(Args)]
struct SourceArgs {
    /// Scene file or built-in scene name (room, sphere-orbit, two-planes).
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    scene: Option<String>,
    /// Dataset directory with poses and depth images.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct ServerArg {
    /// Use a running service instead of an in-process one.
    #[arg(long)]
    server: Option<String>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["sliding_window", "topk", "threshold"])]
    strategy: Option<String>,
    #[arg(long, value_parser = ["oracle", "heuristic", "external"])]
    predictor: Option<String>,
    #[arg(long, value_parser = ["oracle", "heuristic", "external"])]
    head: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Integrate one fragment per request and report progress.
    #[arg(long)]
    incremental: bool,
    #[command(flatten)]
    server: ServerArg,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted mesh (PLY).
    #[arg(long)]
    pred: PathBuf,
    /// Reference: a PLY mesh, a scene file or a built-in scene name.
    #[arg(long)]
    gt: String,
    #[arg(long, default_value_t = 5.0)]
    threshold_cm: f64,
    /// Surface samples per square metre.
    #[arg(long, default_value_t = 10_000.0)]
    density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only scene samples the scene's cameras see within this depth.
    #[arg(long)]
    cull_d_max: Option<f64>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    server: ServerArg,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory of `*.conf` files; each file stem becomes a row label.
    #[arg(long)]
    configs: PathBuf,
    #[command(flatten)]
    source: SourceArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    server: ServerArg,
}

/// A client plus, when no server was given, the in-process server behind it.
struct Connection {
    client: Client,
    stop: Option<(oneshot::Sender<()>, tokio::task::JoinHandle<std::io::Result<()>>)>,
}

impl Connection {
    async fn open(server: &ServerArg) -> Result<Self> {
        if let Some(url) = &server.server {
            let client = Client::new(url);
            client
                .health()
                .await
                .with_context(|| format!("no reconstruction service at {url}"))?;
            return Ok(Connection { client, stop: None });
        }
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel();
        let task = tokio::spawn(visrecon_server::serve(listener, async {
            let _ = rx.await;
        }));
        Ok(Connection {
            client: Client::new(&format!("http://{addr}")),
            stop: Some((tx, task)),
        })
    }

    async fn close(self) -> Result<()> {
        if let Some((tx, task)) = self.stop {
            let _ = tx.send(());
            task.await??;
        }
        Ok(())
    }
}

fn scene_spec(arg: &str) -> Result<SourceSpec> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(SourceSpec::Scene(text));
    }
    if GroundTruthScene::builtin(arg).is_some() {
        return Ok(SourceSpec::Builtin(arg.to_string()));
    }
    bail!("`{arg}` is neither a scene file nor a built-in scene")
}

fn source_spec(args: &SourceArgs) -> Result<SourceSpec> {
    match (&args.scene, &args.dataset) {
        (Some(s), _) => scene_spec(s),
        (None, Some(d)) => Ok(SourceSpec::Dataset(std::path::absolute(d)?)),
        (None, None) => bail!("pass --scene or --dataset"),
    }
}

fn load_scene(arg: &str) -> Result<GroundTruthScene> {
    Ok(match scene_spec(arg)? {
        SourceSpec::Scene(text) => GroundTruthScene::parse(&text)?,
        _ => GroundTruthScene::builtin(arg).expect("checked"),
    })
}

fn api_error(e: ClientError) -> anyhow::Error {
    match &e {
        ClientError::Api { error, .. } => anyhow::anyhow!("{}", error.message),
        _ => e.into(),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

async fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let config = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut overrides: Vec<(String, String)> = Vec::new();
    for (key, value) in [
        ("strategy", &args.strategy),
        ("predictor", &args.predictor),
        ("head", &args.head),
    ] {
        if let Some(v) = value {
            overrides.push((key.into(), v.clone()));
        }
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    let cfg = build_config(&config, &overrides)?;
    let out = std::path::absolute(&args.out)?;
    let request = CreateSession {
        config,
        overrides,
        source: source_spec(&args.source)?,
        dump_dir: cfg.dump_kept_voxels.then(|| out.join("kept")),
    };

    let conn = Connection::open(&args.server).await?;
    let result = run_session(&conn.client, &request, &out, args.incremental).await;
    conn.close().await?;
    result
}

async fn run_session(client: &Client, request: &CreateSession, out: &Path, incremental: bool) -> Result<()> {
    let info = client.create_session(request).await.map_err(api_error)?;
    log::info!("session {} with {} fragments", info.id, info.fragments);
    if incremental {
        while let Some(r) = client.next_fragment(&info.id).await.map_err(api_error)? {
            let counts: Vec<String> = r
                .levels
                .iter()
                .map(|l| format!("{}->{}", l.voxels_before, l.voxels_after))
                .collect();
            eprintln!(
                "fragment {}/{}: voxels {}",
                r.index + 1,
                info.fragments,
                counts.join(" ")
            );
        }
    } else {
        client.run(&info.id).await.map_err(api_error)?;
    }
    let mesh = client.mesh(&info.id).await.map_err(api_error)?;
    let log = client.log(&info.id).await.map_err(api_error)?;
    let metrics = client.metrics_json(&info.id).await.map_err(api_error)?;
    client.delete_session(&info.id).await.map_err(api_error)?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("mesh.ply"), &mesh)?;
    write(&out.join("fragments.log"), &log)?;
    if let Some(m) = &metrics {
        write(&out.join("metrics.json"), m)?;
    }
    println!(
        "{} fragments, mesh written to {}",
        info.fragments,
        out.join("mesh.ply").display()
    );
    if let Some(m) = metrics {
        print!("{m}");
    }
    Ok(())
}

async fn evaluate(args: EvaluateArgs) -> Result<()> {
    let b64 = |p: &Path| -> Result<String> {
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
    };
    let gt = Path::new(&args.gt);
    let reference = if gt.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        ReferenceSpec::Ply(b64(gt)?)
    } else {
        match scene_spec(&args.gt)? {
            SourceSpec::Scene(text) => ReferenceSpec::Scene(text),
            _ => ReferenceSpec::Builtin(args.gt.clone()),
        }
    };
    let request = EvaluateRequest {
        pred: b64(&args.pred)?,
        reference,
        threshold_cm: args.threshold_cm,
        density: args.density,
        seed: args.seed,
        cull_d_max: args.cull_d_max,
    };
    let conn = Connection::open(&args.server).await?;
    let result = conn.client.evaluate(&request).await.map_err(api_error);
    conn.close().await?;
    let json = result?.to_json();
    if let Some(path) = &args.out {
        write(path, &json)?;
    }
    print!("{json}");
    Ok(())
}

async fn ablate(args: AblateArgs) -> Result<()> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.configs)
        .with_context(|| format!("reading {}", args.configs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "conf"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .conf files in {}", args.configs.display());
    }
    let runs = files
        .iter()
        .map(|p| {
            Ok(AblationRun {
                label: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                config: std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let request = AblateRequest {
        runs,
        source: source_spec(&args.source)?,
    };
    let conn = Connection::open(&args.server).await?;
    let result = conn.client.ablate(&request).await.map_err(api_error);
    conn.close().await?;
    let csv = result?;
    match &args.out {
        Some(path) => write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

async fn serve(addr: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    println!("listening on http://{}", listener.local_addr()?);
    visrecon_server::serve(listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match (cli.verbose, &cli.command) {
        (0, Command::Serve { .. }) => "info",
        (0, _) => "warn",
        (1, _) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Serve { addr } => serve(&addr).await,
        Command::Reconstruct(args) => reconstruct(args).await,
        Command::Evaluate(args) => evaluate(args).await,
        Command::Ablate(args) => ablate(args).await,
        Command::RenderDataset { scene, out, d_max } => {
            let scene = load_scene(&scene)?;
            let n = tokio::task::spawn_blocking(move || write_scene_dataset(&scene, &out, d_max)).await??;
            println!("{n} frames written");
            Ok(())
        }
    }
}
