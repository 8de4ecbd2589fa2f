use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use narravo_client::Client;
use narravo_core::api::{GenerateScript, ScriptRecord};
use narravo_core::engine::{events_from_jsonl, exploration_summary};
use narravo_core::gateway::{
    build_prompt, default_replay_model, record_fixture, BackendConfig, GenerationRequest,
    LiveConfig, PromptStrategy, ReplayConfig,
};
use narravo_core::pipeline::{
    bundle_dir, to_json_pretty, write_batch, write_bundle, Bundle, InputFile, Provenance,
};
use narravo_core::scene::load_scene;
use narravo_core::schema::Severity;
use narravo_server::{RunningServer, ServerConfig};

#[derive(Parser)]
#[command(name = "narravo", version, about = "Object-driven AR narrative engine")]
struct Cli {
    /// Service to talk to; without it an in-process service is started.
    #[arg(long, global = true, env = "NARRAVO_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Live,
    Replay,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    strategy: PromptStrategy,
    #[arg(long, value_enum, default_value = "replay")]
    backend: BackendKind,
    /// Replay fixture directory.
    #[arg(long, default_value = "fixtures/office/replay")]
    fixtures: PathBuf,
    /// Model name; the replay default is `replay`.
    #[arg(long)]
    model: Option<String>,
    /// With the live backend, also store replies as replay fixtures here.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    max_fragments: Option<usize>,
    #[arg(long)]
    key_objects: Option<usize>,
    /// Write the bundle under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, validate, link and anchor a script for a scene.
    Generate(GenerateArgs),
    /// Validate an interchange document.
    Validate {
        #[arg(long)]
        script: PathBuf,
    },
    /// Compute metric reports for a directory of trace and rating files.
    Eval {
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service until interrupted.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Store a model reply as a replay fixture for a scene and strategy.
    Record {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: PromptStrategy,
        /// File holding the reply text.
        #[arg(long)]
        response: PathBuf,
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long, default_value_t = default_replay_model())]
        model: String,
        #[arg(long, default_value_t = 0.0)]
        elapsed: f64,
        #[arg(long, default_value = "")]
        seed: String,
        #[arg(long, default_value_t = 13)]
        max_fragments: usize,
        #[arg(long, default_value_t = 3)]
        key_objects: usize,
    },
    /// Generate a script, replay a JSONL event file through a session and
    /// write the traversal log.
    Play {
        #[command(flatten)]
        generate: GenerateArgs,
        #[arg(long)]
        events: PathBuf,
    },
}

fn parse_strategy(s: &str) -> Result<PromptStrategy, String> {
    s.parse()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

struct Service {
    client: Client,
    embedded: Option<RunningServer>,
}

impl Service {
    async fn connect(url: Option<String>) -> Result<Self> {
        match url {
            Some(url) => Ok(Service {
                client: Client::new(url),
                embedded: None,
            }),
            None => {
                let server = narravo_server::spawn(ServerConfig::default())
                    .await
                    .context("starting in-process service")?;
                Ok(Service {
                    client: Client::new(server.url()),
                    embedded: Some(server),
                })
            }
        }
    }

    async fn close(self) -> Result<()> {
        if let Some(s) = self.embedded {
            s.stop().await?;
        }
        Ok(())
    }
}

fn backend_config(args: &GenerateArgs) -> Result<BackendConfig> {
    Ok(match args.backend {
        BackendKind::Replay => BackendConfig::Replay(ReplayConfig {
            fixture_dir: std::path::absolute(&args.fixtures)?,
            model: args.model.clone().unwrap_or_else(default_replay_model),
        }),
        BackendKind::Live => {
            let model = args
                .model
                .clone()
                .context("--model is required with the live backend")?;
            let mut cfg = LiveConfig::from_env(model).map_err(anyhow::Error::msg)?;
            cfg.record_dir = args.record.as_deref().map(std::path::absolute).transpose()?;
            BackendConfig::Live(cfg)
        }
    })
}

fn record_bundle(record: &ScriptRecord) -> Result<Bundle> {
    let provenance: Provenance = record
        .provenance
        .clone()
        .context("script record has no provenance")?;
    Ok(Bundle {
        scene_id: record.scene_id.clone(),
        provenance,
        generation: record.generation.clone().unwrap_or_default(),
        script: record.script.clone(),
        validation: record.validation.clone(),
        tree: record.tree.clone(),
        anchors: record.anchors.clone(),
    })
}

async fn generate(client: &Client, args: &GenerateArgs) -> Result<ScriptRecord> {
    let scene = client
        .create_scene_document(read(&args.scene)?)
        .await
        .context("uploading scene")?;
    let req = GenerateScript {
        scene_id: scene.scene_id.clone(),
        strategy: args.strategy,
        backend: Some(backend_config(args)?),
        seed: args.seed.clone(),
        max_fragments: args.max_fragments,
        key_objects: args.key_objects,
    };
    let record = match client.generate_script(&req).await {
        Ok(r) => r,
        Err(narravo_client::ClientError::Api { body, .. }) => {
            if let Some(details) = &body.details {
                eprintln!("{}", serde_json::to_string_pretty(details)?);
            }
            bail!("{}", body.message)
        }
        Err(e) => return Err(e.into()),
    };
    eprintln!(
        "script {} ({} objects, {} fragments); bound {}, unbound {}",
        record.id,
        record.script.objects.len(),
        record.script.fragments.len(),
        record.anchors.bindings.len(),
        record.anchors.unbound.len()
    );
    if let Some(out) = &args.out {
        let dir = bundle_dir(out, &record.scene_id, args.strategy);
        write_bundle(&dir, &record_bundle(&record)?)?;
        eprintln!("bundle written to {}", dir.display());
    }
    Ok(record)
}

async fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Serve {
            port,
            config,
            host,
            data_dir,
        } => {
            let mut cfg = match &config {
                Some(p) => ServerConfig::load(p)?,
                None => ServerConfig::default(),
            };
            if let Some(p) = port {
                cfg.port = p;
            }
            if let Some(h) = host {
                cfg.host = h;
            }
            if let Some(d) = data_dir {
                cfg.data_dir = Some(d);
            }
            let addr = format!("{}:{}", cfg.host, cfg.port);
            let listener = tokio::net::TcpListener::bind(&addr)
                .await
                .with_context(|| format!("cannot bind {addr}"))?;
            eprintln!("listening on http://{}", listener.local_addr()?);
            narravo_server::serve(listener, cfg, async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Record {
            scene,
            strategy,
            response,
            fixtures,
            model,
            elapsed,
            seed,
            max_fragments,
            key_objects,
        } => {
            let scene = load_scene(&read(&scene)?)?;
            let request = GenerationRequest {
                scene,
                strategy,
                max_fragments,
                key_objects,
                seed,
                image_refs: Vec::new(),
            };
            let key = record_fixture(
                &fixtures,
                &request.digest(),
                &build_prompt(&request),
                &model,
                &read(&response)?,
                elapsed,
            )?;
            println!("{key}");
            Ok(ExitCode::SUCCESS)
        }
        command => {
            let service = Service::connect(cli.server).await?;
            let result = remote(&service.client, command).await;
            service.close().await?;
            result
        }
    }
}

async fn remote(client: &Client, command: Command) -> Result<ExitCode> {
    match command {
        Command::Generate(args) => {
            let record = generate(client, &args).await?;
            if args.out.is_none() {
                print!("{}", to_json_pretty(&record));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { script } => {
            let resp = client.validate(read(&script)?).await?;
            if let Some(e) = resp.parse_error {
                eprintln!("{e}");
                return Ok(ExitCode::from(2));
            }
            let report = resp.report.unwrap_or_default();
            for v in &report.violations {
                let sev = match v.severity {
                    Severity::Error => "error",
                    Severity::Warning => "warning",
                };
                println!("{sev} {:?} at {}: {}", v.code, v.path, v.message);
            }
            if report.has_errors() {
                Ok(ExitCode::FAILURE)
            } else {
                if report.violations.is_empty() {
                    println!("ok");
                }
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Eval { inputs, out } => {
            let mut files = Vec::new();
            let mut entries: Vec<_> = fs::read_dir(&inputs)
                .with_context(|| format!("cannot read {}", inputs.display()))?
                .collect::<std::io::Result<_>>()?;
            entries.sort_by_key(|e| e.file_name());
            for entry in entries {
                if entry.path().is_file() {
                    files.push(InputFile {
                        name: entry.file_name().to_string_lossy().into_owned(),
                        contents: read(&entry.path())?,
                    });
                }
            }
            if files.is_empty() {
                bail!("no input files in {}", inputs.display());
            }
            let outcome = client.batch(files).await?;
            for e in &outcome.errors {
                eprintln!("error in {}: {}", e.source, e.message);
            }
            write_batch(&out, &outcome)?;
            match &outcome.cross {
                Some(report) => {
                    print!("{}", report.render_text());
                    Ok(ExitCode::SUCCESS)
                }
                None => Ok(ExitCode::FAILURE),
            }
        }
        Command::Play { generate: args, events } => {
            let events = events_from_jsonl(&read(&events)?)
                .with_context(|| format!("parsing {}", events.display()))?;
            let record = generate(client, &args).await?;
            let session = client.create_session(&record.id).await?;
            for ev in &events {
                let outcome = client.post_event(&session.id, ev).await?;
                for f in &outcome.activated {
                    eprintln!("t={:>6.1}  activated {f}", ev.t);
                }
            }
            let state = client.state(&session.id).await?;
            let log = client.log(&session.id).await?;
            let summary = exploration_summary(&state);
            eprintln!(
                "beat {} of {}, completed: {}, {} of {} fragments active",
                state.current_beat + 1,
                state.tree.beats.len(),
                state.completed,
                state.activated.len(),
                state.tree.fragments.len()
            );
            let text = to_json_pretty(&log);
            match &args.out {
                Some(out) => {
                    let dir = bundle_dir(out, &record.scene_id, args.strategy);
                    fs::write(dir.join("traversal_log.json"), text)?;
                    fs::write(dir.join("exploration.json"), to_json_pretty(&summary))?;
                }
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { .. } | Command::Record { .. } => unreachable!("handled locally"),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("NARRAVO_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
