use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use inpaintkit_core::embed::Embedder;
use inpaintkit_core::io::{load_image, load_mask, save_image};
use inpaintkit_core::scenegen::load_benchmark;
use inpaintkit_core::Exec;
use inpaintkit_models::registry::CHECKPOINT_DIR_ENV;
use inpaintkit_service::worker::{CascadeBackend, EditBackend, EditInput};
use inpaintkit_service::ServiceConfig;

use inpaintkit_cli::config::Config;
use inpaintkit_cli::pipeline;

#[derive(Parser)]
#[command(name = "inpaintkit", version, about = "Text-guided inpainting on synthetic scenes")]
struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding checkpoints and models.json.
    #[arg(long, global = true, env = CHECKPOINT_DIR_ENV)]
    checkpoint_dir: Option<PathBuf>,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark construction.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Pretrain and finetune both cascades, then train the embedder.
    Train(TrainArgs),
    /// Inpaint one image.
    Sample(SampleArgs),
    /// Sample, judge and score the benchmark.
    Evaluate(EvaluateArgs),
    /// Metric/judge agreement tables from an evaluation.
    Agree(AgreeArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum BenchCommand {
    Build {
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    pretrain_steps: Option<usize>,
    /// Finetuning steps for both stages.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    embedder_steps: Option<usize>,
    #[arg(long)]
    skip_denoisers: bool,
    #[arg(long)]
    skip_embedder: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    image: PathBuf,
    /// 1-bit PNG, or RLE-JSON when the name ends in `.json`.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    sr_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `constant:W` or `oscillate:LO,HI`.
    #[arg(long)]
    guidance: Option<String>,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Cascade id from models.json.
    #[arg(long)]
    model: Option<String>,
    /// Sample with the null prompt.
    #[arg(long)]
    unconditional: bool,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, default_value = "bench")]
    bench: PathBuf,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Comma-separated model ids; `reference` and `blank` need no checkpoint.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    samples_per_prompt: Option<usize>,
    #[arg(long)]
    save_samples: bool,
    /// Skip metric scoring (no embedder needed).
    #[arg(long)]
    no_metrics: bool,
}

#[derive(Args)]
struct AgreeArgs {
    #[arg(long, default_value = "eval")]
    eval: PathBuf,
    #[arg(long, default_value = "reports")]
    out: PathBuf,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "bench")]
    bench: PathBuf,
    #[arg(long, default_value = "reports")]
    reports: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

fn checkpoint_dir(cli: &Cli, cfg: &Config) -> PathBuf {
    cli.checkpoint_dir
        .clone()
        .or_else(|| cfg.checkpoint_dir.clone())
        .unwrap_or_else(|| PathBuf::from("checkpoints"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let ckpt = checkpoint_dir(&cli, &cfg);
    match &cli.command {
        Command::Bench {
            command: BenchCommand::Build { out, items, seed },
        } => {
            cfg.bench.items = items.unwrap_or(cfg.bench.items);
            cfg.bench.seed = seed.unwrap_or(cfg.bench.seed);
            let items = pipeline::build_bench(out, &cfg.bench, exec)?;
            println!("{}", serde_json::to_string_pretty(&pipeline::bench_summary(&items))?);
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            t.pretrain_steps = a.pretrain_steps.unwrap_or(t.pretrain_steps);
            if let Some(s) = a.steps {
                t.base.steps = s;
                t.sr.steps = s;
            }
            t.contrastive.steps = a.embedder_steps.unwrap_or(t.contrastive.steps);
            cfg.validate()?;
            if !a.skip_denoisers {
                let index = pipeline::train_denoisers(&ckpt, &cfg.train, exec)?;
                println!("{}", serde_json::to_string_pretty(&index)?);
            }
            if !a.skip_embedder {
                let top1 = pipeline::train_embedder(&ckpt, &cfg.train, exec)?;
                println!("embedder held-out top-1 retrieval: {:.1}%", 100.0 * top1);
            }
        }
        Command::Sample(a) => sample(a, &cfg, &ckpt)?,
        Command::Evaluate(a) => evaluate(a, &mut cfg, &ckpt, exec)?,
        Command::Agree(a) => {
            let c = &mut cfg.agree;
            c.pairs = a.pairs.unwrap_or(c.pairs);
            c.rounds = a.rounds.unwrap_or(c.rounds);
            c.bootstrap = a.bootstrap.unwrap_or(c.bootstrap);
            let (scores, ratings) = pipeline::load_evaluation(&a.eval)?;
            let summary = pipeline::agreement(&scores, &ratings, &cfg.agree, exec)?;
            pipeline::write_agreement(&a.out, &summary)?;
            print!("{}", inpaintkit_core::agreement::agreement_table_markdown(&summary.best_of_two));
            print!("{}", inpaintkit_core::agreement::agreement_table_markdown(&summary.best_of_four));
        }
        Command::Serve(a) => {
            let s = &cfg.serve;
            let mut config = ServiceConfig::new(a.data_dir.clone().unwrap_or_else(|| s.data_dir.clone()));
            config.bench_dir = Some(a.bench.clone());
            config.reports_dir = a.reports.clone();
            config.workers = a.workers.unwrap_or(s.workers);
            config.max_body_bytes = s.max_body_bytes;
            let addr: SocketAddr = a.addr.as_deref().unwrap_or(&s.addr).parse().context("parsing --addr")?;
            let backend: Arc<dyn EditBackend> = Arc::new(CascadeBackend::open(ckpt));
            tokio::runtime::Runtime::new()?.block_on(inpaintkit_service::serve(config, backend, addr))?;
        }
    }
    Ok(())
}

fn sample(a: &SampleArgs, cfg: &Config, ckpt: &Path) -> Result<()> {
    let mut section = cfg.sample.clone();
    section.steps = a.steps.unwrap_or(section.steps);
    section.sr_steps = a.sr_steps.or(section.sr_steps);
    if let Some(g) = &a.guidance {
        section.guidance = g.clone();
    }
    if a.prompt.trim().is_empty() && !a.unconditional {
        bail!("--prompt is required unless --unconditional is set");
    }
    let mut params = pipeline::edit_params(&section, a.n, a.seed, a.model.clone());
    params.unconditional = a.unconditional;
    let input = EditInput {
        image: load_image(&a.image)?,
        mask: load_mask(&a.mask)?,
        prompt: a.prompt.clone(),
        params,
    };
    if input.image.shape() != input.mask.shape() {
        bail!("image is {:?} but mask is {:?}", input.image.shape(), input.mask.shape());
    }
    let backend = CascadeBackend::open(ckpt);
    let (images, provenance) = pipeline::sample_edit(&backend, &input)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, img) in images.iter().enumerate() {
        let path = a.out.join(format!("sample_{i}.png"));
        save_image(&path, img)?;
        println!("{}", path.display());
    }
    std::fs::write(a.out.join("provenance.json"), serde_json::to_vec_pretty(&provenance)?)?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs, cfg: &mut Config, ckpt: &Path, exec: Exec) -> Result<()> {
    let e = &mut cfg.evaluate;
    if let Some(m) = &a.models {
        e.models = m.clone();
    }
    e.limit = a.limit.or(e.limit);
    e.samples_per_prompt = a.samples_per_prompt.unwrap_or(e.samples_per_prompt);
    e.save_samples |= a.save_samples;
    cfg.validate()?;
    let e = &cfg.evaluate;
    let mut items = load_benchmark(&a.bench).with_context(|| format!("loading benchmark from {}", a.bench.display()))?;
    if let Some(n) = e.limit {
        items.truncate(n);
    }
    let needs_embedder = !a.no_metrics || e.judge.mode == inpaintkit_core::judge::JudgeMode::TrainedClassifier;
    let embedder: Option<Arc<dyn Embedder>> = if needs_embedder {
        Some(pipeline::load_embedder(ckpt)?)
    } else {
        None
    };
    let backend = CascadeBackend::open(ckpt);
    let samples = pipeline::generate_samples(&items, e, &cfg.sample, Some(&backend))?;
    if e.save_samples {
        pipeline::save_samples(&a.out, &samples)?;
    }
    let judge = pipeline::make_judge(e, embedder.clone())?;
    let ratings = pipeline::judge_samples(&items, &samples, e, &judge, exec)?;
    let scores = match (&embedder, a.no_metrics) {
        (Some(emb), false) => Some(pipeline::score_samples(&items, &samples, emb.as_ref(), exec)?),
        _ => None,
    };
    pipeline::write_evaluation(&a.out, &items, &ratings, scores.as_deref())?;
    println!(
        "{} single ratings, {} side-by-side ratings written to {}",
        ratings.single.len(),
        ratings.side_by_side.len(),
        a.out.display()
    );
    print!("{}", std::fs::read_to_string(a.out.join("judge_summary.md"))?);
    Ok(())
}
