use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bridgelab_core::config::Config;
use bridgelab_core::gateway::LlmGateway;
use bridgelab_core::harness::{self, Bridge, BridgeStyle, EvalSetup, Generator, Judge, PipelineSpec};
use bridgelab_core::metrics::SliceSpec;
use bridgelab_core::preference::{generate_dpo, DpoOptions};
use bridgelab_core::qa::{self, QAExample};
use bridgelab_core::supervision::{self, generate_sft, SftOptions, SftRecord, TeacherConfig};
use bridgelab_core::{lab, synthetic};

const EXIT_FATAL: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "bridgelab", version, about = "Rewrite retrieved documents into answer-ready context")]
struct Cli {
    /// TOML config with backend, gateway, decoding, and preference settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build SFT records from one teacher call per document.
    GenSft {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        teacher_model: String,
        #[arg(long)]
        concurrency: Option<usize>,
        /// Drop examples where no teacher answer overlaps a gold answer.
        #[arg(long)]
        filter_by_answer_f1: bool,
    },
    /// Build set-level preference pairs from SFT rewrites.
    GenDpo {
        /// SFT JSONL whose targets supply the rewrites.
        #[arg(long)]
        rewrites: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        generator_model: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pair single C documents against single A documents only.
        #[arg(long)]
        naive: bool,
    },
    /// Run a pipeline over one or more datasets and write a report.
    Eval(EvalArgs),
    /// Partition a dataset into extractive and abstractive answers.
    SplitExtAbs {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_ext: PathBuf,
        #[arg(long)]
        out_abs: PathBuf,
    },
    /// Ask models to reason over the documents and record which they cite.
    ProbeTraces {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact checks on enumerable toy worlds.
    Lab {
        #[command(subcommand)]
        command: LabCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Naive,
    Bridged,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Student,
    Teacher,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset JSONL; repeat for several. Names come from file stems.
    #[arg(long, required = true)]
    dataset: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pipeline: PipelineArg,
    #[arg(long)]
    generator_model: String,
    #[arg(long)]
    bridge_model: Option<String>,
    #[arg(long, value_enum, default_value = "student")]
    bridge_style: StyleArg,
    #[arg(long)]
    judge_model: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the rendered table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LabCommand {
    Verify {
        #[arg(long, default_value_t = 1000)]
        worlds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest number of answers and rewrites per world.
        #[arg(long, default_value_t = 8)]
        max_dim: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn load(path: &Path) -> Result<Vec<QAExample>> {
    qa::load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn generator(config: &Config, gateway: &LlmGateway, model: &str) -> Generator {
    let mut g = Generator::new(gateway.clone(), model);
    g.temperature = config.decoding.temperature;
    g.max_tokens = config.decoding.max_tokens;
    g.seed = config.decoding.seed;
    g
}

fn run(cli: Cli) -> Result<u8> {
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenSft { dataset, out, teacher_model, concurrency, filter_by_answer_f1 } => {
            if let Some(n) = concurrency {
                if n == 0 {
                    bail!("--concurrency must be >= 1");
                }
                config.gateway.concurrency = n;
            }
            let examples = load(&dataset)?;
            let gateway = config.build_gateway()?;
            let mut teacher = TeacherConfig::new(teacher_model);
            teacher.temperature = config.decoding.temperature;
            teacher.max_tokens = config.decoding.rewrite_max_tokens;
            teacher.seed = config.decoding.seed;
            let options = SftOptions { teacher, workers: config.gateway.concurrency, filter_by_answer_f1 };
            let (records, stats) = generate_sft(&examples, &gateway, &options);
            qa::write_jsonl(&records, &out)?;
            print_json(&stats)?;
            Ok(if stats.failed_examples > 0 || stats.call_failures > 0 { EXIT_PARTIAL } else { 0 })
        }
        Command::GenDpo { rewrites, dataset, generator_model, out, seed, naive } => {
            let examples = load(&dataset)?;
            let sft: Vec<SftRecord> =
                qa::read_jsonl(&rewrites).with_context(|| format!("loading {}", rewrites.display()))?;
            let gateway = config.build_gateway()?;
            let options = DpoOptions {
                policy: config.preference.policy(),
                pair_cap: config.preference.pair_cap(),
                naive,
                seed,
                workers: config.gateway.concurrency,
            };
            let (records, stats) =
                generate_dpo(&examples, &sft, &generator(&config, &gateway, &generator_model), &options);
            qa::write_jsonl(&records, &out)?;
            print_json(&stats)?;
            Ok(if stats.failed_examples > 0 || stats.skipped_examples > 0 { EXIT_PARTIAL } else { 0 })
        }
        Command::Eval(args) => eval(&config, args),
        Command::SplitExtAbs { input, out_ext, out_abs } => {
            let counts = harness::split_ext_abs(&input, &out_ext, &out_abs)?;
            print_json(&counts)?;
            Ok(0)
        }
        Command::ProbeTraces { dataset, models, out } => {
            let examples = load(&dataset)?;
            let gateway = config.build_gateway()?;
            let mut results = Vec::new();
            let mut failures = 0;
            for ex in &examples {
                for r in supervision::probe_traces(ex, &models, &gateway) {
                    match r {
                        Ok(r) => results.push(r),
                        Err(e) => {
                            log::warn!("example {}: {e}", ex.id);
                            failures += 1;
                        }
                    }
                }
            }
            qa::write_jsonl(&results, &out)?;
            let rate = supervision::prerequisite_rate(&results);
            print_json(
                &serde_json::json!({ "probes": results.len(), "failures": failures, "rewrite_rate": rate }),
            )?;
            Ok(if failures > 0 { EXIT_PARTIAL } else { 0 })
        }
        Command::Synth { n, seed, out } => {
            qa::save_dataset(&synthetic::generate_dataset(n, seed), &out)?;
            Ok(0)
        }
        Command::Lab { command: LabCommand::Verify { worlds, seed, max_dim, report } } => {
            if max_dim == 0 || max_dim > lab::MAX_OUTCOMES {
                bail!("--max-dim must be in 1..={}", lab::MAX_OUTCOMES);
            }
            let result = lab::verify(worlds, max_dim, seed);
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string_pretty(&result)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            print_json(&result)?;
            Ok(if result.passed { 0 } else { EXIT_FATAL })
        }
    }
}

fn eval(config: &Config, args: EvalArgs) -> Result<u8> {
    let spec = match args.pipeline {
        PipelineArg::Naive => PipelineSpec::naive(&args.generator_model),
        PipelineArg::Bridged => {
            let Some(bridge) = &args.bridge_model else {
                bail!("--pipeline bridged requires --bridge-model");
            };
            let style = match args.bridge_style {
                StyleArg::Student => BridgeStyle::Student,
                StyleArg::Teacher => BridgeStyle::Teacher,
            };
            PipelineSpec::bridged(&args.generator_model, bridge, style)
        }
    };
    let mut datasets = Vec::new();
    for path in &args.dataset {
        let name =
            path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        if datasets.iter().any(|(n, _): &(String, _)| *n == name) {
            bail!("two datasets named {name}");
        }
        datasets.push((name, load(path)?));
    }
    let gateway = config.build_gateway()?;
    let bridge = spec.bridge_model.as_ref().map(|model| {
        let mut b = Bridge::new(gateway.clone(), model, spec.bridge_style);
        b.max_tokens = config.decoding.rewrite_max_tokens;
        b.seed = config.decoding.seed;
        b
    });
    let setup = EvalSetup {
        generator: generator(config, &gateway, &spec.generator_model),
        spec,
        bridge,
        judge: args.judge_model.map(|model_id| Judge { gateway: gateway.clone(), model_id }),
        slices: SliceSpec::default(),
        workers: config.gateway.concurrency,
        seed: config.decoding.seed,
    };
    let report = harness::evaluate(&datasets, &setup).map_err(anyhow::Error::msg)?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let table = harness::render_table(&report);
    if let Some(path) = &args.table {
        std::fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{table}");
    if report.scored == 0 && report.examples > 0 {
        eprintln!("every example failed; first error: {}", report.errors[0].message);
        return Ok(EXIT_FATAL);
    }
    eprintln!(
        "scored {}/{} (bridged {}, fallback {})",
        report.scored, report.examples, report.bridged_count, report.fallback_count
    );
    Ok(if report.is_partial() { EXIT_PARTIAL } else { 0 })
}
