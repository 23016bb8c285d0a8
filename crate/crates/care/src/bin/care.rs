//! Thin CLI over the pipeline. Exit codes: 0 success, 2 configuration or
//! usage error, 3 precondition failure (e.g. a missing upstream artifact;
//! the message names the stage to run first), 4 numeric failure.

use care::error::Error;
use care::model::ModelConfig;
use care::pipeline::{report, EvalOptions, FinetuneOptions, Pipeline, RunConfig, RUN_DIR_ENV};
use care::world::Scenario;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "care", about = "conflict-aware retrieval-augmented generation, desk scale")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact root (precedence: this flag, then $CARE_RUN_DIR, then config)
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override the master seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Re-run the stage even when its artifacts are up to date
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the fact world and retrieval corpus
    Worldgen {
        /// Override the configured entity count
        #[arg(long)]
        entities: Option<usize>,
        /// Override the configured relation count
        #[arg(long)]
        relations: Option<usize>,
        /// Override the configured fraction of conflicted facts
        #[arg(long)]
        conflict_rate: Option<f64>,
    },
    /// Train the frozen base model on the known fact split
    PretrainBase,
    /// Record which questions the base model answers closed-book
    Probe,
    /// Stage 1: reconstruction pre-training of the assessor
    PretrainAssessor,
    /// Assemble the grounded/adversarial fine-tuning set
    BuildFtdata {
        /// Scenario labelling: correct | random
        #[arg(long)]
        criteria: Option<String>,
        /// Negative-context mining: hard | random
        #[arg(long)]
        negatives: Option<String>,
    },
    /// Stage 2: conflict-aware fine-tuning with dual distillation
    Finetune {
        /// Distillation weight (overrides config kd_weight)
        #[arg(long)]
        lambda: Option<f64>,
        /// Drop the answer language-modeling term
        #[arg(long)]
        no_lm: bool,
        /// Drop the distillation term
        #[arg(long)]
        no_kd: bool,
        /// Train on one scenario only: grounded | adversarial
        #[arg(long)]
        scenario: Option<String>,
        /// Initialize from the base checkpoint, skipping stage 1
        #[arg(long)]
        from_base: bool,
        /// Output checkpoint name (default care.ckpt)
        #[arg(long)]
        out: Option<String>,
    },
    /// Run methods over the eval questions and write records + metrics
    Evaluate {
        /// Comma-separated subset of closed,rag,care
        #[arg(long)]
        methods: Option<String>,
        /// Checkpoint name for the care method (default care.ckpt)
        #[arg(long)]
        checkpoint: Option<String>,
        /// Records file name (default eval.jsonl)
        #[arg(long)]
        out: Option<String>,
        /// Question subset: known | unknown | all (default all)
        #[arg(long)]
        split: Option<String>,
        /// World file to evaluate against (default {run_dir}/world.jsonl)
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Compare record files in an ablation-style All/Res./Boost table
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
    /// Check objective gradients against finite differences (f64, 1 layer)
    Gradcheck,
    /// Write pooled memory embeddings per question for projection tools
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: Option<String>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::TargetOutOfVocab { .. } => 2,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::NonDeterministic { .. } => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> care::Result<u8> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_toml_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    let dir = cli
        .run_dir
        .clone()
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&config.run_dir));
    let force = cli.force;

    // flag-level overrides are part of the run identity, so they fold into
    // the config (and its hash) before the pipeline is constructed
    match &cli.command {
        Command::Worldgen { entities, relations, conflict_rate } => {
            if let Some(e) = entities {
                config.world.entities = *e;
            }
            if let Some(r) = relations {
                config.world.relations = *r;
            }
            if let Some(c) = conflict_rate {
                config.world.conflict_rate = *c;
            }
        }
        Command::BuildFtdata { criteria, negatives } => {
            config.finetune.criteria = match criteria.as_deref() {
                None => config.finetune.criteria,
                Some("correct") => care::world::Criteria::Correct,
                Some("random") => care::world::Criteria::Random,
                Some(other) => {
                    return Err(Error::Config(format!("unknown criteria '{other}' (expected correct or random)")))
                }
            };
            config.finetune.negatives = match negatives.as_deref() {
                None => config.finetune.negatives,
                Some("hard") => care::world::NegativeMining::Hard,
                Some("random") => care::world::NegativeMining::Random,
                Some(other) => {
                    return Err(Error::Config(format!("unknown negatives '{other}' (expected hard or random)")))
                }
            };
        }
        _ => {}
    }

    match cli.command {
        Command::Gradcheck => {
            // independent of any run directory
            let results = care::trainer::objective_gradcheck(&ModelConfig::probe(), 17)?;
            let mut worst = 0f64;
            for (name, err) in &results {
                println!("{name}: max relative gradient error {err:.3e}");
                worst = worst.max(*err);
            }
            if worst <= 1e-4 {
                println!("gradcheck passed (threshold 1e-4)");
                return Ok(0);
            }
            eprintln!("gradcheck FAILED: {worst:.3e} > 1e-4");
            return Ok(4);
        }
        Command::Report { records } => {
            print!("{}", report(&records)?);
            return Ok(0);
        }
        _ => {}
    }

    let pipeline = Pipeline::new(config, dir)?;
    match cli.command {
        Command::Worldgen { .. } => {
            let ran = pipeline.worldgen(force)?;
            println!("worldgen: {}", if ran { "done" } else { "up to date" });
        }
        Command::PretrainBase => {
            let ran = pipeline.pretrain_base(force)?;
            println!("pretrain-base: {}", if ran { "done" } else { "up to date" });
        }
        Command::Probe => {
            let ran = pipeline.probe(force)?;
            println!("probe: {}", if ran { "done" } else { "up to date" });
        }
        Command::PretrainAssessor => match pipeline.pretrain_assessor(force)? {
            Some(acc) => println!("pretrain-assessor: done, held-out token accuracy {acc:.4}"),
            None => println!("pretrain-assessor: up to date"),
        },
        Command::BuildFtdata { .. } => match pipeline.build_ftdata(force)? {
            Some(stats) => println!(
                "build-ftdata: {} examples ({} grounded, {} adversarial; dropped {} no-span, {} no-negative)",
                stats.total, stats.grounded, stats.adversarial, stats.dropped_no_span, stats.dropped_no_negative
            ),
            None => println!("build-ftdata: up to date"),
        },
        Command::Finetune { lambda, no_lm, no_kd, scenario, from_base, out } => {
            let scenario_filter = match scenario.as_deref() {
                None => None,
                Some("grounded") => Some(Scenario::Grounded),
                Some("adversarial") => Some(Scenario::Adversarial),
                Some(other) => {
                    return Err(Error::Config(format!(
                        "unknown scenario '{other}' (expected grounded or adversarial)"
                    )))
                }
            };
            let options = FinetuneOptions { kd_weight: lambda, no_lm, no_kd, scenario_filter, from_base, out };
            let ran = pipeline.finetune(force, &options)?;
            println!("finetune: {}", if ran { "done" } else { "up to date" });
        }
        Command::Evaluate { methods, checkpoint, out, split, world } => {
            let known_only = match split.as_deref() {
                None | Some("all") => None,
                Some("known") => Some(true),
                Some("unknown") => Some(false),
                Some(other) => {
                    return Err(Error::Config(format!(
                        "unknown split '{other}' (expected known, unknown, or all)"
                    )))
                }
            };
            let options = EvalOptions {
                methods: methods.map(|m| m.split(',').map(|s| s.trim().to_string()).collect()),
                checkpoint,
                out,
                known_only,
                world,
            };
            let (metrics, timing) = pipeline.evaluate(&options)?;
            print!("{}", care::eval::render_table(&metrics));
            eprintln!(
                "timing: encode {:.2}s, generate {:.2}s",
                timing.encode_secs, timing.generate_secs
            );
        }
        Command::DumpEmbeddings { checkpoint } => {
            let path = pipeline.dump_embeddings(checkpoint.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Gradcheck | Command::Report { .. } => unreachable!(),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
