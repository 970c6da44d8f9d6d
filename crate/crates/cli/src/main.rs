//! Command-line front end: world generation, the two training procedures,
//! evaluation, the sampled-class sweep, the component ablation grid, and the
//! gradient certification suite.
//!
//! Exit codes: 0 success, 2 configuration error (bad config file, missing
//! artifact), 1 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ovlab_core::error::Error;
use ovlab_core::eval::{
    self, ablation_csv, curve_to_csv, metrics_to_jsonl, sweep_csv, EvalReport,
};
use ovlab_core::synth::{gen_world, SyntheticWorld};
use ovlab_core::trainer::{self, DetectorHead, PromptArtifact, TrainConfig};
use ovlab_core::{gradcheck, Result};

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "OVLAB_OUT_DIR";

#[derive(Parser)]
#[command(name = "ovlab", about = "Desk-scale open-vocabulary prompt-learning lab", version)]
struct Cli {
    /// Flat key-value (TOML) config file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: $OVLAB_OUT_DIR, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress progress output on stdout.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write world.json.
    GenWorld,
    /// Procedure A: learn the foreground and background prompts.
    TrainPrompts,
    /// Procedure B: train the detector analog against learned prompts.
    TrainDetector,
    /// Evaluate the learned prompts (and detector head, if present).
    Eval,
    /// Sweep the sampled-vocabulary size and record novel accuracy.
    SweepK {
        /// Comma-separated k values (default: 10,15,20,25,30,35,40 clipped
        /// to the base-class count).
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
        /// Paired seeds per k.
        #[arg(long, default_value_t = 5)]
        num_seeds: u64,
    },
    /// Run the five-component ablation grid.
    Ablate {
        /// Paired seeds per row.
        #[arg(long, default_value_t = 5)]
        num_seeds: u64,
    },
    /// Finite-difference certification of all analytic gradients.
    Gradcheck {
        /// Number of seeded micro-instances.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut config = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Load the world artifact when present, otherwise regenerate it from the
/// config (the world is pure config, not a training product).
fn load_or_gen_world(config: &TrainConfig, dir: &Path) -> Result<SyntheticWorld> {
    let path = dir.join("world.json");
    if path.exists() {
        SyntheticWorld::load(&path)
    } else {
        gen_world(&config.task_spec())
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn print_report(report: &EvalReport, quiet: bool) {
    if quiet {
        return;
    }
    println!("base accuracy        {:.4}", report.base_accuracy);
    println!("novel accuracy       {:.4}", report.novel_accuracy);
    println!("overall accuracy     {:.4}", report.overall_accuracy);
    println!("novel-as-base error  {:.4}", report.novel_as_base_error);
    println!("novel-as-bg rate     {:.4}", report.novel_as_background_rate);
    println!("background FP rate   {:.4}", report.background_fp_rate);
    if let (Some(intra), Some(inter)) =
        (report.mean_intra_class_cos, report.mean_inter_class_cos)
    {
        println!("intra-class cosine   {intra:.4}");
        println!("inter-class cosine   {inter:.4}");
    }
}

fn run(cli: &Cli) -> Result<()> {
    let dir = out_dir(cli);
    let config = load_config(cli)?;

    match &cli.command {
        Command::GenWorld => {
            ensure_dir(&dir)?;
            let world = gen_world(&config.task_spec())?;
            let path = dir.join("world.json");
            world.save(&path)?;
            // The frozen text encoder belongs to the world; dump it beside it.
            let encoder = trainer::build_encoder(&config);
            let enc_text = serde_json::to_string(&encoder)
                .map_err(|e| Error::parse("encoder", e.to_string()))?;
            write(&dir.join("encoder.json"), &enc_text)?;
            if !cli.quiet {
                println!(
                    "world: {} base + {} novel classes, d = {} -> {}",
                    world.vocab.n_base(),
                    world.vocab.n_novel(),
                    world.spec.d,
                    path.display()
                );
            }
        }
        Command::TrainPrompts => {
            ensure_dir(&dir)?;
            let world = load_or_gen_world(&config, &dir)?;
            let out = trainer::run_procedure_a(&world, &config)?;
            for curve in &out.curves {
                let name = if out.curves.len() == 1 {
                    "prompt_curve.csv".to_string()
                } else {
                    format!("prompt_curve_{}.csv", curve.name)
                };
                write(&dir.join(&name), &curve_to_csv(&curve.points))?;
            }
            let artifact = PromptArtifact {
                dim: config.d,
                seed: config.seed,
                prompts: out.prompts,
            };
            let path = dir.join("prompts.json");
            artifact.save(&path)?;
            if !cli.quiet {
                let last = out
                    .curves
                    .first()
                    .and_then(|c| c.points.last())
                    .map(|p| format!("final loss_p {:.4}, loss_n {:.4}", p.loss_p, p.loss_n))
                    .unwrap_or_else(|| "no training steps".into());
                println!("prompts trained ({last}) -> {}", path.display());
            }
        }
        Command::TrainDetector => {
            ensure_dir(&dir)?;
            let world = load_or_gen_world(&config, &dir)?;
            let artifact = PromptArtifact::load(&dir.join("prompts.json"))?;
            let out = trainer::run_procedure_b(&world, &artifact.prompts, &config)?;
            write(&dir.join("metrics.jsonl"), &metrics_to_jsonl(&out.metrics))?;
            let bank_text = serde_json::to_string(&out.bank)
                .map_err(|e| Error::parse("memory bank", e.to_string()))?;
            write(&dir.join("bank.json"), &bank_text)?;
            let path = dir.join("detector.json");
            out.head.save(&path)?;
            if !cli.quiet {
                let last = out.metrics.last().expect("det_steps > 0");
                println!(
                    "detector trained: final loss_cls {:.4}, loss_icl {:.4} -> {}",
                    last.loss_cls,
                    last.loss_icl,
                    path.display()
                );
            }
        }
        Command::Eval => {
            ensure_dir(&dir)?;
            let world = load_or_gen_world(&config, &dir)?;
            let artifact = PromptArtifact::load(&dir.join("prompts.json"))?;
            let head_path = dir.join("detector.json");
            let head = if head_path.exists() {
                Some(DetectorHead::load(&head_path)?)
            } else {
                None
            };
            let report =
                eval::eval_classifier(&world, &artifact.prompts, head.as_ref(), &config)?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::parse("eval report", e.to_string()))?;
            write(&dir.join("eval_report.json"), &text)?;
            print_report(&report, cli.quiet);
        }
        Command::SweepK { k_values, num_seeds } => {
            ensure_dir(&dir)?;
            let world = load_or_gen_world(&config, &dir)?;
            let ks: Vec<usize> = match k_values {
                Some(v) => v.clone(),
                None => [10, 15, 20, 25, 30, 35, 40]
                    .into_iter()
                    .filter(|k| *k <= config.n_base)
                    .collect(),
            };
            let seeds: Vec<u64> = (0..*num_seeds).map(|i| config.seed + i).collect();
            let rows = eval::sweep_sampled_classes(&world, &config, &ks, &seeds)?;
            let csv = sweep_csv(&rows);
            write(&dir.join("sweep_k.csv"), &csv)?;
            if !cli.quiet {
                print!("{csv}");
            }
        }
        Command::Ablate { num_seeds } => {
            ensure_dir(&dir)?;
            let world = load_or_gen_world(&config, &dir)?;
            let seeds: Vec<u64> = (0..*num_seeds).map(|i| config.seed + i).collect();
            let rows = eval::ablation_grid(&world, &config, &seeds)?;
            let csv = ablation_csv(&rows);
            write(&dir.join("ablation.csv"), &csv)?;
            if !cli.quiet {
                print!("{csv}");
            }
        }
        Command::Gradcheck { instances } => {
            let report = gradcheck::run(config.seed, *instances)?;
            println!("gradient certification over {} instances (h = 1e-5):", report.instances);
            println!("  loss_p  wrt prompts  max rel err {:.3e}", report.loss_p_wrt_prompts);
            println!("  loss_n  wrt prompts  max rel err {:.3e}", report.loss_n_wrt_prompts);
            println!("  icl     wrt net      max rel err {:.3e}", report.icl_wrt_net);
            println!("  icl     wrt inputs   max rel err {:.3e}", report.icl_wrt_inputs);
            println!("  cls     wrt inputs   max rel err {:.3e}", report.cls_wrt_inputs);
            println!("  cls     wrt adapter  max rel err {:.3e}", report.cls_wrt_adapter);
            if !report.passed() {
                return Err(Error::NonFinite {
                    context: "gradient certification failed tolerance 1e-5",
                });
            }
            println!("all gradients within {:.0e}", gradcheck::TOLERANCE);
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::Parse { .. } | Error::MissingArtifact(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
