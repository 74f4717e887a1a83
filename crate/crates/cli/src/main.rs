use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use hegs_detr::harness::{
    cmd_analyze, cmd_eval, cmd_plot, run_selftest, train, ImageSelection, RunConfig, SelftestOptions, SplitName,
    TrainOptions,
};
use hegs_detr::Error;

/// Test hook: value "spd_inverse" corrupts the inverse checked by selftest.
const CORRUPT_ENV: &str = "HEGS_SELFTEST_CORRUPT";
/// Test hook: optimizer step (1-based) whose loss is replaced by NaN.
const INJECT_ENV: &str = "HEGS_INJECT_NONFINITE_STEP";

#[derive(Parser)]
#[command(name = "hegs", version, about = "Train, evaluate and inspect the small-object detection transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in total.
        #[arg(long)]
        stop_after_epochs: Option<usize>,
        /// Stop at the first step after this many seconds.
        #[arg(long)]
        time_budget_secs: Option<u64>,
        /// Stop after the first validation whose AP50 reaches this value.
        #[arg(long)]
        target_ap50: Option<f64>,
    },
    /// Compute AP and stage-fading rates for a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val", value_parser = ["train", "val"])]
        split: String,
    },
    /// Export attention maps, sampling records and per-stage predictions.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// A directory of PNG/JPEG images, or comma-separated validation ids.
        #[arg(long)]
        images: String,
    },
    /// Run the fast invariant suite.
    Selftest {
        /// Print results as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Render overlays from `analyze` exports.
    Plot {
        /// An analyze output directory or a single image directory inside it.
        #[arg(long)]
        dir: PathBuf,
        /// Number of top detections whose sampling points are drawn.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Write a preset config file.
    Init {
        #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable report"));
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train { config, resume, stop_after_epochs, time_budget_secs, target_ap50 } => {
            let cfg = RunConfig::load(&config)?;
            let inject = match std::env::var(INJECT_ENV) {
                Ok(v) => Some(v.parse().map_err(|_| Error::Config(format!("{INJECT_ENV} must be a step number")))?),
                Err(_) => None,
            };
            let summary = train(
                &cfg,
                &TrainOptions {
                    resume,
                    stop_after_epochs,
                    time_budget: time_budget_secs.map(Duration::from_secs),
                    inject_nonfinite_at_step: inject,
                    skip_final_eval: false,
                    target_ap50,
                },
            )?;
            eprintln!(
                "trained {} epochs ({} steps) into {}",
                summary.epochs_completed,
                summary.steps,
                summary.output_dir.display()
            );
            if let Some(r) = &summary.final_eval {
                print_json(r);
            }
            Ok(0)
        }
        Command::Eval { config, ckpt, split } => {
            let cfg = RunConfig::load(&config)?;
            let split: SplitName = split.parse()?;
            print_json(&cmd_eval(&cfg, &ckpt, split)?);
            Ok(0)
        }
        Command::Analyze { config, ckpt, images } => {
            let cfg = RunConfig::load(&config)?;
            let sel: ImageSelection = images.parse()?;
            for im in cmd_analyze(&cfg, &ckpt, &sel)? {
                println!(
                    "image {}: attention {}x{}, {} sampling rows -> {}",
                    im.image_id,
                    im.attention_shape.0,
                    im.attention_shape.1,
                    im.sampling_rows,
                    im.dir.display()
                );
            }
            Ok(0)
        }
        Command::Selftest { json } => {
            let opts = SelftestOptions {
                corrupt_spd_inverse: std::env::var(CORRUPT_ENV).is_ok_and(|v| v == "spd_inverse"),
            };
            let t = std::time::Instant::now();
            let results = run_selftest(&opts);
            if json {
                print_json(&results);
            } else {
                for r in &results {
                    let tag = if r.passed { "PASS" } else { "FAIL" };
                    println!("{tag} {:<24} {:>6} ms  {}", r.name, r.millis, r.detail);
                }
            }
            if t.elapsed() > Duration::from_secs(120) {
                eprintln!("warning: selftest took {:.0} s, over the 2 minute budget", t.elapsed().as_secs_f64());
            }
            Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
        }
        Command::Plot { dir, top } => {
            for p in cmd_plot(&dir, top)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Init { preset, out } => {
            RunConfig::preset(&preset)?.save(&out)?;
            println!("{}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
