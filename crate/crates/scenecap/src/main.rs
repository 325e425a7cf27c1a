use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scenecap::commands::{EvalConfig, MeshFormat};
use scenecap::config::parse_term;
use scenecap::model_io::model_or_default;
use scenecap::{cmd_eval, cmd_export, cmd_fit, cmd_synth, thread_count, with_threads, CliError, RunManifest};
use scenecap_core::synth::{Preset, ScenarioSpec};

/// Multi-person body and scene capture from disparity, 2D joints, body
/// estimates and instance masks.
#[derive(Debug, Parser)]
#[command(name = "scenecap", version)]
struct Cli {
    /// Worker threads (defaults to $SCENECAP_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scenario with ground truth.
    Synth {
        /// Built-in scenario name.
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        preset: Option<String>,
        /// Scenario description (JSON).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Body-model directory (default: built-in synthetic body).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit bodies, scales and the scene to an observation sequence.
    Fit {
        /// `sequence.json` or the directory containing it.
        manifest: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Run configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Energy term to switch off (repeatable), e.g. `e_scale`.
        #[arg(long = "disable", value_name = "TERM")]
        disable: Vec<String>,
        #[arg(long)]
        batch_frames: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score predicted poses against ground truth.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        /// 3DPCK threshold in meters.
        #[arg(long, default_value_t = 0.15)]
        pck_threshold: f64,
        /// AP root threshold in meters.
        #[arg(long, default_value_t = 0.25)]
        ap_threshold: f64,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Export posed meshes, skeletons and the scene cloud of a fit.
    Export {
        results: PathBuf,
        /// Mesh format: ply or obj.
        #[arg(long, default_value = "ply")]
        format: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn scenario(preset: Option<String>, spec: Option<PathBuf>) -> scenecap::Result<ScenarioSpec> {
    if let Some(p) = spec {
        let bytes = std::fs::read(&p).map_err(|e| CliError::input(&p, e))?;
        return serde_json::from_slice(&bytes).map_err(|e| CliError::input(&p, e));
    }
    let name = preset.unwrap_or_default();
    Preset::parse(&name).map(|p| p.spec()).ok_or_else(|| {
        let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
        CliError::usage(format!("unknown preset '{name}', expected one of {}", names.join(", ")))
    })
}

fn execute(command: Command) -> scenecap::Result<()> {
    match command {
        Command::Synth {
            preset,
            spec,
            frames,
            seed,
            model,
            output,
        } => {
            let mut s = scenario(preset, spec)?;
            if let Some(t) = frames {
                s.frames = t;
            }
            if let Some(v) = seed {
                s.seed = v;
            }
            let model = model_or_default(model.as_deref())?;
            let r = cmd_synth(&s, &model, &output)?;
            println!("scenario {}: {} frames, {} persons", r.name, r.frames, r.persons);
            println!("manifest {}", r.manifest.display());
            println!("sha256 {}", r.checksum);
        }
        Command::Fit {
            manifest,
            model,
            config,
            seed,
            disable,
            batch_frames,
            output,
        } => {
            let rm = RunManifest {
                manifest,
                model,
                config,
                output,
                seed,
                disable: disable.iter().map(|s| parse_term(s)).collect::<scenecap::Result<_>>()?,
                batch_frames,
            };
            let r = cmd_fit(&rm)?;
            println!(
                "fitted {} persons over {} frames in {} iterations ({}), {} scene points",
                r.persons, r.frames, r.iterations, r.ablation.tag, r.scene_points
            );
            println!("results {}", r.output.display());
        }
        Command::Eval {
            pred,
            gt,
            pck_threshold,
            ap_threshold,
            output,
        } => {
            let cfg = EvalConfig {
                pck_threshold,
                ap_threshold,
            };
            let r = cmd_eval(&pred, &gt, output.as_deref(), &cfg)?;
            println!("{:<10} {:>12}", "metric", "value");
            for (k, v) in r.rows() {
                let v = v.map_or(String::from("-"), |v| format!("{v:.3}"));
                println!("{k:<10} {v:>12}");
            }
            println!("matched {} pairs over {} frames, {} missed", r.matched, r.frames, r.missed);
        }
        Command::Export {
            results,
            format,
            model,
            output,
        } => {
            let format = MeshFormat::parse(&format)?;
            let model = model_or_default(model.as_deref())?;
            let r = cmd_export(&results, format, &model, &output)?;
            println!("{} meshes, skeleton {}", r.meshes.len(), r.skeleton.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = thread_count(cli.threads).and_then(|n| with_threads(n, || execute(cli.command))).and_then(|r| r);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
