//! `lifted`: synthetic data, fitting, evaluation, rendering and
//! illumination decomposition from the command line.

mod eval;
mod fit;
mod lux;
mod synth;
mod util;
mod view;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "lifted", version, about = "Learn morphable surface models and cameras from 2D point collections")]
struct Cli {
    /// Worker threads for parallel loops (0 = all cores)
    #[arg(long, global = true, env = "LIFTED_THREADS")]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic ground-truth dataset with observations and landmarks
    Synth(synth::SynthArgs),
    /// Fit a shape model and per-instance codes and cameras to observations
    Fit(fit::FitArgs),
    /// Landmark errors of a fitted dataset against ground truth, by yaw bin
    Eval(eval::EvalArgs),
    /// Reprojection error and aligned 3D shape error against a reference dataset
    Score(eval::ScoreArgs),
    /// Render a fitted instance at yaw offsets and export its mesh
    Render(view::RenderArgs),
    /// Interpolate codes and cameras between two instances
    Interpolate(view::InterpolateArgs),
    /// Split a texture into albedo, shading and spherical-harmonics lighting
    Lux(lux::LuxArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth::run(&a),
        Command::Fit(a) => fit::run(a),
        Command::Eval(a) => eval::run(&a),
        Command::Score(a) => eval::score(&a),
        Command::Render(a) => view::render(&a),
        Command::Interpolate(a) => view::interpolate(&a),
        Command::Lux(a) => lux::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
