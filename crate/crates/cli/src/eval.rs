use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use lifted::evalkit::{
    aligned_shape_errors, default_yaw_bins, evaluate_2d, evaluate_3d, load_gt, mean_reprojection_error,
    parse_yaw_edges, report_by_yaw, report_csv, LandmarkSpec,
};
use lifted::synth::shape_diameter;
use serde::Serialize;

use crate::util::{load_fitted, write_json};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Space {
    #[value(name = "2d")]
    Image,
    #[value(name = "3d")]
    Model,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Fitted model file
    #[arg(long)]
    pub model: PathBuf,
    /// Fitted instance file
    #[arg(long)]
    pub instances: PathBuf,
    /// Ground-truth landmark file (JSON lines)
    #[arg(long)]
    pub gt: PathBuf,
    /// Landmark definition (vertex weights and eye indices)
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long, value_enum, default_value_t = Space::Model)]
    pub space: Space,
    /// Align with scale and translation only (3D)
    #[arg(long)]
    pub no_rotation: bool,
    /// Yaw bin edges in degrees
    #[arg(long, default_value = "0,30,60,90")]
    pub yaw_bins: String,
    /// Write the binned report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-instance scores (id,yaw,nme)
    #[arg(long)]
    pub per_instance: Option<PathBuf>,
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let dataset = load_fitted(&args.model, &args.instances)?;
    let gt = load_gt(&args.gt).with_context(|| format!("loading {}", args.gt.display()))?;
    let spec = LandmarkSpec::load(&args.landmarks).with_context(|| format!("loading {}", args.landmarks.display()))?;
    spec.validate(dataset.model.vertex_count())?;
    let scores = match args.space {
        Space::Image => evaluate_2d(&dataset, &gt, &spec)?,
        Space::Model => evaluate_3d(&dataset, &gt, &spec, !args.no_rotation)?,
    };
    let bins = if args.yaw_bins.trim().is_empty() { default_yaw_bins() } else { parse_yaw_edges(&args.yaw_bins)? };
    let csv = report_csv(&report_by_yaw(&scores, &bins));
    match &args.out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    if let Some(p) = &args.per_instance {
        let mut text = String::from("id,yaw,nme\n");
        for s in &scores {
            text += &format!("{},{},{}\n", s.id, s.yaw, s.nme);
        }
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub instances: PathBuf,
    /// Reference (ground-truth) model
    #[arg(long)]
    pub truth_model: PathBuf,
    /// Reference (ground-truth) instances
    #[arg(long)]
    pub truth_instances: PathBuf,
    /// Write the JSON summary here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Score {
    shape_diameter: f64,
    mean_reprojection_error: f64,
    mean_shape_error: f64,
    max_shape_error: f64,
    /// Both errors divided by the shape diameter, in percent.
    reprojection_percent: f64,
    shape_percent: f64,
}

pub fn score(args: &ScoreArgs) -> Result<()> {
    let fitted = load_fitted(&args.model, &args.instances)?;
    let truth = load_fitted(&args.truth_model, &args.truth_instances)?;
    let diameter = shape_diameter(&truth.model.mean);
    let reprojection = mean_reprojection_error(&fitted)?;
    let errors = aligned_shape_errors(&fitted, &truth)?;
    let mean = errors.iter().map(|e| e.1).sum::<f64>() / errors.len().max(1) as f64;
    let max = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let s = Score {
        shape_diameter: diameter,
        mean_reprojection_error: reprojection,
        mean_shape_error: mean,
        max_shape_error: max,
        reprojection_percent: 100.0 * reprojection / diameter,
        shape_percent: 100.0 * mean / diameter,
    };
    match &args.out {
        Some(p) => write_json(p, &s)?,
        None => println!("{}", serde_json::to_string_pretty(&s)?),
    }
    Ok(())
}
