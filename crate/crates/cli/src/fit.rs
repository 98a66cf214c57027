use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use lifted::correspond::{default_tau, extract_observations, UvMap};
use lifted::model::{load_instances, load_model, save_dataset, Dataset, InstanceRecord, ShapeModel, UvGrid};
use lifted::objective::LossWeights;
use lifted::solver::{fit, initialize, SolverConfig};
use serde::{Deserialize, Serialize};

use crate::util::{create_dir, hash_entry, read_json, sha256_file, write_json, FileHash};

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FitArgs {
    /// Observation file (JSON lines of id, labels, points)
    #[arg(long, required_unless_present_any = ["manifest", "uv_maps"])]
    pub observations: Option<PathBuf>,
    /// Directory of UV-map PFM images, one instance per file (id = file stem)
    #[arg(long)]
    pub uv_maps: Option<PathBuf>,
    /// UV matching radius for --uv-maps (default 0.5 / n)
    #[arg(long)]
    pub tau: Option<f64>,
    /// Output directory
    #[arg(long, required_unless_present = "manifest")]
    pub out: Option<PathBuf>,
    /// Grid subdivisions per side
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Identity basis size
    #[arg(long = "I", default_value_t = 32)]
    pub identity_dim: usize,
    /// Expression basis size
    #[arg(long = "E", default_value_t = 32)]
    pub expression_dim: usize,
    /// Start from this model instead of the default initialization
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Keep the model fixed and fit only instances (needs --model)
    #[arg(long, requires = "model")]
    pub freeze_model: bool,
    #[arg(long, default_value_t = 400)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub decay_factor: f64,
    /// Epochs between learning-rate decays
    #[arg(long, default_value_t = 50)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long = "lambda-3d", default_value_t = 50.0)]
    pub lambda_3d: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_disentangle: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_shape: f64,
    /// Triplet margin
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rerun the fit recorded in a manifest (other flags are ignored except --out)
    #[serde(skip)]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl FitArgs {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            lr: self.lr,
            decay_factor: self.decay_factor,
            decay_every_epochs: self.decay_every,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            weights: LossWeights {
                lambda_3d: self.lambda_3d,
                lambda_disentangle: self.lambda_disentangle,
                lambda_scale: self.lambda_scale,
                lambda_shape: self.lambda_shape,
                triplet_margin: self.margin,
            },
            freeze_model: self.freeze_model,
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub args: FitArgs,
    pub seed: u64,
    pub solver: SolverConfig,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub excluded: Vec<String>,
    pub losses: Vec<LossRow>,
    pub wall_clock_seconds: f64,
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))
}

fn uv_map_instances(dir: &Path, grid: &UvGrid, tau: f64, args: &FitArgs) -> Result<(Vec<InstanceRecord>, Vec<PathBuf>)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pfm"))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for f in &files {
        let map = UvMap::load(f).with_context(|| format!("loading {}", f.display()))?;
        let corr = extract_observations(&map, grid, tau)?;
        let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push(InstanceRecord::new(id, corr.observations, args.identity_dim, args.expression_dim));
    }
    Ok((out, files))
}

pub fn run(mut args: FitArgs) -> Result<()> {
    if let Some(path) = args.manifest.clone() {
        let manifest: Manifest = read_json(&path)?;
        if manifest.command != "fit" {
            bail!("{} is not a fit manifest", path.display());
        }
        let out = args.out.take();
        args = manifest.args;
        if out.is_some() {
            args.out = out;
        }
        for input in &manifest.inputs {
            let now = sha256_file(&input.path)?;
            if now != input.sha256 {
                log::warn!("{} changed since the manifest was written", input.path.display());
            }
        }
    }
    let out = args.out.clone().context("--out is required")?;
    let started = Instant::now();

    let mut inputs = Vec::new();
    let model = match args.model.clone() {
        Some(p) => {
            args.model = Some(absolute(&p)?);
            inputs.push(hash_entry(&p)?);
            let m = load_model(&p).with_context(|| format!("loading {}", p.display()))?;
            args.n = m.grid.n();
            args.identity_dim = m.identity_dim();
            args.expression_dim = m.expression_dim();
            m
        }
        None => ShapeModel::zeros(UvGrid::new(args.n), args.identity_dim, args.expression_dim),
    };
    let instances = match (args.observations.clone(), args.uv_maps.clone()) {
        (Some(p), _) => {
            args.observations = Some(absolute(&p)?);
            inputs.push(hash_entry(&p)?);
            load_instances(&p, args.identity_dim, args.expression_dim)
                .with_context(|| format!("loading {}", p.display()))?
        }
        (None, Some(dir)) => {
            args.uv_maps = Some(absolute(&dir)?);
            let tau = args.tau.unwrap_or_else(|| default_tau(&model.grid));
            let (insts, files) = uv_map_instances(&dir, &model.grid, tau, &args)?;
            for f in &files {
                inputs.push(hash_entry(f)?);
            }
            insts
        }
        (None, None) => bail!("no observations given"),
    };
    let mut dataset = Dataset::new(model, instances)?;
    let config = args.solver_config();
    if args.model.is_some() {
        let frozen = SolverConfig { freeze_model: true, ..config };
        initialize(&mut dataset, &frozen)?;
    } else {
        initialize(&mut dataset, &config)?;
    }
    let report = fit(&mut dataset, &config)?;
    let excluded: Vec<String> = report.excluded.iter().map(|&k| dataset.instances[k].id.clone()).collect();
    if !excluded.is_empty() {
        log::warn!("{} instances had too few observations and were not fitted", excluded.len());
    }

    create_dir(&out)?;
    let model_path = out.join("model.json");
    let inst_path = out.join("instances.jsonl");
    let loss_path = out.join("losses.csv");
    save_dataset(&dataset, &model_path, &inst_path)?;
    fs::write(&loss_path, report.history.to_csv()).with_context(|| format!("writing {}", loss_path.display()))?;
    let outputs = [&model_path, &inst_path, &loss_path].iter().map(|p| hash_entry(p)).collect::<Result<Vec<_>>>()?;

    let losses = report.history.rows.iter().map(|(e, t, v)| LossRow { epoch: *e, term: t.clone(), value: *v }).collect();
    let manifest = Manifest {
        command: "fit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: args.seed,
        solver: config,
        args: FitArgs { out: Some(out.clone()), manifest: None, ..args },
        inputs,
        outputs,
        excluded,
        losses,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let last = |t: &str| report.history.last(t).unwrap_or(f64::NAN);
    println!("fitted {} instances: total {:.6e}, l3d {:.6e}", dataset.len(), last("total"), last("l3d"));
    Ok(())
}
