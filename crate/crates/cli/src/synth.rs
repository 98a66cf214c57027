use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use lifted::evalkit::save_gt;
use lifted::imageio::write_pfm;
use lifted::lux::gray_image;
use lifted::model::{save_dataset, save_observations};
use lifted::synth::{generate, SynthConfig};
use serde::Serialize;

use crate::util::{create_dir, file_stem, write_json};

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Grid subdivisions per side (the surface has (n+1)^2 vertices)
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Identity basis size
    #[arg(long = "I", default_value_t = 4)]
    pub identity_dim: usize,
    /// Expression basis size
    #[arg(long = "E", default_value_t = 3)]
    pub expression_dim: usize,
    /// Number of instances
    #[arg(long = "K", default_value_t = 150)]
    pub instances: usize,
    #[arg(long, default_value_t = -45.0, allow_negative_numbers = true)]
    pub yaw_min: f64,
    #[arg(long, default_value_t = 45.0, allow_negative_numbers = true)]
    pub yaw_max: f64,
    #[arg(long, default_value_t = -15.0, allow_negative_numbers = true)]
    pub pitch_min: f64,
    #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
    pub pitch_max: f64,
    #[arg(long, default_value_t = -10.0, allow_negative_numbers = true)]
    pub roll_min: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub roll_max: f64,
    #[arg(long, default_value_t = 0.8)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 1.2)]
    pub sigma_max: f64,
    /// Translations are drawn from [-t, t]^2
    #[arg(long, default_value_t = 0.1)]
    pub translation: f64,
    /// Gaussian noise added to every observed point
    #[arg(long, default_value_t = 0.0)]
    pub noise_std: f64,
    /// Probability that a vertex is unobserved
    #[arg(long, default_value_t = 0.1)]
    pub occlusion_rate: f64,
    /// Identity groups (0 = unlabelled, per-instance codes)
    #[arg(long, default_value_t = 10)]
    pub identities: usize,
    /// Expression groups (0 = unlabelled)
    #[arg(long, default_value_t = 5)]
    pub expressions: usize,
    /// Pose groups sharing one camera (0 = unlabelled)
    #[arg(long, default_value_t = 0)]
    pub poses: usize,
    /// RMS vertex displacement of a unit code, relative to the shape diameter
    #[arg(long, default_value_t = 0.05)]
    pub basis_scale: f64,
    /// Render shaded textures for the first this-many instances
    #[arg(long, default_value_t = 0)]
    pub textures: usize,
    #[arg(long, default_value_t = 64)]
    pub texture_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            n: self.n,
            identity_dim: self.identity_dim,
            expression_dim: self.expression_dim,
            instances: self.instances,
            yaw: (self.yaw_min, self.yaw_max),
            pitch: (self.pitch_min, self.pitch_max),
            roll: (self.roll_min, self.roll_max),
            sigma: (self.sigma_min, self.sigma_max),
            translation: self.translation,
            noise_std: self.noise_std,
            occlusion_rate: self.occlusion_rate,
            identities: self.identities,
            expressions: self.expressions,
            poses: self.poses,
            basis_scale: self.basis_scale,
            textures: self.textures,
            texture_size: self.texture_size,
            seed: self.seed,
        }
    }
}

#[derive(Serialize)]
struct LightFile<'a> {
    instance: &'a str,
    l: [f64; lifted::lux::SH_DIM],
}

pub fn run(args: &SynthArgs) -> Result<()> {
    let config = args.config();
    let out = generate(&config)?;
    let dir = &args.out;
    create_dir(dir)?;
    save_dataset(&out.truth, dir.join("truth_model.json"), dir.join("truth_instances.jsonl"))?;
    save_observations(&out.truth.instances, dir.join("observations.jsonl"))?;
    out.landmarks.save(dir.join("landmarks.json"))?;
    save_gt(&out.gt_2d, dir.join("gt_2d.jsonl"))?;
    save_gt(&out.gt_3d, dir.join("gt_3d.jsonl"))?;
    write_json(&dir.join("synth_config.json"), &config)?;
    for tex in &out.textures {
        let sub = dir.join("textures").join(file_stem(&tex.instance));
        create_dir(&sub)?;
        let (w, h) = (tex.normal_map.width, tex.normal_map.height);
        write_pfm(&gray_image(w, h, &tex.texture), sub.join("texture.pfm"))?;
        write_pfm(&gray_image(w, h, &tex.albedo), sub.join("albedo.pfm"))?;
        write_pfm(&tex.normal_map.to_image(), sub.join("normals.pfm"))?;
        write_json(&sub.join("light.json"), &LightFile { instance: &tex.instance, l: tex.l })?;
    }
    println!("wrote {} instances to {}", out.truth.len(), dir.display());
    Ok(())
}
