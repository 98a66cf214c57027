use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use lifted::imageio::{read_pfm, write_pfm};
use lifted::lux::{decompose, gray_image, grayscale, render_shading, LuxConfig, LuxWeights, NormalMap, SH_DIM};
use lifted::render::render_normal_map_uv;
use serde::Serialize;

use crate::util::{create_dir, find_instance, load_fitted, parse_light, write_json};

#[derive(Args, Debug, Clone)]
pub struct LuxArgs {
    /// Texture in UV space (PFM, grey or RGB)
    #[arg(long)]
    pub texture: PathBuf,
    /// Normal map in UV space (PFM, 3 channels); otherwise rendered from
    /// --model/--instances/--id
    #[arg(long, conflicts_with_all = ["model", "instances", "id"])]
    pub normals: Option<PathBuf>,
    #[arg(long, requires_all = ["instances", "id"])]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub final_lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda_shade: f64,
    #[arg(long, default_value_t = 2e-6)]
    pub lambda_albedo: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_light: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_consistency: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_reconstruction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub huber_delta: f64,
    /// Relight with these nine coefficients (comma separated)
    #[arg(long, allow_hyphen_values = true)]
    pub relight: Option<String>,
    /// Write a lighting transition from the fitted coefficients to these
    #[arg(long, allow_hyphen_values = true)]
    pub transition_to: Option<String>,
    /// Frames in the transition, endpoints included
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
}

#[derive(Serialize)]
struct LightReport {
    l: [f64; SH_DIM],
    l_hat: [f64; SH_DIM],
    residual: f64,
    defined_texels: usize,
}

fn normal_map(args: &LuxArgs, width: usize, height: usize) -> Result<NormalMap> {
    if let Some(p) = &args.normals {
        let img = read_pfm(p).with_context(|| format!("loading {}", p.display()))?;
        return Ok(NormalMap::from_image(&img)?);
    }
    match (&args.model, &args.instances, &args.id) {
        (Some(m), Some(i), Some(id)) => {
            let ds = load_fitted(m, i)?;
            let inst = find_instance(&ds, id)?;
            Ok(render_normal_map_uv(&ds.model, inst, width, height)?)
        }
        _ => bail!("give either --normals or --model, --instances and --id"),
    }
}

pub fn run(args: &LuxArgs) -> Result<()> {
    let img = read_pfm(&args.texture).with_context(|| format!("loading {}", args.texture.display()))?;
    let (w, h) = (img.width, img.height);
    let texture = grayscale(&img);
    let map = normal_map(args, w, h)?;
    if (map.width, map.height) != (w, h) {
        bail!("normal map is {}x{} but the texture is {w}x{h}", map.width, map.height);
    }
    let config = LuxConfig {
        weights: LuxWeights {
            shade: args.lambda_shade,
            albedo: args.lambda_albedo,
            light: args.lambda_light,
            consistency: args.lambda_consistency,
            reconstruction: args.lambda_reconstruction,
            huber_delta: args.huber_delta,
        },
        iterations: args.iterations,
        lr: args.lr,
        final_lr: args.final_lr,
    };
    let d = decompose(&texture, &map, &config)?;
    let state = &d.state;
    create_dir(&args.out)?;
    let out = |name: &str| args.out.join(name);
    write_pfm(&gray_image(w, h, &state.albedo), out("albedo.pfm"))?;
    write_pfm(&gray_image(w, h, &state.shading_adapted), out("shading.pfm"))?;
    write_pfm(&gray_image(w, h, &state.rendered()), out("rendered_shading.pfm"))?;
    write_pfm(&gray_image(w, h, &state.reconstruction()), out("reconstruction.pfm"))?;
    write_pfm(&map.to_image(), out("normals.pfm"))?;
    let report = LightReport { l: state.l, l_hat: d.l_hat, residual: d.residual, defined_texels: map.defined_count() };
    write_json(&out("light.json"), &report)?;
    if let Some(text) = &args.relight {
        let l = parse_light(text)?;
        write_pfm(&gray_image(w, h, &state.relight(&l)), out("relit.pfm"))?;
        write_pfm(&gray_image(w, h, &state.relit_shading(&l)), out("relit_shading.pfm"))?;
    }
    if let Some(text) = &args.transition_to {
        if args.frames < 2 {
            bail!("--frames must be at least 2");
        }
        let target = parse_light(text)?;
        for k in 0..args.frames {
            let alpha = k as f64 / (args.frames - 1) as f64;
            let l: [f64; SH_DIM] = std::array::from_fn(|c| (1.0 - alpha) * state.l[c] + alpha * target[c]);
            write_pfm(&gray_image(w, h, &state.relight(&l)), out(&format!("transition_{k:03}.pfm")))?;
            write_pfm(&gray_image(w, h, &render_shading(&map, &l)), out(&format!("transition_shading_{k:03}.pfm")))?;
        }
    }
    println!("residual {:.3e} over {} texels", d.residual, map.defined_count());
    Ok(())
}
