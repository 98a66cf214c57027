use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use lifted::geometry::{slerp, triangulate};
use lifted::model::{CameraPose, InstanceRecord, ShapeModel};
use lifted::render::{export_obj, framing_camera, render_instance, with_yaw_offset};
use serde::Serialize;

use crate::util::{create_dir, file_stem, find_instance, load_fitted, parse_list};

#[derive(Args, Debug, Clone)]
pub struct RenderArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub instances: PathBuf,
    /// Instance to render
    #[arg(long)]
    pub id: String,
    /// Yaw offsets in degrees, comma separated
    #[arg(long, default_value = "0", allow_negative_numbers = true)]
    pub yaw: String,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    /// Use the instance's own camera translation and scale instead of
    /// centring the shape in the image
    #[arg(long)]
    pub instance_camera: bool,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

fn uv_coords(model: &ShapeModel) -> Vec<(f64, f64)> {
    (0..model.vertex_count()).map(|i| model.grid.uv(i)).collect()
}

fn view_camera(shape: &[nalgebra::Vector3<f64>], camera: &CameraPose, q: [f64; 4], own: bool, w: usize, h: usize) -> Result<CameraPose> {
    if own {
        Ok(CameraPose { q, ..*camera })
    } else {
        Ok(framing_camera(shape, q, w, h)?)
    }
}

pub fn render(args: &RenderArgs) -> Result<()> {
    let dataset = load_fitted(&args.model, &args.instances)?;
    let inst = find_instance(&dataset, &args.id)?;
    let offsets = parse_list(&args.yaw)?;
    create_dir(&args.out)?;
    let stem = file_stem(&inst.id);
    let shape = inst.shape(&dataset.model)?;
    let tris = triangulate(&dataset.model.grid)?;
    export_obj(&shape, &tris, &uv_coords(&dataset.model), args.out.join(format!("{stem}.obj")))?;
    for deg in offsets {
        let q = with_yaw_offset(&inst.camera.q, deg)?;
        let camera = view_camera(&shape, &inst.camera, q, args.instance_camera, args.width, args.height)?;
        let image = render_instance(&dataset.model, inst, &camera, args.width, args.height)?;
        let path = args.out.join(format!("{stem}_yaw{deg:+.1}.ppm"));
        image.write_ppm([0.0; 3], &path)?;
        println!("{}: {} foreground pixels", path.display(), image.foreground_count());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Blend {
    Codes,
    Camera,
    Both,
}

#[derive(Args, Debug, Clone)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub instances: PathBuf,
    /// Start instance id
    #[arg(long)]
    pub from: String,
    /// End instance id
    #[arg(long)]
    pub to: String,
    /// Number of frames including both endpoints
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// What to interpolate; the rest is taken from the start instance
    #[arg(long, value_enum, default_value_t = Blend::Both)]
    pub blend: Blend,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long)]
    pub instance_camera: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Frame {
    frame: usize,
    alpha: f64,
    identity: Vec<f64>,
    expression: Vec<f64>,
    q: [f64; 4],
    t: [f64; 2],
    sigma: f64,
}

fn lerp(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect()
}

/// Instance at `alpha` between `a` (0) and `b` (1).
pub fn blend_instances(a: &InstanceRecord, b: &InstanceRecord, alpha: f64, blend: Blend) -> InstanceRecord {
    let mut out = a.clone();
    out.id = format!("{}~{}", a.id, b.id);
    if blend != Blend::Camera {
        out.code_identity = lerp(&a.code_identity, &b.code_identity, alpha);
        out.code_expression = lerp(&a.code_expression, &b.code_expression, alpha);
    }
    if blend != Blend::Codes {
        out.camera = CameraPose {
            q: slerp(&a.camera.q, &b.camera.q, alpha),
            t: a.camera.t * (1.0 - alpha) + b.camera.t * alpha,
            sigma: (1.0 - alpha) * a.camera.sigma + alpha * b.camera.sigma,
        };
    }
    out
}

pub fn interpolate(args: &InterpolateArgs) -> Result<()> {
    if args.frames < 2 {
        bail!("--frames must be at least 2");
    }
    let dataset = load_fitted(&args.model, &args.instances)?;
    let a = find_instance(&dataset, &args.from)?;
    let b = find_instance(&dataset, &args.to)?;
    create_dir(&args.out)?;
    let tris = triangulate(&dataset.model.grid)?;
    let uv = uv_coords(&dataset.model);
    let log_path = args.out.join("frames.jsonl");
    let mut log = fs::File::create(&log_path).with_context(|| format!("writing {}", log_path.display()))?;
    for k in 0..args.frames {
        let alpha = k as f64 / (args.frames - 1) as f64;
        let inst = blend_instances(a, b, alpha, args.blend);
        let shape = inst.shape(&dataset.model)?;
        export_obj(&shape, &tris, &uv, args.out.join(format!("frame_{k:03}.obj")))?;
        let camera = view_camera(&shape, &inst.camera, inst.camera.q, args.instance_camera, args.width, args.height)?;
        let image = render_instance(&dataset.model, &inst, &camera, args.width, args.height)?;
        image.write_ppm([0.0; 3], args.out.join(format!("frame_{k:03}.ppm")))?;
        let frame = Frame {
            frame: k,
            alpha,
            identity: inst.code_identity.clone(),
            expression: inst.code_expression.clone(),
            q: inst.camera.q,
            t: [inst.camera.t.x, inst.camera.t.y],
            sigma: inst.camera.sigma,
        };
        serde_json::to_writer(&mut log, &frame)?;
        log.write_all(b"\n")?;
    }
    println!("wrote {} frames to {}", args.frames, args.out.display());
    Ok(())
}
