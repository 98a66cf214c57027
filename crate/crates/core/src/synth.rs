//! Synthetic ground truth: a smooth surface with orthonormal deformation
//! bases, grouped codes, random cameras, noisy partial observations,
//! landmarks, and optional shaded textures.

use std::f64::consts::PI;

use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{predict_landmarks_2d, predict_landmarks_3d, GtRecord, LandmarkSpec};
use crate::geometry::{project, quat_to_rotmat, RotationMatrix};
use crate::lux::{render_shading, NormalMap, SH_DIM};
use crate::model::{CameraPose, Dataset, InstanceRecord, Labels, ShapeModel, UvGrid};
use crate::render::render_normal_map_uv;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub identity_dim: usize,
    pub expression_dim: usize,
    pub instances: usize,
    /// Euler angle ranges in degrees.
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
    pub roll: (f64, f64),
    pub sigma: (f64, f64),
    /// Translations are drawn from `[-translation, translation]^2`.
    pub translation: f64,
    pub noise_std: f64,
    pub occlusion_rate: f64,
    /// Number of identity / expression / pose groups; 0 leaves the label
    /// unset and draws per-instance values.
    pub identities: usize,
    pub expressions: usize,
    pub poses: usize,
    /// Deformation of a unit code as a fraction of the shape diameter.
    pub basis_scale: f64,
    /// Textures are rendered for the first `textures` instances.
    pub textures: usize,
    pub texture_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 16,
            identity_dim: 4,
            expression_dim: 3,
            instances: 150,
            yaw: (-45.0, 45.0),
            pitch: (-15.0, 15.0),
            roll: (-10.0, 10.0),
            sigma: (0.8, 1.2),
            translation: 0.1,
            noise_std: 0.0,
            occlusion_rate: 0.1,
            identities: 10,
            expressions: 5,
            poses: 0,
            basis_scale: 0.05,
            textures: 0,
            texture_size: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        for (name, (lo, hi)) in [("yaw", self.yaw), ("pitch", self.pitch), ("roll", self.roll), ("sigma", self.sigma)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("{name} range ({lo}, {hi}) is not ordered"));
            }
        }
        if self.sigma.0 <= 0.0 {
            return bad(format!("sigma range must be positive, got {:?}", self.sigma));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return bad(format!("occlusion rate must lie in [0, 1), got {}", self.occlusion_rate));
        }
        if !(self.noise_std >= 0.0) || !(self.translation >= 0.0) || !(self.basis_scale >= 0.0) {
            return bad("noise, translation and basis scale must be >= 0".into());
        }
        if self.n == 0 || self.instances == 0 {
            return bad("n and instance count must be >= 1".into());
        }
        if self.textures > 0 && self.texture_size < 2 {
            return bad("texture size must be >= 2".into());
        }
        Ok(())
    }
}

/// Ground-truth shaded texture of one instance.
#[derive(Clone, Debug)]
pub struct SynthTexture {
    pub instance: String,
    pub normal_map: NormalMap,
    pub albedo: Vec<f64>,
    pub l: [f64; SH_DIM],
    pub texture: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    /// Ground-truth parameters together with the generated observations.
    pub truth: Dataset,
    pub landmarks: LandmarkSpec,
    pub gt_2d: Vec<GtRecord>,
    pub gt_3d: Vec<GtRecord>,
    pub textures: Vec<SynthTexture>,
}

/// Diagonal of the 3D bounding box.
pub fn shape_diameter(points: &[Vector3<f64>]) -> f64 {
    crate::evalkit::bbox_diagonal(points)
}

fn smooth_field(grid: &UvGrid, rng: &mut impl Rng, amplitude: f64) -> Vec<Vector3<f64>> {
    let mut coef = [[[0.0; 3]; 3]; 3];
    for (a, row) in coef.iter_mut().enumerate() {
        for (b, c) in row.iter_mut().enumerate() {
            for v in c.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *v = amplitude * g / (1.0 + (a + b) as f64);
            }
        }
    }
    (0..grid.vertex_count())
        .map(|i| {
            let (u, v) = grid.uv(i);
            let mut p = Vector3::zeros();
            for (a, row) in coef.iter().enumerate() {
                for (b, c) in row.iter().enumerate() {
                    let w = (PI * a as f64 * u).cos() * (PI * b as f64 * v).cos();
                    p += Vector3::from(*c) * w;
                }
            }
            p
        })
        .collect()
}

fn flatten(field: &[Vector3<f64>]) -> DVector<f64> {
    DVector::from_iterator(3 * field.len(), field.iter().flat_map(|p| [p.x, p.y, p.z]))
}

fn unflatten(v: &DVector<f64>) -> Vec<Vector3<f64>> {
    v.as_slice().chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Smooth bases orthonormalized jointly by Gram-Schmidt, then scaled so a
/// unit code moves each vertex by `rms` on average (root mean square).
fn orthonormal_bases(grid: &UvGrid, count: usize, rms: f64, rng: &mut impl Rng) -> Result<Vec<Vec<Vector3<f64>>>> {
    let scale = rms * (grid.vertex_count() as f64).sqrt();
    let mut done: Vec<DVector<f64>> = Vec::with_capacity(count);
    while done.len() < count {
        let mut v = flatten(&smooth_field(grid, rng, 1.0));
        for _ in 0..2 {
            for q in &done {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm < 1e-6 {
            if 3 * grid.vertex_count() <= done.len() + 1 {
                return Err(Error::Validation(format!("cannot draw {count} independent bases on this grid")));
            }
            continue;
        }
        done.push(v / norm);
    }
    Ok(done.iter().map(|q| unflatten(&(q * scale))).collect())
}

/// Codes drawn from a standard normal, resampled (a bounded number of
/// times) until every pair is at least `min_sep` apart.
fn separated_codes(count: usize, dim: usize, min_sep: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..100 {
            let c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let sep = codes
                .iter()
                .map(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            let accept = sep >= min_sep;
            if best.as_ref().is_none_or(|b| sep > b.0) {
                best = Some((sep, c));
            }
            if accept {
                break;
            }
        }
        codes.push(best.map(|b| b.1).unwrap_or_default());
    }
    codes
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn random_camera(config: &SynthConfig, rng: &mut impl Rng) -> CameraPose {
    let yaw = uniform(rng, config.yaw).to_radians();
    let pitch = uniform(rng, config.pitch).to_radians();
    let roll = uniform(rng, config.roll).to_radians();
    let q = RotationMatrix::from_euler_zyx(yaw, pitch, roll).to_quaternion();
    let t = config.translation;
    let t = Vector2::new(uniform(rng, (-t, t)), uniform(rng, (-t, t)));
    CameraPose { q, t, sigma: uniform(rng, config.sigma) }
}

/// Nine landmarks placed in UV space, each a bilinear blend of the four
/// surrounding vertices. Landmarks 0 and 1 are the eyes.
pub fn default_landmarks(grid: &UvGrid) -> LandmarkSpec {
    const UV: [(f64, f64); 9] = [
        (0.3, 0.35),
        (0.7, 0.35),
        (0.5, 0.5),
        (0.35, 0.7),
        (0.65, 0.7),
        (0.5, 0.72),
        (0.3, 0.25),
        (0.7, 0.25),
        (0.5, 0.9),
    ];
    let n = grid.n() as f64;
    let landmarks = UV
        .iter()
        .map(|&(u, v)| {
            let (x, y) = (u * n, v * n);
            let c0 = (x.floor() as usize).min(grid.n().saturating_sub(1));
            let r0 = (y.floor() as usize).min(grid.n().saturating_sub(1));
            let (fx, fy) = (x - c0 as f64, y - r0 as f64);
            let c1 = (c0 + 1).min(grid.n());
            let r1 = (r0 + 1).min(grid.n());
            let mut lm = vec![
                (grid.index(r0, c0), (1.0 - fx) * (1.0 - fy)),
                (grid.index(r0, c1), fx * (1.0 - fy)),
                (grid.index(r1, c0), (1.0 - fx) * fy),
                (grid.index(r1, c1), fx * fy),
            ];
            lm.retain(|e| e.1 > 0.0);
            lm
        })
        .collect();
    LandmarkSpec { landmarks, left_eye: 0, right_eye: 1 }
}

fn checker_albedo(size: usize) -> Vec<f64> {
    let block = (size / 4).max(1);
    (0..size * size)
        .map(|k| if ((k / size) / block + (k % size) / block) % 2 == 0 { 0.4 } else { 0.6 })
        .collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grid = UvGrid::new(config.n);
    let bump = crate::solver::gaussian_surface(&grid, 0.35, 0.18);
    let perturb = smooth_field(&grid, &mut rng, 0.02);
    let mean: Vec<Vector3<f64>> = bump.iter().zip(&perturb).map(|(a, b)| a + b).collect();
    let rms = config.basis_scale * shape_diameter(&mean);
    let mut bases = orthonormal_bases(&grid, config.identity_dim + config.expression_dim, rms, &mut rng)?;
    let expression_basis = bases.split_off(config.identity_dim);
    let model = ShapeModel { grid, mean, identity_basis: bases, expression_basis };

    let id_codes = separated_codes(config.identities, config.identity_dim, 1.0, &mut rng);
    let ex_codes = separated_codes(config.expressions, config.expression_dim, 1.0, &mut rng);
    let pose_cams: Vec<CameraPose> = (0..config.poses).map(|_| random_camera(config, &mut rng)).collect();
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Validation(e.to_string()))?;

    let width = (config.instances.max(2) - 1).to_string().len();
    let mut instances = Vec::with_capacity(config.instances);
    for k in 0..config.instances {
        let mut inst = InstanceRecord::new(format!("s{k:0width$}"), [], config.identity_dim, config.expression_dim);
        let mut labels = Labels::default();
        if config.identities > 0 {
            let g = rng.random_range(0..config.identities);
            inst.code_identity = id_codes[g].clone();
            labels.identity_id = Some(format!("id{g}"));
        } else {
            inst.code_identity = (0..config.identity_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        }
        if config.expressions > 0 {
            let g = rng.random_range(0..config.expressions);
            inst.code_expression = ex_codes[g].clone();
            labels.expression_id = Some(format!("ex{g}"));
        } else {
            inst.code_expression = (0..config.expression_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        }
        if config.poses > 0 {
            let g = rng.random_range(0..config.poses);
            inst.camera = pose_cams[g];
            labels.pose_id = Some(format!("po{g}"));
        } else {
            inst.camera = random_camera(config, &mut rng);
        }
        inst.labels = labels;
        let points = project(&inst.shape(&model)?, &inst.camera)?;
        let mut obs = Vec::with_capacity(points.len());
        for (v, p) in points.into_iter().enumerate() {
            let occluded = rng.random_bool(config.occlusion_rate);
            let e = Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            if !occluded {
                obs.push((v, p + e));
            }
        }
        inst.set_observations(obs);
        instances.push(inst);
    }
    let truth = Dataset::new(model, instances)?;

    let landmarks = default_landmarks(&grid);
    let mut gt_2d = Vec::with_capacity(truth.len());
    let mut gt_3d = Vec::with_capacity(truth.len());
    for inst in &truth.instances {
        let yaw = Some(quat_to_rotmat(&inst.camera.q)?.yaw_degrees());
        let record = |landmarks| GtRecord {
            id: inst.id.clone(),
            landmarks,
            left_eye: 0,
            right_eye: 1,
            yaw,
        };
        let p2 = predict_landmarks_2d(&truth.model, inst, &landmarks)?;
        gt_2d.push(record(p2.iter().map(|p| vec![p.x, p.y]).collect()));
        let p3 = predict_landmarks_3d(&truth.model, inst, &landmarks)?;
        gt_3d.push(record(p3.iter().map(|p| vec![p.x, p.y, p.z]).collect()));
    }

    let mut textures = Vec::new();
    for inst in truth.instances.iter().take(config.textures) {
        let size = config.texture_size;
        let normal_map = render_normal_map_uv(&truth.model, inst, size, size)?;
        let mut l = [0.0; SH_DIM];
        l[0] = 0.7;
        for c in &mut l[1..] {
            *c = rng.random_range(-0.08..0.08);
        }
        let albedo: Vec<f64> = checker_albedo(size)
            .into_iter()
            .enumerate()
            .map(|(k, a)| if normal_map.defined(k) { a } else { 0.0 })
            .collect();
        let shading = render_shading(&normal_map, &l);
        let texture = shading.iter().zip(&albedo).map(|(s, a)| s * a).collect();
        textures.push(SynthTexture { instance: inst.id.clone(), normal_map, albedo, l, texture });
    }

    Ok(SynthOutput { truth, landmarks, gt_2d, gt_3d, textures })
}
