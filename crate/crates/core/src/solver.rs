//! Initialization and Adam minimization of the total loss over every free
//! variable of a dataset.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lux::{LuxInput, LuxWeights, ShMapState, SH_DIM};
use crate::objective::{
    flat_params, instance_flat_params, sample_triplets, set_flat_params, set_instance_flat_params, total_loss,
    LossWeights,
};
use crate::optim::Adam;
use crate::model::{Dataset, ShapeModel, UvGrid};

/// Instances with fewer visible points are left out of fitting.
pub const MIN_VISIBLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    /// Height and width of the initial Gaussian surface.
    pub init_height: f64,
    pub init_width: f64,
    /// Standard deviation of the initial basis entries.
    pub init_basis_std: f64,
    /// Keep the shape model fixed and fit only the instances.
    #[serde(default)]
    pub freeze_model: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lr: 1e-4,
            decay_factor: 0.5,
            decay_every_epochs: 50,
            epochs: 400,
            batch_size: 64,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            init_height: 0.3,
            init_width: 0.15,
            init_basis_std: 1e-3,
            freeze_model: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every_epochs == 0 {
            return bad("epochs, batch size and decay interval must be >= 1".into());
        }
        self.weights.validate()
    }

    /// Step size during (1-based) `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch.saturating_sub(1) / self.decay_every_epochs) as i32;
        self.lr * self.decay_factor.powi(drops)
    }
}

/// Gaussian bump over the centered unit square, bulging toward +z.
pub fn gaussian_surface(grid: &UvGrid, height: f64, width: f64) -> Vec<Vector3<f64>> {
    (0..grid.vertex_count())
        .map(|i| {
            let (u, v) = grid.uv(i);
            let (x, y) = (u - 0.5, v - 0.5);
            Vector3::new(x, y, height * (-(x * x + y * y) / (2.0 * width * width)).exp())
        })
        .collect()
}

fn diagonal_2d(points: impl Iterator<Item = Vector2<f64>>) -> f64 {
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    (hi - lo).norm()
}

/// Resets the model (unless frozen) and every instance. Returns the
/// indices of instances with too few observations to fit.
pub fn initialize(dataset: &mut Dataset, config: &SolverConfig) -> Result<Vec<usize>> {
    if !config.freeze_model {
        initialize_model(&mut dataset.model, config)?;
    }
    initialize_instances(dataset)
}

/// Gaussian mean surface and small random bases.
pub fn initialize_model(model: &mut ShapeModel, config: &SolverConfig) -> Result<()> {
    let grid = model.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    model.mean = gaussian_surface(&grid, config.init_height, config.init_width);
    let noise = Normal::new(0.0, config.init_basis_std).map_err(|e| Error::Validation(e.to_string()))?;
    for basis in model.identity_basis.iter_mut().chain(model.expression_basis.iter_mut()) {
        for v in basis.iter_mut() {
            *v = Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    Ok(())
}

/// Zero codes, identity rotations, and translation and scale matched to
/// the observations under the current mean shape. Returns the indices of
/// instances with too few observations to fit.
pub fn initialize_instances(dataset: &mut Dataset) -> Result<Vec<usize>> {
    let mean = dataset.model.mean.clone();
    let mut excluded = Vec::new();
    for (k, inst) in dataset.instances.iter_mut().enumerate() {
        inst.code_identity.iter_mut().for_each(|c| *c = 0.0);
        inst.code_expression.iter_mut().for_each(|c| *c = 0.0);
        inst.camera.q = [1.0, 0.0, 0.0, 0.0];
        inst.camera.t = Vector2::zeros();
        inst.camera.sigma = 1.0;
        let obs = inst.observations();
        if obs.len() < MIN_VISIBLE {
            log::warn!("instance {} has {} visible points; excluded from fitting", inst.id, obs.len());
            excluded.push(k);
            if !obs.is_empty() {
                inst.camera.t = obs.iter().map(|o| o.point).sum::<Vector2<f64>>() / obs.len() as f64;
            }
            continue;
        }
        let m = obs.len() as f64;
        let obs_centroid = obs.iter().map(|o| o.point).sum::<Vector2<f64>>() / m;
        let shape_centroid = obs.iter().map(|o| mean[o.vertex].xy()).sum::<Vector2<f64>>() / m;
        let obs_diag = diagonal_2d(obs.iter().map(|o| o.point));
        let shape_diag = diagonal_2d(obs.iter().map(|o| mean[o.vertex].xy()));
        let sigma = if shape_diag > 0.0 && obs_diag > 0.0 { obs_diag / shape_diag } else { 1.0 };
        inst.camera.sigma = sigma;
        inst.camera.t = obs_centroid - shape_centroid * sigma;
    }
    Ok(excluded)
}

/// Long-format loss history: one `(epoch, term, value)` row per term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub rows: Vec<(usize, String, f64)>,
}

impl LossHistory {
    pub fn push_epoch(&mut self, epoch: usize, terms: &[(String, f64)]) {
        for (name, v) in terms {
            self.rows.push((epoch, name.clone(), *v));
        }
    }

    pub fn series(&self, term: &str) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.1 == term).map(|r| (r.0, r.2)).collect()
    }

    pub fn last(&self, term: &str) -> Option<f64> {
        self.series(term).last().map(|r| r.1)
    }

    pub fn first(&self, term: &str) -> Option<f64> {
        self.series(term).first().map(|r| r.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,term,value\n");
        for (e, t, v) in &self.rows {
            out += &format!("{e},{t},{v}\n");
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Epoch 0 is the full-dataset loss before any step; later epochs sum
    /// the batch losses evaluated before each step.
    pub history: LossHistory,
    pub excluded: Vec<usize>,
}

/// Mini-batch Adam over the model (updated every batch) and the instances
/// of each batch, with projected quaternion updates.
pub fn fit(dataset: &mut Dataset, config: &SolverConfig) -> Result<FitReport> {
    config.validate()?;
    let included: Vec<usize> = (0..dataset.len()).filter(|&k| dataset.instances[k].visible_count() >= MIN_VISIBLE).collect();
    let excluded: Vec<usize> = (0..dataset.len()).filter(|k| !included.contains(k)).collect();
    if included.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let adam = |len| Adam::new(len, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut model_adam = adam(dataset.model.flat_params().len());
    let mut inst_adam: Vec<Adam> = dataset.instances.iter().map(|i| adam(instance_flat_params(i).len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = LossHistory::default();

    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
    let triplets = sample_triplets(dataset, Some(&included), &mut eval_rng);
    let report = total_loss(dataset, &config.weights, &triplets, Some(&included), None)?;
    history.push_epoch(0, &named(&report.weighted_terms()));

    let mut order = included.clone();
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut names: Vec<&'static str> = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let mut batch = batch.to_vec();
            batch.sort_unstable();
            let triplets = sample_triplets(dataset, Some(&batch), &mut rng);
            let report = total_loss(dataset, &config.weights, &triplets, Some(&batch), None)?;
            for (name, v) in report.weighted_terms() {
                if !sums.contains_key(name) {
                    names.push(name);
                }
                *sums.entry(name).or_default() += v;
            }
            let grad = &report.gradient;
            if !config.freeze_model {
                let mut params = dataset.model.flat_params();
                model_adam.step(&mut params, &grad.model.flat(), lr);
                dataset.model.set_flat_params(&params);
            }
            for &k in &batch {
                let inst = &mut dataset.instances[k];
                let mut p = instance_flat_params(inst);
                inst_adam[k].step(&mut p, &grad.instances[k].flat(), lr);
                set_instance_flat_params(inst, &p);
                inst.camera.normalize();
                inst.camera.sigma = inst.camera.sigma.max(1e-6);
            }
        }
        if !flat_params(dataset).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient { term: format!("parameters after epoch {epoch}") });
        }
        let terms: Vec<(String, f64)> = names.iter().map(|n| (n.to_string(), sums[n])).collect();
        history.push_epoch(epoch, &terms);
        if epoch % 100 == 0 {
            log::info!("epoch {epoch}: total {:.6e}", sums["total"]);
        }
    }
    Ok(FitReport { history, excluded })
}

fn named(terms: &[(&'static str, f64)]) -> Vec<(String, f64)> {
    terms.iter().map(|(n, v)| (n.to_string(), *v)).collect()
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `(flat index, analytic, central difference, relative error)`.
    pub entries: Vec<(usize, f64, f64, f64)>,
    pub max_rel_err: f64,
}

/// Relative error with an absolute floor so that coordinates whose true
/// derivative is zero are judged by their absolute error.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the analytic gradient of `f` at `x` with central differences
/// of step `h` on the coordinates `indices`.
pub fn check_gradient(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let mut entries = Vec::with_capacity(indices.len());
    let mut max_rel_err: f64 = 0.0;
    let mut probe = x.to_vec();
    for &idx in indices {
        probe[idx] = x[idx] + h;
        let plus = f(&probe)?;
        probe[idx] = x[idx] - h;
        let minus = f(&probe)?;
        probe[idx] = x[idx];
        let fd = (plus - minus) / (2.0 * h);
        let rel = relative_error(analytic[idx], fd, floor);
        max_rel_err = max_rel_err.max(rel);
        entries.push((idx, analytic[idx], fd, rel));
    }
    Ok(GradCheck { entries, max_rel_err })
}

/// Illumination problem attached to a gradient check.
#[derive(Clone, Debug)]
pub struct LuxProblem {
    pub state: ShMapState,
    pub texture: Vec<f64>,
    pub l_hat: [f64; SH_DIM],
    pub weights: LuxWeights,
}

/// Checks the gradient of the total loss on `samples` coordinates drawn
/// evenly from the model block, the instance blocks, and (when attached)
/// the illumination block.
pub fn gradient_check(
    dataset: &Dataset,
    weights: &LossWeights,
    lux: Option<&LuxProblem>,
    samples: usize,
    seed: u64,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triplets = sample_triplets(dataset, None, &mut rng);
    let input = lux.map(|p| LuxInput { state: &p.state, texture: &p.texture, l_hat: p.l_hat, weights: p.weights });
    let report = total_loss(dataset, weights, &triplets, None, input.as_ref())?;
    let analytic = report.gradient.flat();
    let mut x = flat_params(dataset);
    let geometry_len = x.len();
    if let Some(p) = lux {
        x.extend(p.state.flat());
    }
    let model_len = dataset.model.flat_params().len();
    let mut blocks = vec![0..model_len, model_len..geometry_len];
    if lux.is_some() {
        blocks.push(geometry_len..x.len());
    }
    blocks.retain(|b| !b.is_empty());
    let indices: Vec<usize> = (0..samples).map(|k| rng.random_range(blocks[k % blocks.len()].clone())).collect();

    let eval = |p: &[f64]| -> Result<f64> {
        let mut d = dataset.clone();
        set_flat_params(&mut d, &p[..geometry_len]);
        match lux {
            Some(prob) => {
                let mut state = prob.state.clone();
                state.set_flat(&p[geometry_len..]);
                let input = LuxInput { state: &state, texture: &prob.texture, l_hat: prob.l_hat, weights: prob.weights };
                Ok(total_loss(&d, weights, &triplets, None, Some(&input))?.total)
            }
            None => Ok(total_loss(&d, weights, &triplets, None, None)?.total),
        }
    };
    check_gradient(eval, &x, &analytic, &indices, 1e-5, 1e-3)
}
