//! Loss terms of the fitting objective and their analytic gradients.
//!
//! Every term fills a [`Gradient`] shaped like the dataset: one block for
//! the shared shape model and one block per instance. Blocks of instances
//! that do not take part in an evaluation stay zero.

mod regularize;
mod reprojection;
mod triplet;

pub use regularize::{regularization_loss, RegularizationLoss};
pub use reprojection::{dataset_loss_3d, reprojection_loss, InstanceLoss, DISTANCE_EPS};
pub use triplet::{sample_triplets, triplet_losses, Factor, Triplet, TripletLoss};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lux::{lux_losses, LuxGrad, LuxInput, LuxLosses};
use crate::model::{Dataset, InstanceRecord, ShapeModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_3d: f64,
    pub lambda_disentangle: f64,
    pub lambda_scale: f64,
    pub lambda_shape: f64,
    pub triplet_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_3d: 50.0,
            lambda_disentangle: 1.0,
            lambda_scale: 0.01,
            lambda_shape: 0.1,
            triplet_margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_3d: 0.0,
            lambda_disentangle: 0.0,
            lambda_scale: 0.0,
            lambda_shape: 0.0,
            triplet_margin: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_3d,
            self.lambda_disentangle,
            self.lambda_scale,
            self.lambda_shape,
            self.triplet_margin,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Validation(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub mean: Vec<Vector3<f64>>,
    pub identity: Vec<Vec<Vector3<f64>>>,
    pub expression: Vec<Vec<Vector3<f64>>>,
}

impl ModelGrad {
    pub fn zeros(model: &ShapeModel) -> Self {
        let n = model.vertex_count();
        ModelGrad {
            mean: vec![Vector3::zeros(); n],
            identity: vec![vec![Vector3::zeros(); n]; model.identity_dim()],
            expression: vec![vec![Vector3::zeros(); n]; model.expression_dim()],
        }
    }

    fn all(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.mean.iter().chain(self.identity.iter().flatten()).chain(self.expression.iter().flatten())
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut Vector3<f64>> {
        self.mean
            .iter_mut()
            .chain(self.identity.iter_mut().flatten())
            .chain(self.expression.iter_mut().flatten())
    }

    pub fn add_scaled(&mut self, other: &ModelGrad, w: f64) {
        for (a, b) in self.all_mut().zip(other.all()) {
            *a += b * w;
        }
    }

    /// Same ordering as [`ShapeModel::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        self.all().flat_map(|v| [v.x, v.y, v.z]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGrad {
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
    pub q: [f64; 4],
    pub t: Vector2<f64>,
    pub sigma: f64,
}

impl InstanceGrad {
    pub fn zeros(identity_dim: usize, expression_dim: usize) -> Self {
        InstanceGrad {
            identity: vec![0.0; identity_dim],
            expression: vec![0.0; expression_dim],
            q: [0.0; 4],
            t: Vector2::zeros(),
            sigma: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &InstanceGrad, w: f64) {
        for (a, b) in self.identity.iter_mut().zip(&other.identity) {
            *a += w * b;
        }
        for (a, b) in self.expression.iter_mut().zip(&other.expression) {
            *a += w * b;
        }
        for k in 0..4 {
            self.q[k] += w * other.q[k];
        }
        self.t += other.t * w;
        self.sigma += w * other.sigma;
    }

    /// Same ordering as [`instance_flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.identity.len() + self.expression.len() + 7);
        out.extend(&self.identity);
        out.extend(&self.expression);
        out.extend(self.q);
        out.extend([self.t.x, self.t.y, self.sigma]);
        out
    }
}

/// Gradient of a loss with respect to every free variable of a dataset
/// (and of an attached illumination state).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub model: ModelGrad,
    pub instances: Vec<InstanceGrad>,
    pub lux: Option<LuxGrad>,
}

impl Gradient {
    pub fn zeros(dataset: &Dataset) -> Self {
        let (i, e) = (dataset.model.identity_dim(), dataset.model.expression_dim());
        Gradient {
            model: ModelGrad::zeros(&dataset.model),
            instances: vec![InstanceGrad::zeros(i, e); dataset.len()],
            lux: None,
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, w: f64) {
        self.model.add_scaled(&other.model, w);
        for (a, b) in self.instances.iter_mut().zip(&other.instances) {
            a.add_scaled(b, w);
        }
        if let Some(other_lux) = &other.lux {
            match &mut self.lux {
                Some(l) => l.add_scaled(other_lux, w),
                None => {
                    let mut l = other_lux.clone();
                    l.scale(w);
                    self.lux = Some(l);
                }
            }
        }
    }

    /// Flattened in the order of [`flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.model.flat();
        for g in &self.instances {
            out.extend(g.flat());
        }
        if let Some(l) = &self.lux {
            out.extend(l.flat());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

pub fn instance_flat_params(inst: &InstanceRecord) -> Vec<f64> {
    let mut out = Vec::with_capacity(inst.code_identity.len() + inst.code_expression.len() + 7);
    out.extend(&inst.code_identity);
    out.extend(&inst.code_expression);
    out.extend(inst.camera.q);
    out.extend([inst.camera.t.x, inst.camera.t.y, inst.camera.sigma]);
    out
}

pub fn set_instance_flat_params(inst: &mut InstanceRecord, flat: &[f64]) {
    let (i, e) = (inst.code_identity.len(), inst.code_expression.len());
    inst.code_identity.copy_from_slice(&flat[..i]);
    inst.code_expression.copy_from_slice(&flat[i..i + e]);
    inst.camera.q.copy_from_slice(&flat[i + e..i + e + 4]);
    inst.camera.t = Vector2::new(flat[i + e + 4], flat[i + e + 5]);
    inst.camera.sigma = flat[i + e + 6];
}

impl ShapeModel {
    /// Mean, then identity basis, then expression basis; xyz per vertex.
    pub fn flat_params(&self) -> Vec<f64> {
        self.mean
            .iter()
            .chain(self.identity_basis.iter().flatten())
            .chain(self.expression_basis.iter().flatten())
            .flat_map(|v| [v.x, v.y, v.z])
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let slots = self
            .mean
            .iter_mut()
            .chain(self.identity_basis.iter_mut().flatten())
            .chain(self.expression_basis.iter_mut().flatten());
        for (v, c) in slots.zip(flat.chunks_exact(3)) {
            *v = Vector3::new(c[0], c[1], c[2]);
        }
    }
}

/// All free variables of a dataset, flattened: model block followed by one
/// block per instance.
pub fn flat_params(dataset: &Dataset) -> Vec<f64> {
    let mut out = dataset.model.flat_params();
    for inst in &dataset.instances {
        out.extend(instance_flat_params(inst));
    }
    out
}

pub fn set_flat_params(dataset: &mut Dataset, flat: &[f64]) {
    let model_len = dataset.model.flat_params().len();
    dataset.model.set_flat_params(&flat[..model_len]);
    let mut offset = model_len;
    for inst in &mut dataset.instances {
        let len = inst.code_identity.len() + inst.code_expression.len() + 7;
        set_instance_flat_params(inst, &flat[offset..offset + len]);
        offset += len;
    }
}

/// Per-term values and the gradient of the weighted total.
#[derive(Clone, Debug)]
pub struct LossReport {
    /// Unweighted reprojection loss.
    pub l3d: f64,
    pub expression: f64,
    pub identity: f64,
    pub pose: f64,
    /// Already weighted by `lambda_scale`.
    pub scale: f64,
    /// Already weighted by `lambda_shape`.
    pub shape: f64,
    pub lux: Option<LuxLosses>,
    pub weights: LossWeights,
    pub total: f64,
    pub gradient: Gradient,
}

impl LossReport {
    pub fn disentangle(&self) -> f64 {
        self.expression + self.identity + self.pose
    }

    /// `(name, contribution to the total)` for every term, followed by the total.
    pub fn weighted_terms(&self) -> Vec<(&'static str, f64)> {
        let mut terms = vec![
            ("l3d", self.weights.lambda_3d * self.l3d),
            ("expression", self.weights.lambda_disentangle * self.expression),
            ("identity", self.weights.lambda_disentangle * self.identity),
            ("pose", self.weights.lambda_disentangle * self.pose),
            ("scale", self.scale),
            ("shape", self.shape),
        ];
        if let Some(l) = &self.lux {
            terms.extend(l.named());
        }
        terms.push(("total", self.total));
        terms
    }
}

/// Evaluates `lambda_3d * L3d + lambda_disentangle * (L_exp + L_id + L_pose)
/// + L_reg (+ illumination terms)` over the instances in `subset` (all
/// instances when `None`).
pub fn total_loss(
    dataset: &Dataset,
    weights: &LossWeights,
    triplets: &[Triplet],
    subset: Option<&[usize]>,
    lux: Option<&LuxInput<'_>>,
) -> Result<LossReport> {
    weights.validate()?;
    let mut gradient = Gradient::zeros(dataset);

    let (l3d, g3d) = dataset_loss_3d(dataset, subset)?;
    check_finite("l3d", &g3d)?;
    gradient.add_scaled(&g3d, weights.lambda_3d);

    let trip = triplet_losses(dataset, triplets, weights.triplet_margin)?;
    check_finite("disentangle", &trip.gradient)?;
    gradient.add_scaled(&trip.gradient, weights.lambda_disentangle);

    let reg = regularization_loss(dataset, weights, subset)?;
    check_finite("regularization", &reg.gradient)?;
    gradient.add_scaled(&reg.gradient, 1.0);

    let lux_losses = match lux {
        Some(input) => {
            let losses = lux_losses(input)?;
            if !losses.grad.flat().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { term: "lux".into() });
            }
            gradient.lux = Some(losses.grad.clone());
            Some(losses)
        }
        None => None,
    };

    let total = weights.lambda_3d * l3d
        + weights.lambda_disentangle * (trip.expression + trip.identity + trip.pose)
        + reg.scale
        + reg.shape
        + lux_losses.as_ref().map_or(0.0, |l| l.sum());

    Ok(LossReport {
        l3d,
        expression: trip.expression,
        identity: trip.identity,
        pose: trip.pose,
        scale: reg.scale,
        shape: reg.shape,
        lux: lux_losses,
        weights: *weights,
        total,
        gradient,
    })
}

fn check_finite(term: &str, g: &Gradient) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { term: term.into() })
    }
}

pub(crate) fn subset_indices(dataset: &Dataset, subset: Option<&[usize]>) -> Vec<usize> {
    match subset {
        Some(s) => s.to_vec(),
        None => (0..dataset.len()).collect(),
    }
}
