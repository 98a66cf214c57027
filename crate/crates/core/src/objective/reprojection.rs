use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::{subset_indices, Gradient, InstanceGrad, ModelGrad};
use crate::error::{Error, Result};
use crate::geometry::{quat_to_rotmat, rotation_grad_to_quat};
use crate::model::{Dataset, InstanceRecord, ShapeModel};

/// Smoothing constant of the point distance `sqrt(|r|^2 + eps^2)`.
pub const DISTANCE_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct InstanceLoss {
    pub value: f64,
    pub instance: InstanceGrad,
    pub model: ModelGrad,
}

/// Loss, instance gradient, and the per-vertex gradient with respect to the
/// instance's 3D shape (zero for invisible vertices).
pub(super) fn instance_terms(
    inst: &InstanceRecord,
    model: &ShapeModel,
) -> Result<(f64, InstanceGrad, Vec<Vector3<f64>>)> {
    let (i_dim, e_dim) = (model.identity_dim(), model.expression_dim());
    let mut grad = InstanceGrad::zeros(i_dim, e_dim);
    let mut shape_grad = vec![Vector3::zeros(); model.vertex_count()];
    if inst.observations().is_empty() {
        return Ok((0.0, grad, shape_grad));
    }
    let shape = inst.shape(model)?;
    let rot = *quat_to_rotmat(&inst.camera.q)?.matrix();
    let sigma = inst.camera.sigma;
    let mut loss = 0.0;
    let mut grad_r = Matrix3::zeros();
    for obs in inst.observations() {
        let s = shape[obs.vertex];
        let p = rot * s;
        let x = p.xy() * sigma + inst.camera.t;
        let res = obs.point - x;
        let d = (res.norm_squared() + DISTANCE_EPS * DISTANCE_EPS).sqrt();
        loss += d;
        // d(distance)/dx
        let g = -res / d;
        grad.t += g;
        grad.sigma += g.dot(&p.xy());
        let g3 = Vector3::new(g.x, g.y, 0.0) * sigma;
        grad_r += g3 * s.transpose();
        shape_grad[obs.vertex] = rot.transpose() * g3;
    }
    grad.q = rotation_grad_to_quat(&inst.camera.q, &grad_r);
    for (gs, basis) in grad.identity.iter_mut().zip(&model.identity_basis) {
        *gs = inst.observations().iter().map(|o| basis[o.vertex].dot(&shape_grad[o.vertex])).sum();
    }
    for (gs, basis) in grad.expression.iter_mut().zip(&model.expression_basis) {
        *gs = inst.observations().iter().map(|o| basis[o.vertex].dot(&shape_grad[o.vertex])).sum();
    }
    Ok((loss, grad, shape_grad))
}

fn accumulate_model_grad(
    model_grad: &mut ModelGrad,
    inst: &InstanceRecord,
    shape_grad: &[Vector3<f64>],
) {
    for o in inst.observations() {
        let h = shape_grad[o.vertex];
        model_grad.mean[o.vertex] += h;
        for (g, &c) in model_grad.identity.iter_mut().zip(&inst.code_identity) {
            g[o.vertex] += h * c;
        }
        for (g, &c) in model_grad.expression.iter_mut().zip(&inst.code_expression) {
            g[o.vertex] += h * c;
        }
    }
}

/// Sum over visible vertices of the smoothed distance between each
/// observation and the projection of its surface point.
pub fn reprojection_loss(inst: &InstanceRecord, model: &ShapeModel) -> Result<InstanceLoss> {
    let (value, instance, shape_grad) = instance_terms(inst, model)?;
    let mut grad = ModelGrad::zeros(model);
    accumulate_model_grad(&mut grad, inst, &shape_grad);
    Ok(InstanceLoss { value, instance, model: grad })
}

/// Reprojection loss summed over instances; the shared model gradient
/// accumulates every instance's contribution in instance order.
pub fn dataset_loss_3d(dataset: &Dataset, subset: Option<&[usize]>) -> Result<(f64, Gradient)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices = subset_indices(dataset, subset);
    let parts: Vec<_> = indices
        .par_iter()
        .map(|&k| instance_terms(&dataset.instances[k], &dataset.model))
        .collect::<Result<_>>()?;
    let mut grad = Gradient::zeros(dataset);
    let mut total = 0.0;
    for (&k, (loss, inst_grad, shape_grad)) in indices.iter().zip(parts) {
        total += loss;
        accumulate_model_grad(&mut grad.model, &dataset.instances[k], &shape_grad);
        grad.instances[k] = inst_grad;
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{flat_params, Gradient};
    use super::*;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_four_five() {
        let mut ds = random_dataset(1, 1, 0, 0, 1);
        let model = &mut ds.model;
        model.mean.iter_mut().for_each(|p| *p = Vector3::zeros());
        // project() maps the origin to t; put t at (4, 5) and observe (1, 1).
        let inst = &mut ds.instances[0];
        inst.camera.t = Vector2::new(4.0, 5.0);
        inst.set_observations([(2, Vector2::new(1.0, 1.0))]);
        let l = reprojection_loss(inst, model).unwrap();
        assert!((l.value - 5.0).abs() < 1e-12);
    }

    #[test]
    fn no_visible_points() {
        let mut ds = random_dataset(2, 2, 1, 1, 1);
        ds.instances[0].set_observations([]);
        let l = reprojection_loss(&ds.instances[0], &ds.model).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.instance.flat().iter().chain(&l.model.flat()).all(|g| *g == 0.0));
    }

    /// Independent evaluation of the loss straight from the formula.
    fn naive_loss(inst: &InstanceRecord, model: &ShapeModel) -> f64 {
        let q = inst.camera.q;
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|c| c / norm);
        let r = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        ];
        let mut total = 0.0;
        for o in inst.observations() {
            let mut s = [0.0; 3];
            for c in 0..3 {
                s[c] = model.mean[o.vertex][c];
                for (k, b) in model.identity_basis.iter().enumerate() {
                    s[c] += inst.code_identity[k] * b[o.vertex][c];
                }
                for (k, b) in model.expression_basis.iter().enumerate() {
                    s[c] += inst.code_expression[k] * b[o.vertex][c];
                }
            }
            let px = inst.camera.sigma * (r[0][0] * s[0] + r[0][1] * s[1] + r[0][2] * s[2]) + inst.camera.t.x;
            let py = inst.camera.sigma * (r[1][0] * s[0] + r[1][1] * s[1] + r[1][2] * s[2]) + inst.camera.t.y;
            let (dx, dy) = (o.point.x - px, o.point.y - py);
            total += (dx * dx + dy * dy + DISTANCE_EPS * DISTANCE_EPS).sqrt();
        }
        total
    }

    #[test]
    fn matches_naive_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..5 {
            let ds = random_dataset(seed, 2, 2, 2, 1);
            let inst = &ds.instances[0];
            let l = reprojection_loss(inst, &ds.model).unwrap();
            assert!((l.value - naive_loss(inst, &ds.model)).abs() < 1e-10);
            let mut g = Gradient::zeros(&ds);
            g.model = l.model.clone();
            g.instances[0] = l.instance.clone();
            let flat = g.flat();
            for _ in 0..40 {
                let idx = rng.random_range(0..flat.len());
                let fd = central_difference(&ds, idx, 1e-5, |d| naive_loss(&d.instances[0], &d.model));
                assert!(rel_err(flat[idx], fd) < 1e-4, "seed {seed} coord {idx}: {} vs {fd}", flat[idx]);
            }
        }
    }

    #[test]
    fn dataset_loss_is_additive() {
        let ds = random_dataset(4, 2, 1, 1, 1);
        let single = reprojection_loss(&ds.instances[0], &ds.model).unwrap();
        let mut copies = ds.clone();
        copies.instances = vec![ds.instances[0].clone(); 4];
        let (total, grad) = dataset_loss_3d(&copies, None).unwrap();
        assert!((total - 4.0 * single.value).abs() < 1e-10);
        for (a, b) in grad.model.mean.iter().zip(&single.model.mean) {
            assert!((a - b * 4.0).norm() < 1e-10);
        }

        let many = random_dataset(5, 2, 2, 1, 6);
        let (_, grad) = dataset_loss_3d(&many, None).unwrap();
        let mut sum = ModelGrad::zeros(&many.model);
        for inst in &many.instances {
            sum.add_scaled(&reprojection_loss(inst, &many.model).unwrap().model, 1.0);
        }
        for (a, b) in grad.model.flat().iter().zip(sum.flat()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dataset_gradient_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = random_dataset(7, 3, 2, 2, 5);
        let (_, grad) = dataset_loss_3d(&ds, None).unwrap();
        let flat = grad.flat();
        assert_eq!(flat.len(), flat_params(&ds).len());
        for _ in 0..20 {
            let idx = rng.random_range(0..flat.len());
            let fd = central_difference(&ds, idx, 1e-5, |d| dataset_loss_3d(d, None).unwrap().0);
            assert!(rel_err(flat[idx], fd) < 1e-4, "coord {idx}: {} vs {fd}", flat[idx]);
        }
    }

    #[test]
    fn permutation_and_partition() {
        let ds = random_dataset(8, 2, 1, 1, 7);
        let (total, _) = dataset_loss_3d(&ds, None).unwrap();
        let mut rev = ds.clone();
        rev.instances.reverse();
        let (total_rev, _) = dataset_loss_3d(&rev, None).unwrap();
        assert!((total - total_rev).abs() < 1e-10);
        let (a, _) = dataset_loss_3d(&ds, Some(&[0, 2, 4, 6])).unwrap();
        let (b, _) = dataset_loss_3d(&ds, Some(&[1, 3, 5])).unwrap();
        assert!((a + b - total).abs() < 1e-10);
    }

    #[test]
    fn empty_dataset_errors() {
        let mut ds = random_dataset(9, 1, 0, 0, 1);
        ds.instances.clear();
        assert!(matches!(dataset_loss_3d(&ds, None), Err(Error::EmptyDataset)));
    }

    #[test]
    fn quaternion_gradient_is_tangent() {
        for seed in 0..10 {
            let ds = random_dataset(20 + seed, 2, 1, 1, 1);
            let l = reprojection_loss(&ds.instances[0], &ds.model).unwrap();
            let q = ds.instances[0].camera.q;
            let dot: f64 = q.iter().zip(&l.instance.q).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-8);
        }
    }
}
