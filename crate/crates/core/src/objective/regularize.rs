use rayon::prelude::*;

use super::{subset_indices, Gradient, LossWeights};
use crate::error::Result;
use crate::model::Dataset;

#[derive(Clone, Debug)]
pub struct RegularizationLoss {
    /// `lambda_scale * sum_k sigma_k^2`
    pub scale: f64,
    /// `lambda_shape * sum_k |non-rigid deviation_k|_F^2`
    pub shape: f64,
    pub gradient: Gradient,
}

pub fn regularization_loss(
    dataset: &Dataset,
    weights: &LossWeights,
    subset: Option<&[usize]>,
) -> Result<RegularizationLoss> {
    let indices = subset_indices(dataset, subset);
    let model = &dataset.model;
    let mut gradient = Gradient::zeros(dataset);
    let mut scale = 0.0;
    for &k in &indices {
        let sigma = dataset.instances[k].camera.sigma;
        scale += weights.lambda_scale * sigma * sigma;
        gradient.instances[k].sigma = 2.0 * weights.lambda_scale * sigma;
    }

    let mut shape = 0.0;
    if weights.lambda_shape != 0.0 {
        let deviations: Vec<_> = indices
            .par_iter()
            .map(|&k| {
                let inst = &dataset.instances[k];
                model.deviation(&inst.code_identity, &inst.code_expression)
            })
            .collect::<Result<_>>()?;
        let lam = weights.lambda_shape;
        for (&k, dev) in indices.iter().zip(&deviations) {
            let inst = &dataset.instances[k];
            shape += lam * dev.iter().map(|d| d.norm_squared()).sum::<f64>();
            let g = &mut gradient.instances[k];
            for (s, basis) in model.identity_basis.iter().enumerate() {
                g.identity[s] = 2.0 * lam * basis.iter().zip(dev).map(|(b, d)| b.dot(d)).sum::<f64>();
                let c = inst.code_identity[s];
                for (gb, d) in gradient.model.identity[s].iter_mut().zip(dev) {
                    *gb += d * (2.0 * lam * c);
                }
            }
            for (s, basis) in model.expression_basis.iter().enumerate() {
                g.expression[s] = 2.0 * lam * basis.iter().zip(dev).map(|(b, d)| b.dot(d)).sum::<f64>();
                let c = inst.code_expression[s];
                for (gb, d) in gradient.model.expression[s].iter_mut().zip(dev) {
                    *gb += d * (2.0 * lam * c);
                }
            }
        }
    }
    Ok(RegularizationLoss { scale, shape, gradient })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_codes_zero_sigma() {
        let mut ds = random_dataset(1, 2, 2, 2, 3);
        for inst in &mut ds.instances {
            inst.code_identity.iter_mut().for_each(|c| *c = 0.0);
            inst.code_expression.iter_mut().for_each(|c| *c = 0.0);
            inst.camera.sigma = 0.0;
        }
        let r = regularization_loss(&ds, &LossWeights::default(), None).unwrap();
        assert_eq!(r.scale + r.shape, 0.0);
    }

    #[test]
    fn sigma_two() {
        let mut ds = random_dataset(2, 2, 1, 1, 1);
        ds.instances[0].code_identity = vec![0.0];
        ds.instances[0].code_expression = vec![0.0];
        ds.instances[0].camera.sigma = 2.0;
        let w = LossWeights { lambda_scale: 0.01, ..LossWeights::default() };
        let r = regularization_loss(&ds, &w, None).unwrap();
        assert!((r.scale + r.shape - 0.04).abs() < 1e-15);
    }

    #[test]
    fn matches_naive_and_finite_differences() {
        let w = LossWeights { lambda_scale: 0.03, lambda_shape: 0.7, ..LossWeights::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..4 {
            let ds = random_dataset(seed, 3, 2, 3, 4);
            let naive = |d: &Dataset| {
                let mut total = 0.0;
                for inst in &d.instances {
                    total += w.lambda_scale * inst.camera.sigma * inst.camera.sigma;
                    for v in 0..d.model.vertex_count() {
                        for c in 0..3 {
                            let mut dev = 0.0;
                            for s in 0..d.model.identity_dim() {
                                dev += inst.code_identity[s] * d.model.identity_basis[s][v][c];
                            }
                            for s in 0..d.model.expression_dim() {
                                dev += inst.code_expression[s] * d.model.expression_basis[s][v][c];
                            }
                            total += w.lambda_shape * dev * dev;
                        }
                    }
                }
                total
            };
            let r = regularization_loss(&ds, &w, None).unwrap();
            assert!((r.scale + r.shape - naive(&ds)).abs() < 1e-10);
            let g = r.gradient.flat();
            for _ in 0..30 {
                let idx = rng.random_range(0..g.len());
                let fd = central_difference(&ds, idx, 1e-5, naive);
                assert!(rel_err(g[idx], fd) < 1e-4 || (g[idx] == 0.0 && fd.abs() < 1e-9), "{idx}: {} vs {fd}", g[idx]);
            }
        }
    }
}
