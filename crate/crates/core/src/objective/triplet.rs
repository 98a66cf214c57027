//! Siamese + triplet supervision on grouped instances.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{subset_indices, Gradient};
use crate::error::Result;
use crate::geometry::project_out_radial;
use crate::model::{Dataset, InstanceRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    Expression,
    Identity,
    Pose,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Expression, Factor::Identity, Factor::Pose];

    pub fn label<'a>(&self, inst: &'a InstanceRecord) -> Option<&'a str> {
        match self {
            Factor::Expression => inst.labels.expression_id.as_deref(),
            Factor::Identity => inst.labels.identity_id.as_deref(),
            Factor::Pose => inst.labels.pose_id.as_deref(),
        }
    }

    /// The latent vector this factor supervises.
    pub fn embedding(&self, inst: &InstanceRecord) -> Vec<f64> {
        match self {
            Factor::Expression => inst.code_expression.clone(),
            Factor::Identity => inst.code_identity.clone(),
            Factor::Pose => inst.camera.pose_code().to_vec(),
        }
    }

    fn others(&self) -> impl Iterator<Item = Factor> + '_ {
        Factor::ALL.into_iter().filter(move |f| f != self)
    }
}

/// Instance indices into `Dataset::instances`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub factor: Factor,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// For each labelled anchor and each factor: the positive shares the
/// factor's label and differs in some other known label; the negative has a
/// different label for the factor and, when such an instance exists, the same
/// labels for everything else the anchor is labelled with.
pub fn sample_triplets(dataset: &Dataset, subset: Option<&[usize]>, rng: &mut impl Rng) -> Vec<Triplet> {
    let indices = subset_indices(dataset, subset);
    let insts = &dataset.instances;
    let mut out = Vec::new();
    for factor in Factor::ALL {
        let before = out.len();
        for &a in &indices {
            let Some(label) = factor.label(&insts[a]) else { continue };
            let positives: Vec<usize> = indices
                .iter()
                .copied()
                .filter(|&p| p != a && factor.label(&insts[p]) == Some(label))
                .filter(|&p| {
                    let mut comparable = factor
                        .others()
                        .filter_map(|f| Some((f.label(&insts[a])?, f.label(&insts[p])?)))
                        .peekable();
                    comparable.peek().is_none() || comparable.any(|(x, y)| x != y)
                })
                .collect();
            let differs: Vec<usize> = indices
                .iter()
                .copied()
                .filter(|&n| factor.label(&insts[n]).is_some_and(|l| l != label))
                .collect();
            let exact: Vec<usize> = differs
                .iter()
                .copied()
                .filter(|&n| {
                    factor.others().all(|f| match f.label(&insts[a]) {
                        Some(l) => f.label(&insts[n]) == Some(l),
                        None => true,
                    })
                })
                .collect();
            let negatives = if exact.is_empty() { &differs } else { &exact };
            let (Some(&positive), Some(&negative)) = (positives.choose(rng), negatives.choose(rng)) else {
                continue;
            };
            out.push(Triplet { factor, anchor: a, positive, negative });
        }
        if out.len() == before {
            log::debug!("no valid {factor:?} triplets; factor contributes 0");
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TripletLoss {
    pub expression: f64,
    pub identity: f64,
    pub pose: f64,
    /// Gradient of `expression + identity + pose`.
    pub gradient: Gradient,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn add_embedding_grad(grad: &mut Gradient, dataset: &Dataset, factor: Factor, k: usize, g: &[f64]) {
    let target = &mut grad.instances[k];
    match factor {
        Factor::Expression => target.expression.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        Factor::Identity => target.identity.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        Factor::Pose => {
            // code_q = sign(w) * q / |q|
            let q = dataset.instances[k].camera.q;
            let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
            let unit = q.map(|c| c / norm);
            let gq = project_out_radial(&unit, &[g[0], g[1], g[2], g[3]]);
            for c in 0..4 {
                target.q[c] += sign * gq[c] / norm;
            }
            target.t.x += g[4];
            target.t.y += g[5];
            target.sigma += g[6];
        }
    }
}

/// `sum |f(a) - f(a+)|^2 + max(0, margin + |f(a) - f(a+)|^2 - |f(a) - f(a-)|^2)`
/// per factor.
pub fn triplet_losses(dataset: &Dataset, triplets: &[Triplet], margin: f64) -> Result<TripletLoss> {
    let mut gradient = Gradient::zeros(dataset);
    let mut values = [0.0; 3];
    for t in triplets {
        let f = t.factor;
        let ea = f.embedding(&dataset.instances[t.anchor]);
        let ep = f.embedding(&dataset.instances[t.positive]);
        let en = f.embedding(&dataset.instances[t.negative]);
        let d_pos = sq_dist(&ea, &ep);
        let d_neg = sq_dist(&ea, &en);
        let hinge = margin + d_pos - d_neg;
        let slot = match f {
            Factor::Expression => 0,
            Factor::Identity => 1,
            Factor::Pose => 2,
        };
        values[slot] += d_pos + hinge.max(0.0);

        let active = if hinge > 0.0 { 1.0 } else { 0.0 };
        let dim = ea.len();
        let mut ga = vec![0.0; dim];
        let mut gp = vec![0.0; dim];
        let mut gn = vec![0.0; dim];
        for c in 0..dim {
            let dp = ea[c] - ep[c];
            let dn = ea[c] - en[c];
            ga[c] = 2.0 * dp * (1.0 + active) - 2.0 * dn * active;
            gp[c] = -2.0 * dp * (1.0 + active);
            gn[c] = 2.0 * dn * active;
        }
        add_embedding_grad(&mut gradient, dataset, f, t.anchor, &ga);
        add_embedding_grad(&mut gradient, dataset, f, t.positive, &gp);
        add_embedding_grad(&mut gradient, dataset, f, t.negative, &gn);
    }
    Ok(TripletLoss { expression: values[0], identity: values[1], pose: values[2], gradient })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::model::Labels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labelled(id: &str, ex: &str, po: Option<&str>) -> Labels {
        Labels {
            identity_id: Some(id.into()),
            expression_id: Some(ex.into()),
            pose_id: po.map(Into::into),
        }
    }

    #[test]
    fn margin_satisfied_and_degenerate() {
        let mut ds = random_dataset(1, 1, 0, 2, 3);
        ds.instances[0].code_expression = vec![0.0, 0.0];
        ds.instances[1].code_expression = vec![0.0, 0.0];
        ds.instances[2].code_expression = vec![1.0, 1.0];
        let t = Triplet { factor: Factor::Expression, anchor: 0, positive: 1, negative: 2 };
        let l = triplet_losses(&ds, &[t], 1.0).unwrap();
        assert_eq!(l.expression, 0.0);

        ds.instances[2].code_expression = vec![0.0, 0.0];
        let l = triplet_losses(&ds, &[t], 1.0).unwrap();
        assert_eq!(l.expression, 1.0);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = random_dataset(3, 1, 3, 2, 12);
        let trips = sample_triplets(&ds, None, &mut rng);
        assert!(!trips.is_empty());
        let l = triplet_losses(&ds, &trips, 1.0).unwrap();
        let mut want = [0.0; 3];
        for t in &trips {
            let emb = |k: usize| -> Vec<f64> {
                let inst = &ds.instances[k];
                match t.factor {
                    Factor::Expression => inst.code_expression.clone(),
                    Factor::Identity => inst.code_identity.clone(),
                    Factor::Pose => {
                        let q = inst.camera.q;
                        let s = if q[0] < 0.0 { -1.0 } else { 1.0 };
                        vec![s * q[0], s * q[1], s * q[2], s * q[3], inst.camera.t.x, inst.camera.t.y, inst.camera.sigma]
                    }
                }
            };
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            let (a, p, n) = (emb(t.anchor), emb(t.positive), emb(t.negative));
            let v = d(&a, &p) + (1.0 + d(&a, &p) - d(&a, &n)).max(0.0);
            want[t.factor as usize] += v;
        }
        assert!((l.expression - want[0]).abs() < 1e-10);
        assert!((l.identity - want[1]).abs() < 1e-10);
        assert!((l.pose - want[2]).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = random_dataset(5, 1, 2, 3, 10);
        let trips = sample_triplets(&ds, None, &mut rng);
        let l = triplet_losses(&ds, &trips, 1.0).unwrap();
        let g = l.gradient.flat();
        let f = |d: &Dataset| {
            let l = triplet_losses(d, &trips, 1.0).unwrap();
            l.expression + l.identity + l.pose
        };
        let model_len = ds.model.flat_params().len();
        for idx in model_len..g.len() {
            let fd = central_difference(&ds, idx, 1e-5, f);
            assert!(rel_err(g[idx], fd) < 1e-4, "{idx}: {} vs {fd}", g[idx]);
        }
    }

    #[test]
    fn sampling_contract() {
        let mut ds = random_dataset(6, 1, 1, 1, 6);
        let labels = [
            labelled("a", "smile", Some("front")),
            labelled("a", "neutral", Some("front")),
            labelled("b", "smile", Some("front")),
            labelled("b", "neutral", Some("side")),
            labelled("c", "smile", Some("side")),
            labelled("c", "smile", Some("side")),
        ];
        for (inst, l) in ds.instances.iter_mut().zip(labels) {
            inst.labels = l;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            for t in sample_triplets(&ds, None, &mut rng) {
                let (a, p, n) = (&ds.instances[t.anchor], &ds.instances[t.positive], &ds.instances[t.negative]);
                assert_ne!(t.anchor, t.positive);
                assert_eq!(t.factor.label(a), t.factor.label(p));
                assert_ne!(t.factor.label(a), t.factor.label(n));
                assert!(t.factor.others().any(|f| f.label(a) != f.label(p)));
                if t.factor == Factor::Expression && t.anchor == 0 {
                    // instance 1 is the only exact negative: same id and pose
                    assert_eq!(t.negative, 1);
                }
            }
        }
        // instance 5 duplicates 4 in every label, so it is never 4's positive
        for t in sample_triplets(&ds, None, &mut rng) {
            if t.anchor == 4 {
                assert_ne!(t.positive, 5);
            }
        }
    }

    #[test]
    fn unlabelled_data_has_no_triplets() {
        let mut ds = random_dataset(8, 1, 1, 1, 5);
        ds.instances.iter_mut().for_each(|i| i.labels = Labels::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_triplets(&ds, None, &mut rng).is_empty());
    }
}
