//! Morphable surface model, cameras, observations and datasets.
//!
//! A surface is sampled on a regular `(n+1) x (n+1)` lattice in UV space.
//! Vertex `i` sits at row `i / (n+1)` and column `i % (n+1)`, with
//! `u = col / n` and `v = row / n`. Every instance in a dataset shares one
//! [`ShapeModel`] and carries its own codes and [`CameraPose`].

mod io;

pub use io::{load_dataset, load_instances, load_model, save_dataset, save_instances, save_model, save_observations};

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular UV lattice with `n` subdivisions per side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UvGrid {
    n: usize,
}

impl UvGrid {
    pub fn new(n: usize) -> Self {
        UvGrid { n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Vertices per side.
    pub fn side(&self) -> usize {
        self.n + 1
    }

    pub fn vertex_count(&self) -> usize {
        self.side() * self.side()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.side() + col
    }

    pub fn row_col(&self, i: usize) -> (usize, usize) {
        (i / self.side(), i % self.side())
    }

    pub fn uv(&self, i: usize) -> (f64, f64) {
        let (row, col) = self.row_col(i);
        if self.n == 0 {
            return (0.0, 0.0);
        }
        (col as f64 / self.n as f64, row as f64 / self.n as f64)
    }
}

/// Mean shape plus identity and expression bases.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    pub grid: UvGrid,
    pub mean: Vec<Vector3<f64>>,
    pub identity_basis: Vec<Vec<Vector3<f64>>>,
    pub expression_basis: Vec<Vec<Vector3<f64>>>,
}

impl ShapeModel {
    /// A model whose mean and bases are all zero.
    pub fn zeros(grid: UvGrid, identity_dim: usize, expression_dim: usize) -> Self {
        let n = grid.vertex_count();
        ShapeModel {
            grid,
            mean: vec![Vector3::zeros(); n],
            identity_basis: vec![vec![Vector3::zeros(); n]; identity_dim],
            expression_basis: vec![vec![Vector3::zeros(); n]; expression_dim],
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.grid.vertex_count()
    }

    pub fn identity_dim(&self) -> usize {
        self.identity_basis.len()
    }

    pub fn expression_dim(&self) -> usize {
        self.expression_basis.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_count();
        if self.mean.len() != n {
            return Err(Error::Validation(format!(
                "mean has {} vertices but grid n={} needs {}",
                self.mean.len(),
                self.grid.n(),
                n
            )));
        }
        for (name, basis) in [
            ("identity_basis", &self.identity_basis),
            ("expression_basis", &self.expression_basis),
        ] {
            for (s, element) in basis.iter().enumerate() {
                if element.len() != n {
                    return Err(Error::Validation(format!(
                        "{name}[{s}] has {} vertices, expected {n}",
                        element.len()
                    )));
                }
            }
        }
        let all = self
            .mean
            .iter()
            .chain(self.identity_basis.iter().flatten())
            .chain(self.expression_basis.iter().flatten());
        for p in all {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Validation("model contains non-finite values".into()));
            }
        }
        Ok(())
    }

    /// Per-vertex shape `B0 + sum_s sI_s BI_s + sum_s sE_s BE_s`.
    pub fn instance_shape(&self, identity: &[f64], expression: &[f64]) -> Result<Vec<Vector3<f64>>> {
        let mut shape = self.deviation(identity, expression)?;
        for (p, m) in shape.iter_mut().zip(&self.mean) {
            *p += m;
        }
        Ok(shape)
    }

    /// The non-rigid part `sum_s sI_s BI_s + sum_s sE_s BE_s` of an instance.
    pub fn deviation(&self, identity: &[f64], expression: &[f64]) -> Result<Vec<Vector3<f64>>> {
        if identity.len() != self.identity_dim() {
            return Err(Error::dim("identity code", self.identity_dim(), identity.len()));
        }
        if expression.len() != self.expression_dim() {
            return Err(Error::dim("expression code", self.expression_dim(), expression.len()));
        }
        let mut out = vec![Vector3::zeros(); self.vertex_count()];
        let terms = identity
            .iter()
            .zip(&self.identity_basis)
            .chain(expression.iter().zip(&self.expression_basis));
        for (&coef, element) in terms {
            if coef == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(element) {
                *o += b * coef;
            }
        }
        Ok(out)
    }
}

/// Scaled orthographic camera: `x = sigma * [R p]_xy + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    /// Rotation quaternion `(w, x, y, z)`.
    pub q: [f64; 4],
    pub t: Vector2<f64>,
    pub sigma: f64,
}

impl Default for CameraPose {
    fn default() -> Self {
        CameraPose {
            q: [1.0, 0.0, 0.0, 0.0],
            t: Vector2::zeros(),
            sigma: 1.0,
        }
    }
}

impl CameraPose {
    pub fn quat_norm(&self) -> f64 {
        self.q.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn normalize(&mut self) {
        let norm = self.quat_norm();
        if norm > 0.0 {
            for c in &mut self.q {
                *c /= norm;
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        (self.quat_norm() - 1.0).abs() <= 1e-6
            && self.sigma > 0.0
            && self.sigma.is_finite()
            && self.t.iter().all(|c| c.is_finite())
    }

    /// Flattened pose code `(q, t, sigma)` with `q` sign-canonicalized to `w >= 0`.
    pub fn pose_code(&self) -> [f64; 7] {
        let norm = self.quat_norm();
        let sign = if self.q[0] < 0.0 { -1.0 } else { 1.0 };
        let s = sign / norm;
        [
            self.q[0] * s,
            self.q[1] * s,
            self.q[2] * s,
            self.q[3] * s,
            self.t.x,
            self.t.y,
            self.sigma,
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_id: Option<String>,
}

impl Labels {
    pub fn is_empty(&self) -> bool {
        self.identity_id.is_none() && self.expression_id.is_none() && self.pose_id.is_none()
    }
}

/// A 2D point matched to a surface vertex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub vertex: usize,
    pub point: Vector2<f64>,
}

/// One image: its observed points plus the free variables fitted to it.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub id: String,
    pub labels: Labels,
    /// Sorted by vertex, at most one entry per vertex. A vertex is visible
    /// exactly when it has an observation.
    observations: Vec<Observation>,
    pub code_identity: Vec<f64>,
    pub code_expression: Vec<f64>,
    pub camera: CameraPose,
}

impl InstanceRecord {
    pub fn new(
        id: impl Into<String>,
        observations: impl IntoIterator<Item = (usize, Vector2<f64>)>,
        identity_dim: usize,
        expression_dim: usize,
    ) -> Self {
        let map: BTreeMap<usize, Vector2<f64>> = observations.into_iter().collect();
        InstanceRecord {
            id: id.into(),
            labels: Labels::default(),
            observations: map
                .into_iter()
                .map(|(vertex, point)| Observation { vertex, point })
                .collect(),
            code_identity: vec![0.0; identity_dim],
            code_expression: vec![0.0; expression_dim],
            camera: CameraPose::default(),
        }
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn set_observations(&mut self, observations: impl IntoIterator<Item = (usize, Vector2<f64>)>) {
        let map: BTreeMap<usize, Vector2<f64>> = observations.into_iter().collect();
        self.observations = map
            .into_iter()
            .map(|(vertex, point)| Observation { vertex, point })
            .collect();
    }

    pub fn visible_count(&self) -> usize {
        self.observations.len()
    }

    pub fn visibility(&self, vertex: usize) -> bool {
        self.observations
            .binary_search_by_key(&vertex, |o| o.vertex)
            .is_ok()
    }

    /// Dense visibility vector `nu` over `vertex_count` vertices.
    pub fn visibility_mask(&self, vertex_count: usize) -> Vec<bool> {
        let mut mask = vec![false; vertex_count];
        for o in &self.observations {
            if o.vertex < vertex_count {
                mask[o.vertex] = true;
            }
        }
        mask
    }

    pub fn shape(&self, model: &ShapeModel) -> Result<Vec<Vector3<f64>>> {
        model.instance_shape(&self.code_identity, &self.code_expression)
    }
}

/// Instances sharing one shape model.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub model: ShapeModel,
    pub instances: Vec<InstanceRecord>,
}

impl Dataset {
    pub fn new(model: ShapeModel, instances: Vec<InstanceRecord>) -> Result<Self> {
        let dataset = Dataset { model, instances };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let n = self.model.vertex_count();
        for inst in &self.instances {
            if inst.code_identity.len() != self.model.identity_dim() {
                return Err(Error::dim(
                    format!("identity code of `{}`", inst.id),
                    self.model.identity_dim(),
                    inst.code_identity.len(),
                ));
            }
            if inst.code_expression.len() != self.model.expression_dim() {
                return Err(Error::dim(
                    format!("expression code of `{}`", inst.id),
                    self.model.expression_dim(),
                    inst.code_expression.len(),
                ));
            }
            if let Some(o) = inst.observations.iter().find(|o| o.vertex >= n) {
                return Err(Error::IndexOutOfRange { index: o.vertex, len: n });
            }
            let finite = inst
                .code_identity
                .iter()
                .chain(&inst.code_expression)
                .all(|c| c.is_finite());
            if !finite {
                return Err(Error::Validation(format!("instance `{}` has non-finite codes", inst.id)));
            }
        }
        Ok(())
    }

    pub fn instance(&self, id: &str) -> Option<&InstanceRecord> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}
