//! JSON model files and JSON-lines instance files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{CameraPose, Dataset, InstanceRecord, Labels, ShapeModel, UvGrid};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ModelFile {
    n: usize,
    #[serde(rename = "I")]
    identity_dim: usize,
    #[serde(rename = "E")]
    expression_dim: usize,
    mean: Vec<[f64; 3]>,
    identity_basis: Vec<Vec<[f64; 3]>>,
    expression_basis: Vec<Vec<[f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
struct PointEntry {
    i: usize,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct CodesEntry {
    identity: Vec<f64>,
    expression: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CameraEntry {
    q: [f64; 4],
    t: [f64; 2],
    sigma: f64,
}

#[derive(Serialize, Deserialize)]
struct InstanceLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Labels>,
    points: Vec<PointEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    codes: Option<CodesEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera: Option<CameraEntry>,
}

fn to_vecs(rows: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect()
}

fn to_rows(vecs: &[Vector3<f64>]) -> Vec<[f64; 3]> {
    vecs.iter().map(|v| [v.x, v.y, v.z]).collect()
}

pub fn save_model(model: &ShapeModel, path: impl AsRef<Path>) -> Result<()> {
    model.validate()?;
    let file = ModelFile {
        n: model.grid.n(),
        identity_dim: model.identity_dim(),
        expression_dim: model.expression_dim(),
        mean: to_rows(&model.mean),
        identity_basis: model.identity_basis.iter().map(|b| to_rows(b)).collect(),
        expression_basis: model.expression_basis.iter().map(|b| to_rows(b)).collect(),
    };
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &file).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ShapeModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    // serde_json rejects NaN literals, which surfaces non-finite data as a
    // parse error; `validate` still covers infinities from overflowing literals.
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    if file.identity_basis.len() != file.identity_dim {
        return Err(Error::Validation(format!(
            "field I={} but identity_basis has {} elements",
            file.identity_dim,
            file.identity_basis.len()
        )));
    }
    if file.expression_basis.len() != file.expression_dim {
        return Err(Error::Validation(format!(
            "field E={} but expression_basis has {} elements",
            file.expression_dim,
            file.expression_basis.len()
        )));
    }
    let model = ShapeModel {
        grid: UvGrid::new(file.n),
        mean: to_vecs(&file.mean),
        identity_basis: file.identity_basis.iter().map(|b| to_vecs(b)).collect(),
        expression_basis: file.expression_basis.iter().map(|b| to_vecs(b)).collect(),
    };
    model.validate()?;
    Ok(model)
}

pub fn save_instances(instances: &[InstanceRecord], path: impl AsRef<Path>) -> Result<()> {
    write_instances(instances, path, true)
}

/// Writes ids, labels and points only, leaving codes and cameras to the
/// solver.
pub fn save_observations(instances: &[InstanceRecord], path: impl AsRef<Path>) -> Result<()> {
    write_instances(instances, path, false)
}

fn write_instances(instances: &[InstanceRecord], path: impl AsRef<Path>, with_params: bool) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        let line = InstanceLine {
            id: inst.id.clone(),
            labels: (!inst.labels.is_empty()).then(|| inst.labels.clone()),
            points: inst
                .observations()
                .iter()
                .map(|o| PointEntry { i: o.vertex, x: o.point.x, y: o.point.y })
                .collect(),
            codes: with_params.then(|| CodesEntry {
                identity: inst.code_identity.clone(),
                expression: inst.code_expression.clone(),
            }),
            camera: with_params.then(|| CameraEntry {
                q: inst.camera.q,
                t: [inst.camera.t.x, inst.camera.t.y],
                sigma: inst.camera.sigma,
            }),
        };
        serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads instance lines. Missing codes become zero vectors of the given
/// sizes and a missing camera becomes the identity camera; both are meant to
/// be overwritten by the solver's initialization.
pub fn load_instances(
    path: impl AsRef<Path>,
    identity_dim: usize,
    expression_dim: usize,
) -> Result<Vec<InstanceRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: InstanceLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for p in &parsed.points {
            if !seen.insert(p.i) {
                return Err(Error::parse(path, line_no, format!("points: duplicate vertex {}", p.i)));
            }
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::parse(path, line_no, format!("points: non-finite coordinate at vertex {}", p.i)));
            }
        }
        let mut inst = InstanceRecord::new(
            parsed.id,
            parsed.points.iter().map(|p| (p.i, Vector2::new(p.x, p.y))),
            identity_dim,
            expression_dim,
        );
        inst.labels = parsed.labels.unwrap_or_default();
        if let Some(codes) = parsed.codes {
            if codes.identity.len() != identity_dim {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("codes.identity has {} entries, expected {identity_dim}", codes.identity.len()),
                ));
            }
            if codes.expression.len() != expression_dim {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("codes.expression has {} entries, expected {expression_dim}", codes.expression.len()),
                ));
            }
            inst.code_identity = codes.identity;
            inst.code_expression = codes.expression;
        }
        if let Some(cam) = parsed.camera {
            if !(cam.sigma > 0.0) {
                return Err(Error::parse(path, line_no, "camera.sigma must be positive"));
            }
            if cam.q.iter().all(|c| *c == 0.0) {
                return Err(Error::parse(path, line_no, "camera.q is zero"));
            }
            inst.camera = CameraPose {
                q: cam.q,
                t: Vector2::new(cam.t[0], cam.t[1]),
                sigma: cam.sigma,
            };
        }
        out.push(inst);
    }
    Ok(out)
}

/// Writes the model and instances as two files.
pub fn save_dataset(dataset: &Dataset, model_path: impl AsRef<Path>, instances_path: impl AsRef<Path>) -> Result<()> {
    save_model(&dataset.model, model_path)?;
    save_instances(&dataset.instances, instances_path)
}

pub fn load_dataset(model_path: impl AsRef<Path>, instances_path: impl AsRef<Path>) -> Result<Dataset> {
    let model = load_model(model_path)?;
    let instances = load_instances(instances_path, model.identity_dim(), model.expression_dim())?;
    Dataset::new(model, instances)
}
