//! Landmark evaluation: landmarks as fixed vertex combinations, normalized
//! mean errors in 2D and (after Procrustes alignment) in 3D, and yaw-binned
//! summaries.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{procrustes_align, project, quat_to_rotmat};
use crate::model::{Dataset, InstanceRecord, ShapeModel};
use crate::objective::{sample_triplets, Factor};

/// Each landmark is a convex combination of vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSpec {
    pub landmarks: Vec<Vec<(usize, f64)>>,
    pub left_eye: usize,
    pub right_eye: usize,
}

impl LandmarkSpec {
    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        for (k, lm) in self.landmarks.iter().enumerate() {
            if lm.is_empty() {
                return Err(Error::Validation(format!("landmark {k} has no vertices")));
            }
            for &(v, w) in lm {
                if v >= vertex_count {
                    return Err(Error::IndexOutOfRange { index: v, len: vertex_count });
                }
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::Validation(format!("landmark {k} has weight {w}")));
                }
            }
            let sum: f64 = lm.iter().map(|p| p.1).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("landmark {k} weights sum to {sum}")));
            }
        }
        for eye in [self.left_eye, self.right_eye] {
            if eye >= self.landmarks.len() {
                return Err(Error::Validation(format!("eye landmark {eye} out of range")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}

fn combine<T>(points: &[T], spec: &LandmarkSpec, zero: T) -> Result<Vec<T>>
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    spec.validate(points.len())?;
    Ok(spec
        .landmarks
        .iter()
        .map(|lm| lm.iter().fold(zero, |acc, &(v, w)| acc + points[v] * w))
        .collect())
}

/// 3D landmarks in the camera frame (`R S`, before scaling).
pub fn predict_landmarks_3d(model: &ShapeModel, inst: &InstanceRecord, spec: &LandmarkSpec) -> Result<Vec<Vector3<f64>>> {
    let r = quat_to_rotmat(&inst.camera.q)?;
    let rotated: Vec<Vector3<f64>> = inst.shape(model)?.iter().map(|p| &r * *p).collect();
    combine(&rotated, spec, Vector3::zeros())
}

/// Landmarks of the projected vertices in image coordinates.
pub fn predict_landmarks_2d(model: &ShapeModel, inst: &InstanceRecord, spec: &LandmarkSpec) -> Result<Vec<Vector2<f64>>> {
    let projected = project(&inst.shape(model)?, &inst.camera)?;
    combine(&projected, spec, Vector2::zeros())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    Image,
    Model,
}

/// Landmarks as coordinate rows (2 or 3 columns).
pub fn predict_landmarks(model: &ShapeModel, inst: &InstanceRecord, spec: &LandmarkSpec, space: Space) -> Result<Vec<Vec<f64>>> {
    Ok(match space {
        Space::Image => predict_landmarks_2d(model, inst, spec)?.iter().map(|p| vec![p.x, p.y]).collect(),
        Space::Model => predict_landmarks_3d(model, inst, spec)?.iter().map(|p| vec![p.x, p.y, p.z]).collect(),
    })
}

/// Mean landmark distance divided by the inter-ocular distance of `gt`.
pub fn nme_2d(pred: &[Vector2<f64>], gt: &[Vector2<f64>], left_eye: usize, right_eye: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("landmarks", gt.len(), pred.len()));
    }
    if gt.is_empty() {
        return Err(Error::Validation("no landmarks".into()));
    }
    if left_eye >= gt.len() || right_eye >= gt.len() {
        return Err(Error::Validation("eye index out of range".into()));
    }
    let iod = (gt[left_eye] - gt[right_eye]).norm();
    if !(iod > 0.0) {
        return Err(Error::Degenerate("coincident eye landmarks".into()));
    }
    let mean = pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / gt.len() as f64;
    Ok(mean / iod)
}

pub fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Percent of the gt bounding-box diagonal: mean distance after aligning
/// `pred` onto `gt` by similarity (rotation optional, no reflection).
pub fn nme_3d(pred: &[Vector3<f64>], gt: &[Vector3<f64>], with_rotation: bool) -> Result<f64> {
    let diag = bbox_diagonal(gt);
    if !(diag > 0.0) || !diag.is_finite() {
        return Err(Error::Degenerate("ground-truth bounding box is empty".into()));
    }
    let fit = procrustes_align(gt, pred, with_rotation)?;
    let mean = fit.aligned.iter().zip(gt).map(|(a, g)| (a - g).norm()).sum::<f64>() / gt.len() as f64;
    Ok(100.0 * mean / diag)
}

/// One line of a ground-truth landmark file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub id: String,
    pub landmarks: Vec<Vec<f64>>,
    pub left_eye: usize,
    pub right_eye: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw: Option<f64>,
}

impl GtRecord {
    pub fn points_2d(&self) -> Result<Vec<Vector2<f64>>> {
        self.landmarks
            .iter()
            .map(|p| match p.as_slice() {
                [x, y, ..] => Ok(Vector2::new(*x, *y)),
                _ => Err(Error::Validation(format!("{}: landmark with {} coordinates", self.id, p.len()))),
            })
            .collect()
    }

    pub fn points_3d(&self) -> Result<Vec<Vector3<f64>>> {
        self.landmarks
            .iter()
            .map(|p| match p.as_slice() {
                [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
                _ => Err(Error::Validation(format!("{}: 3D landmark with {} coordinates", self.id, p.len()))),
            })
            .collect()
    }
}

pub fn save_gt(records: &[GtRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_gt(path: impl AsRef<Path>) -> Result<Vec<GtRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, k + 1, e.to_string())))
        .collect()
}

/// Closed yaw interval; the lower bound is exclusive except for the first
/// bin of a list, matching `[0,30] (30,60] (60,90]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YawBin {
    pub lo: f64,
    pub hi: f64,
}

impl YawBin {
    pub fn label(&self, first: bool) -> String {
        if first {
            format!("[{},{}]", self.lo, self.hi)
        } else {
            format!("({},{}]", self.lo, self.hi)
        }
    }
}

pub fn default_yaw_bins() -> Vec<YawBin> {
    vec![YawBin { lo: 0.0, hi: 30.0 }, YawBin { lo: 30.0, hi: 60.0 }, YawBin { lo: 60.0, hi: 90.0 }]
}

/// Parses `"0,30,60,90"` into consecutive bins.
pub fn parse_yaw_edges(text: &str) -> Result<Vec<YawBin>> {
    let edges: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Validation(format!("bad yaw edge {s:?}: {e}"))))
        .collect::<Result<_>>()?;
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Validation(format!("yaw edges must be increasing, got {text:?}")));
    }
    Ok(edges.windows(2).map(|w| YawBin { lo: w[0], hi: w[1] }).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceScore {
    pub id: String,
    /// Absolute yaw in degrees.
    pub yaw: f64,
    pub nme: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinSummary {
    pub label: String,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

fn summarize(label: String, values: &[f64]) -> BinSummary {
    if values.is_empty() {
        return BinSummary { label, count: 0, mean: None, std: None };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    BinSummary { label, count: values.len(), mean: Some(mean), std: Some(var.sqrt()) }
}

/// Per-bin and overall mean and (population) standard deviation.
pub fn report_by_yaw(scores: &[InstanceScore], bins: &[YawBin]) -> Vec<BinSummary> {
    let mut rows: Vec<BinSummary> = bins
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let vals: Vec<f64> = scores
                .iter()
                .filter(|s| (s.yaw > b.lo || (k == 0 && s.yaw >= b.lo)) && s.yaw <= b.hi)
                .map(|s| s.nme)
                .collect();
            summarize(b.label(k == 0), &vals)
        })
        .collect();
    let all: Vec<f64> = scores.iter().map(|s| s.nme).collect();
    rows.push(summarize("all".into(), &all));
    rows
}

/// `bin,count,mean,std`; empty bins leave mean and std blank.
pub fn report_csv(rows: &[BinSummary]) -> String {
    let mut out = String::from("bin,count,mean,std\n");
    for r in rows {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        out += &format!("{},{},{},{}\n", r.label, r.count, f(r.mean), f(r.std));
    }
    out
}

/// Pairs each gt record with a prediction by id; missing ids are an error
/// listing every one of them.
pub fn match_ids<'a, T>(gt: &'a [GtRecord], lookup: impl Fn(&str) -> Option<T>) -> Result<Vec<(&'a GtRecord, T)>> {
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for g in gt {
        match lookup(&g.id) {
            Some(p) => out.push((g, p)),
            None => missing.push(g.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!("no prediction for ids: {}", missing.join(", "))));
    }
    Ok(out)
}

/// 3D NME of every gt record against the fitted dataset. Yaw comes from the
/// gt record when present, otherwise from the fitted camera.
pub fn evaluate_3d(dataset: &Dataset, gt: &[GtRecord], spec: &LandmarkSpec, with_rotation: bool) -> Result<Vec<InstanceScore>> {
    let pairs = match_ids(gt, |id| dataset.instance(id))?;
    pairs
        .par_iter()
        .map(|(g, inst)| {
            let pred = predict_landmarks_3d(&dataset.model, inst, spec)?;
            let nme = nme_3d(&pred, &g.points_3d()?, with_rotation)?;
            let yaw = match g.yaw {
                Some(y) => y.abs(),
                None => quat_to_rotmat(&inst.camera.q)?.yaw_degrees().abs(),
            };
            Ok(InstanceScore { id: g.id.clone(), yaw, nme })
        })
        .collect()
}

pub fn evaluate_2d(dataset: &Dataset, gt: &[GtRecord], spec: &LandmarkSpec) -> Result<Vec<InstanceScore>> {
    let pairs = match_ids(gt, |id| dataset.instance(id))?;
    pairs
        .par_iter()
        .map(|(g, inst)| {
            let pred = predict_landmarks_2d(&dataset.model, inst, spec)?;
            let nme = nme_2d(&pred, &g.points_2d()?, g.left_eye, g.right_eye)?;
            let yaw = match g.yaw {
                Some(y) => y.abs(),
                None => quat_to_rotmat(&inst.camera.q)?.yaw_degrees().abs(),
            };
            Ok(InstanceScore { id: g.id.clone(), yaw, nme })
        })
        .collect()
}

/// Mean distance between each visible observation and its projected vertex.
pub fn mean_reprojection_error(dataset: &Dataset) -> Result<f64> {
    let (sum, count) = dataset
        .instances
        .par_iter()
        .map(|inst| {
            let points = project(&inst.shape(&dataset.model)?, &inst.camera)?;
            let sum: f64 = inst.observations().iter().map(|o| (points[o.vertex] - o.point).norm()).sum();
            Ok((sum, inst.visible_count()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(sum / count as f64)
}

fn camera_frame_shape(model: &ShapeModel, inst: &InstanceRecord) -> Result<Vec<Vector3<f64>>> {
    let r = quat_to_rotmat(&inst.camera.q)?;
    Ok(inst.shape(model)?.iter().map(|p| &r * *p).collect())
}

/// Per-instance mean vertex distance between the fitted and reference
/// camera-frame shapes after a similarity alignment of the fitted one.
pub fn aligned_shape_errors(fitted: &Dataset, reference: &Dataset) -> Result<Vec<(String, f64)>> {
    if fitted.model.vertex_count() != reference.model.vertex_count() {
        return Err(Error::dim("vertices", reference.model.vertex_count(), fitted.model.vertex_count()));
    }
    let ids: Vec<&str> = reference.instances.iter().map(|i| i.id.as_str()).collect();
    let missing: Vec<&str> = ids.iter().copied().filter(|id| fitted.instance(id).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!("no fitted instance for ids: {}", missing.join(", "))));
    }
    reference
        .instances
        .par_iter()
        .map(|truth| {
            let fit = fitted.instance(&truth.id).expect("checked above");
            let x = camera_frame_shape(&reference.model, truth)?;
            let y = camera_frame_shape(&fitted.model, fit)?;
            let aligned = procrustes_align(&x, &y, true)?.aligned;
            let err = x.iter().zip(&aligned).map(|(a, b)| (a - b).norm()).sum::<f64>() / x.len() as f64;
            Ok((truth.id.clone(), err))
        })
        .collect()
}

/// Fraction of freshly sampled `factor` triplets whose embeddings satisfy
/// `d(a, a+) + margin <= d(a, a-) + slack` with squared distances, over
/// `rounds` sampling passes. `None` when no triplet can be formed.
pub fn triplet_satisfaction(dataset: &Dataset, factor: Factor, margin: f64, slack: f64, rounds: usize, seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ok, mut total) = (0usize, 0usize);
    for _ in 0..rounds {
        for t in sample_triplets(dataset, None, &mut rng).into_iter().filter(|t| t.factor == factor) {
            let e = |k: usize| factor.embedding(&dataset.instances[k]);
            let (a, p, n) = (e(t.anchor), e(t.positive), e(t.negative));
            total += 1;
            if squared_distance(&a, &p) + margin <= squared_distance(&a, &n) + slack {
                ok += 1;
            }
        }
    }
    (total > 0).then(|| ok as f64 / total as f64)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean Euclidean embedding distance over pairs sharing the `factor` label
/// and over pairs with different labels. Unlabelled instances are skipped.
pub fn label_separation(dataset: &Dataset, factor: Factor) -> Option<(f64, f64)> {
    let labelled: Vec<(&str, Vec<f64>)> =
        dataset.instances.iter().filter_map(|i| factor.label(i).map(|l| (l, factor.embedding(i)))).collect();
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (i, (la, ea)) in labelled.iter().enumerate() {
        for (lb, eb) in &labelled[i + 1..] {
            let d = squared_distance(ea, eb).sqrt();
            if la == lb {
                same += d;
                ns += 1;
            } else {
                cross += d;
                nc += 1;
            }
        }
    }
    (ns > 0 && nc > 0).then(|| (same / ns as f64, cross / nc as f64))
}
