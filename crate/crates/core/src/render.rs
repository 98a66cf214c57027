//! Z-buffered software rasterization, UV-space normal maps, and OBJ export.
//!
//! Screen coordinates are the camera's image coordinates: column `x`, row
//! `y`, with pixel centers on integer positions. The camera looks down `-z`
//! so depth is `-(R p)_z` and smaller depth is nearer.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{quat_to_rotmat, triangulate, vertex_normals, RotationMatrix, Triangle};
use crate::imageio::write_ppm;
use crate::lux::NormalMap;
use crate::model::{CameraPose, InstanceRecord, ShapeModel, UvGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    /// `f64::INFINITY` on background pixels.
    pub depth: Vec<f64>,
    pub foreground: Vec<bool>,
}

impl RasterImage {
    fn empty(width: usize, height: usize) -> Self {
        RasterImage {
            width,
            height,
            color: vec![[0.0; 3]; width * height],
            depth: vec![f64::INFINITY; width * height],
            foreground: vec![false; width * height],
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|f| **f).count()
    }

    pub fn write_ppm(&self, background: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
        let rgb: Vec<[f64; 3]> = self
            .color
            .iter()
            .zip(&self.foreground)
            .map(|(c, fg)| if *fg { *c } else { background })
            .collect();
        write_ppm(self.width, self.height, &rgb, path)
    }
}

/// Signed doubled area of `(a, b, p)`, evaluated with the lower vertex index
/// first so that the shared edge of two triangles gives exactly negated
/// values.
fn edge(pts: &[Vector2<f64>], i: usize, j: usize, p: &Vector2<f64>) -> f64 {
    if i > j {
        return -edge(pts, j, i, p);
    }
    let (a, b) = (pts[i], pts[j]);
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Top-left style ownership of pixels lying exactly on an edge: of the two
/// opposite directions of an edge exactly one owns it.
fn owns(pts: &[Vector2<f64>], from: usize, to: usize) -> bool {
    let d = pts[to] - pts[from];
    d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
}

struct Setup {
    tri: Triangle,
    key: [usize; 3],
    /// +1 or -1 so that interior edge values are positive.
    orient: f64,
    row_min: usize,
    row_max: usize,
    col_min: usize,
    col_max: usize,
}

fn setup(tri: &Triangle, pts: &[Vector2<f64>], width: usize, height: usize) -> Option<Setup> {
    let [a, b, c] = *tri;
    let area = edge(pts, a, b, &pts[c]);
    if area == 0.0 || !area.is_finite() {
        return None;
    }
    let xs = [pts[a].x, pts[b].x, pts[c].x];
    let ys = [pts[a].y, pts[b].y, pts[c].y];
    let lo = |v: [f64; 3]| v.iter().copied().fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let hi = |v: [f64; 3]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max).floor();
    let (x0, x1, y0, y1) = (lo(xs), hi(xs), lo(ys), hi(ys));
    if x1 < x0 || y1 < y0 || x0 >= width as f64 || y0 >= height as f64 || x1 < 0.0 || y1 < 0.0 {
        return None;
    }
    let mut key = *tri;
    key.sort_unstable();
    Some(Setup {
        tri: *tri,
        key,
        orient: area.signum(),
        row_min: y0 as usize,
        row_max: (y1 as usize).min(height - 1),
        col_min: x0 as usize,
        col_max: (x1 as usize).min(width - 1),
    })
}

/// Barycentric weights of pixel `p`, or `None` if the triangle does not own it.
fn coverage(s: &Setup, pts: &[Vector2<f64>], p: &Vector2<f64>) -> Option<[f64; 3]> {
    let [a, b, c] = s.tri;
    let edges = [(b, c), (c, a), (a, b)];
    let mut w = [0.0; 3];
    for (k, &(i, j)) in edges.iter().enumerate() {
        let v = s.orient * edge(pts, i, j, p);
        let inside = if v == 0.0 {
            if s.orient > 0.0 {
                owns(pts, i, j)
            } else {
                owns(pts, j, i)
            }
        } else {
            v > 0.0
        };
        if !inside {
            return None;
        }
        w[k] = v;
    }
    let sum = w[0] + w[1] + w[2];
    Some([w[0] / sum, w[1] / sum, w[2] / sum])
}

fn row_buckets(setups: &[Setup], height: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); height];
    for (k, s) in setups.iter().enumerate() {
        for row in &mut rows[s.row_min..=s.row_max] {
            row.push(k);
        }
    }
    rows
}

/// Rasterizes a triangle mesh under a scaled orthographic camera,
/// interpolating per-vertex `attributes` into the color channels.
pub fn rasterize(
    points: &[Vector3<f64>],
    triangles: &[Triangle],
    camera: &CameraPose,
    attributes: &[[f64; 3]],
    width: usize,
    height: usize,
) -> Result<RasterImage> {
    if attributes.len() != points.len() {
        return Err(Error::dim("vertex attributes", points.len(), attributes.len()));
    }
    if let Some(&bad) = triangles.iter().flatten().find(|&&v| v >= points.len()) {
        return Err(Error::IndexOutOfRange { index: bad, len: points.len() });
    }
    let mut img = RasterImage::empty(width, height);
    if width == 0 || height == 0 {
        return Ok(img);
    }
    let r = quat_to_rotmat(&camera.q)?;
    let rotated: Vec<Vector3<f64>> = points.iter().map(|p| &r * *p).collect();
    let screen: Vec<Vector2<f64>> = rotated.iter().map(|p| p.xy() * camera.sigma + camera.t).collect();
    let depth: Vec<f64> = rotated.iter().map(|p| -p.z).collect();
    let setups: Vec<Setup> = triangles.iter().filter_map(|t| setup(t, &screen, width, height)).collect();
    let rows = row_buckets(&setups, height);

    img.color
        .par_chunks_mut(width)
        .zip(img.depth.par_chunks_mut(width))
        .zip(img.foreground.par_chunks_mut(width))
        .zip(rows.par_iter())
        .enumerate()
        .for_each(|(row, (((color, zbuf), fg), bucket))| {
            let mut best_key = vec![[usize::MAX; 3]; width];
            for &k in bucket {
                let s = &setups[k];
                for col in s.col_min..=s.col_max {
                    let p = Vector2::new(col as f64, row as f64);
                    let Some(w) = coverage(s, &screen, &p) else { continue };
                    let [a, b, c] = s.tri;
                    let z = w[0] * depth[a] + w[1] * depth[b] + w[2] * depth[c];
                    let nearer = z < zbuf[col] || (z == zbuf[col] && s.key < best_key[col]);
                    if !nearer {
                        continue;
                    }
                    zbuf[col] = z;
                    best_key[col] = s.key;
                    fg[col] = true;
                    color[col] = std::array::from_fn(|ch| {
                        w[0] * attributes[a][ch] + w[1] * attributes[b][ch] + w[2] * attributes[c][ch]
                    });
                }
            }
        });
    Ok(img)
}

/// Grey Lambertian preview lit from the viewer.
pub fn shaded_colors(points: &[Vector3<f64>], triangles: &[Triangle], camera: &CameraPose) -> Result<Vec<[f64; 3]>> {
    let r = quat_to_rotmat(&camera.q)?;
    let normals = vertex_normals(points, triangles)?;
    Ok(normals
        .iter()
        .map(|n| {
            let v = 0.15 + 0.85 * (&r * *n).z.abs();
            [v, v, v]
        })
        .collect())
}

/// Shaded rendering of an instance's surface through its own camera.
pub fn render_instance(
    model: &ShapeModel,
    inst: &InstanceRecord,
    camera: &CameraPose,
    width: usize,
    height: usize,
) -> Result<RasterImage> {
    let shape = inst.shape(model)?;
    let tris = triangulate(&model.grid)?;
    let colors = shaded_colors(&shape, &tris, camera)?;
    rasterize(&shape, &tris, camera, &colors, width, height)
}

/// Texel `(col, row)` of a `width x height` UV map samples
/// `(u, v) = (col / (width - 1), row / (height - 1))`.
pub fn texel_uv(col: usize, row: usize, width: usize, height: usize) -> (f64, f64) {
    let u = if width > 1 { col as f64 / (width - 1) as f64 } else { 0.0 };
    let v = if height > 1 { row as f64 / (height - 1) as f64 } else { 0.0 };
    (u, v)
}

/// Barycentric interpolation of unit vertex vectors over the UV
/// triangulation, renormalized. Texels on shared edges take the first
/// triangle in list order.
pub fn rasterize_uv(
    grid: &UvGrid,
    triangles: &[Triangle],
    values: &[Vector3<f64>],
    width: usize,
    height: usize,
) -> Result<NormalMap> {
    if values.len() != grid.vertex_count() {
        return Err(Error::dim("vertex normals", grid.vertex_count(), values.len()));
    }
    let sx = width.saturating_sub(1) as f64;
    let sy = height.saturating_sub(1) as f64;
    let uv: Vec<Vector2<f64>> = (0..grid.vertex_count())
        .map(|i| {
            let (u, v) = grid.uv(i);
            Vector2::new(u * sx, v * sy)
        })
        .collect();
    let mut buckets = vec![Vec::new(); height];
    for (k, tri) in triangles.iter().enumerate() {
        let ys = tri.map(|v| uv[v].y);
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (r0, r1) = ((lo - 1e-9).ceil().max(0.0) as usize, ((hi + 1e-9).floor() as usize).min(height.saturating_sub(1)));
        for row in buckets.iter_mut().take(r1 + 1).skip(r0) {
            row.push(k);
        }
    }
    let normals: Vec<Option<Vector3<f64>>> = (0..height)
        .into_par_iter()
        .flat_map_iter(|row| {
            let bucket = &buckets[row];
            let uv = &uv;
            (0..width).map(move |col| {
                let p = Vector2::new(col as f64, row as f64);
                for &k in bucket {
                    let [a, b, c] = triangles[k];
                    let area = edge(uv, a, b, &uv[c]);
                    if area == 0.0 {
                        continue;
                    }
                    let w = [edge(uv, b, c, &p) / area, edge(uv, c, a, &p) / area, edge(uv, a, b, &p) / area];
                    if w.iter().all(|&x| x >= -1e-12) {
                        let n = values[a] * w[0] + values[b] * w[1] + values[c] * w[2];
                        let len = n.norm();
                        return (len > 0.0).then(|| n / len);
                    }
                }
                None
            })
        })
        .collect();
    NormalMap::new(width, height, normals)
}

/// World-space vertex normals of the instance's surface, rasterized into a
/// `width x height` UV-space map.
pub fn render_normal_map_uv(model: &ShapeModel, inst: &InstanceRecord, width: usize, height: usize) -> Result<NormalMap> {
    let shape = inst.shape(model)?;
    let tris = triangulate(&model.grid)?;
    let normals = vertex_normals(&shape, &tris)?;
    rasterize_uv(&model.grid, &tris, &normals, width, height)
}

/// Wavefront OBJ with one `vt` per vertex and `f v/vt` records.
pub fn write_obj(
    mut w: impl Write,
    points: &[Vector3<f64>],
    triangles: &[Triangle],
    uv: &[(f64, f64)],
) -> std::io::Result<()> {
    for p in points {
        writeln!(w, "v {} {} {}", p.x, p.y, p.z)?;
    }
    for (u, v) in uv {
        writeln!(w, "vt {u} {v}")?;
    }
    for t in triangles {
        let [a, b, c] = t.map(|i| i + 1);
        writeln!(w, "f {a}/{a} {b}/{b} {c}/{c}")?;
    }
    Ok(())
}

pub fn export_obj(points: &[Vector3<f64>], triangles: &[Triangle], uv: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    if uv.len() != points.len() {
        return Err(Error::dim("texture coordinates", points.len(), uv.len()));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_obj(&mut w, points, triangles, uv)?;
    w.flush()?;
    Ok(())
}

/// Rotation `q` followed by a turn of the object about its own vertical
/// axis by `degrees`.
pub fn with_yaw_offset(q: &[f64; 4], degrees: f64) -> Result<[f64; 4]> {
    let r = quat_to_rotmat(q)?;
    let turn = RotationMatrix::from_euler_zyx(degrees.to_radians(), 0.0, 0.0);
    Ok(RotationMatrix::from_matrix_unchecked(r.matrix() * turn.matrix()).to_quaternion())
}

/// Camera with rotation `q` that centres `points` in a `width x height`
/// image. The scale depends only on the 3D bounding-box diagonal, so it is
/// the same for every rotation of the same shape.
pub fn framing_camera(points: &[Vector3<f64>], q: [f64; 4], width: usize, height: usize) -> Result<CameraPose> {
    if points.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let r = quat_to_rotmat(&q)?;
    let diag = crate::evalkit::bbox_diagonal(points);
    let sigma = if diag > 0.0 { 0.9 * width.min(height) as f64 / diag } else { 1.0 };
    let centroid = points.iter().map(|p| (&r * *p).xy()).sum::<Vector2<f64>>() / points.len() as f64;
    let centre = Vector2::new(width as f64 / 2.0, height as f64 / 2.0);
    Ok(CameraPose { q, t: centre - centroid * sigma, sigma })
}
