//! Rotations, scaled orthographic projection, mesh topology and normals,
//! and similarity (Procrustes) alignment.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::model::{CameraPose, UvGrid};

/// Proper rotation (orthonormal, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    /// Wraps `m` without checking that it is orthonormal.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        RotationMatrix(m)
    }

    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// `Rz(roll) * Ry(yaw) * Rx(pitch)`, angles in radians.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
        RotationMatrix(rz * ry * rx)
    }

    /// Rotation about the Y axis in the ZYX Euler decomposition, in degrees.
    pub fn yaw_degrees(&self) -> f64 {
        (-self.0[(2, 0)]).clamp(-1.0, 1.0).asin().to_degrees()
    }

    pub fn to_quaternion(&self) -> [f64; 4] {
        let m = &self.0;
        let trace = m.trace();
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            [0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s]
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            [(m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s]
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            [(m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s]
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            [(m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s]
        };
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        q.map(|c| c / norm)
    }
}

impl std::ops::Mul<Vector3<f64>> for &RotationMatrix {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

fn normalized_quat(q: &[f64; 4]) -> Result<[f64; 4]> {
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroQuaternion);
    }
    Ok(q.map(|c| c / norm))
}

/// Rotation matrix of a unit-normalized quaternion `(w, x, y, z)`. Acts on
/// column vectors from the left.
pub fn quat_to_rotmat(q: &[f64; 4]) -> Result<RotationMatrix> {
    let [w, x, y, z] = normalized_quat(q)?;
    Ok(RotationMatrix(unit_quat_matrix(w, x, y, z)))
}

fn unit_quat_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient with respect to the rotation matrix back to the raw
/// quaternion `q`, through the normalization `q / |q|`. The result is
/// orthogonal to `q`.
pub fn rotation_grad_to_quat(q: &[f64; 4], grad_r: &Matrix3<f64>) -> [f64; 4] {
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|c| c / norm);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    let g = [
        2.0 * grad_r.dot(&dw),
        2.0 * grad_r.dot(&dx),
        2.0 * grad_r.dot(&dy),
        2.0 * grad_r.dot(&dz),
    ];
    project_out_radial(&[w, x, y, z], &g).map(|c| c / norm)
}

/// Removes the component of `g` along the unit vector `q`.
pub fn project_out_radial(q: &[f64; 4], g: &[f64; 4]) -> [f64; 4] {
    let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
    [g[0] - dot * q[0], g[1] - dot * q[1], g[2] - dot * q[2], g[3] - dot * q[3]]
}

/// Spherical linear interpolation along the shorter arc.
pub fn slerp(a: &[f64; 4], b: &[f64; 4], alpha: f64) -> [f64; 4] {
    let mut dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let mut b = *b;
    if dot < 0.0 {
        dot = -dot;
        b = b.map(|c| -c);
    }
    if dot > 1.0 - 1e-12 {
        let mixed: [f64; 4] = std::array::from_fn(|k| (1.0 - alpha) * a[k] + alpha * b[k]);
        let norm = mixed.iter().map(|c| c * c).sum::<f64>().sqrt();
        return mixed.map(|c| c / norm);
    }
    let theta = dot.acos();
    let sin_theta = theta.sin();
    let wa = ((1.0 - alpha) * theta).sin() / sin_theta;
    let wb = (alpha * theta).sin() / sin_theta;
    std::array::from_fn(|k| wa * a[k] + wb * b[k])
}

/// Scaled orthographic projection: rotate, keep `(x, y)`, scale by sigma, add t.
pub fn project(points: &[Vector3<f64>], camera: &CameraPose) -> Result<Vec<Vector2<f64>>> {
    let r = quat_to_rotmat(&camera.q)?;
    Ok(points
        .iter()
        .map(|p| {
            let rp = r.0 * p;
            Vector2::new(rp.x, rp.y) * camera.sigma + camera.t
        })
        .collect())
}

pub type Triangle = [usize; 3];

/// Splits each grid quad along its lower-left to upper-right diagonal.
/// Triangles wind counter-clockwise in `(u, v)`.
pub fn triangulate(grid: &UvGrid) -> Result<Vec<Triangle>> {
    let n = grid.n();
    if n == 0 {
        return Err(Error::EmptyGrid);
    }
    let mut tris = Vec::with_capacity(2 * n * n);
    for row in 0..n {
        for col in 0..n {
            let v00 = grid.index(row, col);
            let v10 = grid.index(row, col + 1);
            let v01 = grid.index(row + 1, col);
            let v11 = grid.index(row + 1, col + 1);
            tris.push([v00, v10, v11]);
            tris.push([v00, v11, v01]);
        }
    }
    Ok(tris)
}

/// Area-weighted vertex normals, normalized.
pub fn vertex_normals(points: &[Vector3<f64>], triangles: &[Triangle]) -> Result<Vec<Vector3<f64>>> {
    let mut acc = vec![Vector3::<f64>::zeros(); points.len()];
    for tri in triangles {
        for &v in tri {
            if v >= points.len() {
                return Err(Error::IndexOutOfRange { index: v, len: points.len() });
            }
        }
        let [a, b, c] = tri.map(|v| points[v]);
        // Cross product length is twice the area: area weighting for free.
        let face = (b - a).cross(&(c - a));
        for &v in tri {
            acc[v] += face;
        }
    }
    let mut degenerate = Vec::new();
    let normals = acc
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                n / len
            } else {
                degenerate.push(i);
                Vector3::zeros()
            }
        })
        .collect();
    if !degenerate.is_empty() {
        return Err(Error::DegenerateNormals(degenerate));
    }
    Ok(normals)
}

/// Similarity transform `x ≈ scale * R * y + translation`.
#[derive(Clone, Debug)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

#[derive(Clone, Debug)]
pub struct ProcrustesFit {
    pub transform: Similarity,
    pub aligned: Vec<Vector3<f64>>,
    /// Sum of squared distances between `x` and the aligned `y`.
    pub residual: f64,
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Aligns `y` onto `x` with scale, translation and (optionally) a proper
/// rotation, minimizing the sum of squared distances. Without rotation the
/// scale is constrained to be non-negative.
pub fn procrustes_align(x: &[Vector3<f64>], y: &[Vector3<f64>], with_rotation: bool) -> Result<ProcrustesFit> {
    if x.len() != y.len() {
        return Err(Error::dim("procrustes points", x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 points, got {}", x.len())));
    }
    if !x.iter().chain(y).all(|p| p.iter().all(|c| c.is_finite())) {
        return Err(Error::Degenerate("non-finite coordinates".into()));
    }
    let cx = centroid(x);
    let cy = centroid(y);
    let xc: Vec<_> = x.iter().map(|p| p - cx).collect();
    let yc: Vec<_> = y.iter().map(|p| p - cy).collect();
    let var_y: f64 = yc.iter().map(|p| p.norm_squared()).sum();
    let var_x: f64 = xc.iter().map(|p| p.norm_squared()).sum();
    let scale_ref = var_x.max(var_y).max(f64::MIN_POSITIVE);
    if var_y <= 1e-24 * scale_ref || var_x <= 1e-24 * scale_ref || var_y == 0.0 || var_x == 0.0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }

    let (rotation, trace) = if with_rotation {
        // Cross-covariance; maximize tr(R^T H) over proper rotations.
        let mut h = Matrix3::zeros();
        for (a, b) in xc.iter().zip(&yc) {
            h += a * b.transpose();
        }
        let svd = h.svd(true, true);
        let u = svd.u.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
        let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            // Flip the direction of the smallest singular value to stay off reflections.
            d[(2, 2)] = -1.0;
        }
        let r = u * d * v_t;
        let s = svd.singular_values;
        (r, s[0] * d[(0, 0)] + s[1] * d[(1, 1)] + s[2] * d[(2, 2)])
    } else {
        let t: f64 = xc.iter().zip(&yc).map(|(a, b)| a.dot(b)).sum();
        (Matrix3::identity(), t)
    };

    let mut scale = trace / var_y;
    if !with_rotation && scale <= 0.0 {
        // Anti-correlated sets: the best non-negative scale collapses y onto
        // the centroid of x.
        scale = 0.0;
    } else if !(scale > 0.0) {
        return Err(Error::Degenerate(format!("non-positive optimal scale {scale:.3e}")));
    }
    let translation = cx - rotation * cy * scale;
    let transform = Similarity { scale, rotation, translation };
    let aligned: Vec<_> = y.iter().map(|p| transform.apply(p)).collect();
    let residual = x.iter().zip(&aligned).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok(ProcrustesFit { transform, aligned, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
        std::array::from_fn(|_| rng.random_range(-1.0..1.0))
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    /// Rodrigues rotation of `v` about unit `axis` by `angle`.
    fn axis_angle_rotate(axis: Vector3<f64>, angle: f64, v: Vector3<f64>) -> Vector3<f64> {
        v * angle.cos() + axis.cross(&v) * angle.sin() + axis * axis.dot(&v) * (1.0 - angle.cos())
    }

    #[test]
    fn identity_quaternion() {
        let r = quat_to_rotmat(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn zero_quaternion_errors() {
        assert!(matches!(quat_to_rotmat(&[0.0; 4]), Err(Error::ZeroQuaternion)));
    }

    #[test]
    fn double_cover() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let neg = q.map(|c| -c);
            assert_eq!(quat_to_rotmat(&q).unwrap(), quat_to_rotmat(&neg).unwrap());
        }
    }

    #[test]
    fn convention_matches_axis_angle() {
        let h = std::f64::consts::FRAC_PI_4;
        let q = [h.cos(), 0.0, h.sin(), 0.0];
        let r = quat_to_rotmat(&q).unwrap();
        let got = &r * Vector3::new(1.0, 0.0, 0.0);
        let want = axis_angle_rotate(Vector3::y(), 2.0 * h, Vector3::new(1.0, 0.0, 0.0));
        assert!((got - want).norm() < 1e-12, "{got} vs {want}");

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let angle: f64 = rng.random_range(-3.0..3.0);
            let s = (angle / 2.0).sin();
            let q = [(angle / 2.0).cos(), axis.x * s, axis.y * s, axis.z * s];
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let got = &quat_to_rotmat(&q).unwrap() * v;
            assert!((got - axis_angle_rotate(axis, angle, v)).norm() < 1e-12);
        }
    }

    #[test]
    fn euler_and_quaternion_agree() {
        let r = RotationMatrix::from_euler_zyx(0.4, -0.2, 0.1);
        let back = quat_to_rotmat(&r.to_quaternion()).unwrap();
        assert!((r.matrix() - back.matrix()).norm() < 1e-12);
        assert!((r.yaw_degrees() - 0.4f64.to_degrees()).abs() < 1e-10);
    }

    #[test]
    fn projection_examples() {
        let cam = CameraPose::default();
        let p = project(&[Vector3::new(0.3, -0.2, 0.8)], &cam).unwrap();
        assert_eq!(p[0], Vector2::new(0.3, -0.2));
        let cam = CameraPose { sigma: 2.0, t: Vector2::new(1.0, 1.0), ..CameraPose::default() };
        for z in [-5.0, 0.0, 3.5] {
            let p = project(&[Vector3::new(0.5, 0.5, z)], &cam).unwrap();
            assert_eq!(p[0], Vector2::new(2.0, 2.0));
        }
    }

    #[test]
    fn projection_matches_dense_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_quat(&mut rng);
        let cam = CameraPose { q, t: Vector2::new(0.3, -1.2), sigma: 1.7 };
        let pts = random_points(&mut rng, 30);
        let got = project(&pts, &cam).unwrap();
        let r = quat_to_rotmat(&q).unwrap();
        let pi = nalgebra::Matrix2x3::new(cam.sigma, 0.0, 0.0, 0.0, cam.sigma, 0.0);
        let m = pi * r.matrix();
        for (g, p) in got.iter().zip(&pts) {
            assert!((g - (m * p + cam.t)).norm() < 1e-12);
        }
    }

    #[test]
    fn triangulation_counts() {
        assert!(matches!(triangulate(&UvGrid::new(0)), Err(Error::EmptyGrid)));
        assert_eq!(triangulate(&UvGrid::new(1)).unwrap(), vec![[0, 1, 3], [0, 3, 2]]);
        assert_eq!(triangulate(&UvGrid::new(64)).unwrap().len(), 8192);

        let grid = UvGrid::new(2);
        let tris = triangulate(&grid).unwrap();
        assert_eq!(tris.len(), 8);
        let mut edges = std::collections::HashMap::new();
        for t in &tris {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
            // counter-clockwise in (u, v)
            let [a, b, c] = t.map(|v| grid.uv(v));
            let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
            assert!(cross > 0.0);
        }
        for ((a, b), count) in edges {
            let (ua, va) = grid.uv(a);
            let (ub, vb) = grid.uv(b);
            let on_border = (ua == ub && (ua == 0.0 || ua == 1.0)) || (va == vb && (va == 0.0 || va == 1.0));
            assert_eq!(count, if on_border { 1 } else { 2 }, "edge {a}-{b}");
        }
    }

    fn grid_points(grid: &UvGrid, height: impl Fn(f64, f64) -> f64) -> Vec<Vector3<f64>> {
        (0..grid.vertex_count())
            .map(|i| {
                let (u, v) = grid.uv(i);
                let (x, y) = (u - 0.5, v - 0.5);
                Vector3::new(x, y, height(x, y))
            })
            .collect()
    }

    #[test]
    fn flat_grid_normals() {
        let grid = UvGrid::new(5);
        let pts = grid_points(&grid, |_, _| 0.0);
        let normals = vertex_normals(&pts, &triangulate(&grid).unwrap()).unwrap();
        for n in normals {
            assert_eq!(n, Vector3::new(0.0, 0.0, 1.0));
        }
    }

    #[test]
    fn paraboloid_normals_match_gradient() {
        let grid = UvGrid::new(32);
        let f = |x: f64, y: f64| 0.5 * (x * x + y * y);
        let pts = grid_points(&grid, f);
        let normals = vertex_normals(&pts, &triangulate(&grid).unwrap()).unwrap();
        for (i, n) in normals.iter().enumerate() {
            assert!((n.norm() - 1.0).abs() < 1e-9);
            let (row, col) = grid.row_col(i);
            if row == 0 || col == 0 || row == 32 || col == 32 {
                continue;
            }
            let p = pts[i];
            // z = f(x, y) has upward normal (-fx, -fy, 1).
            let analytic = Vector3::new(-p.x, -p.y, 1.0).normalize();
            assert!((n - analytic).norm() < 1e-2, "vertex {i}: {n} vs {analytic}");
        }
    }

    #[test]
    fn isolated_vertex_is_reported() {
        let pts = vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()];
        match vertex_normals(&pts, &[[0, 1, 2]]) {
            Err(Error::DegenerateNormals(v)) => assert_eq!(v, vec![3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn procrustes_exact_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_points(&mut rng, 12);
        let r0 = quat_to_rotmat(&random_quat(&mut rng)).unwrap();
        let t0 = Vector3::new(0.5, -2.0, 1.0);
        let y: Vec<_> = x.iter().map(|p| r0.matrix() * p * 2.0 + t0).collect();
        let fit = procrustes_align(&x, &y, true).unwrap();
        assert!(fit.residual < 1e-18, "{}", fit.residual);
        assert!((fit.transform.scale - 0.5).abs() < 1e-12);
        assert!((fit.transform.rotation.determinant() - 1.0).abs() < 1e-12);

        let same = procrustes_align(&x, &x, true).unwrap();
        assert!((same.transform.scale - 1.0).abs() < 1e-12);
        assert!((same.transform.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(same.transform.translation.norm() < 1e-12);
    }

    #[test]
    fn procrustes_rejects_coincident_points() {
        let x = vec![Vector3::new(1.0, 2.0, 3.0); 5];
        let y: Vec<_> = (0..5).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect();
        assert!(matches!(procrustes_align(&x, &y, true), Err(Error::Degenerate(_))));
        assert!(matches!(procrustes_align(&y, &x, false), Err(Error::Degenerate(_))));
    }

    /// Horn's closed-form absolute orientation via the 4x4 quaternion
    /// eigenproblem. Independent of the SVD route used by the implementation.
    fn horn_residual(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> f64 {
        let cx = centroid(x);
        let cy = centroid(y);
        let mut s = Matrix3::zeros();
        for (a, b) in x.iter().zip(y) {
            s += (b - cy) * (a - cx).transpose();
        }
        let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
        let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
        let n = nalgebra::Matrix4::new(
            sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
            syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
            szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
            sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
        );
        let eig = n.symmetric_eigen();
        let k = eig.eigenvalues.imax();
        let q = eig.eigenvectors.column(k);
        let r = quat_to_rotmat(&[q[0], q[1], q[2], q[3]]).unwrap();
        let var_y: f64 = y.iter().map(|p| (p - cy).norm_squared()).sum();
        let rotated: Vec<_> = y.iter().map(|p| r.matrix() * (p - cy)).collect();
        let dot: f64 = x.iter().zip(&rotated).map(|(a, b)| (a - cx).dot(b)).sum();
        let scale = dot / var_y;
        x.iter().zip(&rotated).map(|(a, b)| ((a - cx) - b * scale).norm_squared()).sum()
    }

    #[test]
    fn procrustes_matches_horn() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = random_points(&mut rng, 10);
            let r0 = quat_to_rotmat(&random_quat(&mut rng)).unwrap();
            let y: Vec<_> = x
                .iter()
                .map(|p| r0.matrix() * p * 1.5 + Vector3::new(0.2, 0.1, -0.3) + random_points(&mut rng, 1)[0] * 0.3)
                .collect();
            let fit = procrustes_align(&x, &y, true).unwrap();
            let want = horn_residual(&x, &y);
            assert!((fit.residual - want).abs() < 1e-9, "{} vs {want}", fit.residual);
        }
    }

    #[test]
    fn slerp_endpoints() {
        let a = [1.0, 0.0, 0.0, 0.0];
        let h = 0.3f64;
        let b = [h.cos(), 0.0, h.sin(), 0.0];
        assert_eq!(slerp(&a, &b, 0.0), a);
        let end = slerp(&a, &b, 1.0);
        for k in 0..4 {
            assert!((end[k] - b[k]).abs() < 1e-15);
        }
        let mid = slerp(&a, &b, 0.5);
        assert!((mid[0] - (h / 2.0).cos()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rotation_invariants(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-6);
            let r = quat_to_rotmat(&[w, x, y, z]).unwrap();
            let m = r.matrix();
            prop_assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn projection_is_equivariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_quat(&mut rng);
            let qq = random_quat(&mut rng);
            let pts = random_points(&mut rng, 8);
            let rq = quat_to_rotmat(&qq).unwrap();
            let cam = CameraPose { q, t: Vector2::new(0.1, 0.2), sigma: 1.3 };
            let rotated: Vec<_> = pts.iter().map(|p| rq.matrix() * p).collect();
            let composed = quat_to_rotmat(&q).unwrap().matrix() * rq.matrix();
            let cam2 = CameraPose { q: RotationMatrix(composed).to_quaternion(), ..cam };
            let a = project(&rotated, &cam).unwrap();
            let b = project(&pts, &cam2).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).norm() < 1e-10);
            }
        }

        #[test]
        fn procrustes_residual_similarity_invariant(seed in 0u64..500, s in 0.2f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_points(&mut rng, 9);
            let y = random_points(&mut rng, 9);
            let r = quat_to_rotmat(&random_quat(&mut rng)).unwrap();
            let t = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let y2: Vec<_> = y.iter().map(|p| r.matrix() * p * s + t).collect();
            if let (Ok(a), Ok(b)) = (procrustes_align(&x, &y, true), procrustes_align(&x, &y2, true)) {
                prop_assert!((a.residual - b.residual).abs() < 1e-8);
            }
        }
    }
}
