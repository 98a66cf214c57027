//! Spherical-harmonics illumination and albedo/shading decomposition of
//! UV-space textures.
//!
//! All maps are row-major `width * height` buffers. Pixels without a normal
//! are outside the surface; they carry no loss and are held at zero.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::FloatImage;
use crate::optim::Adam;

pub const SH_DIM: usize = 9;

/// Order-2 real SH monomials; normalization constants live in the
/// coefficients.
pub fn sh_basis(n: &Vector3<f64>) -> Result<[f64; SH_DIM]> {
    let norm = n.norm();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(Error::NonUnitNormal { norm });
    }
    Ok(basis(n))
}

fn basis(n: &Vector3<f64>) -> [f64; SH_DIM] {
    let (x, y, z) = (n.x, n.y, n.z);
    [1.0, x, y, z, x * y, x * z, y * z, x * x - y * y, 3.0 * z * z - 1.0]
}

fn dot9(a: &[f64; SH_DIM], b: &[f64; SH_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// UV-space normal field; `None` where the surface does not cover a texel.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    normals: Vec<Option<Vector3<f64>>>,
}

impl NormalMap {
    pub fn new(width: usize, height: usize, normals: Vec<Option<Vector3<f64>>>) -> Result<Self> {
        if normals.len() != width * height {
            return Err(Error::dim("normal map pixels", width * height, normals.len()));
        }
        for n in normals.iter().flatten() {
            let norm = n.norm();
            if !((norm - 1.0).abs() <= 1e-6) {
                return Err(Error::NonUnitNormal { norm });
            }
        }
        Ok(NormalMap { width, height, normals })
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn normals(&self) -> &[Option<Vector3<f64>>] {
        &self.normals
    }

    pub fn get(&self, row: usize, col: usize) -> Option<Vector3<f64>> {
        self.normals[row * self.width + col]
    }

    pub fn defined(&self, k: usize) -> bool {
        self.normals[k].is_some()
    }

    pub fn defined_count(&self) -> usize {
        self.normals.iter().filter(|n| n.is_some()).count()
    }

    /// Three channels; undefined texels are written as the zero vector.
    pub fn to_image(&self) -> FloatImage {
        let mut img = FloatImage::new(self.width, self.height, 3);
        for (k, n) in self.normals.iter().enumerate() {
            if let Some(n) = n {
                for c in 0..3 {
                    img.data[3 * k + c] = n[c] as f32;
                }
            }
        }
        img
    }

    /// Inverse of [`NormalMap::to_image`]; vectors are renormalized after the
    /// round trip through single precision.
    pub fn from_image(img: &FloatImage) -> Result<Self> {
        if img.channels != 3 {
            return Err(Error::Validation(format!("normal map needs 3 channels, got {}", img.channels)));
        }
        let normals = img
            .data
            .chunks_exact(3)
            .map(|px| {
                let n = Vector3::new(px[0] as f64, px[1] as f64, px[2] as f64);
                (n.norm() > 0.5).then(|| n.normalize())
            })
            .collect();
        NormalMap::new(img.width, img.height, normals)
    }
}

/// Mean over channels.
pub fn grayscale(img: &FloatImage) -> Vec<f64> {
    img.data
        .chunks_exact(img.channels)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / img.channels as f64)
        .collect()
}

pub fn gray_image(width: usize, height: usize, values: &[f64]) -> FloatImage {
    FloatImage { width, height, channels: 1, data: values.iter().map(|&v| v as f32).collect() }
}

/// `max(0, <L, H(N(x))>)` per texel; zero where no normal is defined.
pub fn render_shading(normal_map: &NormalMap, l: &[f64; SH_DIM]) -> Vec<f64> {
    normal_map
        .normals
        .iter()
        .map(|n| n.map_or(0.0, |n| dot9(l, &basis(&n)).max(0.0)))
        .collect()
}

/// Least-squares SH coefficients under a constant albedo of 0.5.
pub fn estimate_illumination(texture: &[f64], normal_map: &NormalMap) -> Result<[f64; SH_DIM]> {
    if texture.len() != normal_map.len() {
        return Err(Error::dim("texture pixels", normal_map.len(), texture.len()));
    }
    let rows: Vec<usize> = (0..texture.len()).filter(|&k| normal_map.defined(k)).collect();
    if rows.len() < SH_DIM {
        return Err(Error::RankDeficient { condition: f64::INFINITY });
    }
    let design = DMatrix::from_fn(rows.len(), SH_DIM, |r, c| basis(&normal_map.normals[rows[r]].unwrap())[c]);
    let target = DVector::from_iterator(rows.len(), rows.iter().map(|&k| texture[k] / 0.5));
    let svd = design.svd(true, true);
    let s = &svd.singular_values;
    let condition = s.max() / s.min();
    if !(condition < 1e8) {
        return Err(Error::RankDeficient { condition });
    }
    let sol = svd
        .solve(&target, 0.0)
        .map_err(|e| Error::Validation(format!("illumination solve failed: {e}")))?;
    Ok(std::array::from_fn(|k| sol[k]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LuxWeights {
    /// Squared forward-difference gradient of the adapted shading.
    pub shade: f64,
    /// L1 forward-difference gradient of the albedo.
    pub albedo: f64,
    pub light: f64,
    pub consistency: f64,
    pub reconstruction: f64,
    pub huber_delta: f64,
}

impl Default for LuxWeights {
    fn default() -> Self {
        LuxWeights {
            shade: 1e-4,
            albedo: 2e-6,
            light: 1.0,
            consistency: 1.0,
            reconstruction: 1.0,
            huber_delta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShMapState {
    pub l: [f64; SH_DIM],
    pub albedo: Vec<f64>,
    pub shading_adapted: Vec<f64>,
    pub normal_map: NormalMap,
}

impl ShMapState {
    /// `L = L̂`, albedo 0.5, adapted shading equal to the rendered shading.
    pub fn initial(normal_map: NormalMap, l_hat: [f64; SH_DIM]) -> Self {
        let shading_adapted = render_shading(&normal_map, &l_hat);
        let albedo = (0..normal_map.len()).map(|k| if normal_map.defined(k) { 0.5 } else { 0.0 }).collect();
        ShMapState { l: l_hat, albedo, shading_adapted, normal_map }
    }

    pub fn rendered(&self) -> Vec<f64> {
        render_shading(&self.normal_map, &self.l)
    }

    /// `S ⊙ A`.
    pub fn reconstruction(&self) -> Vec<f64> {
        self.shading_adapted.iter().zip(&self.albedo).map(|(s, a)| s * a).collect()
    }

    /// Shading under new coefficients, keeping the adaptation residual
    /// `S_adapted - S_rendered(L)` of this state.
    pub fn relit_shading(&self, l_new: &[f64; SH_DIM]) -> Vec<f64> {
        let old = self.rendered();
        let new = render_shading(&self.normal_map, l_new);
        (0..self.albedo.len())
            .map(|k| if self.normal_map.defined(k) { (self.shading_adapted[k] + new[k] - old[k]).max(0.0) } else { 0.0 })
            .collect()
    }

    pub fn relight(&self, l_new: &[f64; SH_DIM]) -> Vec<f64> {
        self.relit_shading(l_new).iter().zip(&self.albedo).map(|(s, a)| s * a).collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.l.to_vec();
        out.extend(&self.albedo);
        out.extend(&self.shading_adapted);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let p = self.albedo.len();
        self.l.copy_from_slice(&flat[..SH_DIM]);
        self.albedo.copy_from_slice(&flat[SH_DIM..SH_DIM + p]);
        self.shading_adapted.copy_from_slice(&flat[SH_DIM + p..SH_DIM + 2 * p]);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LuxGrad {
    pub l: [f64; SH_DIM],
    pub albedo: Vec<f64>,
    pub shading: Vec<f64>,
}

impl LuxGrad {
    pub fn zeros(pixels: usize) -> Self {
        LuxGrad { l: [0.0; SH_DIM], albedo: vec![0.0; pixels], shading: vec![0.0; pixels] }
    }

    pub fn add_scaled(&mut self, other: &LuxGrad, w: f64) {
        for k in 0..SH_DIM {
            self.l[k] += w * other.l[k];
        }
        for (a, b) in self.albedo.iter_mut().zip(&other.albedo) {
            *a += w * b;
        }
        for (a, b) in self.shading.iter_mut().zip(&other.shading) {
            *a += w * b;
        }
    }

    pub fn scale(&mut self, w: f64) {
        self.l.iter_mut().chain(&mut self.albedo).chain(&mut self.shading).for_each(|v| *v *= w);
    }

    /// Same ordering as [`ShMapState::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.l.to_vec();
        out.extend(&self.albedo);
        out.extend(&self.shading);
        out
    }
}

pub struct LuxInput<'a> {
    pub state: &'a ShMapState,
    /// Grayscale texture, same layout as the state maps.
    pub texture: &'a [f64],
    pub l_hat: [f64; SH_DIM],
    pub weights: LuxWeights,
}

/// Weighted loss terms and the gradient of their sum.
#[derive(Clone, Debug)]
pub struct LuxLosses {
    pub shading_smooth: f64,
    pub albedo_smooth: f64,
    pub light: f64,
    pub consistency: f64,
    pub reconstruction: f64,
    pub grad: LuxGrad,
}

impl LuxLosses {
    pub fn sum(&self) -> f64 {
        self.shading_smooth + self.albedo_smooth + self.light + self.consistency + self.reconstruction
    }

    pub fn named(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("lux_shading_smooth", self.shading_smooth),
            ("lux_albedo_smooth", self.albedo_smooth),
            ("lux_light", self.light),
            ("lux_consistency", self.consistency),
            ("lux_reconstruction", self.reconstruction),
        ]
    }
}

pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

fn huber_grad(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Forward-difference neighbour pairs `(p, q)` with both texels on the
/// surface; differences across the surface boundary are zero.
fn neighbour_pairs(map: &NormalMap) -> Vec<(usize, usize)> {
    let (w, h) = (map.width, map.height);
    let mut pairs = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            if !map.defined(p) {
                continue;
            }
            if col + 1 < w && map.defined(p + 1) {
                pairs.push((p, p + 1));
            }
            if row + 1 < h && map.defined(p + w) {
                pairs.push((p, p + w));
            }
        }
    }
    pairs
}

pub fn lux_losses(input: &LuxInput<'_>) -> Result<LuxLosses> {
    let state = input.state;
    let map = &state.normal_map;
    let pixels = map.len();
    for (name, len) in [
        ("texture", input.texture.len()),
        ("albedo", state.albedo.len()),
        ("adapted shading", state.shading_adapted.len()),
    ] {
        if len != pixels {
            return Err(Error::dim(name, pixels, len));
        }
    }
    let w = &input.weights;
    let (s, a, t) = (&state.shading_adapted, &state.albedo, input.texture);
    let mut grad = LuxGrad::zeros(pixels);
    let mut out = LuxLosses {
        shading_smooth: 0.0,
        albedo_smooth: 0.0,
        light: 0.0,
        consistency: 0.0,
        reconstruction: 0.0,
        grad: LuxGrad::zeros(0),
    };

    for k in 0..pixels {
        let Some(n) = map.normals[k] else { continue };
        let r = t[k] - s[k] * a[k];
        out.reconstruction += w.reconstruction * r * r;
        grad.shading[k] -= 2.0 * w.reconstruction * r * a[k];
        grad.albedo[k] -= 2.0 * w.reconstruction * r * s[k];

        let h = basis(&n);
        let lin = dot9(&state.l, &h);
        let e = s[k] - lin.max(0.0);
        out.consistency += w.consistency * huber(e, w.huber_delta);
        let g = w.consistency * huber_grad(e, w.huber_delta);
        grad.shading[k] += g;
        if lin > 0.0 {
            for c in 0..SH_DIM {
                grad.l[c] -= g * h[c];
            }
        }
    }

    for (p, q) in neighbour_pairs(map) {
        let ds = s[q] - s[p];
        out.shading_smooth += w.shade * ds * ds;
        grad.shading[q] += 2.0 * w.shade * ds;
        grad.shading[p] -= 2.0 * w.shade * ds;
        let da = a[q] - a[p];
        out.albedo_smooth += w.albedo * da.abs();
        grad.albedo[q] += w.albedo * sign(da);
        grad.albedo[p] -= w.albedo * sign(da);
    }

    for c in 0..SH_DIM {
        let d = state.l[c] - input.l_hat[c];
        out.light += w.light * d * d;
        grad.l[c] += 2.0 * w.light * d;
    }
    out.grad = grad;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LuxConfig {
    pub weights: LuxWeights,
    pub iterations: usize,
    /// Adam step size, decayed geometrically to `final_lr`.
    pub lr: f64,
    pub final_lr: f64,
}

impl Default for LuxConfig {
    fn default() -> Self {
        LuxConfig { weights: LuxWeights::default(), iterations: 3000, lr: 1e-2, final_lr: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub state: ShMapState,
    pub l_hat: [f64; SH_DIM],
    /// `|T - S ⊙ A|^2` averaged over surface texels.
    pub residual: f64,
}

fn mean_residual(state: &ShMapState, texture: &[f64]) -> f64 {
    let defined = state.normal_map.defined_count().max(1);
    let sum: f64 = (0..texture.len())
        .filter(|&k| state.normal_map.defined(k))
        .map(|k| (texture[k] - state.shading_adapted[k] * state.albedo[k]).powi(2))
        .sum();
    sum / defined as f64
}

/// Jointly fits `L`, albedo and adapted shading to a grayscale texture.
pub fn decompose(texture: &[f64], normal_map: &NormalMap, config: &LuxConfig) -> Result<Decomposition> {
    let l_hat = estimate_illumination(texture, normal_map)?;
    let mut state = ShMapState::initial(normal_map.clone(), l_hat);
    let mut params = state.flat();
    let mut adam = Adam::new(params.len(), 0.9, 0.999, 1e-8);
    let pixels = normal_map.len();
    let iters = config.iterations.max(1);
    let ratio = (config.final_lr / config.lr).max(f64::MIN_POSITIVE);
    for it in 0..config.iterations {
        let input = LuxInput { state: &state, texture, l_hat, weights: config.weights };
        let losses = lux_losses(&input)?;
        let g = losses.grad.flat();
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient { term: "lux".into() });
        }
        let lr = config.lr * ratio.powf(it as f64 / iters as f64);
        adam.step(&mut params, &g, lr);
        for k in 0..pixels {
            let (ai, si) = (SH_DIM + k, SH_DIM + pixels + k);
            if normal_map.defined(k) {
                params[ai] = params[ai].clamp(0.0, 1.0);
                params[si] = params[si].max(0.0);
            } else {
                params[ai] = 0.0;
                params[si] = 0.0;
            }
        }
        state.set_flat(&params);
    }
    fix_gauge(&mut state);
    let residual = mean_residual(&state, texture);
    log::debug!("lux decomposition residual {residual:.3e}");
    Ok(Decomposition { state, l_hat, residual })
}

/// Rescales `(A, S, L)` to `(cA, S/c, L/c)` so the mean surface albedo is
/// 0.5, or as close as the `A <= 1` bound allows.
fn fix_gauge(state: &mut ShMapState) {
    let defined: Vec<usize> = (0..state.albedo.len()).filter(|&k| state.normal_map.defined(k)).collect();
    if defined.is_empty() {
        return;
    }
    let mean = defined.iter().map(|&k| state.albedo[k]).sum::<f64>() / defined.len() as f64;
    let max = defined.iter().map(|&k| state.albedo[k]).fold(0.0, f64::max);
    if mean <= 0.0 {
        return;
    }
    let c = (0.5 / mean).min(1.0 / max);
    for &k in &defined {
        state.albedo[k] *= c;
        state.shading_adapted[k] /= c;
    }
    state.l.iter_mut().for_each(|v| *v /= c);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return v.normalize();
            }
        }
    }

    fn hemisphere(size: usize) -> NormalMap {
        let mut normals = Vec::new();
        for row in 0..size {
            for col in 0..size {
                let x = 2.0 * col as f64 / (size - 1) as f64 - 1.0;
                let y = 2.0 * row as f64 / (size - 1) as f64 - 1.0;
                let r2 = x * x + y * y;
                normals.push((r2 < 1.0).then(|| Vector3::new(x, y, (1.0 - r2).sqrt())));
            }
        }
        NormalMap::new(size, size, normals).unwrap()
    }

    fn random_map(rng: &mut impl Rng, w: usize, h: usize) -> NormalMap {
        let normals = (0..w * h).map(|_| rng.random_bool(0.8).then(|| random_unit(rng))).collect();
        NormalMap::new(w, h, normals).unwrap()
    }

    #[test]
    fn basis_values() {
        assert_eq!(sh_basis(&Vector3::z()).unwrap(), [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        assert_eq!(sh_basis(&Vector3::x()).unwrap(), [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
        assert!(matches!(sh_basis(&Vector3::new(1.0, 1.0, 0.0)), Err(Error::NonUnitNormal { .. })));
    }

    #[test]
    fn basis_matches_spherical_coordinates() {
        // Evaluate the monomials from (theta, phi) instead of Cartesian input.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let n = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let h = sh_basis(&n).unwrap();
            let st2 = theta.sin().powi(2);
            let want = [
                1.0,
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
                0.5 * st2 * (2.0 * phi).sin(),
                theta.sin() * theta.cos() * phi.cos(),
                theta.sin() * theta.cos() * phi.sin(),
                st2 * (2.0 * phi).cos(),
                3.0 * theta.cos().powi(2) - 1.0,
            ];
            for k in 0..SH_DIM {
                assert!((h[k] - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shading_constant_zero_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random_map(&mut rng, 7, 5);
        let mut l = [0.0; SH_DIM];
        l[0] = 1.0;
        let s = render_shading(&map, &l);
        for (k, v) in s.iter().enumerate() {
            assert_eq!(*v, if map.defined(k) { 1.0 } else { 0.0 });
        }
        assert!(render_shading(&map, &[0.0; SH_DIM]).iter().all(|v| *v == 0.0));

        let l: [f64; SH_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let s = render_shading(&map, &l);
        for (k, n) in map.normals().iter().enumerate() {
            let want = n.map_or(0.0, |n| {
                let h = [1.0, n.x, n.y, n.z, n.x * n.y, n.x * n.z, n.y * n.z, n.x * n.x - n.y * n.y, 3.0 * n.z * n.z - 1.0];
                (0..SH_DIM).map(|c| l[c] * h[c]).sum::<f64>().max(0.0)
            });
            assert!((s[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shading_is_linear_where_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = random_map(&mut rng, 6, 6);
        let mut l1 = [0.0; SH_DIM];
        let mut l2 = [0.0; SH_DIM];
        l1[0] = 3.0;
        l2[0] = 2.0;
        for k in 1..SH_DIM {
            l1[k] = rng.random_range(-0.3..0.3);
            l2[k] = rng.random_range(-0.3..0.3);
        }
        let sum: [f64; SH_DIM] = std::array::from_fn(|k| 2.0 * l1[k] + 0.5 * l2[k]);
        let (a, b, c) = (render_shading(&map, &l1), render_shading(&map, &l2), render_shading(&map, &sum));
        for k in 0..a.len() {
            assert!((c[k] - (2.0 * a[k] + 0.5 * b[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn illumination_exact_recovery() {
        let map = hemisphere(32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l_star: [f64; SH_DIM] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
        l_star[0] = 2.0;
        let s = render_shading(&map, &l_star);
        assert!(map.normals().iter().zip(&s).all(|(n, v)| n.is_none() || *v > 0.0));
        let t: Vec<f64> = s.iter().map(|v| 0.5 * v).collect();
        let l = estimate_illumination(&t, &map).unwrap();
        for k in 0..SH_DIM {
            assert!((l[k] - l_star[k]).abs() < 1e-8, "{k}: {} vs {}", l[k], l_star[k]);
        }
    }

    #[test]
    fn illumination_uniform_texture() {
        let map = hemisphere(16);
        let t = vec![0.5; 256];
        let l = estimate_illumination(&t, &map).unwrap();
        let mut want = [0.0; SH_DIM];
        want[0] = 1.0;
        for k in 0..SH_DIM {
            assert!((l[k] - want[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_normals_are_rank_deficient() {
        let map = NormalMap::new(4, 4, vec![Some(Vector3::z()); 16]).unwrap();
        let err = estimate_illumination(&vec![0.3; 16], &map).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
    }

    fn random_state(rng: &mut impl Rng, w: usize, h: usize) -> (ShMapState, Vec<f64>) {
        let map = random_map(rng, w, h);
        let l: [f64; SH_DIM] = std::array::from_fn(|k| if k == 0 { 1.0 } else { rng.random_range(-0.8..0.8) });
        let mut state = ShMapState::initial(map, l);
        for k in 0..state.albedo.len() {
            if state.normal_map.defined(k) {
                state.albedo[k] = rng.random_range(0.0..1.0);
                state.shading_adapted[k] = rng.random_range(0.0..3.0);
            }
        }
        let texture = (0..w * h).map(|_| rng.random_range(0.0..1.5)).collect();
        (state, texture)
    }

    /// Direct per-pixel evaluation of every term.
    fn naive_terms(state: &ShMapState, t: &[f64], l_hat: &[f64; SH_DIM], w: &LuxWeights) -> [f64; 5] {
        let map = &state.normal_map;
        let (width, height) = (map.width, map.height);
        let on = |r: usize, c: usize| map.get(r, c).is_some();
        let (mut sm, mut al, mut cons, mut rec) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..height {
            for c in 0..width {
                let k = r * width + c;
                let Some(n) = map.get(r, c) else { continue };
                rec += (t[k] - state.shading_adapted[k] * state.albedo[k]).powi(2);
                let h = sh_basis(&n).unwrap();
                let rendered = (0..SH_DIM).map(|i| state.l[i] * h[i]).sum::<f64>().max(0.0);
                cons += huber(state.shading_adapted[k] - rendered, w.huber_delta);
                for (dr, dc) in [(0, 1), (1, 0)] {
                    let (r2, c2) = (r + dr, c + dc);
                    if r2 < height && c2 < width && on(r2, c2) {
                        let k2 = r2 * width + c2;
                        sm += (state.shading_adapted[k2] - state.shading_adapted[k]).powi(2);
                        al += (state.albedo[k2] - state.albedo[k]).abs();
                    }
                }
            }
        }
        let light: f64 = (0..SH_DIM).map(|i| (state.l[i] - l_hat[i]).powi(2)).sum();
        [w.shade * sm, w.albedo * al, w.light * light, w.consistency * cons, w.reconstruction * rec]
    }

    #[test]
    fn losses_match_naive_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = LuxWeights { shade: 0.3, albedo: 0.2, light: 0.7, consistency: 1.3, reconstruction: 0.9, huber_delta: 0.5 };
        for _ in 0..5 {
            let (state, t) = random_state(&mut rng, 6, 5);
            let l_hat: [f64; SH_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let input = LuxInput { state: &state, texture: &t, l_hat, weights: w };
            let got = lux_losses(&input).unwrap();
            let want = naive_terms(&state, &t, &l_hat, &w);
            let have = [got.shading_smooth, got.albedo_smooth, got.light, got.consistency, got.reconstruction];
            for k in 0..5 {
                assert!((have[k] - want[k]).abs() < 1e-10, "term {k}");
            }
            let g = got.grad.flat();
            let base = state.flat();
            for idx in 0..g.len() {
                let eval = |delta: f64| {
                    let mut s = state.clone();
                    let mut p = base.clone();
                    p[idx] += delta;
                    s.set_flat(&p);
                    naive_terms(&s, &t, &l_hat, &w).iter().sum::<f64>()
                };
                let h = 1e-6;
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((g[idx] - fd).abs() < 1e-5 * g[idx].abs().max(1.0), "{idx}: {} vs {fd}", g[idx]);
            }
        }
    }

    #[test]
    fn constant_maps_are_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut state, t) = random_state(&mut rng, 5, 5);
        for k in 0..25 {
            if state.normal_map.defined(k) {
                state.albedo[k] = 0.3;
                state.shading_adapted[k] = 1.2;
            }
        }
        let input = LuxInput { state: &state, texture: &t, l_hat: state.l, weights: LuxWeights::default() };
        let l = lux_losses(&input).unwrap();
        assert_eq!(l.shading_smooth, 0.0);
        assert_eq!(l.albedo_smooth, 0.0);
    }

    #[test]
    fn zero_texture_decomposes_exactly() {
        let map = hemisphere(16);
        let t = vec![0.0; 256];
        let d = decompose(&t, &map, &LuxConfig { iterations: 50, ..LuxConfig::default() }).unwrap();
        assert_eq!(d.residual, 0.0);
        assert!(d.state.shading_adapted.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn identity_relight() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (state, _) = random_state(&mut rng, 6, 6);
        let relit = state.relight(&state.l);
        for (a, b) in relit.iter().zip(state.reconstruction()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gauge_fix_preserves_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut state, _) = random_state(&mut rng, 6, 6);
        for a in state.albedo.iter_mut() {
            *a *= 0.3;
        }
        let before = state.reconstruction();
        fix_gauge(&mut state);
        for (a, b) in state.reconstruction().iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }
        let defined: Vec<_> = (0..36).filter(|&k| state.normal_map.defined(k)).collect();
        let mean = defined.iter().map(|&k| state.albedo[k]).sum::<f64>() / defined.len() as f64;
        assert!((0.25..=0.75).contains(&mean));
        assert!(state.albedo.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}
