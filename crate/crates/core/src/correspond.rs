//! Observation extraction from dense UV correspondence maps.

use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::{read_pfm, FloatImage};
use crate::model::UvGrid;

/// Per-pixel UV predictions; `None` marks background.
#[derive(Clone, Debug, PartialEq)]
pub struct UvMap {
    pub width: usize,
    pub height: usize,
    pixels: Vec<Option<(f64, f64)>>,
}

impl UvMap {
    pub fn new(width: usize, height: usize, pixels: Vec<Option<(f64, f64)>>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dim("uv map pixels", width * height, pixels.len()));
        }
        for (k, px) in pixels.iter().enumerate() {
            if let Some((u, v)) = px {
                if !(0.0..=1.0).contains(u) || !(0.0..=1.0).contains(v) {
                    return Err(Error::Validation(format!(
                        "uv map pixel {k} holds ({u}, {v}) outside [0,1]^2"
                    )));
                }
            }
        }
        Ok(UvMap { width, height, pixels })
    }

    pub fn background(width: usize, height: usize) -> Self {
        UvMap { width, height, pixels: vec![None; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<(f64, f64)> {
        self.pixels[row * self.width + col]
    }

    pub fn pixels(&self) -> &[Option<(f64, f64)>] {
        &self.pixels
    }

    /// Three channels `(u, v, mask)`; mask above 0.5 is foreground.
    pub fn from_image(image: &FloatImage) -> Result<Self> {
        if image.channels != 3 {
            return Err(Error::Validation(format!("uv map needs 3 channels, got {}", image.channels)));
        }
        let pixels = image
            .data
            .chunks_exact(3)
            .map(|px| (px[2] > 0.5).then(|| (px[0] as f64, px[1] as f64)))
            .collect();
        UvMap::new(image.width, image.height, pixels)
    }

    pub fn to_image(&self) -> FloatImage {
        let mut img = FloatImage::new(self.width, self.height, 3);
        for (k, px) in self.pixels.iter().enumerate() {
            if let Some((u, v)) = px {
                img.data[3 * k] = *u as f32;
                img.data[3 * k + 1] = *v as f32;
                img.data[3 * k + 2] = 1.0;
            }
        }
        img
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        UvMap::from_image(&read_pfm(path)?)
    }
}

/// Half a grid cell in UV units.
pub fn default_tau(grid: &UvGrid) -> f64 {
    0.5 / grid.n().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences {
    /// `(vertex, pixel center)` for every visible vertex, ascending by vertex.
    pub observations: Vec<(usize, Vector2<f64>)>,
    pub visibility: Vec<bool>,
}

/// Buckets foreground pixels by UV cell so that every match within `tau`
/// lies in the 3x3 cell neighbourhood of the query.
struct UvBuckets {
    cells: usize,
    buckets: Vec<Vec<usize>>,
}

impl UvBuckets {
    fn new(map: &UvMap, tau: f64) -> Self {
        let cells = ((1.0 / tau).floor() as usize).clamp(1, 1024);
        let mut buckets = vec![Vec::new(); cells * cells];
        for (k, px) in map.pixels.iter().enumerate() {
            if let Some((u, v)) = px {
                let (cu, cv) = (Self::cell(*u, cells), Self::cell(*v, cells));
                buckets[cv * cells + cu].push(k);
            }
        }
        UvBuckets { cells, buckets }
    }

    fn cell(x: f64, cells: usize) -> usize {
        ((x * cells as f64) as usize).min(cells - 1)
    }

    fn nearest(&self, map: &UvMap, u: f64, v: f64) -> Option<(f64, usize)> {
        let (cu, cv) = (Self::cell(u, self.cells), Self::cell(v, self.cells));
        let mut best: Option<(f64, usize)> = None;
        for gv in cv.saturating_sub(1)..=(cv + 1).min(self.cells - 1) {
            for gu in cu.saturating_sub(1)..=(cu + 1).min(self.cells - 1) {
                for &k in &self.buckets[gv * self.cells + gu] {
                    let (pu, pv) = map.pixels[k].expect("bucketed pixels are foreground");
                    let d = ((pu - u).powi(2) + (pv - v).powi(2)).sqrt();
                    let better = match best {
                        None => true,
                        Some((bd, bk)) => d < bd || (d == bd && k < bk),
                    };
                    if better {
                        best = Some((d, k));
                    }
                }
            }
        }
        best
    }
}

/// For each grid vertex, the foreground pixel whose UV prediction is nearest
/// to the vertex's `(u, v)`; the vertex is visible iff that distance is at
/// most `tau`. Ties go to the smallest row-major pixel index.
pub fn extract_observations(map: &UvMap, grid: &UvGrid, tau: f64) -> Result<Correspondences> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Validation(format!("tau must be positive, got {tau}")));
    }
    let buckets = UvBuckets::new(map, tau);
    let matches: Vec<Option<usize>> = (0..grid.vertex_count())
        .into_par_iter()
        .map(|i| {
            let (u, v) = grid.uv(i);
            buckets
                .nearest(map, u, v)
                .and_then(|(d, k)| (d <= tau).then_some(k))
        })
        .collect();
    let mut observations = Vec::new();
    let mut visibility = vec![false; grid.vertex_count()];
    for (i, m) in matches.into_iter().enumerate() {
        if let Some(k) = m {
            visibility[i] = true;
            let (row, col) = (k / map.width, k % map.width);
            observations.push((i, Vector2::new(col as f64, row as f64)));
        }
    }
    Ok(Correspondences { observations, visibility })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut impl Rng, w: usize, h: usize, fg: f64) -> UvMap {
        let pixels = (0..w * h)
            .map(|_| rng.random_bool(fg).then(|| (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0))))
            .collect();
        UvMap::new(w, h, pixels).unwrap()
    }

    /// Exhaustive scan over every pixel.
    fn brute_force(map: &UvMap, grid: &UvGrid, tau: f64) -> Vec<Option<(usize, usize)>> {
        (0..grid.vertex_count())
            .map(|i| {
                let (u, v) = grid.uv(i);
                let mut best: Option<(f64, usize)> = None;
                for row in 0..map.height {
                    for col in 0..map.width {
                        if let Some((pu, pv)) = map.get(row, col) {
                            let d = ((pu - u).powi(2) + (pv - v).powi(2)).sqrt();
                            if best.is_none_or(|(bd, _)| d < bd) {
                                best = Some((d, row * map.width + col));
                            }
                        }
                    }
                }
                best.filter(|(d, _)| *d <= tau).map(|(_, k)| (k % map.width, k / map.width))
            })
            .collect()
    }

    #[test]
    fn exact_hit() {
        let grid = UvGrid::new(4);
        let mut map = UvMap::background(32, 32);
        let i = grid.index(2, 3);
        map.pixels[20 * 32 + 10] = Some(grid.uv(i));
        let c = extract_observations(&map, &grid, default_tau(&grid)).unwrap();
        assert!(c.visibility[i]);
        assert_eq!(c.observations, vec![(i, Vector2::new(10.0, 20.0))]);
    }

    #[test]
    fn far_pixels_are_invisible() {
        let grid = UvGrid::new(2);
        // every vertex of the n=2 grid sits at 0, 0.5 or 1; park all pixels far away
        let map = UvMap::new(4, 4, vec![Some((0.25, 0.25)); 16]).unwrap();
        let c = extract_observations(&map, &grid, 0.1).unwrap();
        assert!(c.visibility.iter().all(|v| !v));
        assert!(c.observations.is_empty());
    }

    #[test]
    fn empty_map_is_not_an_error() {
        let grid = UvGrid::new(3);
        let c = extract_observations(&UvMap::background(8, 8), &grid, 0.2).unwrap();
        assert_eq!(c.visibility, vec![false; 16]);
    }

    #[test]
    fn ties_go_to_lowest_pixel_index() {
        let grid = UvGrid::new(1);
        let mut pixels = vec![None; 9];
        pixels[7] = Some((0.0, 0.0));
        pixels[4] = Some((0.0, 0.0));
        let map = UvMap::new(3, 3, pixels).unwrap();
        let c = extract_observations(&map, &grid, 0.1).unwrap();
        assert_eq!(c.observations[0], (0, Vector2::new(1.0, 1.0)));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n, tau) in [(4, 0.125), (8, 0.0625), (16, 0.01), (3, 0.7)] {
            let grid = UvGrid::new(n);
            let map = random_map(&mut rng, 40, 30, 0.7);
            let got = extract_observations(&map, &grid, tau).unwrap();
            let want = brute_force(&map, &grid, tau);
            for i in 0..grid.vertex_count() {
                let g = got.observations.iter().find(|o| o.0 == i).map(|o| (o.1.x as usize, o.1.y as usize));
                assert_eq!(g, want[i], "n={n} vertex {i}");
                assert_eq!(got.visibility[i], want[i].is_some());
            }
        }
    }

    #[test]
    fn rejects_out_of_range_uv() {
        assert!(UvMap::new(1, 1, vec![Some((1.5, 0.0))]).is_err());
    }

    proptest! {
        #[test]
        fn raising_tau_keeps_visible(seed in 0u64..200, tau in 0.01f64..0.3, extra in 0.0f64..0.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = UvGrid::new(6);
            let map = random_map(&mut rng, 12, 12, 0.5);
            let lo = extract_observations(&map, &grid, tau).unwrap();
            let hi = extract_observations(&map, &grid, tau + extra).unwrap();
            for i in 0..grid.vertex_count() {
                prop_assert!(!lo.visibility[i] || hi.visibility[i]);
            }
            for (_, p) in &hi.observations {
                let (c, r) = (p.x as usize, p.y as usize);
                prop_assert!(p.x == c as f64 && p.y == r as f64);
                prop_assert!(map.get(r, c).is_some());
            }
        }
    }
}
