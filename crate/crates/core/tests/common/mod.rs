#![allow(dead_code)]

use mcbo_core::evalkit::synth_deform;
use mcbo_core::volgrid::{Dims, DisplacementField, FeatureVolume, Grid, Vec3, Volume3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn grid(dims: Dims) -> Grid {
    Grid::isotropic(dims).unwrap()
}

pub fn random_volume(dims: Dims, seed: u64) -> Volume3 {
    let mut r = rng(seed);
    let g = grid(dims);
    Volume3::new(g, (0..g.len()).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn random_features(dims: Dims, channels: usize, seed: u64) -> FeatureVolume {
    let mut r = rng(seed);
    let g = grid(dims);
    let data = (0..g.len() * channels)
        .map(|_| r.random_range(0.0..1.0))
        .collect();
    FeatureVolume::new(g, channels, data).unwrap()
}

pub fn random_field(dims: Dims, scale: f64, seed: u64) -> DisplacementField {
    let mut r = rng(seed);
    let g = grid(dims);
    let v = (0..g.len())
        .map(|_| [0; 3].map(|_| r.random_range(-scale..scale)))
        .collect();
    DisplacementField::new(g, v).unwrap()
}

pub fn smooth_field(dims: Dims, magnitude: f64, seed: u64) -> DisplacementField {
    synth_deform(grid(dims), magnitude, 5, seed).unwrap()
}

pub fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn max_dist(a: &DisplacementField, b: &DisplacementField) -> f64 {
    a.vectors()
        .iter()
        .zip(b.vectors())
        .map(|(u, v)| dist(*u, *v))
        .fold(0.0, f64::max)
}

/// Voxels at least `margin` from every face.
pub fn interior(dims: Dims, margin: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for h in margin..dims[0] - margin {
        for w in margin..dims[1] - margin {
            for d in margin..dims[2] - margin {
                out.push([h, w, d]);
            }
        }
    }
    out
}
