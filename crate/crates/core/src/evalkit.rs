//! Verification harness: landmark TRE, synthetic deformations and phantoms,
//! and field diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::{
    ordered_sum, smooth_box, Dims, DisplacementField, Grid, Spacing, Vec3, Volume3,
};

/// Header line of the landmark CSV format.
pub const LANDMARK_CSV_HEADER: &str = "ph,pw,pd,qh,qw,qd";

/// Box passes used by [`synth_deform`].
pub const SYNTH_SMOOTH_PASSES: usize = 3;

/// Corresponding points: `fixed` on the fixed grid, `moving` on the moving
/// grid, both in voxel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkPair {
    pub fixed: Vec3,
    pub moving: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub pairs: Vec<LandmarkPair>,
    /// Millimeters per voxel.
    pub spacing: Spacing,
}

impl LandmarkSet {
    pub fn new(pairs: Vec<LandmarkPair>, spacing: Spacing) -> Self {
        Self { pairs, spacing }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Parse the `ph,pw,pd,qh,qw,qd` CSV format.
    pub fn from_csv(text: &str, spacing: Spacing) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, header))
                if header.trim().trim_start_matches('\u{feff}') == LANDMARK_CSV_HEADER => {}
            Some((_, header)) => {
                return Err(Error::InvalidArgument(format!(
                    "landmark CSV header must be '{LANDMARK_CSV_HEADER}', found '{}'",
                    header.trim()
                )))
            }
            None => return Err(Error::Empty("landmark CSV")),
        }
        let mut pairs = Vec::new();
        for (lineno, line) in lines {
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| {
                    Error::InvalidArgument(format!("landmark CSV line {}: {e}", lineno + 1))
                })?;
            if vals.len() != 6 || vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "landmark CSV line {}: expected 6 finite values",
                    lineno + 1
                )));
            }
            pairs.push(LandmarkPair {
                fixed: [vals[0], vals[1], vals[2]],
                moving: [vals[3], vals[4], vals[5]],
            });
        }
        Ok(Self { pairs, spacing })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LANDMARK_CSV_HEADER);
        out.push('\n');
        for p in &self.pairs {
            let [a, b, c] = p.fixed;
            let [d, e, f] = p.moving;
            out.push_str(&format!("{a},{b},{c},{d},{e},{f}\n"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub per_pair: Vec<f64>,
}

/// Target registration error in millimeters. Each fixed landmark is mapped
/// through the fixed-to-moving field and compared with its moving partner.
pub fn tre(lms: &LandmarkSet, field: &DisplacementField) -> Result<TreStats> {
    if lms.is_empty() {
        return Err(Error::Empty("landmark set"));
    }
    let grid = field.grid();
    let mut per_pair = Vec::with_capacity(lms.len());
    for (index, pair) in lms.pairs.iter().enumerate() {
        if !grid.contains(pair.fixed) || !grid.contains(pair.moving) {
            return Err(Error::LandmarkOutOfBounds { index });
        }
        let u = field.sample(pair.fixed);
        let mut e2 = 0.0;
        for a in 0..3 {
            let diff = (pair.fixed[a] + u[a] - pair.moving[a]) * lms.spacing[a];
            e2 += diff * diff;
        }
        per_pair.push(e2.sqrt());
    }
    let n = per_pair.len() as f64;
    let mean = ordered_sum(&per_pair) / n;
    let var = per_pair
        .iter()
        .map(|e| (e - mean) * (e - mean))
        .sum::<f64>()
        / n;
    Ok(TreStats {
        mean,
        std: var.sqrt(),
        per_pair,
    })
}

/// Seeded random smooth field: standard-normal vectors, box filtered
/// [`SYNTH_SMOOTH_PASSES`] times with width `kernel`, rescaled so the largest
/// vector norm equals `max_magnitude`.
pub fn synth_deform(
    grid: Grid,
    max_magnitude: f64,
    kernel: usize,
    seed: u64,
) -> Result<DisplacementField> {
    if !(max_magnitude.is_finite() && max_magnitude >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max magnitude must be non-negative, got {max_magnitude}"
        )));
    }
    if max_magnitude == 0.0 {
        return Ok(DisplacementField::zeros(grid));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec3> = (0..grid.len())
        .map(|_| {
            let mut u = [0.0; 3];
            for x in &mut u {
                *x = StandardNormal.sample(&mut rng);
            }
            u
        })
        .collect();
    let smooth = smooth_box(
        &DisplacementField::new(grid, noise)?,
        kernel,
        SYNTH_SMOOTH_PASSES,
    )?;
    let peak = smooth.max_norm();
    if peak == 0.0 {
        return Ok(DisplacementField::zeros(grid));
    }
    let scale = max_magnitude / peak;
    let vectors = smooth
        .into_vectors()
        .into_iter()
        .map(|u| u.map(|x| x * scale))
        .collect();
    DisplacementField::new(grid, vectors)
}

/// Fixed-point inverse: `inv(v) = -field(v + inv(v))`.
pub fn invert_field(field: &DisplacementField, iterations: usize) -> DisplacementField {
    let grid = *field.grid();
    let mut inv: Vec<Vec3> = field.vectors().iter().map(|u| u.map(|x| -x)).collect();
    for _ in 0..iterations {
        inv = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let [h, w, d] = grid.coords(i);
                let u = inv[i];
                field
                    .sample([h as f64 + u[0], w as f64 + u[1], d as f64 + u[2]])
                    .map(|x| -x)
            })
            .collect();
    }
    DisplacementField::from_parts_unchecked(grid, inv)
}

/// Draw `count` landmark pairs whose fixed points are uniform inside the grid
/// shrunk by `margin` voxels and whose moving points follow `field`.
pub fn landmarks_from_field(
    field: &DisplacementField,
    count: usize,
    margin: f64,
    seed: u64,
) -> Result<LandmarkSet> {
    let grid = field.grid();
    let dims = grid.dims();
    if dims.iter().any(|&n| (n as f64 - 1.0) < 2.0 * margin) {
        return Err(Error::InvalidArgument(format!(
            "margin {margin} leaves no room inside {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while pairs.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::InvalidArgument(
                "could not place landmarks inside the grid".into(),
            ));
        }
        let p: Vec3 = [0, 1, 2].map(|a| rng.random_range(margin..=(dims[a] as f64 - 1.0 - margin)));
        let u = field.sample(p);
        let q = [p[0] + u[0], p[1] + u[1], p[2] + u[2]];
        if grid.contains(q) {
            pairs.push(LandmarkPair {
                fixed: p,
                moving: q,
            });
        }
    }
    Ok(LandmarkSet::new(pairs, grid.spacing()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianStats {
    pub min: f64,
    pub nonpositive_fraction: f64,
}

/// Determinant of the Jacobian of `v -> v + phi(v)` from central
/// differences, over voxels that have both neighbours along every axis of
/// length three or more. Axes of length two use the one-sided difference.
pub fn jacobian_stats(field: &DisplacementField) -> JacobianStats {
    let grid = field.grid();
    let dims = grid.dims();
    let range = |n: usize| if n >= 3 { 1..n - 1 } else { 0..n };
    let deriv = |h: usize, w: usize, d: usize, axis: usize| -> Vec3 {
        let here = [h, w, d];
        let n = dims[axis];
        if n < 2 {
            return [0.0; 3];
        }
        let (lo, hi) = if here[axis] == 0 {
            (0, 1)
        } else if here[axis] == n - 1 {
            (n - 2, n - 1)
        } else {
            (here[axis] - 1, here[axis] + 1)
        };
        let mut a = here;
        let mut b = here;
        a[axis] = lo;
        b[axis] = hi;
        let (ua, ub) = (field.get(a[0], a[1], a[2]), field.get(b[0], b[1], b[2]));
        let span = (hi - lo) as f64;
        [0, 1, 2].map(|c| (ub[c] - ua[c]) / span)
    };
    let dets: Vec<f64> = range(dims[0])
        .into_par_iter()
        .flat_map_iter(|h| {
            let rw = range(dims[1]);
            rw.flat_map(move |w| range(dims[2]).map(move |d| (h, w, d)))
        })
        .map(|(h, w, d)| {
            // column j holds d(phi)/d(axis j); add identity
            let cols = [0, 1, 2].map(|axis| deriv(h, w, d, axis));
            let m = |r: usize, c: usize| cols[c][r] + if r == c { 1.0 } else { 0.0 };
            m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
        })
        .collect();
    let min = dets.iter().copied().fold(f64::INFINITY, f64::min);
    let nonpositive = dets.iter().filter(|&&x| x <= 0.0).count();
    JacobianStats {
        min,
        nonpositive_fraction: nonpositive as f64 / dets.len() as f64,
    }
}

/// Mean Euclidean distance (voxels) between two fields over the voxels at
/// least `margin` away from every face.
pub fn mean_endpoint_error(
    a: &DisplacementField,
    b: &DisplacementField,
    margin: usize,
) -> Result<f64> {
    a.grid().require_same_dims(b.grid())?;
    let region = interior(a.dims(), margin)?;
    let errs: Vec<f64> = region
        .iter()
        .map(|&[h, w, d]| {
            let (u, v) = (a.get(h, w, d), b.get(h, w, d));
            ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt()
        })
        .collect();
    Ok(ordered_sum(&errs) / errs.len() as f64)
}

/// Componentwise mean displacement over the voxels at least `margin` away
/// from every face.
pub fn region_mean(field: &DisplacementField, margin: usize) -> Result<Vec3> {
    let region = interior(field.dims(), margin)?;
    let n = region.len() as f64;
    Ok([0, 1, 2].map(|a| {
        let comp: Vec<f64> = region
            .iter()
            .map(|&[h, w, d]| field.get(h, w, d)[a])
            .collect();
        ordered_sum(&comp) / n
    }))
}

fn interior(dims: Dims, margin: usize) -> Result<Vec<[usize; 3]>> {
    if dims.iter().any(|&n| n <= 2 * margin) {
        return Err(Error::InvalidArgument(format!(
            "margin {margin} leaves no interior in {dims:?}"
        )));
    }
    let mut out = Vec::new();
    for h in margin..dims[0] - margin {
        for w in margin..dims[1] - margin {
            for d in margin..dims[2] - margin {
                out.push([h, w, d]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Blob {
    center: Vec3,
    inv_two_sigma2: Vec3,
    amplitude: f64,
}

/// Continuous synthetic image: a seeded sum of anisotropic Gaussian blobs
/// scattered over (and slightly beyond) the grid.
#[derive(Clone, Debug)]
pub struct Phantom {
    blobs: Vec<Blob>,
}

impl Phantom {
    pub fn random(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = (dims.iter().product::<usize>() / 1500).max(12);
        let blobs = (0..count)
            .map(|_| {
                let center = dims.map(|n| rng.random_range(-3.0..(n as f64 + 2.0)));
                let inv_two_sigma2 = [0; 3].map(|_| {
                    let s: f64 = rng.random_range(1.5..5.0);
                    1.0 / (2.0 * s * s)
                });
                let magnitude: f64 = rng.random_range(0.3..1.0);
                let amplitude = if rng.random_bool(0.5) {
                    magnitude
                } else {
                    -magnitude
                };
                Blob {
                    center,
                    inv_two_sigma2,
                    amplitude,
                }
            })
            .collect();
        Self { blobs }
    }

    pub fn eval(&self, p: Vec3) -> f64 {
        self.blobs
            .iter()
            .map(|b| {
                let mut e = 0.0;
                for a in 0..3 {
                    let x = p[a] - b.center[a];
                    e += x * x * b.inv_two_sigma2[a];
                }
                b.amplitude * (-e).exp()
            })
            .sum()
    }

    pub fn render(&self, grid: Grid) -> Result<Volume3> {
        Volume3::from_fn(grid, |h, w, d| self.eval([h as f64, w as f64, d as f64]))
    }

    /// Sample the phantom at `map(v)` for every voxel `v`.
    pub fn render_mapped(&self, grid: Grid, map: impl Fn(Vec3) -> Vec3 + Sync) -> Result<Volume3> {
        Volume3::from_fn(grid, |h, w, d| {
            self.eval(map([h as f64, w as f64, d as f64]))
        })
    }

    /// The image that `field` (fixed to moving) registers onto the plain
    /// rendering: `moving(y) = phantom(y + inv(y))`, `inv` the inverse field.
    pub fn render_deformed(&self, field: &DisplacementField) -> Result<Volume3> {
        let inv = invert_field(field, 30);
        self.render_mapped(*field.grid(), |y| {
            let [h, w, d] = y.map(|x| x as usize);
            let u = inv.get(h, w, d);
            [y[0] + u[0], y[1] + u[1], y[2] + u[2]]
        })
    }
}

/// Add seeded zero-mean Gaussian noise.
pub fn add_noise(vol: &Volume3, sigma: f64, seed: u64) -> Result<Volume3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vol
        .data()
        .iter()
        .map(|&x| {
            let n: f64 = StandardNormal.sample(&mut rng);
            x + sigma * n
        })
        .collect();
    Volume3::new(*vol.grid(), data)
}

/// Apply an intensity transfer function voxelwise.
pub fn remap(vol: &Volume3, f: impl Fn(f64) -> f64 + Sync) -> Result<Volume3> {
    Volume3::new(*vol.grid(), vol.data().par_iter().map(|&x| f(x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tre_of_identity() {
        let g = Grid::isotropic([5, 5, 5]).unwrap();
        let z = DisplacementField::zeros(g);
        let lms = LandmarkSet::new(
            vec![
                LandmarkPair {
                    fixed: [1.0, 2.0, 3.0],
                    moving: [1.0, 2.0, 3.0],
                },
                LandmarkPair {
                    fixed: [0.5, 4.0, 0.0],
                    moving: [0.5, 4.0, 0.0],
                },
            ],
            [1.0; 3],
        );
        let t = tre(&lms, &z).unwrap();
        assert_eq!((t.mean, t.std), (0.0, 0.0));
    }

    #[test]
    fn tre_uses_physical_spacing() {
        let g = Grid::new([5, 5, 5], [1.5, 1.0, 1.0]).unwrap();
        let z = DisplacementField::zeros(g);
        let lms = LandmarkSet::new(
            vec![LandmarkPair {
                fixed: [1.0, 1.0, 1.0],
                moving: [3.0, 1.0, 1.0],
            }],
            g.spacing(),
        );
        assert!((tre(&lms, &z).unwrap().mean - 3.0).abs() < 1e-12);
    }

    #[test]
    fn tre_errors() {
        let z = DisplacementField::zeros(Grid::isotropic([4, 4, 4]).unwrap());
        assert!(matches!(
            tre(&LandmarkSet::new(vec![], [1.0; 3]), &z),
            Err(Error::Empty(_))
        ));
        let lms = LandmarkSet::new(
            vec![
                LandmarkPair {
                    fixed: [1.0; 3],
                    moving: [1.0; 3],
                },
                LandmarkPair {
                    fixed: [1.0, 1.0, 3.5],
                    moving: [1.0; 3],
                },
            ],
            [1.0; 3],
        );
        assert!(matches!(
            tre(&lms, &z),
            Err(Error::LandmarkOutOfBounds { index: 1 })
        ));
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let lms = LandmarkSet::new(
            vec![LandmarkPair {
                fixed: [1.25, 2.0, 3.0],
                moving: [0.1, 0.2, 1e-3],
            }],
            [1.0; 3],
        );
        assert_eq!(LandmarkSet::from_csv(&lms.to_csv(), [1.0; 3]).unwrap(), lms);
        assert!(LandmarkSet::from_csv("a,b\n1,2\n", [1.0; 3]).is_err());
        assert!(LandmarkSet::from_csv("ph,pw,pd,qh,qw,qd\n1,2,3\n", [1.0; 3]).is_err());
        assert!(LandmarkSet::from_csv("ph,pw,pd,qh,qw,qd\n1,2,3,x,5,6\n", [1.0; 3]).is_err());
        assert!(LandmarkSet::from_csv("", [1.0; 3]).is_err());
    }

    #[test]
    fn synth_zero_and_determinism() {
        let g = Grid::isotropic([8, 8, 8]).unwrap();
        assert_eq!(
            synth_deform(g, 0.0, 3, 1).unwrap(),
            DisplacementField::zeros(g)
        );
        assert_eq!(
            synth_deform(g, 2.0, 3, 9).unwrap(),
            synth_deform(g, 2.0, 3, 9).unwrap()
        );
        assert_ne!(
            synth_deform(g, 2.0, 3, 9).unwrap(),
            synth_deform(g, 2.0, 3, 10).unwrap()
        );
        assert!(synth_deform(g, -1.0, 3, 1).is_err());
    }

    #[test]
    fn jacobian_of_simple_maps() {
        let g = Grid::isotropic([6, 5, 4]).unwrap();
        let j = jacobian_stats(&DisplacementField::zeros(g));
        assert_eq!((j.min, j.nonpositive_fraction), (1.0, 0.0));
        let j = jacobian_stats(&DisplacementField::uniform(g, [1.0, -2.0, 0.5]).unwrap());
        assert_eq!(j.min, 1.0);
        let stretch = DisplacementField::from_fn(g, |h, _, _| [0.5 * h as f64, 0.0, 0.0]).unwrap();
        let j = jacobian_stats(&stretch);
        assert!((j.min - 1.5).abs() < 1e-12);
        let fold = DisplacementField::from_fn(g, |h, _, _| [-2.0 * h as f64, 0.0, 0.0]).unwrap();
        assert_eq!(jacobian_stats(&fold).nonpositive_fraction, 1.0);
    }

    #[test]
    fn inverse_of_smooth_field_composes_to_identity() {
        let g = Grid::isotropic([16, 16, 16]).unwrap();
        let f = synth_deform(g, 1.5, 5, 3).unwrap();
        let inv = invert_field(&f, 30);
        let rt = crate::volgrid::compose(&f, &inv).unwrap();
        assert!(region_mean(&rt, 3).unwrap().iter().all(|x| x.abs() < 1e-3));
        assert!(mean_endpoint_error(&rt, &DisplacementField::zeros(g), 3).unwrap() < 1e-3);
    }
}
