//! Dense correlation layer: SSD cost volume over an integer displacement
//! window and the per-voxel best displacement.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::{ordered_sum, DisplacementField, FeatureVolume, Grid};

pub type Candidate = [i32; 3];

/// The `(2R+1)^3` integer displacements, lexicographic with `dd` fastest.
pub fn candidates(radius: usize) -> Vec<Candidate> {
    let r = radius as i32;
    let mut out = Vec::with_capacity((2 * radius + 1).pow(3));
    for dh in -r..=r {
        for dw in -r..=r {
            for dd in -r..=r {
                out.push([dh, dw, dd]);
            }
        }
    }
    out
}

#[inline]
pub(crate) fn norm2(c: Candidate) -> i32 {
    c[0] * c[0] + c[1] * c[1] + c[2] * c[2]
}

/// Per-voxel SSD costs, each voxel's candidates stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    grid: Grid,
    radius: usize,
    candidates: Vec<Candidate>,
    // candidate indices ordered by (norm, lexicographic); scanning in this
    // order with a strict comparison implements the tie-break rule
    tie_order: Vec<usize>,
    costs: Vec<f32>,
}

impl CostVolume {
    /// Wrap precomputed costs laid out as `costs[voxel * n_candidates + k]`.
    pub fn from_costs(grid: Grid, radius: usize, costs: Vec<f32>) -> Result<Self> {
        let candidates = candidates(radius);
        let expected = grid.len() * candidates.len();
        if costs.len() != expected {
            return Err(Error::LengthMismatch {
                what: "cost volume",
                expected,
                found: costs.len(),
            });
        }
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidArgument(
                "costs must be finite and non-negative".into(),
            ));
        }
        Ok(Self::assemble(grid, radius, candidates, costs))
    }

    fn assemble(grid: Grid, radius: usize, candidates: Vec<Candidate>, costs: Vec<f32>) -> Self {
        let mut tie_order: Vec<usize> = (0..candidates.len()).collect();
        tie_order.sort_by_key(|&k| (norm2(candidates[k]), k));
        Self {
            grid,
            radius,
            candidates,
            tie_order,
            costs,
        }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.radius
    }

    #[inline]
    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    #[inline]
    pub fn costs(&self) -> &[f32] {
        &self.costs
    }

    /// Costs of every candidate at voxel `index`.
    #[inline]
    pub fn voxel_costs(&self, index: usize) -> &[f32] {
        let n = self.candidates.len();
        &self.costs[index * n..(index + 1) * n]
    }

    #[inline]
    pub fn cost(&self, index: usize, candidate: usize) -> f32 {
        self.costs[index * self.candidates.len() + candidate]
    }

    /// Index of the zero displacement in the candidate list.
    pub fn zero_candidate(&self) -> usize {
        self.candidates.len() / 2
    }

    pub(crate) fn tie_order(&self) -> &[usize] {
        &self.tie_order
    }

    pub fn mean_cost(&self) -> f64 {
        let partial: Vec<f64> = self
            .costs
            .par_chunks(self.candidates.len() * self.grid.slice_len())
            .map(|chunk| chunk.iter().fold(0.0f64, |acc, &c| acc + c as f64))
            .collect();
        ordered_sum(&partial) / self.costs.len() as f64
    }
}

/// `cost(v, d) = sum_c (fixed(v, c) - moving(v + d, c))^2`, moving looked up
/// with border replication. Channel sums accumulate in `f64` and are stored
/// as `f32`.
pub fn cost_volume(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    radius: usize,
) -> Result<CostVolume> {
    fixed.require_compatible(moving)?;
    let grid = *fixed.grid();
    let cands = candidates(radius);
    let n = cands.len();
    let [_, wn, dn] = grid.dims();
    let mut costs = vec![0.0f32; grid.len() * n];
    costs
        .par_chunks_mut(grid.slice_len() * n)
        .enumerate()
        .for_each(|(h, slab)| {
            for w in 0..wn {
                for d in 0..dn {
                    let v = grid.index(h, w, d);
                    let f = fixed.voxel(v);
                    let out = &mut slab[(w * dn + d) * n..(w * dn + d + 1) * n];
                    for (k, c) in cands.iter().enumerate() {
                        let m = moving.voxel(grid.clamped_index(
                            h as isize + c[0] as isize,
                            w as isize + c[1] as isize,
                            d as isize + c[2] as isize,
                        ));
                        let mut acc = 0.0f64;
                        for (a, b) in f.iter().zip(m) {
                            acc += (a - b) * (a - b);
                        }
                        out[k] = acc as f32;
                    }
                }
            }
        });
    Ok(CostVolume::assemble(grid, radius, cands, costs))
}

/// Best candidate per voxel; ties go to the smallest norm, then to the
/// lexicographically first displacement.
pub fn argmin_disp(cv: &CostVolume) -> DisplacementField {
    let vectors = (0..cv.grid.len())
        .into_par_iter()
        .map(|v| {
            let costs = cv.voxel_costs(v);
            let mut best = cv.tie_order[0];
            for &k in &cv.tie_order[1..] {
                if costs[k] < costs[best] {
                    best = k;
                }
            }
            cv.candidates[best].map(f64::from)
        })
        .collect();
    DisplacementField::from_parts_unchecked(cv.grid, vectors)
}
