//! MIND-SSC: modality independent neighbourhood descriptor with
//! self-similarity context.
//!
//! The six axis neighbours at distance `dilation` form twelve perpendicular
//! pairs (the edges of an octahedron). Each channel is a patch distance
//! between the two members of one pair, normalized by a local variance
//! estimate and mapped through `exp(-D / V)`. Structure survives while
//! absolute intensity does not, so SSD between descriptors of different
//! modalities is meaningful.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::{ordered_sum, FeatureVolume, Grid, Volume3};

pub const MIND_CHANNELS: usize = 12;

type Offset = [isize; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MindConfig {
    /// Distance of the six neighbours from the centre voxel.
    pub dilation: usize,
    /// Half width of the cubic patch compared between neighbours.
    pub patch_radius: usize,
    /// Lower clamp on the local variance.
    pub epsilon: f64,
}

impl Default for MindConfig {
    fn default() -> Self {
        Self {
            dilation: 2,
            patch_radius: 1,
            epsilon: 1e-6,
        }
    }
}

impl MindConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 {
            return Err(Error::InvalidConfig(
                "mind.dilation must be at least 1".into(),
            ));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mind.epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Unit neighbour directions in lexicographic order:
/// `-h, -w, -d, +d, +w, +h`.
const DIRECTIONS: [Offset; 6] = [
    [-1, 0, 0],
    [0, -1, 0],
    [0, 0, -1],
    [0, 0, 1],
    [0, 1, 0],
    [1, 0, 0],
];

/// The twelve perpendicular direction pairs `(i, j)`, `i < j`, indices into
/// the direction list above. Channel `c` compares the neighbours of pair `c`;
/// the list is lexicographic over `(direction i, direction j)`.
pub fn channel_pairs() -> [(usize, usize); MIND_CHANNELS] {
    let mut out = [(0, 0); MIND_CHANNELS];
    let mut k = 0;
    for i in 0..6 {
        for j in i + 1..6 {
            let dot: isize = (0..3).map(|a| DIRECTIONS[i][a] * DIRECTIONS[j][a]).sum();
            if dot == 0 {
                out[k] = (i, j);
                k += 1;
            }
        }
    }
    debug_assert_eq!(k, MIND_CHANNELS);
    out
}

/// Neighbour offsets of every channel at the given dilation.
pub fn channel_offsets(dilation: usize) -> [(Offset, Offset); MIND_CHANNELS] {
    let s = dilation as isize;
    channel_pairs().map(|(i, j)| (DIRECTIONS[i].map(|x| x * s), DIRECTIONS[j].map(|x| x * s)))
}

/// Channel permutation induced by mirroring the image along `axis`:
/// `extract(flip(vol))` channel `perm[c]` equals the flipped channel `c`.
pub fn flip_permutation(axis: usize) -> [usize; MIND_CHANNELS] {
    assert!(axis < 3, "axis must be 0, 1 or 2");
    let pairs = channel_pairs();
    let mirror = |i: usize| {
        let mut dir = DIRECTIONS[i];
        dir[axis] = -dir[axis];
        DIRECTIONS.iter().position(|&x| x == dir).unwrap()
    };
    pairs.map(|(i, j)| {
        let (a, b) = (mirror(i), mirror(j));
        let key = (a.min(b), a.max(b));
        pairs.iter().position(|&p| p == key).unwrap()
    })
}

/// Extract the 12-channel descriptor. Values lie in `(0, 1]`.
pub fn extract(vol: &Volume3, cfg: &MindConfig) -> Result<FeatureVolume> {
    cfg.validate()?;
    let grid: Grid = *vol.grid();
    let data = vol.data();
    let offsets = channel_offsets(cfg.dilation);
    let r = cfg.patch_radius as isize;
    let slice = grid.slice_len();
    let [_, wn, dn] = grid.dims();

    // patch distances, voxel-major
    let mut dist = vec![0.0f64; grid.len() * MIND_CHANNELS];
    dist.par_chunks_mut(slice * MIND_CHANNELS)
        .enumerate()
        .for_each(|(h, slab)| {
            for w in 0..wn {
                for d in 0..dn {
                    let v = [h as isize, w as isize, d as isize];
                    let out =
                        &mut slab[(w * dn + d) * MIND_CHANNELS..(w * dn + d + 1) * MIND_CHANNELS];
                    for (c, (a, b)) in offsets.iter().enumerate() {
                        let mut acc = 0.0;
                        for ph in -r..=r {
                            for pw in -r..=r {
                                for pd in -r..=r {
                                    let p = [v[0] + ph, v[1] + pw, v[2] + pd];
                                    let x = data
                                        [grid.clamped_index(p[0] + a[0], p[1] + a[1], p[2] + a[2])];
                                    let y = data
                                        [grid.clamped_index(p[0] + b[0], p[1] + b[1], p[2] + b[2])];
                                    acc += (x - y) * (x - y);
                                }
                            }
                        }
                        out[c] = acc;
                    }
                }
            }
        });

    let variance: Vec<f64> = dist
        .par_chunks(MIND_CHANNELS)
        .map(|ch| ordered_sum(ch) / MIND_CHANNELS as f64)
        .collect();
    let slice_sums: Vec<f64> = variance.par_chunks(slice).map(ordered_sum).collect();
    let global_mean = ordered_sum(&slice_sums) / grid.len() as f64;
    let floor = cfg.epsilon.max(1e-3 * global_mean);

    dist.par_chunks_mut(MIND_CHANNELS)
        .zip(variance.par_iter())
        .for_each(|(ch, &v)| {
            let v = v.max(floor);
            for x in ch.iter_mut() {
                *x = (-*x / v).exp();
            }
        });
    FeatureVolume::new(grid, MIND_CHANNELS, dist)
}
