//! Grid containers and the geometric primitives shared by every stage:
//! trilinear sampling, warping, average pooling, field upsampling,
//! composition and separable box smoothing.
//!
//! Voxels are stored row-major over `(h, w, d)` with `d` fastest. Every
//! out-of-grid lookup replicates the border voxel.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];
pub type Vec3 = [f64; 3];

/// Grid geometry: voxel counts along `(h, w, d)` and millimeters per voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dims: Dims,
    spacing: Spacing,
}

impl Grid {
    pub fn new(dims: Dims, spacing: Spacing) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::DegenerateDims(dims));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spacing grid.
    pub fn isotropic(dims: Dims) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of voxels in one `h` slice.
    #[inline]
    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let d = index % self.dims[2];
        let rest = index / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], d]
    }

    /// Index of the voxel nearest to `(h, w, d)` after clamping into the grid.
    #[inline]
    pub fn clamped_index(&self, h: isize, w: isize, d: isize) -> usize {
        let c = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
        self.index(c(h, self.dims[0]), c(w, self.dims[1]), c(d, self.dims[2]))
    }

    /// True when `p` lies inside `[0, dim - 1]` on every axis.
    pub fn contains(&self, p: Vec3) -> bool {
        p.iter()
            .zip(self.dims)
            .all(|(&x, n)| x.is_finite() && x >= 0.0 && x <= (n - 1) as f64)
    }

    /// Geometry after non-overlapping `n`-cube average pooling.
    pub fn pooled(&self, n: usize) -> Grid {
        Grid {
            dims: self.dims.map(|x| x.div_ceil(n)),
            spacing: self.spacing.map(|s| s * n as f64),
        }
    }

    pub(crate) fn require_same_dims(&self, other: &Grid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                expected: self.dims,
                found: other.dims,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct AxisStencil {
    i0: usize,
    i1: usize,
    t: f64,
    // false when the coordinate is clamped, so the sample is flat along the axis
    slope: bool,
}

#[inline]
fn axis_stencil(x: f64, n: usize) -> AxisStencil {
    if n == 1 {
        return AxisStencil {
            i0: 0,
            i1: 0,
            t: 0.0,
            slope: false,
        };
    }
    let max = (n - 1) as f64;
    if x.is_nan() || x <= 0.0 {
        AxisStencil {
            i0: 0,
            i1: 1,
            t: 0.0,
            slope: false,
        }
    } else if x >= max {
        AxisStencil {
            i0: n - 2,
            i1: n - 1,
            t: 1.0,
            slope: false,
        }
    } else {
        let i0 = (x.floor() as usize).min(n - 2);
        AxisStencil {
            i0,
            i1: i0 + 1,
            t: x - i0 as f64,
            slope: true,
        }
    }
}

/// The eight voxels and weights of a clamped trilinear lookup.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub weight: [f64; 8],
}

/// A stencil plus the weights of the spatial derivative along each axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GradStencil {
    pub base: Stencil,
    pub dweight: [[f64; 8]; 3],
}

#[inline]
pub(crate) fn stencil(grid: &Grid, p: Vec3) -> Stencil {
    let [sh, sw, sd] = [0, 1, 2].map(|a| axis_stencil(p[a], grid.dims[a]));
    let mut idx = [0usize; 8];
    let mut weight = [0.0f64; 8];
    let mut k = 0;
    for (h, wh) in [(sh.i0, 1.0 - sh.t), (sh.i1, sh.t)] {
        for (w, ww) in [(sw.i0, 1.0 - sw.t), (sw.i1, sw.t)] {
            for (d, wd) in [(sd.i0, 1.0 - sd.t), (sd.i1, sd.t)] {
                idx[k] = grid.index(h, w, d);
                weight[k] = wh * ww * wd;
                k += 1;
            }
        }
    }
    Stencil { idx, weight }
}

#[inline]
pub(crate) fn grad_stencil(grid: &Grid, p: Vec3) -> GradStencil {
    let ax = [0, 1, 2].map(|a| axis_stencil(p[a], grid.dims[a]));
    let lerp = |s: &AxisStencil| [1.0 - s.t, s.t];
    let slope = |s: &AxisStencil| if s.slope { [-1.0, 1.0] } else { [0.0, 0.0] };
    let (lh, lw, ld) = (lerp(&ax[0]), lerp(&ax[1]), lerp(&ax[2]));
    let (gh, gw, gd) = (slope(&ax[0]), slope(&ax[1]), slope(&ax[2]));
    let (ih, iw, id) = (
        [ax[0].i0, ax[0].i1],
        [ax[1].i0, ax[1].i1],
        [ax[2].i0, ax[2].i1],
    );

    let mut idx = [0usize; 8];
    let mut weight = [0.0f64; 8];
    let mut dweight = [[0.0f64; 8]; 3];
    let mut k = 0;
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                idx[k] = grid.index(ih[a], iw[b], id[c]);
                weight[k] = lh[a] * lw[b] * ld[c];
                dweight[0][k] = gh[a] * lw[b] * ld[c];
                dweight[1][k] = lh[a] * gw[b] * ld[c];
                dweight[2][k] = lh[a] * lw[b] * gd[c];
                k += 1;
            }
        }
    }
    GradStencil {
        base: Stencil { idx, weight },
        dweight,
    }
}

fn require_finite_point(p: Vec3) -> Result<()> {
    if p.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "sample point {p:?} is not finite"
        )))
    }
}

/// Scalar 3D image with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3 {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume3 {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                what: "volume data",
                expected: grid.len(),
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> f64 + Sync) -> Result<Self> {
        let data = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let [h, w, d] = grid.coords(i);
                f(h, w, d)
            })
            .collect();
        Self::new(grid, data)
    }

    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.grid.dims
    }

    #[inline]
    pub fn spacing(&self) -> Spacing {
        self.grid.spacing
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> f64 {
        self.data[self.grid.index(h, w, d)]
    }

    pub fn mean(&self) -> f64 {
        ordered_sum(&self.data) / self.data.len() as f64
    }

    #[inline]
    pub(crate) fn sample_unchecked(&self, p: Vec3) -> f64 {
        let s = stencil(&self.grid, p);
        let mut acc = 0.0;
        for k in 0..8 {
            acc += s.weight[k] * self.data[s.idx[k]];
        }
        acc
    }
}

/// Trilinear interpolation at a continuous voxel coordinate, border replicated.
pub fn trilinear_sample(vol: &Volume3, p: Vec3) -> Result<f64> {
    require_finite_point(p)?;
    Ok(vol.sample_unchecked(p))
}

/// Resample `vol` at `v + field(v)` for every voxel `v` of the field grid.
pub fn warp(vol: &Volume3, field: &DisplacementField) -> Result<Volume3> {
    vol.grid.require_same_dims(&field.grid)?;
    let data = (0..vol.grid.len())
        .into_par_iter()
        .map(|i| {
            let [h, w, d] = vol.grid.coords(i);
            let u = field.vectors[i];
            vol.sample_unchecked([h as f64 + u[0], w as f64 + u[1], d as f64 + u[2]])
        })
        .collect();
    Volume3::new(vol.grid, data)
}

/// Multi-channel feature grid, channels interleaved per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    grid: Grid,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(grid: Grid, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument(
                "feature volume needs at least one channel".into(),
            ));
        }
        if data.len() != grid.len() * channels {
            return Err(Error::LengthMismatch {
                what: "feature data",
                expected: grid.len() * channels,
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature data"));
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.grid.dims
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// All channels of voxel `index`.
    #[inline]
    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize, c: usize) -> f64 {
        self.data[self.grid.index(h, w, d) * self.channels + c]
    }

    /// One channel extracted as a scalar volume.
    pub fn channel(&self, c: usize) -> Volume3 {
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Volume3 {
            grid: self.grid,
            data,
        }
    }

    pub(crate) fn require_compatible(&self, other: &FeatureVolume) -> Result<()> {
        self.grid.require_same_dims(&other.grid)?;
        if self.channels != other.channels {
            return Err(Error::InvalidArgument(format!(
                "channel count mismatch: {} vs {}",
                self.channels, other.channels
            )));
        }
        Ok(())
    }
}

/// Dense per-voxel displacement vectors `(dh, dw, dd)` in voxel units of the
/// field's own grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    vectors: Vec<Vec3>,
}

impl DisplacementField {
    pub fn new(grid: Grid, vectors: Vec<Vec3>) -> Result<Self> {
        if vectors.len() != grid.len() {
            return Err(Error::LengthMismatch {
                what: "displacement vectors",
                expected: grid.len(),
                found: vectors.len(),
            });
        }
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("displacement field"));
        }
        Ok(Self { grid, vectors })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            vectors: vec![[0.0; 3]; grid.len()],
        }
    }

    pub fn uniform(grid: Grid, u: Vec3) -> Result<Self> {
        Self::new(grid, vec![u; grid.len()])
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> Vec3 + Sync) -> Result<Self> {
        let vectors = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let [h, w, d] = grid.coords(i);
                f(h, w, d)
            })
            .collect();
        Self::new(grid, vectors)
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.grid.dims
    }

    #[inline]
    pub fn spacing(&self) -> Spacing {
        self.grid.spacing
    }

    #[inline]
    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<Vec3> {
        self.vectors
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> Vec3 {
        self.vectors[self.grid.index(h, w, d)]
    }

    /// Trilinearly interpolated displacement at a continuous voxel coordinate.
    #[inline]
    pub fn sample(&self, p: Vec3) -> Vec3 {
        let s = stencil(&self.grid, p);
        let mut acc = [0.0; 3];
        for k in 0..8 {
            let u = self.vectors[s.idx[k]];
            for a in 0..3 {
                acc[a] += s.weight[k] * u[a];
            }
        }
        acc
    }

    pub fn mean_norm(&self) -> f64 {
        let norms: Vec<f64> = self.vectors.iter().map(|u| norm(*u)).collect();
        ordered_sum(&norms) / norms.len() as f64
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors.iter().map(|u| norm(*u)).fold(0.0, f64::max)
    }

    /// Componentwise mean vector.
    pub fn mean_vector(&self) -> Vec3 {
        let n = self.vectors.len() as f64;
        [0, 1, 2].map(|a| {
            let comp: Vec<f64> = self.vectors.iter().map(|u| u[a]).collect();
            ordered_sum(&comp) / n
        })
    }

    /// Same vectors reinterpreted on a grid with different spacing.
    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        self.grid = Grid::new(self.grid.dims, spacing)?;
        Ok(self)
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, vectors: Vec<Vec3>) -> Self {
        debug_assert_eq!(vectors.len(), grid.len());
        Self { grid, vectors }
    }
}

#[inline]
pub fn norm(u: Vec3) -> f64 {
    (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
}

/// Sum in slice order. Parallel callers reduce per-slice partials through
/// this so the result does not depend on the thread count.
pub(crate) fn ordered_sum(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, &x| acc + x)
}

/// Non-overlapping `n`-cube average pooling. Partial border blocks are
/// averaged over the voxels they actually contain.
pub trait AvgPool: Sized {
    fn avg_pool(&self, n: usize) -> Result<Self>;
}

fn pool_flat(data: &[f64], grid: &Grid, chan: usize, n: usize) -> Result<(Grid, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "pooling factor must be at least 1".into(),
        ));
    }
    if n == 1 {
        return Ok((*grid, data.to_vec()));
    }
    let out = grid.pooled(n);
    let [h_in, w_in, d_in] = grid.dims;
    let [_, w_out, d_out] = out.dims;
    let mut pooled = vec![0.0; out.len() * chan];
    pooled
        .par_chunks_mut(w_out * d_out * chan)
        .enumerate()
        .for_each(|(oh, slab)| {
            let hs = oh * n..((oh + 1) * n).min(h_in);
            for ow in 0..w_out {
                let ws = ow * n..((ow + 1) * n).min(w_in);
                for od in 0..d_out {
                    let ds = od * n..((od + 1) * n).min(d_in);
                    let count = (hs.len() * ws.len() * ds.len()) as f64;
                    let dst = &mut slab[(ow * d_out + od) * chan..(ow * d_out + od + 1) * chan];
                    for h in hs.clone() {
                        for w in ws.clone() {
                            for d in ds.clone() {
                                let src = grid.index(h, w, d) * chan;
                                for c in 0..chan {
                                    dst[c] += data[src + c];
                                }
                            }
                        }
                    }
                    for x in dst.iter_mut() {
                        *x /= count;
                    }
                }
            }
        });
    Ok((out, pooled))
}

impl AvgPool for Volume3 {
    fn avg_pool(&self, n: usize) -> Result<Self> {
        let (grid, data) = pool_flat(&self.data, &self.grid, 1, n)?;
        Ok(Volume3 { grid, data })
    }
}

impl AvgPool for FeatureVolume {
    fn avg_pool(&self, n: usize) -> Result<Self> {
        let (grid, data) = pool_flat(&self.data, &self.grid, self.channels, n)?;
        Ok(FeatureVolume {
            grid,
            channels: self.channels,
            data,
        })
    }
}

impl AvgPool for DisplacementField {
    fn avg_pool(&self, n: usize) -> Result<Self> {
        let (grid, data) = pool_flat(self.vectors.as_flattened(), &self.grid, 3, n)?;
        let vectors = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(DisplacementField { grid, vectors })
    }
}

pub fn avg_pool<T: AvgPool>(x: &T, n: usize) -> Result<T> {
    x.avg_pool(n)
}

/// Interpolate a coarse field onto a finer grid and rescale its vectors into
/// fine-grid voxel units.
///
/// `factor` is the coarse voxel size over the fine voxel size. Voxel centers
/// are aligned the way average pooling places them: fine coordinate `x`
/// sits at coarse coordinate `(x + 0.5) / factor - 0.5`.
pub fn upsample_field(
    field: &DisplacementField,
    target_dims: Dims,
    factor: f64,
) -> Result<DisplacementField> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "upsampling factor must be positive, got {factor}"
        )));
    }
    let grid = Grid::new(target_dims, field.grid.spacing.map(|s| s / factor))?;
    let to_coarse = |x: usize| (x as f64 + 0.5) / factor - 0.5;
    let vectors = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let [h, w, d] = grid.coords(i);
            field
                .sample([to_coarse(h), to_coarse(w), to_coarse(d)])
                .map(|x| x * factor)
        })
        .collect();
    DisplacementField::new(grid, vectors)
}

/// `out(v) = inner(v) + outer(v + inner(v))`: apply `inner` first.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    outer.grid.require_same_dims(&inner.grid)?;
    let grid = inner.grid;
    let vectors = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let [h, w, d] = grid.coords(i);
            let u = inner.vectors[i];
            let o = outer.sample([h as f64 + u[0], w as f64 + u[1], d as f64 + u[2]]);
            [u[0] + o[0], u[1] + o[1], u[2] + o[2]]
        })
        .collect();
    Ok(DisplacementField::from_parts_unchecked(grid, vectors))
}

fn box_axis(data: &[f64], grid: &Grid, chan: usize, axis: usize, radius: usize) -> Vec<f64> {
    let dims = grid.dims;
    let width = (2 * radius + 1) as f64;
    let r = radius as isize;
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(grid.slice_len() * chan)
        .enumerate()
        .for_each(|(h, slab)| {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    let dst = &mut slab[(w * dims[2] + d) * chan..(w * dims[2] + d + 1) * chan];
                    let mut pos = [h as isize, w as isize, d as isize];
                    let centre = pos[axis];
                    for off in -r..=r {
                        pos[axis] = centre + off;
                        let src = grid.clamped_index(pos[0], pos[1], pos[2]) * chan;
                        for c in 0..chan {
                            dst[c] += data[src + c];
                        }
                    }
                    for x in dst.iter_mut() {
                        *x /= width;
                    }
                }
            }
        });
    out
}

/// Separable box filter of width `kernel`, run `passes` times over h, w and d
/// in turn, with border replication. Each vector component is filtered
/// independently.
pub fn smooth_box(
    field: &DisplacementField,
    kernel: usize,
    passes: usize,
) -> Result<DisplacementField> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "box kernel width must be odd and positive, got {kernel}"
        )));
    }
    if kernel == 1 || passes == 0 {
        return Ok(field.clone());
    }
    let radius = kernel / 2;
    let mut data = field.vectors.as_flattened().to_vec();
    for _ in 0..passes {
        for axis in 0..3 {
            if field.grid.dims[axis] > 1 {
                data = box_axis(&data, &field.grid, 3, axis, radius);
            }
        }
    }
    let vectors = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(DisplacementField::from_parts_unchecked(field.grid, vectors))
}
