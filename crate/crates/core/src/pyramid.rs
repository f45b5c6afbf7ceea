//! Multilevel pipeline: feature pyramid, per-level correlation, coupled
//! convex optimization and inverse consistency, octant splitting of the
//! full-resolution level, instance optimization and weighted fusion.
//!
//! Coarse levels only propose integer displacements on their pooled grid,
//! so the fused sum is quantized to a fraction of the coarsest pool factor.
//! The optional `refine` stage runs Adam on the fused field at full
//! resolution to recover sub-voxel motion.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::corr::cost_volume;
use crate::cvxopt::{coupled_convex, inverse_consistent, ConvexSchedule};
use crate::error::{Error, Result};
use crate::instopt::{instance_optimize_traced, InstOptConfig};
use crate::mindssc::{extract, MindConfig};
use crate::volgrid::{
    upsample_field, AvgPool, Dims, DisplacementField, FeatureVolume, Grid, Vec3, Volume3,
};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct LevelConfig {
    pub pool_factor: usize,
    pub search_radius: usize,
    pub convex_schedule: ConvexSchedule,
    pub weight: f64,
}

impl LevelConfig {
    pub fn new(pool_factor: usize, search_radius: usize, weight: f64) -> Self {
        Self {
            pool_factor,
            search_radius,
            convex_schedule: ConvexSchedule::default(),
            weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Ordered from the finest level.
    pub levels: Vec<LevelConfig>,
    pub inverse_consistency_iters: usize,
    /// Refinement of the pool-factor-1 level; `None` skips it.
    pub instopt: Option<InstOptConfig>,
    /// Refinement of the fused field at full resolution; `None` returns the
    /// weighted sum as is.
    pub refine: Option<InstOptConfig>,
    /// Register the pool-factor-1 level octant by octant.
    pub split_level1: bool,
    pub mind: MindConfig,
    pub preset_name: Option<String>,
}

pub const PRESET_NAMES: [&str; 2] = ["remind2reg", "clem"];

/// Full-resolution refinement of the fused field used by the presets.
pub fn default_refine() -> InstOptConfig {
    InstOptConfig {
        iterations: 40,
        smooth_kernel: 5,
        ..Default::default()
    }
}

impl PipelineConfig {
    /// Intraoperative ultrasound to preoperative MRI: pooling 1, 2, 4, 6 with
    /// weights 0.10, 0.27, 0.27, 0.36 and 15 instance-optimization steps with
    /// a width-5 smoothing kernel.
    pub fn remind2reg() -> Self {
        Self {
            levels: vec![
                LevelConfig::new(1, 2, 0.10),
                LevelConfig::new(2, 3, 0.27),
                LevelConfig::new(4, 3, 0.27),
                LevelConfig::new(6, 4, 0.36),
            ],
            inverse_consistency_iters: 10,
            instopt: Some(InstOptConfig {
                iterations: 15,
                smooth_kernel: 5,
                ..Default::default()
            }),
            refine: Some(default_refine()),
            split_level1: true,
            mind: MindConfig::default(),
            preset_name: Some("remind2reg".into()),
        }
    }

    /// Correlative light/electron microscopy: pooling 1, 2, 4 with equal
    /// weights.
    pub fn clem() -> Self {
        let third = 1.0 / 3.0;
        Self {
            levels: vec![
                LevelConfig::new(1, 2, third),
                LevelConfig::new(2, 3, third),
                LevelConfig::new(4, 4, third),
            ],
            inverse_consistency_iters: 10,
            instopt: Some(InstOptConfig {
                iterations: 15,
                smooth_kernel: 5,
                ..Default::default()
            }),
            refine: Some(default_refine()),
            split_level1: true,
            mind: MindConfig::default(),
            preset_name: Some("clem".into()),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "remind2reg" => Ok(Self::remind2reg()),
            "clem" => Ok(Self::clem()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset '{other}' (available: {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    pub fn weight_sum(&self) -> f64 {
        self.levels.iter().map(|l| l.weight).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one level is required".into(),
            ));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.pool_factor == 0 {
                return Err(Error::InvalidConfig(format!(
                    "level {}: pool_factor must be at least 1",
                    i + 1
                )));
            }
            if l.search_radius == 0 {
                return Err(Error::InvalidConfig(format!(
                    "level {}: search_radius must be at least 1",
                    i + 1
                )));
            }
            if !(l.weight.is_finite() && (0.0..=1.0).contains(&l.weight)) {
                return Err(Error::InvalidConfig(format!(
                    "level {}: weight {} outside [0, 1]",
                    i + 1,
                    l.weight
                )));
            }
            l.convex_schedule
                .validate()
                .map_err(|e| Error::InvalidConfig(format!("level {}: {e}", i + 1)))?;
        }
        let sum = self.weight_sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "level weights sum to {sum}, expected 1"
            )));
        }
        if self.levels.iter().filter(|l| l.pool_factor == 1).count() > 1 {
            return Err(Error::InvalidConfig(
                "only one level may use pool_factor 1".into(),
            ));
        }
        if self.inverse_consistency_iters == 0 {
            return Err(Error::InvalidConfig(
                "inverse_consistency_iters must be at least 1".into(),
            ));
        }
        if let Some(io) = &self.instopt {
            io.validate()?;
        }
        if let Some(io) = &self.refine {
            io.validate()?;
        }
        self.mind.validate()
    }
}

/// One block of an octant split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub offset: [usize; 3],
    pub extent: Dims,
}

/// Where the eight octants sit in the parent grid. Blocks are ordered with
/// the `d` half varying fastest, then `w`, then `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct OctantLayout {
    pub grid: Grid,
    pub blocks: [Block; 8],
}

impl OctantLayout {
    pub fn new(grid: Grid) -> Result<Self> {
        let dims = grid.dims();
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument(format!(
                "octant split needs every dim >= 2, got {dims:?}"
            )));
        }
        let halves = dims.map(|n| [(0, n / 2), (n / 2, n - n / 2)]);
        let mut blocks = [Block {
            offset: [0; 3],
            extent: [0; 3],
        }; 8];
        let mut k = 0;
        for (oh, eh) in halves[0] {
            for (ow, ew) in halves[1] {
                for (od, ed) in halves[2] {
                    blocks[k] = Block {
                        offset: [oh, ow, od],
                        extent: [eh, ew, ed],
                    };
                    k += 1;
                }
            }
        }
        Ok(Self { grid, blocks })
    }
}

fn copy_block<T: Copy>(src: &[T], grid: &Grid, chan: usize, block: &Block) -> Vec<T> {
    let [eh, ew, ed] = block.extent;
    let mut out = Vec::with_capacity(eh * ew * ed * chan);
    for h in 0..eh {
        for w in 0..ew {
            let start =
                grid.index(block.offset[0] + h, block.offset[1] + w, block.offset[2]) * chan;
            out.extend_from_slice(&src[start..start + ed * chan]);
        }
    }
    out
}

fn paste_block<T: Copy>(dst: &mut [T], grid: &Grid, chan: usize, block: &Block, src: &[T]) {
    let [eh, ew, ed] = block.extent;
    for h in 0..eh {
        for w in 0..ew {
            let start =
                grid.index(block.offset[0] + h, block.offset[1] + w, block.offset[2]) * chan;
            let from = (h * ew + w) * ed * chan;
            dst[start..start + ed * chan].copy_from_slice(&src[from..from + ed * chan]);
        }
    }
}

/// Split at `floor(dim / 2)` along every axis into eight disjoint blocks.
pub fn split_octants(fv: &FeatureVolume) -> Result<(Vec<FeatureVolume>, OctantLayout)> {
    let layout = OctantLayout::new(*fv.grid())?;
    let chan = fv.channels();
    let parts = layout
        .blocks
        .iter()
        .map(|b| {
            let grid = Grid::new(b.extent, fv.grid().spacing())?;
            FeatureVolume::new(grid, chan, copy_block(fv.data(), fv.grid(), chan, b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((parts, layout))
}

/// Inverse of [`split_octants`] for feature blocks.
pub fn splice_feature_octants(
    parts: &[FeatureVolume],
    layout: &OctantLayout,
) -> Result<FeatureVolume> {
    check_parts(parts.iter().map(|p| p.dims()), layout)?;
    let chan = parts[0].channels();
    let mut data = vec![0.0; layout.grid.len() * chan];
    for (p, b) in parts.iter().zip(&layout.blocks) {
        paste_block(&mut data, &layout.grid, chan, b, p.data());
    }
    FeatureVolume::new(layout.grid, chan, data)
}

fn check_parts(dims: impl ExactSizeIterator<Item = Dims>, layout: &OctantLayout) -> Result<()> {
    if dims.len() != 8 {
        return Err(Error::LengthMismatch {
            what: "octant blocks",
            expected: 8,
            found: dims.len(),
        });
    }
    for (d, b) in dims.zip(&layout.blocks) {
        if d != b.extent {
            return Err(Error::DimMismatch {
                expected: b.extent,
                found: d,
            });
        }
    }
    Ok(())
}

/// Write eight block fields back at their offsets. Seams are left as they are.
pub fn splice_octants(
    fields: &[DisplacementField],
    layout: &OctantLayout,
) -> Result<DisplacementField> {
    check_parts(fields.iter().map(|f| f.dims()), layout)?;
    let mut vectors: Vec<Vec3> = vec![[0.0; 3]; layout.grid.len()];
    for (f, b) in fields.iter().zip(&layout.blocks) {
        paste_block(&mut vectors, &layout.grid, 1, b, f.vectors());
    }
    DisplacementField::new(layout.grid, vectors)
}

/// Correlation, coupled convex optimization in both directions, then the
/// inverse-consistency constraint. Returns the forward field.
fn three_step(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    radius: usize,
    sched: &ConvexSchedule,
    ic_iters: usize,
) -> Result<DisplacementField> {
    let solve = |a: &FeatureVolume, b: &FeatureVolume| -> Result<DisplacementField> {
        let cv = cost_volume(a, b, radius)?;
        // coupling weights are relative to the typical cost magnitude
        let scale = cv.mean_cost();
        let sched = if scale > 0.0 {
            sched.scaled(scale)
        } else {
            sched.clone()
        };
        coupled_convex(&cv, &sched)
    };
    let (fwd, bwd) = rayon::join(|| solve(fixed, moving), || solve(moving, fixed));
    let (fwd, _) = inverse_consistent(&fwd?, &bwd?, ic_iters)?;
    Ok(fwd)
}

/// Pool both feature volumes by the level's factor and run the three-step
/// stack on the pooled grid.
pub fn run_level(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    lc: &LevelConfig,
    ic_iters: usize,
) -> Result<DisplacementField> {
    fixed.require_compatible(moving)?;
    let ff = fixed.avg_pool(lc.pool_factor)?;
    let fm = moving.avg_pool(lc.pool_factor)?;
    three_step(&ff, &fm, lc.search_radius, &lc.convex_schedule, ic_iters)
}

/// Octant-wise three-step stack at full resolution, spliced back together.
pub fn run_split_level(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    lc: &LevelConfig,
    ic_iters: usize,
) -> Result<DisplacementField> {
    fixed.require_compatible(moving)?;
    let ff = fixed.avg_pool(lc.pool_factor)?;
    let fm = moving.avg_pool(lc.pool_factor)?;
    let (parts_f, layout) = split_octants(&ff)?;
    let (parts_m, _) = split_octants(&fm)?;
    let fields = parts_f
        .par_iter()
        .zip(parts_m.par_iter())
        .map(|(a, b)| three_step(a, b, lc.search_radius, &lc.convex_schedule, ic_iters))
        .collect::<Result<Vec<_>>>()?;
    splice_octants(&fields, &layout)
}

/// Upsample every level field to `full_dims`, scale by its weight and sum.
pub fn multilevel_fuse(
    fields: &[DisplacementField],
    cfg: &PipelineConfig,
    full_dims: Dims,
) -> Result<DisplacementField> {
    if fields.len() != cfg.levels.len() {
        return Err(Error::LengthMismatch {
            what: "level fields",
            expected: cfg.levels.len(),
            found: fields.len(),
        });
    }
    let upsampled = fields
        .iter()
        .zip(&cfg.levels)
        .map(|(f, l)| upsample_field(f, full_dims, l.pool_factor as f64))
        .collect::<Result<Vec<_>>>()?;
    let grid = *upsampled[0].grid();
    let mut acc: Vec<Vec3> = vec![[0.0; 3]; grid.len()];
    for (f, l) in upsampled.iter().zip(&cfg.levels) {
        acc.par_iter_mut()
            .zip(f.vectors().par_iter())
            .for_each(|(a, u)| {
                for k in 0..3 {
                    a[k] += l.weight * u[k];
                }
            });
    }
    DisplacementField::new(grid, acc)
}

#[derive(Clone, Debug)]
pub struct LevelReport {
    pub pool_factor: usize,
    pub pooled_dims: Dims,
    pub weight: f64,
    pub split: bool,
    pub elapsed: Duration,
    pub mean_norm: f64,
    /// Objective before and after instance optimization, if it ran here.
    pub instopt_loss: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub field: DisplacementField,
    pub levels: Vec<LevelReport>,
    pub feature_time: Duration,
    /// Objective before and after refining the fused field, with its time.
    pub refine: Option<(f64, f64, Duration)>,
}

/// Full pipeline. The returned field lives on the fixed grid and maps voxel
/// `v` to `v + phi(v)` in moving-image voxel coordinates.
pub fn register(
    fixed: &Volume3,
    moving: &Volume3,
    cfg: &PipelineConfig,
) -> Result<DisplacementField> {
    Ok(register_detailed(fixed, moving, cfg)?.field)
}

pub fn register_detailed(
    fixed: &Volume3,
    moving: &Volume3,
    cfg: &PipelineConfig,
) -> Result<Registration> {
    cfg.validate()?;
    fixed.grid().require_same_dims(moving.grid())?;
    let full = *fixed.grid();

    let t0 = Instant::now();
    let (ff, fm) = rayon::join(|| extract(fixed, &cfg.mind), || extract(moving, &cfg.mind));
    let (ff, fm) = (ff?, fm?);
    let feature_time = t0.elapsed();

    let mut fields = Vec::with_capacity(cfg.levels.len());
    let mut reports = Vec::with_capacity(cfg.levels.len());
    for lc in &cfg.levels {
        let start = Instant::now();
        let pooled = full.pooled(lc.pool_factor);
        if lc.weight == 0.0 {
            // contributes exactly nothing to the fused field
            fields.push(DisplacementField::zeros(pooled));
            reports.push(LevelReport {
                pool_factor: lc.pool_factor,
                pooled_dims: pooled.dims(),
                weight: 0.0,
                split: false,
                elapsed: start.elapsed(),
                mean_norm: 0.0,
                instopt_loss: None,
            });
            continue;
        }
        let finest = lc.pool_factor == 1;
        let split = finest && cfg.split_level1 && full.dims().iter().all(|&n| n >= 2);
        let mut field = if split {
            run_split_level(&ff, &fm, lc, cfg.inverse_consistency_iters)?
        } else {
            run_level(&ff, &fm, lc, cfg.inverse_consistency_iters)?
        };
        let mut instopt_loss = None;
        if finest {
            if let Some(io) = &cfg.instopt {
                let trace = instance_optimize_traced(&ff, &fm, &field, io)?;
                instopt_loss = Some((trace.initial_loss(), trace.final_loss()));
                field = trace.field;
            }
        }
        let report = LevelReport {
            pool_factor: lc.pool_factor,
            pooled_dims: pooled.dims(),
            weight: lc.weight,
            split,
            elapsed: start.elapsed(),
            mean_norm: field.mean_norm(),
            instopt_loss,
        };
        log::info!(
            "level n={} R={} dims={:?}: mean |phi| {:.4} voxels in {:.2?}",
            lc.pool_factor,
            lc.search_radius,
            report.pooled_dims,
            report.mean_norm,
            report.elapsed
        );
        fields.push(field);
        reports.push(report);
    }
    // pooling and upsampling round-trip the spacing through n * s / n
    let mut field = multilevel_fuse(&fields, cfg, full.dims())?.with_spacing(full.spacing())?;
    let mut refine = None;
    if let Some(io) = &cfg.refine {
        let start = Instant::now();
        let trace = instance_optimize_traced(&ff, &fm, &field, io)?;
        refine = Some((trace.initial_loss(), trace.final_loss(), start.elapsed()));
        log::info!(
            "refinement: loss {:.4e} -> {:.4e}",
            trace.initial_loss(),
            trace.final_loss()
        );
        field = trace.field;
    }
    Ok(Registration {
        field,
        levels: reports,
        feature_time,
        refine,
    })
}
