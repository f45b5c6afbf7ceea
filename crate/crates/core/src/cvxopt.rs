//! Weight-balanced coupled convex optimization of a cost volume and the
//! inverse-consistency constraint between forward and backward fields.

use rayon::prelude::*;

use crate::corr::{argmin_disp, CostVolume};
use crate::error::{Error, Result};
use crate::volgrid::{compose, smooth_box, DisplacementField, Vec3};

/// Alternation schedule: one coupling weight per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexSchedule {
    pub coupling_weights: Vec<f64>,
    pub smooth_kernel: usize,
    pub smooth_passes: usize,
}

impl Default for ConvexSchedule {
    fn default() -> Self {
        Self {
            coupling_weights: vec![1.0, 3.0, 10.0],
            smooth_kernel: 3,
            smooth_passes: 2,
        }
    }
}

impl ConvexSchedule {
    pub fn iterations(&self) -> usize {
        self.coupling_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coupling_weights.is_empty() {
            return Err(Error::InvalidConfig(
                "convex schedule needs at least one iteration".into(),
            ));
        }
        if self
            .coupling_weights
            .iter()
            .any(|&l| !(l.is_finite() && l > 0.0))
        {
            return Err(Error::InvalidConfig(format!(
                "coupling weights must be positive, got {:?}",
                self.coupling_weights
            )));
        }
        if self.coupling_weights.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::InvalidConfig(format!(
                "coupling weights must be nondecreasing, got {:?}",
                self.coupling_weights
            )));
        }
        if self.smooth_kernel == 0 || self.smooth_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "smooth kernel must be odd, got {}",
                self.smooth_kernel
            )));
        }
        if self.smooth_passes == 0 {
            return Err(Error::InvalidConfig(
                "smooth passes must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Same schedule with every coupling weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coupling_weights: self.coupling_weights.iter().map(|l| l * factor).collect(),
            ..self.clone()
        }
    }
}

/// Coupled similarity step: per voxel, the candidate minimizing
/// `cost(v, d) + lambda * |d - z(v)|^2`.
fn coupled_argmin(cv: &CostVolume, z: &DisplacementField, lambda: f64) -> DisplacementField {
    let cands = cv.candidates();
    let order = cv.tie_order();
    let vectors = (0..cv.grid().len())
        .into_par_iter()
        .map(|v| {
            let costs = cv.voxel_costs(v);
            let target = z.vectors()[v];
            let energy = |k: usize| {
                let c = cands[k];
                let mut pen = 0.0;
                for a in 0..3 {
                    let e = c[a] as f64 - target[a];
                    pen += e * e;
                }
                costs[k] as f64 + lambda * pen
            };
            let mut best = order[0];
            let mut best_e = energy(best);
            for &k in &order[1..] {
                let e = energy(k);
                if e < best_e {
                    best = k;
                    best_e = e;
                }
            }
            cands[best].map(f64::from)
        })
        .collect();
    DisplacementField::from_parts_unchecked(*cv.grid(), vectors)
}

/// Alternate coupled similarity steps and box smoothing, starting from the
/// unregularized argmin, and return the uniform average of the smoothed
/// iterates.
pub fn coupled_convex(cv: &CostVolume, sched: &ConvexSchedule) -> Result<DisplacementField> {
    sched.validate()?;
    let k = sched.iterations() as f64;
    let mut z = argmin_disp(cv);
    let mut sum = vec![[0.0f64; 3]; cv.grid().len()];
    for &lambda in &sched.coupling_weights {
        let y = coupled_argmin(cv, &z, lambda);
        z = smooth_box(&y, sched.smooth_kernel, sched.smooth_passes)?;
        sum.par_iter_mut()
            .zip(z.vectors().par_iter())
            .for_each(|(s, u)| {
                for a in 0..3 {
                    s[a] += u[a];
                }
            });
    }
    let vectors = sum.into_iter().map(|s| s.map(|x| x / k)).collect();
    Ok(DisplacementField::from_parts_unchecked(*cv.grid(), vectors))
}

/// Mean norm of `compose(bwd, fwd)`: how far forward-then-backward lands
/// from the starting voxel.
pub fn consistency_residual(fwd: &DisplacementField, bwd: &DisplacementField) -> Result<f64> {
    let round_trip = compose(bwd, fwd)?;
    Ok(round_trip.mean_norm())
}

fn symmetrize(a: &DisplacementField, b: &DisplacementField) -> DisplacementField {
    let grid = *a.grid();
    let vectors = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let [h, w, d] = grid.coords(i);
            let u = a.vectors()[i];
            let o: Vec3 = b.sample([h as f64 + u[0], w as f64 + u[1], d as f64 + u[2]]);
            [
                0.5 * (u[0] - o[0]),
                0.5 * (u[1] - o[1]),
                0.5 * (u[2] - o[2]),
            ]
        })
        .collect();
    DisplacementField::from_parts_unchecked(grid, vectors)
}

/// Result of [`inverse_consistent_traced`]: the final pair and the residual
/// before each accepted update and after the last one.
#[derive(Clone, Debug)]
pub struct ConsistencyTrace {
    pub forward: DisplacementField,
    pub backward: DisplacementField,
    pub residuals: Vec<f64>,
    pub iterations_run: usize,
}

/// Run `iters` simultaneous updates
/// `fwd' = (fwd - bwd(v + fwd)) / 2`, `bwd' = (bwd - fwd(v + bwd)) / 2`.
///
/// An update that would raise the residual is not taken and iteration stops,
/// so the returned pair is never less consistent than the input.
pub fn inverse_consistent(
    fwd: &DisplacementField,
    bwd: &DisplacementField,
    iters: usize,
) -> Result<(DisplacementField, DisplacementField)> {
    let t = inverse_consistent_traced(fwd, bwd, iters)?;
    Ok((t.forward, t.backward))
}

pub fn inverse_consistent_traced(
    fwd: &DisplacementField,
    bwd: &DisplacementField,
    iters: usize,
) -> Result<ConsistencyTrace> {
    fwd.grid().require_same_dims(bwd.grid())?;
    if iters == 0 {
        return Err(Error::InvalidArgument(
            "inverse consistency needs at least one iteration".into(),
        ));
    }
    let mut f = fwd.clone();
    let mut b = bwd.clone();
    let mut residual = consistency_residual(&f, &b)?;
    let mut residuals = vec![residual];
    let mut run = 0;
    for _ in 0..iters {
        let f_next = symmetrize(&f, &b);
        let b_next = symmetrize(&b, &f);
        let r_next = consistency_residual(&f_next, &b_next)?;
        if r_next > residual {
            log::debug!("inverse consistency stopped after {run} iterations (residual {residual:.4e} -> {r_next:.4e})");
            break;
        }
        f = f_next;
        b = b_next;
        residual = r_next;
        residuals.push(residual);
        run += 1;
    }
    Ok(ConsistencyTrace {
        forward: f,
        backward: b,
        residuals,
        iterations_run: run,
    })
}

/// Raw update sequence without the acceptance check; entry `k` of the
/// returned residuals is measured after `k` updates.
pub fn consistency_residual_trace(
    fwd: &DisplacementField,
    bwd: &DisplacementField,
    iters: usize,
) -> Result<Vec<f64>> {
    fwd.grid().require_same_dims(bwd.grid())?;
    let mut f = fwd.clone();
    let mut b = bwd.clone();
    let mut out = vec![consistency_residual(&f, &b)?];
    for _ in 0..iters {
        let f_next = symmetrize(&f, &b);
        let b_next = symmetrize(&b, &f);
        f = f_next;
        b = b_next;
        out.push(consistency_residual(&f, &b)?);
    }
    Ok(out)
}
