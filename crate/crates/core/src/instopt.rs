//! Adam instance optimization of a dense displacement field.
//!
//! Objective, summed over voxels `v` and channels `c`:
//!
//! ```text
//! L(phi) = sum (F(v, c) - M(v + phi(v), c))^2  +  beta * sum |grad phi(v)|^2
//! ```
//!
//! `M` is sampled trilinearly with border replication and the spatial
//! gradient uses forward differences inside the grid. The field lives on the
//! full-resolution grid; regularity between steps comes from a box filter
//! applied after every update.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::{
    grad_stencil, ordered_sum, smooth_box, DisplacementField, FeatureVolume, Grid, Vec3,
};

#[derive(Clone, Debug, PartialEq)]
pub struct InstOptConfig {
    pub iterations: usize,
    pub smooth_kernel: usize,
    pub learning_rate: f64,
    /// Weight of the diffusion regularizer.
    pub reg_weight: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Smooth after every step; otherwise once after the last step.
    pub smooth_each_step: bool,
}

impl Default for InstOptConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            smooth_kernel: 5,
            learning_rate: 0.1,
            reg_weight: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            smooth_each_step: true,
        }
    }
}

impl InstOptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.iterations == 0 {
            return bad("instopt.iterations must be at least 1".into());
        }
        if self.smooth_kernel == 0 || self.smooth_kernel.is_multiple_of(2) {
            return bad(format!(
                "instopt.smooth_kernel must be odd, got {}",
                self.smooth_kernel
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "instopt.learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(self.reg_weight.is_finite() && self.reg_weight >= 0.0) {
            return bad(format!(
                "instopt.reg_weight must be non-negative, got {}",
                self.reg_weight
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("instopt.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!(
                "instopt.adam_eps must be positive, got {}",
                self.adam_eps
            ));
        }
        Ok(())
    }
}

fn check_inputs(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    field: &DisplacementField,
) -> Result<()> {
    fixed.require_compatible(moving)?;
    fixed.grid().require_same_dims(field.grid())
}

fn data_term(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    field: &DisplacementField,
    grad: Option<&mut [Vec3]>,
) -> f64 {
    let grid = *fixed.grid();
    let chan = fixed.channels();
    let slice = grid.slice_len();
    let voxel = |i: usize, g: Option<&mut Vec3>| -> f64 {
        let [h, w, d] = grid.coords(i);
        let u = field.vectors()[i];
        let p = [h as f64 + u[0], w as f64 + u[1], d as f64 + u[2]];
        let st = grad_stencil(moving.grid(), p);
        let f = fixed.voxel(i);
        let mut loss = 0.0;
        let mut gv = [0.0; 3];
        for c in 0..chan {
            let mut m = 0.0;
            let mut dm = [0.0; 3];
            for k in 0..8 {
                let x = moving.data()[st.base.idx[k] * chan + c];
                m += st.base.weight[k] * x;
                for a in 0..3 {
                    dm[a] += st.dweight[a][k] * x;
                }
            }
            let r = f[c] - m;
            loss += r * r;
            for a in 0..3 {
                gv[a] -= 2.0 * r * dm[a];
            }
        }
        if let Some(g) = g {
            *g = gv;
        }
        loss
    };
    let partial: Vec<f64> = match grad {
        Some(grad) => grad
            .par_chunks_mut(slice)
            .enumerate()
            .map(|(h, gs)| {
                let mut acc = 0.0;
                for (j, g) in gs.iter_mut().enumerate() {
                    acc += voxel(h * slice + j, Some(g));
                }
                acc
            })
            .collect(),
        None => (0..grid.dims()[0])
            .into_par_iter()
            .map(|h| {
                let mut acc = 0.0;
                for j in 0..slice {
                    acc += voxel(h * slice + j, None);
                }
                acc
            })
            .collect(),
    };
    ordered_sum(&partial)
}

/// Diffusion energy and, if requested, its gradient added into `grad`.
fn diffusion_term(field: &DisplacementField, beta: f64, grad: Option<&mut [Vec3]>) -> f64 {
    let grid: Grid = *field.grid();
    let dims = grid.dims();
    let slice = grid.slice_len();
    let u = field.vectors();
    let energy_slice = |h: usize| {
        let mut acc = 0.0;
        for w in 0..dims[1] {
            for d in 0..dims[2] {
                let i = grid.index(h, w, d);
                let here = [h, w, d];
                for axis in 0..3 {
                    if here[axis] + 1 < dims[axis] {
                        let mut n = here;
                        n[axis] += 1;
                        let j = grid.index(n[0], n[1], n[2]);
                        for a in 0..3 {
                            let e = u[j][a] - u[i][a];
                            acc += e * e;
                        }
                    }
                }
            }
        }
        acc
    };
    let partial: Vec<f64> = (0..dims[0]).into_par_iter().map(energy_slice).collect();
    if let Some(grad) = grad {
        grad.par_chunks_mut(slice).enumerate().for_each(|(h, gs)| {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    let i = grid.index(h, w, d);
                    let here = [h, w, d];
                    let g = &mut gs[w * dims[2] + d];
                    for axis in 0..3 {
                        if here[axis] + 1 < dims[axis] {
                            let mut n = here;
                            n[axis] += 1;
                            let j = grid.index(n[0], n[1], n[2]);
                            for a in 0..3 {
                                g[a] -= 2.0 * beta * (u[j][a] - u[i][a]);
                            }
                        }
                        if here[axis] > 0 {
                            let mut n = here;
                            n[axis] -= 1;
                            let j = grid.index(n[0], n[1], n[2]);
                            for a in 0..3 {
                                g[a] += 2.0 * beta * (u[i][a] - u[j][a]);
                            }
                        }
                    }
                }
            }
        });
    }
    beta * ordered_sum(&partial)
}

/// Objective value at `field`.
pub fn loss(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    field: &DisplacementField,
    reg_weight: f64,
) -> Result<f64> {
    check_inputs(fixed, moving, field)?;
    Ok(data_term(fixed, moving, field, None) + diffusion_term(field, reg_weight, None))
}

/// Objective value and its analytic gradient with respect to every
/// displacement component.
pub fn loss_and_gradient(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    field: &DisplacementField,
    reg_weight: f64,
) -> Result<(f64, Vec<Vec3>)> {
    check_inputs(fixed, moving, field)?;
    let mut grad = vec![[0.0; 3]; field.grid().len()];
    let data = data_term(fixed, moving, field, Some(&mut grad));
    let reg = diffusion_term(field, reg_weight, Some(&mut grad));
    Ok((data + reg, grad))
}

#[derive(Clone, Debug)]
pub struct InstOptTrace {
    pub field: DisplacementField,
    /// Objective at the initial field, then after every iteration.
    pub losses: Vec<f64>,
}

impl InstOptTrace {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

pub fn instance_optimize(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    init: &DisplacementField,
    cfg: &InstOptConfig,
) -> Result<DisplacementField> {
    Ok(instance_optimize_traced(fixed, moving, init, cfg)?.field)
}

pub fn instance_optimize_traced(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    init: &DisplacementField,
    cfg: &InstOptConfig,
) -> Result<InstOptTrace> {
    cfg.validate()?;
    check_inputs(fixed, moving, init)?;
    let beta = cfg.reg_weight;
    let n = init.grid().len();
    let mut phi = init.clone();
    let mut m1 = vec![[0.0f64; 3]; n];
    let mut m2 = vec![[0.0f64; 3]; n];
    let mut losses = Vec::with_capacity(cfg.iterations + 1);

    for it in 1..=cfg.iterations {
        let (l, grad) = loss_and_gradient(fixed, moving, &phi, beta)?;
        if !l.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: it - 1,
                loss: l,
            });
        }
        if it == 1 {
            losses.push(l);
        }
        let bc1 = 1.0 - cfg.adam_beta1.powi(it as i32);
        let bc2 = 1.0 - cfg.adam_beta2.powi(it as i32);
        let mut vectors = phi.into_vectors();
        vectors
            .par_iter_mut()
            .zip(m1.par_iter_mut())
            .zip(m2.par_iter_mut())
            .zip(grad.par_iter())
            .for_each(|(((u, a), b), g)| {
                for k in 0..3 {
                    a[k] = cfg.adam_beta1 * a[k] + (1.0 - cfg.adam_beta1) * g[k];
                    b[k] = cfg.adam_beta2 * b[k] + (1.0 - cfg.adam_beta2) * g[k] * g[k];
                    let mhat = a[k] / bc1;
                    let vhat = b[k] / bc2;
                    u[k] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
                }
            });
        phi =
            DisplacementField::new(*init.grid(), vectors).map_err(|_| Error::NumericalFailure {
                iteration: it,
                loss: f64::NAN,
            })?;
        if cfg.smooth_each_step || it == cfg.iterations {
            phi = smooth_box(&phi, cfg.smooth_kernel, 1)?;
        }
        let l = loss(fixed, moving, &phi, beta)?;
        if !l.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: it,
                loss: l,
            });
        }
        losses.push(l);
    }
    log::debug!(
        "instance optimization: loss {:.6e} -> {:.6e} over {} iterations",
        losses[0],
        losses[losses.len() - 1],
        cfg.iterations
    );
    Ok(InstOptTrace { field: phi, losses })
}
