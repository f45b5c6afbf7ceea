#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use mcbo_core::corr::{argmin_disp, candidates, CostVolume};
use mcbo_core::cvxopt::{
    consistency_residual, coupled_convex, inverse_consistent, inverse_consistent_traced,
    ConvexSchedule,
};
use mcbo_core::volgrid::{smooth_box, DisplacementField, Grid, Vec3};
use proptest::prelude::*;
use rand::Rng;

// scan order for the tie-break: by norm, then lexicographic
fn tie_order(cands: &[[i32; 3]]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    idx.sort_by_key(|&k| (cands[k].iter().map(|x| x * x).sum::<i32>(), cands[k]));
    idx
}

fn coupled_step(costs: &[f32], cands: &[[i32; 3]], z: &[Vec3], lambda: f64) -> Vec<Vec3> {
    let n = cands.len();
    let order = tie_order(cands);
    z.iter()
        .enumerate()
        .map(|(v, t)| {
            let e = |k: usize| {
                let c = cands[k];
                costs[v * n + k] as f64
                    + lambda * (0..3).map(|a| (c[a] as f64 - t[a]).powi(2)).sum::<f64>()
            };
            let mut best = order[0];
            for &k in &order[1..] {
                if e(k) < e(best) {
                    best = k;
                }
            }
            cands[best].map(f64::from)
        })
        .collect()
}

fn box3(grid: Grid, u: &[Vec3], radius: isize, passes: usize) -> Vec<Vec3> {
    let dims = grid.dims();
    let width = (2 * radius + 1) as f64;
    let mut cur = u.to_vec();
    for _ in 0..passes {
        for axis in 0..3 {
            let mut next = vec![[0.0; 3]; cur.len()];
            for (i, out) in next.iter_mut().enumerate() {
                let p = grid.coords(i);
                for off in -radius..=radius {
                    let mut q = p.map(|x| x as isize);
                    q[axis] += off;
                    let j = grid.index(
                        clamp(q[0], dims[0]),
                        clamp(q[1], dims[1]),
                        clamp(q[2], dims[2]),
                    );
                    for a in 0..3 {
                        out[a] += cur[j][a];
                    }
                }
                for a in 0..3 {
                    out[a] /= width;
                }
            }
            cur = next;
        }
    }
    cur
}

fn oracle(grid: Grid, radius: usize, costs: &[f32], sched: &ConvexSchedule) -> Vec<Vec3> {
    let cands = candidates(radius);
    let mut z = coupled_step(costs, &cands, &vec![[0.0; 3]; grid.len()], 0.0);
    let mut sum = vec![[0.0; 3]; grid.len()];
    let r = (sched.smooth_kernel / 2) as isize;
    for &lambda in &sched.coupling_weights {
        let y = coupled_step(costs, &cands, &z, lambda);
        z = box3(grid, &y, r, sched.smooth_passes);
        for (s, u) in sum.iter_mut().zip(&z) {
            for a in 0..3 {
                s[a] += u[a];
            }
        }
    }
    let k = sched.coupling_weights.len() as f64;
    sum.into_iter().map(|s| s.map(|x| x / k)).collect()
}

fn outlier_costs(grid: Grid, radius: usize, at: [usize; 3], pref: [i32; 3]) -> Vec<f32> {
    let cands = candidates(radius);
    let mut costs = Vec::with_capacity(grid.len() * cands.len());
    for v in 0..grid.len() {
        let target = if grid.coords(v) == at { pref } else { [0; 3] };
        for c in &cands {
            costs.push((0..3).map(|a| ((c[a] - target[a]) as f32).powi(2)).sum());
        }
    }
    costs
}

#[test]
fn outlier_is_damped_as_the_oracle_predicts() {
    let g = grid([6, 6, 6]);
    let centre = [2, 3, 3];
    let costs = outlier_costs(g, 2, centre, [2, 0, 0]);
    let cv = CostVolume::from_costs(g, 2, costs.clone()).unwrap();
    let sched = ConvexSchedule {
        coupling_weights: vec![1.0, 3.0, 10.0],
        smooth_kernel: 3,
        smooth_passes: 2,
    };
    let out = coupled_convex(&cv, &sched).unwrap();
    let expected = oracle(g, 2, &costs, &sched);
    for (u, e) in out.vectors().iter().zip(&expected) {
        assert!(dist(*u, *e) < 1e-6);
    }
    let [h, w, d] = centre;
    let mag = mcbo_core::volgrid::norm(out.get(h, w, d));
    assert!(mag < 2.0, "outlier magnitude {mag}");
}

#[test]
fn random_costs_match_the_oracle() {
    let g = grid([4, 5, 3]);
    let mut r = rng(5);
    let costs: Vec<f32> = (0..g.len() * 27)
        .map(|_| r.random_range(0.0..4.0))
        .collect();
    let cv = CostVolume::from_costs(g, 1, costs.clone()).unwrap();
    for sched in [
        ConvexSchedule::default(),
        ConvexSchedule {
            coupling_weights: vec![0.5, 0.5, 2.0, 8.0],
            smooth_kernel: 5,
            smooth_passes: 1,
        },
    ] {
        let out = coupled_convex(&cv, &sched).unwrap();
        let expected = oracle(g, 1, &costs, &sched);
        for (u, e) in out.vectors().iter().zip(&expected) {
            assert!(dist(*u, *e) < 1e-9);
        }
    }
}

#[test]
fn one_iteration_is_the_smoothed_coupled_step() {
    let g = grid([5, 5, 5]);
    let mut r = rng(6);
    let costs: Vec<f32> = (0..g.len() * 27)
        .map(|_| r.random_range(0.0..2.0))
        .collect();
    let cv = CostVolume::from_costs(g, 1, costs.clone()).unwrap();
    let sched = ConvexSchedule {
        coupling_weights: vec![2.0],
        smooth_kernel: 3,
        smooth_passes: 2,
    };
    let out = coupled_convex(&cv, &sched).unwrap();
    let init = argmin_disp(&cv);
    let y = coupled_step(&costs, &candidates(1), init.vectors(), 2.0);
    let expected = smooth_box(&DisplacementField::new(g, y).unwrap(), 3, 2).unwrap();
    assert_eq!(out, expected);
}

#[test]
fn stiff_coupling_without_smoothing_returns_the_argmin() {
    let g = grid([4, 4, 4]);
    let mut r = rng(7);
    let costs: Vec<f32> = (0..g.len() * 125)
        .map(|_| r.random_range(0.0..10.0))
        .collect();
    let cv = CostVolume::from_costs(g, 2, costs).unwrap();
    let sched = ConvexSchedule {
        coupling_weights: vec![1e6],
        smooth_kernel: 1,
        smooth_passes: 1,
    };
    assert_eq!(coupled_convex(&cv, &sched).unwrap(), argmin_disp(&cv));
}

#[test]
fn one_sided_translation_splits_evenly() {
    let g = grid([8, 8, 8]);
    let fwd = DisplacementField::uniform(g, [2.0, 0.0, 0.0]).unwrap();
    let bwd = DisplacementField::zeros(g);
    let (f, b) = inverse_consistent(&fwd, &bwd, 1).unwrap();
    for [h, w, d] in interior([8, 8, 8], 2) {
        assert_eq!(f.get(h, w, d), [1.0, 0.0, 0.0]);
        assert_eq!(b.get(h, w, d), [-1.0, 0.0, 0.0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn output_stays_in_search_window(dims in [1usize..5, 1usize..5, 1usize..5], r in 1usize..3, seed in 0u64..500) {
        let g = grid(dims);
        let n = (2 * r + 1).pow(3);
        let mut rr = rng(seed);
        let costs: Vec<f32> = (0..g.len() * n).map(|_| rr.random_range(0.0..3.0)).collect();
        let cv = CostVolume::from_costs(g, r, costs).unwrap();
        let a = coupled_convex(&cv, &ConvexSchedule::default()).unwrap();
        for u in a.vectors() {
            prop_assert!(u.iter().all(|x| x.abs() <= r as f64 + 1e-12));
        }
        prop_assert_eq!(a, coupled_convex(&cv, &ConvexSchedule::default()).unwrap());
    }

    #[test]
    fn consistency_residual_never_increases(seed in 0u64..500, iters in 1usize..8) {
        let fwd = smooth_field([8, 8, 8], 2.5, seed);
        let bwd = smooth_field([8, 8, 8], 2.5, seed + 1000);
        let t = inverse_consistent_traced(&fwd, &bwd, iters).unwrap();
        for p in t.residuals.windows(2) {
            prop_assert!(p[1] <= p[0]);
        }
        let before = consistency_residual(&fwd, &bwd).unwrap();
        let after = consistency_residual(&t.forward, &t.backward).unwrap();
        prop_assert!(after <= before);
    }
}
