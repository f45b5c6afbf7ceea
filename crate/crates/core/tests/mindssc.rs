#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use mcbo_core::corr::{argmin_disp, cost_volume};
use mcbo_core::mindssc::{extract, flip_permutation, MindConfig, MIND_CHANNELS};
use mcbo_core::volgrid::{FeatureVolume, Volume3};
use proptest::prelude::*;

const DIRS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [0, -1, 0],
    [0, 0, -1],
    [0, 0, 1],
    [0, 1, 0],
    [1, 0, 0],
];

// every perpendicular pair i < j in order
fn pairs() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..6 {
        for j in i + 1..6 {
            let dot: isize = (0..3).map(|a| DIRS[i][a] * DIRS[j][a]).sum();
            if dot == 0 {
                out.push((i, j));
            }
        }
    }
    out
}

fn naive(vol: &Volume3, cfg: &MindConfig) -> Vec<f64> {
    let [hn, wn, dn] = vol.dims();
    let s = cfg.dilation as isize;
    let r = cfg.patch_radius as isize;
    let at = |h: isize, w: isize, d: isize| vol.get(clamp(h, hn), clamp(w, wn), clamp(d, dn));
    let mut dist = Vec::new();
    for h in 0..hn as isize {
        for w in 0..wn as isize {
            for d in 0..dn as isize {
                for (i, j) in pairs() {
                    let (a, b) = (DIRS[i].map(|x| x * s), DIRS[j].map(|x| x * s));
                    let mut acc = 0.0;
                    for ph in -r..=r {
                        for pw in -r..=r {
                            for pd in -r..=r {
                                let x = at(h + ph + a[0], w + pw + a[1], d + pd + a[2]);
                                let y = at(h + ph + b[0], w + pw + b[1], d + pd + b[2]);
                                acc += (x - y) * (x - y);
                            }
                        }
                    }
                    dist.push(acc);
                }
            }
        }
    }
    let var: Vec<f64> = dist
        .chunks(12)
        .map(|c| c.iter().sum::<f64>() / 12.0)
        .collect();
    let floor = cfg
        .epsilon
        .max(1e-3 * var.iter().sum::<f64>() / var.len() as f64);
    dist.chunks(12)
        .zip(&var)
        .flat_map(|(c, &v)| {
            c.iter()
                .map(move |x| (-x / v.max(floor)).exp())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn single_bright_voxel_matches_naive_oracle() {
    let g = grid([8, 8, 8]);
    let vol =
        Volume3::from_fn(g, |h, w, d| if [h, w, d] == [3, 4, 2] { 1.0 } else { 0.0 }).unwrap();
    for cfg in [
        MindConfig::default(),
        MindConfig {
            dilation: 1,
            patch_radius: 0,
            epsilon: 1e-6,
        },
        MindConfig {
            dilation: 3,
            patch_radius: 2,
            epsilon: 1e-6,
        },
    ] {
        let fv = extract(&vol, &cfg).unwrap();
        assert_eq!(fv.channels(), MIND_CHANNELS);
        let oracle = naive(&vol, &cfg);
        let worst = fv
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(worst, 0.0, "{cfg:?}");
    }
}

#[test]
fn random_volume_matches_naive_oracle() {
    let vol = random_volume([6, 5, 7], 9);
    let cfg = MindConfig::default();
    let fv = extract(&vol, &cfg).unwrap();
    for (a, b) in fv.data().iter().zip(naive(&vol, &cfg)) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn flip(vol: &Volume3, axis: usize) -> Volume3 {
    let dims = vol.dims();
    Volume3::from_fn(*vol.grid(), |h, w, d| {
        let mut p = [h, w, d];
        p[axis] = dims[axis] - 1 - p[axis];
        vol.get(p[0], p[1], p[2])
    })
    .unwrap()
}

#[test]
fn extraction_commutes_with_axis_flips() {
    let vol = random_volume([7, 6, 5], 12);
    let cfg = MindConfig::default();
    let base = extract(&vol, &cfg).unwrap();
    let dims = vol.dims();
    for axis in 0..3 {
        let perm = flip_permutation(axis);
        let flipped = extract(&flip(&vol, axis), &cfg).unwrap();
        let g = *vol.grid();
        for i in 0..g.len() {
            let [h, w, d] = g.coords(i);
            let mut q = [h, w, d];
            q[axis] = dims[axis] - 1 - q[axis];
            for c in 0..MIND_CHANNELS {
                let a = flipped.get(h, w, d, perm[c]);
                let b = base.get(q[0], q[1], q[2], c);
                assert!((a - b).abs() < 1e-12, "axis {axis} channel {c}: {a} vs {b}");
            }
        }
    }
}

fn smooth_volume(dims: [usize; 3], seed: u64) -> Volume3 {
    mcbo_core::evalkit::Phantom::random(dims, seed)
        .render(grid(dims))
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn features_are_affine_intensity_invariant(a in 0.1f64..20.0, b in -5.0f64..5.0, seed in 0u64..500) {
        let vol = smooth_volume([7, 7, 7], seed);
        let cfg = MindConfig::default();
        let mapped = Volume3::new(*vol.grid(), vol.data().iter().map(|x| a * x + b).collect()).unwrap();
        let f0 = extract(&vol, &cfg).unwrap();
        let f1 = extract(&mapped, &cfg).unwrap();
        for (x, y) in f0.data().iter().zip(f1.data()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
        // the correlation search sees no motion either way
        let same = argmin_disp(&cost_volume(&f0, &f0, 1).unwrap());
        let cross = argmin_disp(&cost_volume(&f0, &f1, 1).unwrap());
        prop_assert_eq!(same, cross);
    }

    #[test]
    fn channels_lie_in_unit_interval(dims in [1usize..7, 1usize..7, 1usize..7], seed in 0u64..500, dil in 1usize..4, pr in 0usize..3) {
        let vol = random_volume(dims, seed);
        let fv: FeatureVolume = extract(&vol, &MindConfig { dilation: dil, patch_radius: pr, epsilon: 1e-6 }).unwrap();
        prop_assert_eq!(fv.channels(), 12);
        prop_assert_eq!(fv.data().len(), vol.data().len() * 12);
        for &x in fv.data() {
            prop_assert!(x > 0.0 && x <= 1.0);
        }
    }
}
