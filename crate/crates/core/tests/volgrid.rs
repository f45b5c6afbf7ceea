mod common;

use common::*;
use mcbo_core::volgrid::{
    avg_pool, compose, smooth_box, trilinear_sample, upsample_field, warp, DisplacementField, Grid,
    Volume3,
};
use proptest::prelude::*;

fn naive_pool(vol: &Volume3, n: usize) -> Vec<f64> {
    let dims = vol.dims();
    let out = dims.map(|x| x.div_ceil(n));
    let mut res = Vec::new();
    for oh in 0..out[0] {
        for ow in 0..out[1] {
            for od in 0..out[2] {
                let (mut s, mut c) = (0.0, 0.0);
                for h in oh * n..((oh + 1) * n).min(dims[0]) {
                    for w in ow * n..((ow + 1) * n).min(dims[1]) {
                        for d in od * n..((od + 1) * n).min(dims[2]) {
                            s += vol.get(h, w, d);
                            c += 1.0;
                        }
                    }
                }
                res.push(s / c);
            }
        }
    }
    res
}

#[test]
fn avg_pool_matches_naive_oracle() {
    for (dims, n) in [([4, 4, 4], 2), ([5, 4, 3], 2), ([7, 6, 9], 3)] {
        let vol = random_volume(dims, 11);
        let pooled = avg_pool(&vol, n).unwrap();
        let oracle = naive_pool(&vol, n);
        assert_eq!(pooled.data().len(), oracle.len());
        for (a, b) in pooled.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14, "{dims:?} n={n}: {a} vs {b}");
        }
    }
}

#[test]
fn feature_pool_is_per_channel_volume_pool() {
    let fv = random_features([6, 5, 4], 3, 2);
    let pooled = avg_pool(&fv, 2).unwrap();
    for c in 0..3 {
        let direct = avg_pool(&fv.channel(c), 2).unwrap();
        assert_eq!(pooled.channel(c).data(), direct.data());
    }
}

fn component(field: &DisplacementField, a: usize) -> Volume3 {
    Volume3::new(
        *field.grid(),
        field.vectors().iter().map(|u| u[a]).collect(),
    )
    .unwrap()
}

#[test]
fn compose_matches_two_step_oracle() {
    let dims = [8, 8, 8];
    let outer = smooth_field(dims, 1.5, 1);
    let inner = smooth_field(dims, 1.5, 2);
    let out = compose(&outer, &inner).unwrap();
    let comps = [0, 1, 2].map(|a| component(&outer, a));
    let g = *inner.grid();
    for i in 0..g.len() {
        let [h, w, d] = g.coords(i);
        // first step through inner, then look up outer where it landed
        let u = inner.vectors()[i];
        let p = [h as f64 + u[0], w as f64 + u[1], d as f64 + u[2]];
        let expected = [0, 1, 2].map(|a| u[a] + trilinear_sample(&comps[a], p).unwrap());
        assert!(dist(out.vectors()[i], expected) < 1e-5);
    }
}

#[test]
fn compose_with_zero_is_identity() {
    let f = smooth_field([7, 6, 5], 2.0, 3);
    let zero = DisplacementField::zeros(*f.grid());
    assert_eq!(compose(&f, &zero).unwrap(), f);
    assert_eq!(compose(&zero, &f).unwrap(), f);
}

#[test]
fn warp_samples_at_displaced_points() {
    let vol = random_volume([6, 7, 5], 4);
    let field = random_field([6, 7, 5], 1.7, 5);
    let out = warp(&vol, &field).unwrap();
    let g = *vol.grid();
    for i in 0..g.len() {
        let [h, w, d] = g.coords(i);
        let u = field.vectors()[i];
        let expected =
            trilinear_sample(&vol, [h as f64 + u[0], w as f64 + u[1], d as f64 + u[2]]).unwrap();
        assert_eq!(out.data()[i], expected);
    }
}

#[test]
fn smooth_box_matches_direct_convolution() {
    let f = random_field([5, 6, 7], 1.0, 6);
    let dims = f.dims();
    let out = smooth_box(&f, 3, 1).unwrap();
    // separable with clamped borders: the 3-d box over clamped indices
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for d in 0..dims[2] {
                let mut s = [0.0; 3];
                for a in -1..=1isize {
                    for b in -1..=1isize {
                        for c in -1..=1isize {
                            let u = f.get(
                                clamp(h as isize + a, dims[0]),
                                clamp(w as isize + b, dims[1]),
                                clamp(d as isize + c, dims[2]),
                            );
                            for k in 0..3 {
                                s[k] += u[k] / 27.0;
                            }
                        }
                    }
                }
                assert!(dist(out.get(h, w, d), s) < 1e-12);
            }
        }
    }
}

fn dims_strategy() -> impl Strategy<Value = [usize; 3]> {
    [1usize..8, 1usize..8, 1usize..8]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn warp_with_zero_field_is_bit_identical(dims in dims_strategy(), seed in 0u64..1000) {
        let vol = random_volume(dims, seed);
        let out = warp(&vol, &DisplacementField::zeros(*vol.grid())).unwrap();
        prop_assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn pooling_preserves_the_mean_when_divisible(k in [1usize..4, 1usize..4, 1usize..4], n in 1usize..4, seed in 0u64..1000) {
        let vol = random_volume(k.map(|x| x * n), seed);
        let pooled = avg_pool(&vol, n).unwrap();
        prop_assert!((pooled.mean() - vol.mean()).abs() < 1e-12);
    }

    #[test]
    fn upsample_then_pool_roundtrips_constants(
        coarse in [1usize..5, 1usize..5, 1usize..5],
        n in 1usize..4,
        u in [-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0],
    ) {
        let field = DisplacementField::uniform(grid(coarse), u).unwrap();
        let fine = upsample_field(&field, coarse.map(|x| x * n), n as f64).unwrap();
        let back = avg_pool(&fine, n).unwrap();
        prop_assert_eq!(back.dims(), coarse);
        // pooling keeps fine-grid units
        let expected = u.map(|x| x * n as f64);
        for v in back.vectors() {
            for a in 0..3 {
                prop_assert!((v[a] - expected[a]).abs() <= 1e-12 * expected[a].abs().max(1.0));
            }
        }
    }

    #[test]
    fn smoothing_stays_within_component_range(dims in dims_strategy(), k in 0usize..3, passes in 1usize..3, seed in 0u64..1000) {
        let f = random_field(dims, 2.0, seed);
        let out = smooth_box(&f, 2 * k + 1, passes).unwrap();
        for a in 0..3 {
            let lo = f.vectors().iter().map(|u| u[a]).fold(f64::INFINITY, f64::min);
            let hi = f.vectors().iter().map(|u| u[a]).fold(f64::NEG_INFINITY, f64::max);
            for v in out.vectors() {
                prop_assert!(v[a] >= lo - 1e-12 && v[a] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn smoothing_keeps_constant_fields(dims in dims_strategy(), k in 0usize..4, u in [-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0]) {
        let f = DisplacementField::uniform(grid(dims), u).unwrap();
        let out = smooth_box(&f, 2 * k + 1, 2).unwrap();
        for v in out.vectors() {
            prop_assert!(dist(*v, u) < 1e-12);
        }
    }

    #[test]
    fn trilinear_is_exact_on_lattice(dims in dims_strategy(), seed in 0u64..1000) {
        let vol = random_volume(dims, seed);
        let g: Grid = *vol.grid();
        for i in 0..g.len() {
            let [h, w, d] = g.coords(i);
            prop_assert_eq!(trilinear_sample(&vol, [h as f64, w as f64, d as f64]).unwrap(), vol.data()[i]);
        }
    }
}
