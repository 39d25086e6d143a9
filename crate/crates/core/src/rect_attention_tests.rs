use proptest::prelude::*;

use super::*;
use crate::numerics::gradcheck::{check_params, DEFAULT_STEP};
use crate::testutil::{check_golden, randn, tensor};

fn run<F: FnOnce(&mut Tape) -> Var>(f: F) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

fn weights(
    store: &mut ParamStore,
    channels: usize,
    heads: usize,
    rows: usize,
    cols: usize,
    seed: u64,
) -> AttentionWeights {
    let mut r = rng::stream(seed, 0);
    AttentionWeights::new(store, "attn", channels, heads, rows, cols, &mut r).unwrap()
}

fn set_identity_output(store: &mut ParamStore, w: &AttentionWeights) {
    *store.get_mut(w.wo) = Tensor::eye(w.channels);
}

// ---- split / partition / merge / shuffle ------------------------------------

#[test]
fn split_takes_contiguous_halves() {
    let z = tensor(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let (a, b) = split_spectral(&mut tape, zv).unwrap();
    assert_eq!(tape.value(a).data(), &[1.0, 2.0]);
    assert_eq!(tape.value(b).data(), &[3.0, 4.0]);
    let cat = tape.concat(&[a, b], 2).unwrap();
    assert_eq!(tape.value(cat), &z);

    let odd = tape.constant(Tensor::zeros([2, 2, 3]));
    assert!(matches!(split_spectral(&mut tape, odd), Err(Error::Config(_))));
}

#[test]
fn split_gradients_reach_both_halves() {
    let mut store = ParamStore::new();
    let z = store.register("z", randn(1, &[2, 3, 4])).unwrap();
    let w1 = randn(2, &[2, 3, 2]);
    let w2 = randn(3, &[2, 3, 2]);
    let report = check_params(
        &store,
        |tape, bound| {
            let (a, b) = split_spectral(tape, bound[z])?;
            let (c1, c2) = (tape.constant(w1.clone()), tape.constant(w2.clone()));
            let a = tape.mul(a, c1)?;
            let b = tape.mul(b, c2)?;
            let a = tape.gelu(a);
            let s = tape.add(a, b)?;
            Ok(tape.sum_all(s))
        },
        None,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report[0].max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn partition_counts_and_degenerate_tiles() {
    let z = randn(4, &[4, 4, 3]);
    let tiles = run(|tp| {
        let zv = tp.constant(z.clone());
        partition_rect(tp, zv, 2, 1).unwrap()
    });
    assert_eq!(tiles.shape(), &[8, 2, 3]);

    let pixels = run(|tp| {
        let zv = tp.constant(z.clone());
        partition_rect(tp, zv, 1, 1).unwrap()
    });
    assert_eq!(pixels.shape(), &[16, 1, 3]);
    assert_eq!(pixels.data(), z.data());

    let mut tape = Tape::new();
    let zv = tape.constant(randn(5, &[5, 4, 1]));
    assert!(matches!(partition_rect(&mut tape, zv, 2, 2), Err(Error::Internal(_))));
}

#[test]
fn partition_orders_tiles_row_major() {
    // 2x4 map, 1x2 tiles: tiles are (0,1), (2,3), (4,5), (6,7)
    let z = tensor(&[2, 4, 1], &[0., 1., 2., 3., 4., 5., 6., 7.]);
    let tiles = run(|tp| {
        let zv = tp.constant(z.clone());
        partition_rect(tp, zv, 1, 2).unwrap()
    });
    assert_eq!(tiles.data(), z.data());
    let tiles = run(|tp| {
        let zv = tp.constant(z.clone());
        partition_rect(tp, zv, 2, 1).unwrap()
    });
    assert_eq!(tiles.data(), &[0., 4., 1., 5., 2., 6., 3., 7.]);
}

#[test]
fn merge_zero_tiles_and_order_sensitivity() {
    let zeros = run(|tp| {
        let t = tp.constant(Tensor::zeros([4, 4, 2]));
        merge_rect(tp, t, 2, 2, 4, 4).unwrap()
    });
    assert!(zeros.data().iter().all(|&v| v == 0.0));

    let tiles = randn(6, &[4, 4, 2]);
    let merged = run(|tp| {
        let t = tp.constant(tiles.clone());
        merge_rect(tp, t, 2, 2, 4, 4).unwrap()
    });
    // swap the first two tiles
    let mut swapped = tiles.clone();
    let (a, b) = swapped.data_mut().split_at_mut(8);
    a.swap_with_slice(&mut b[..8]);
    let merged_swapped = run(|tp| {
        let t = tp.constant(swapped);
        merge_rect(tp, t, 2, 2, 4, 4).unwrap()
    });
    assert_ne!(merged.checksum(), merged_swapped.checksum());

    let mut tape = Tape::new();
    let t = tape.constant(tiles);
    assert!(matches!(merge_rect(&mut tape, t, 2, 2, 4, 6), Err(Error::Internal(_))));
}

#[test]
fn shuffle_interleaves_two_groups() {
    let z = tensor(&[1, 1, 4], &[10.0, 11.0, 20.0, 21.0]);
    let out = run(|tp| {
        let zv = tp.constant(z.clone());
        shuffle_spectral(tp, zv).unwrap()
    });
    assert_eq!(out.data(), &[10.0, 20.0, 11.0, 21.0]);
}

#[test]
fn shuffle_relocates_channels_without_altering_them() {
    let z = randn(7, &[3, 5, 6]);
    let out = run(|tp| {
        let zv = tp.constant(z.clone());
        shuffle_spectral(tp, zv).unwrap()
    });
    let channel = |t: &Tensor, c: usize| -> Vec<u64> {
        let mut v: Vec<u64> = (0..15).map(|p| t.data()[p * 6 + c].to_bits()).collect();
        v.sort_unstable();
        v
    };
    for i in 0..3 {
        assert_eq!(channel(&out, 2 * i), channel(&z, i));
        assert_eq!(channel(&out, 2 * i + 1), channel(&z, 3 + i));
    }
}

proptest! {
    #[test]
    fn partition_merge_roundtrip(ty in 1usize..4, tx in 1usize..4, rows in 1usize..4, cols in 1usize..4, seed in 0u64..1000) {
        let (h, w) = (ty * rows, tx * cols);
        let z = randn(seed, &[h, w, 3]);
        let back = run(|tp| {
            let zv = tp.constant(z.clone());
            let tiles = partition_rect(tp, zv, rows, cols).unwrap();
            merge_rect(tp, tiles, rows, cols, h, w).unwrap()
        });
        prop_assert_eq!(back, z);
    }

    #[test]
    fn shuffle_inverse_roundtrip(half in 1usize..6, seed in 0u64..1000) {
        let z = randn(seed, &[2, 3, 2 * half]);
        let back = run(|tp| {
            let zv = tp.constant(z.clone());
            let s = shuffle_spectral(tp, zv).unwrap();
            inverse_shuffle_spectral(tp, s).unwrap()
        });
        prop_assert_eq!(back, z);
    }

    #[test]
    fn pad_then_crop_restores_extents(h in 1usize..9, w in 1usize..9, mh in 1usize..7, mw in 1usize..7) {
        let z = randn((h * 31 + w) as u64, &[h, w, 2]);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let fm = pad_reflect(&mut tape, zv, mh, mw).unwrap();
        prop_assert_eq!(fm.pad.padded_height % mh, 0);
        prop_assert_eq!(fm.pad.padded_width % mw, 0);
        let back = crop(&mut tape, fm.var, &fm.pad).unwrap();
        prop_assert_eq!(tape.value(back), &z);
    }
}

#[test]
fn reflect_padding_mirrors_without_repeating_the_edge() {
    let got: Vec<usize> = (0..8).map(|i| reflect_index(i, 3)).collect();
    assert_eq!(got, vec![0, 1, 2, 1, 0, 1, 2, 1]);
    assert_eq!(reflect_index(5, 1), 0);
}

#[test]
fn relative_index_covers_each_pair_once() {
    let (rows, cols) = (2, 3);
    let n = rows * cols;
    let index = relative_position_index(rows, cols, 2);
    assert_eq!(index.len(), 2 * n * n);
    let table = (2 * rows - 1) * (2 * cols - 1);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    let same_offset = (i / cols) as isize - (j / cols) as isize
                        == (k / cols) as isize - (l / cols) as isize
                        && (i % cols) as isize - (j % cols) as isize
                            == (k % cols) as isize - (l % cols) as isize;
                    assert_eq!(index[i * n + j] == index[k * n + l], same_offset);
                }
            }
        }
    }
    assert!(index[n * n..].iter().all(|&s| (table..2 * table).contains(&s)));
}

// ---- attention ---------------------------------------------------------------

#[test]
fn zero_query_gives_column_mean_of_values() {
    let mut store = ParamStore::new();
    let w = weights(&mut store, 4, 2, 2, 3, 10);
    *store.get_mut(w.wq) = Tensor::zeros([4, 4]);
    *store.get_mut(w.pos_bias) = Tensor::zeros([2, 15]);
    set_identity_output(&mut store, &w);
    let x = randn(11, &[6, 4]);

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = rmsa_tile(&mut tape, &bound, &w, xv).unwrap().out;
    let wv = tape.constant(store.get(w.wv).clone());
    let v = tape.matmul(xv, wv).unwrap();
    let mean = tape.mean_axis(v, 0).unwrap();
    let (out, mean) = (tape.value(out), tape.value(mean));
    for t in 0..6 {
        for c in 0..4 {
            assert!((out.at(&[t, c]) - mean.data()[c]).abs() < 1e-14);
        }
    }
}

#[test]
fn single_token_tile_returns_value_projection() {
    let mut store = ParamStore::new();
    let w = weights(&mut store, 4, 2, 1, 1, 12);
    set_identity_output(&mut store, &w);
    let x = randn(13, &[1, 4]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = rmsa_tile(&mut tape, &bound, &w, xv).unwrap().out;
    let expect = tape.matmul(xv, bound[w.wv]).unwrap();
    assert_eq!(tape.value(out), tape.value(expect));
}

/// Plain-loop single-head attention with identity projections.
fn brute_force_attention(x: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let d = 2f64;
    x.iter()
        .map(|q| {
            let scores: Vec<f64> = x.iter().map(|k| (q[0] * k[0] + q[1] * k[1]) / d.sqrt()).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut out = [0.0; 2];
            for (s, v) in scores.iter().zip(x) {
                out[0] += s.exp() / z * v[0];
                out[1] += s.exp() / z * v[1];
            }
            out
        })
        .collect()
}

#[test]
fn two_token_attention_matches_brute_force() {
    let mut store = ParamStore::new();
    let w = weights(&mut store, 2, 1, 2, 1, 14);
    for id in [w.wq, w.wk, w.wv, w.wo] {
        *store.get_mut(id) = Tensor::eye(2);
    }
    *store.get_mut(w.pos_bias) = Tensor::zeros([1, 3]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.constant(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let out = rmsa_tile(&mut tape, &bound, &w, xv).unwrap().out;
    let out = tape.value(out);
    assert!((out.at(&[0, 0]) - 0.6698).abs() < 1e-4);
    assert!((out.at(&[0, 1]) - 0.3302).abs() < 1e-4);
    let oracle = brute_force_attention(&[[1.0, 0.0], [0.0, 1.0]]);
    for (t, row) in oracle.iter().enumerate() {
        for c in 0..2 {
            assert!((out.at(&[t, c]) - row[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn head_mismatch_is_a_config_error() {
    let mut store = ParamStore::new();
    let mut r = rng::stream(0, 0);
    assert!(matches!(
        AttentionWeights::new(&mut store, "a", 6, 4, 2, 1, &mut r),
        Err(Error::Config(_))
    ));
    let w = weights(&mut store, 4, 2, 2, 1, 15);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let bad = tape.constant(Tensor::zeros([3, 4]));
    assert!(matches!(rmsa_tile(&mut tape, &bound, &w, bad), Err(Error::Config(_))));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut store = ParamStore::new();
    let w = weights(&mut store, 6, 3, 2, 4, 16);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = tape.constant(randn(17, &[3, 8, 6]).reshaped([3, 8, 6]).unwrap());
    let probs = rmsa_tile(&mut tape, &bound, &w, x).unwrap().probs;
    let p = tape.value(probs);
    assert_eq!(p.shape(), &[3, 3, 8, 8]);
    for row in p.data().chunks(8) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn token_permutation_equivariance_without_position_bias() {
    let mut store = ParamStore::new();
    let w = weights(&mut store, 4, 2, 2, 3, 18);
    *store.get_mut(w.pos_bias) = Tensor::zeros([2, 15]);
    let x = randn(19, &[6, 4]);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut xp = Tensor::zeros([6, 4]);
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..4 {
            xp.set(&[i, c], x.at(&[p, c]));
        }
    }
    let attend = |input: Tensor| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(input);
        let out = rmsa_tile(&mut tape, &bound, &w, xv).unwrap().out;
        tape.value(out).clone()
    };
    let (out, out_p) = (attend(x), attend(xp));
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..4 {
            assert!((out_p.at(&[i, c]) - out.at(&[p, c])).abs() < 1e-14);
        }
    }
}

fn ra_module(channels: usize, heads: usize, spec: RectSpec, seed: u64) -> (ParamStore, RectAttention) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, 0);
    let ra = RectAttention::new(&mut store, "ra", channels, heads, spec, &mut r).unwrap();
    (store, ra)
}

fn ra_apply(store: &ParamStore, ra: &RectAttention, z: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let out = ra.forward(&mut tape, &bound, zv, true).unwrap();
    tape.value(out).clone()
}

#[test]
fn zero_value_projection_gives_zero_output() {
    let (mut store, ra) = ra_module(4, 1, RectSpec::new(2, 1).unwrap(), 20);
    for w in [&ra.horizontal, &ra.vertical] {
        *store.get_mut(w.wq) = Tensor::zeros([2, 2]);
        *store.get_mut(w.wv) = Tensor::zeros([2, 2]);
        *store.get_mut(w.pos_bias) = Tensor::zeros(store.get(w.pos_bias).shape());
    }
    let out = ra_apply(&store, &ra, &randn(21, &[4, 6, 4]));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn output_shape_survives_padding() {
    let (store, ra) = ra_module(6, 3, RectSpec::new(4, 2).unwrap(), 22);
    let out = ra_apply(&store, &ra, &randn(23, &[5, 7, 6]));
    assert_eq!(out.shape(), &[5, 7, 6]);
    assert!(out.is_finite());
}

#[test]
fn tile_translation_equivariance() {
    let spec = RectSpec::new(4, 2).unwrap();
    let (store, ra) = ra_module(4, 2, spec, 24);
    let (h, w) = (8, 8);
    let z = randn(25, &[h, w, 4]);
    // both branch tilings have extents dividing 4 in each direction
    let roll = |t: &Tensor, dy: usize, dx: usize| {
        let mut out = Tensor::zeros([h, w, 4]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..4 {
                    out.set(&[(y + dy) % h, (x + dx) % w, c], t.at(&[y, x, c]));
                }
            }
        }
        out
    };
    let a = ra_apply(&store, &ra, &roll(&z, 4, 4));
    let b = roll(&ra_apply(&store, &ra, &z), 4, 4);
    assert!(a.max_abs_diff(&b) < 1e-14);
}

#[test]
fn ra_parameters_pass_gradient_check() {
    let (store, ra) = ra_module(4, 2, RectSpec::new(2, 1).unwrap(), 26);
    let z = randn(27, &[3, 4, 4]);
    let target = randn(28, &[3, 4, 4]);
    let report = check_params(
        &store,
        |tape, bound| {
            let zv = tape.constant(z.clone());
            let out = ra.forward(tape, bound, zv, true)?;
            let t = tape.constant(target.clone());
            tape.mse(out, t)
        },
        None,
        DEFAULT_STEP,
    )
    .unwrap();
    for r in &report {
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}

#[test]
fn ra_forward_golden() {
    let (store, ra) = ra_module(4, 2, RectSpec::new(4, 2).unwrap(), 2024);
    let out = ra_apply(&store, &ra, &randn(2025, &[8, 8, 4]));
    check_golden("ra_forward_8x8x4", &out);
}
