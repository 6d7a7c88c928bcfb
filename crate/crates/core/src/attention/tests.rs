use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{self, GradCheckOptions};

type Rows = Vec<Vec<f64>>;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Attention parameters with O(1) random weights and biases.
fn params(dim: usize, heads: usize, seed: u64) -> AttentionParams<f64> {
    let mut init = Initializer::new(seed);
    let mut p = AttentionParams::new(&mut init, dim, heads).unwrap();
    let mut s = seed;
    p.visit_mut("", &mut |_, t| {
        s += 1;
        *t = random(t.shape(), s).scale(0.5);
    });
    p
}

fn rows(t: &Tensor<f64>, width: usize) -> Rows {
    t.data().chunks(width).map(<[f64]>::to_vec).collect()
}

// ---- scalar-loop reference implementation -------------------------------

fn ref_linear(x: &Rows, l: &Linear<f64>, with_bias: bool) -> Rows {
    let (i, o) = (l.in_features(), l.out_features());
    let w = l.weight.data();
    x.iter()
        .map(|row| {
            (0..o)
                .map(|j| {
                    let mut acc = if with_bias {
                        l.bias.as_ref().map_or(0.0, |b| b.data()[j])
                    } else {
                        0.0
                    };
                    for k in 0..i {
                        acc += row[k] * w[k * o + j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Per-head softmax attention over projected rows; `allowed(i, j)` masks pairs.
fn ref_attend(q: &Rows, k: &Rows, v: &Rows, heads: usize, scale: f64, allowed: impl Fn(usize, usize) -> bool) -> Rows {
    let c = q[0].len();
    let d = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let logits: Vec<Option<f64>> = (0..k.len())
                .map(|j| {
                    allowed(i, j).then(|| (0..d).map(|e| q[i][h * d + e] * k[j][h * d + e]).sum::<f64>() * scale)
                })
                .collect();
            let max = logits.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - max).exp())).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..k.len() {
                for e in 0..d {
                    out[i][h * d + e] += exps[j] / z * v[j][h * d + e];
                }
            }
        }
    }
    out
}

fn ref_mha(qi: &Rows, ki: &Rows, vi: &Rows, p: &AttentionParams<f64>, allowed: impl Fn(usize, usize) -> bool) -> Rows {
    let q = ref_linear(qi, &p.query, true);
    let k = ref_linear(ki, &p.key, true);
    let v = ref_linear(vi, &p.value, true);
    ref_linear(&ref_attend(&q, &k, &v, p.heads, p.logit_scale, allowed), &p.output, true)
}

fn flatten(r: &Rows) -> Vec<f64> {
    r.iter().flatten().copied().collect()
}

fn assert_rows_close(got: &Tensor<f64>, want: &Rows, tol: f64) {
    let diff = got
        .data()
        .iter()
        .zip(flatten(want))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= tol, "max diff {diff:e}");
}

/// Window index of token `i` in a row-major `H×W` grid.
fn window_of(i: usize, w: usize, s: usize) -> (usize, usize) {
    ((i / w) / s, (i % w) / s)
}

/// Full attention over the grid with cross-window pairs masked out.
fn masked_full_attention(x: &Tensor<f64>, p: &AttentionParams<f64>, s: usize) -> Rows {
    let (w, c) = (x.shape()[1], x.shape()[2]);
    let r = rows(x, c);
    ref_mha(&r, &r, &r, p, |i, j| window_of(i, w, s) == window_of(j, w, s))
}

// ---- window partition ---------------------------------------------------

#[test]
fn single_window_keeps_token_order() {
    let x = random(&[7, 7, 3], 1);
    let (win, layout) = window_partition(&x, 7).unwrap();
    assert_eq!(layout.num_windows(), 1);
    assert_eq!(win.shape(), &[1, 49, 3]);
    assert_eq!(win.data(), x.data());
}

#[test]
fn partition_index_arithmetic() {
    let (h, w, c, s) = (14, 14, 2, 7);
    let x = random(&[h, w, c], 2);
    let (win, layout) = window_partition(&x, s).unwrap();
    assert_eq!(layout.num_windows(), 4);
    // Map element (0, 7) is token 0 of window 1.
    assert_eq!(&win.data()[(49) * c..(49 + 1) * c], &x.data()[7 * c..8 * c]);
    for row in 0..h {
        for col in 0..w {
            let widx = (row / s) * (w / s) + col / s;
            let tok = (row % s) * s + col % s;
            let got = &win.data()[(widx * s * s + tok) * c..][..c];
            assert_eq!(got, &x.data()[(row * w + col) * c..][..c]);
        }
    }
}

#[test]
fn partition_rejects_indivisible_grid() {
    let err = window_partition(&random(&[8, 14, 2], 0), 7).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    assert!(msg.contains("H=8") && msg.contains("W=14") && msg.contains("S=7"), "{msg}");
}

#[test]
fn reverse_rejects_mismatched_layout() {
    let (win, _) = window_partition(&random(&[4, 4, 2], 0), 2).unwrap();
    let wrong = WindowLayout::new(8, 8, 2).unwrap();
    assert!(matches!(window_reverse(&win, &wrong), Err(Error::Dimension(_))));
}

proptest! {
    #[test]
    fn partition_roundtrip_bitwise(s in 1usize..5, a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..500) {
        let x = random(&[s * a, s * b, c], seed);
        let (win, layout) = window_partition(&x, s).unwrap();
        prop_assert!(window_reverse(&win, &layout).unwrap().bit_eq(&x));
    }

    #[test]
    fn aggregate_is_permutation_invariant(seed in 0u64..200) {
        let p = params(4, 2, seed);
        let x = random(&[3, 2, 4], seed + 1);
        let g = GlobalTokens::new(random(&[2, 4], seed + 2)).unwrap();
        let base = global_aggregate(&g, &x, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled: Vec<f64> = order.iter().flat_map(|&i| x.data()[i * 4..(i + 1) * 4].to_vec()).collect();
        let xs = Tensor::from_vec(&[3, 2, 4], shuffled).unwrap();
        let permuted = global_aggregate(&g, &xs, &p).unwrap();
        prop_assert!(base.max_abs_diff(&permuted).unwrap() <= 1e-6);
    }
}

// ---- scaled_mha ---------------------------------------------------------

#[test]
fn single_key_returns_its_value_for_every_query() {
    let p = params(4, 2, 3);
    let q = random(&[5, 4], 4);
    let kv = random(&[1, 4], 5);
    let out = scaled_mha(&q, &kv, &kv, &p).unwrap();
    let want = ref_linear(&ref_linear(&rows(&kv, 4), &p.value, true), &p.output, true);
    for row in out.data().chunks(4) {
        for (a, b) in row.iter().zip(&want[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_average_the_values() {
    let p = params(4, 1, 6);
    let q = random(&[3, 4], 7);
    let k = random(&[1, 4], 8).expand(&[5, 4]).unwrap();
    let v = random(&[5, 4], 9);
    let out = scaled_mha(&q, &k, &v, &p).unwrap();
    let pv = ref_linear(&rows(&v, 4), &p.value, true);
    let mean: Vec<f64> = (0..4).map(|j| pv.iter().map(|r| r[j]).sum::<f64>() / 5.0).collect();
    let want = ref_linear(&vec![mean; 3], &p.output, true);
    assert_rows_close(&out, &want, 1e-12);
}

#[test]
fn mha_matches_scalar_reference() {
    let p = params(4, 1, 10);
    let (q, kv) = (random(&[3, 4], 11), random(&[4, 4], 12));
    let out = scaled_mha(&q, &kv, &kv, &p).unwrap();
    let want = ref_mha(&rows(&q, 4), &rows(&kv, 4), &rows(&kv, 4), &p, |_, _| true);
    assert_rows_close(&out, &want, 1e-12);

    let p2 = params(6, 3, 13).with_unscaled_logits();
    let (q, kv) = (random(&[2, 6], 14), random(&[5, 6], 15));
    let want = ref_mha(&rows(&q, 6), &rows(&kv, 6), &rows(&kv, 6), &p2, |_, _| true);
    assert_rows_close(&scaled_mha(&q, &kv, &kv, &p2).unwrap(), &want, 1e-12);
}

#[test]
fn mha_rejects_bad_heads_and_widths() {
    let mut p = params(4, 2, 1);
    assert!(matches!(scaled_mha(&random(&[2, 3], 0), &random(&[2, 4], 0), &random(&[2, 4], 0), &p), Err(Error::Config(_))));
    p.heads = 3;
    let x = random(&[2, 4], 0);
    assert!(matches!(scaled_mha(&x, &x, &x, &p), Err(Error::Config(_))));
}

// ---- local attention ----------------------------------------------------

#[test]
fn one_window_equals_full_attention() {
    let p = params(4, 2, 20);
    let x = random(&[3, 3, 4], 21);
    let local = local_attention(&x, &p, 3).unwrap();
    let flat = x.reshape(&[9, 4]).unwrap();
    let full = scaled_mha(&flat, &flat, &flat, &p).unwrap();
    assert!(local.reshape(&[9, 4]).unwrap().max_abs_diff(&full).unwrap() < 1e-12);
}

#[test]
fn local_equals_masked_full_attention() {
    let p = params(8, 2, 22);
    let x = random(&[14, 14, 8], 23);
    let local = local_attention(&x, &p, 7).unwrap();
    assert_rows_close(&local, &masked_full_attention(&x, &p, 7), 1e-6);
}

#[test]
fn constant_windows_give_constant_outputs() {
    let p = params(4, 2, 24);
    let (s, c) = (2, 4);
    let vals = random(&[4, c], 25);
    let mut data = Vec::new();
    for row in 0..4 {
        for col in 0..4 {
            let widx = (row / s) * 2 + col / s;
            data.extend_from_slice(&vals.data()[widx * c..(widx + 1) * c]);
        }
    }
    let x = Tensor::from_vec(&[4, 4, c], data).unwrap();
    let y = local_attention(&x, &p, s).unwrap();
    let (win, _) = window_partition(&y, s).unwrap();
    for w in win.data().chunks(s * s * c) {
        for tok in w.chunks(c) {
            for (a, b) in tok.iter().zip(&w[..c]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn small_grid_is_attended_as_one_window() {
    let p = params(4, 1, 26);
    let x = random(&[1, 1, 4], 27);
    let y = local_attention(&x, &p, 2).unwrap();
    let flat = x.reshape(&[1, 4]).unwrap();
    assert!(y.reshape(&[1, 4]).unwrap().max_abs_diff(&scaled_mha(&flat, &flat, &flat, &p).unwrap()).unwrap() < 1e-12);
}

// ---- global aggregate / broadcast --------------------------------------

#[test]
fn aggregate_over_single_token() {
    let p = params(4, 2, 30);
    let x = random(&[1, 1, 4], 31);
    let g = GlobalTokens::new(random(&[3, 4], 32)).unwrap();
    let out = global_aggregate(&g, &x, &p).unwrap();
    let want = ref_linear(&ref_linear(&rows(&x, 4), &p.value, true), &p.output, true);
    for row in out.data().chunks(4) {
        for (a, b) in row.iter().zip(&want[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregate_matches_reference() {
    let p = params(4, 1, 33);
    let x = random(&[2, 2, 4], 34);
    let g = random(&[2, 4], 35);
    let out = global_aggregate(&GlobalTokens::new(g.clone()).unwrap(), &x, &p).unwrap();
    let xr = rows(&x, 4);
    assert_rows_close(&out, &ref_mha(&rows(&g, 4), &xr, &xr, &p, |_, _| true), 1e-12);
}

#[test]
fn aggregate_without_tokens_is_a_contract_error() {
    let p = params(4, 1, 0);
    let err = global_aggregate(&GlobalTokens::none(), &random(&[2, 2, 4], 0), &p).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

/// Broadcast reference: image queries over Ĝ keys/values, no output bias.
fn ref_broadcast(x: &Rows, g_hat: &Rows, p: &AttentionParams<f64>) -> Rows {
    let q = ref_linear(x, &p.query, true);
    let k = ref_linear(g_hat, &p.key, true);
    let v = ref_linear(g_hat, &p.value, true);
    ref_linear(&ref_attend(&q, &k, &v, p.heads, p.logit_scale, |_, _| true), &p.output, false)
}

#[test]
fn broadcast_with_one_token() {
    let p = params(4, 2, 40);
    let x = random(&[2, 3, 4], 41);
    let g = random(&[1, 4], 42);
    let out = global_broadcast(&x, &g, &p).unwrap();
    let want = ref_linear(&ref_linear(&rows(&g, 4), &p.value, true), &p.output, false);
    for row in out.data().chunks(4) {
        for (a, b) in row.iter().zip(&want[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn broadcast_of_identical_rows_is_constant() {
    let p = params(4, 2, 43);
    let x = random(&[2, 2, 4], 44);
    let g = random(&[1, 4], 45).expand(&[3, 4]).unwrap();
    let out = global_broadcast(&x, &g, &p).unwrap();
    for row in out.data().chunks(4) {
        for (a, b) in row.iter().zip(&out.data()[..4]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn broadcast_matches_reference() {
    let p = params(6, 2, 46);
    let x = random(&[2, 2, 6], 47);
    let g = random(&[3, 6], 48);
    let out = global_broadcast(&x, &g, &p).unwrap();
    assert_rows_close(&out, &ref_broadcast(&rows(&x, 6), &rows(&g, 6), &p), 1e-12);
}

// ---- combined -----------------------------------------------------------

#[test]
fn zero_tokens_is_exactly_local() {
    let p = params(8, 2, 50);
    let x = random(&[4, 4, 8], 51);
    let (y, g) = lightvit_attention(&x, &GlobalTokens::none(), &p, 2, AttentionToggles::default()).unwrap();
    assert!(y.bit_eq(&local_attention(&x, &p, 2).unwrap()));
    assert_eq!(g.count(), 0);
}

#[test]
fn global_toggle_off_passes_tokens_through() {
    let p = params(8, 2, 52);
    let x = random(&[4, 4, 8], 53);
    let g = GlobalTokens::new(random(&[2, 8], 54)).unwrap();
    let toggles = AttentionToggles { local: true, global: false };
    let (y, g_out) = lightvit_attention(&x, &g, &p, 2, toggles).unwrap();
    assert!(y.bit_eq(&local_attention(&x, &p, 2).unwrap()));
    assert!(g_out.tensor().unwrap().bit_eq(g.tensor().unwrap()));
}

#[test]
fn both_paths_off_is_a_config_error() {
    let p = params(4, 1, 0);
    let toggles = AttentionToggles { local: false, global: false };
    let err = lightvit_attention(&random(&[2, 2, 4], 0), &GlobalTokens::none(), &p, 2, toggles).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn additive_decomposition_is_exact() {
    let p = params(8, 2, 55);
    let x = random(&[4, 4, 8], 56);
    let g = GlobalTokens::new(random(&[3, 8], 57)).unwrap();
    let trace = lightvit_attention_trace(&x, &g, &p, 2, AttentionToggles::default()).unwrap();
    let (local, global) = (trace.local.clone().unwrap(), trace.global.clone().unwrap());
    // X_new = X_local + X_global on the attention features themselves.
    assert!(trace.combined.bit_eq(&local.add(&global).unwrap()));
    assert!(trace.output.reshape(&[16, 8]).unwrap().bit_eq(&p.output.forward(&trace.combined).unwrap()));
    // Each branch is the standalone operation.
    let agg = global_aggregate(&g, &x, &p).unwrap();
    assert!(agg.bit_eq(trace.tokens.tensor().unwrap()));
    let standalone_local = local_attention(&x, &p, 2).unwrap().reshape(&[16, 8]).unwrap();
    assert!(p.output.forward(&local).unwrap().bit_eq(&standalone_local));
    let standalone_global = global_broadcast(&x, &agg, &p).unwrap().reshape(&[16, 8]).unwrap();
    assert!(p.output.forward_no_bias(&global).unwrap().bit_eq(&standalone_global));
    // After the shared projection the split holds to rounding.
    let (y, _) = lightvit_attention(&x, &g, &p, 2, AttentionToggles::default()).unwrap();
    let sum = standalone_local.add(&standalone_global).unwrap().reshape(&[4, 4, 8]).unwrap();
    assert!(y.max_abs_diff(&sum).unwrap() < 1e-14);
}

#[test]
fn global_only_attention_is_projected_broadcast() {
    let p = params(8, 2, 64);
    let x = random(&[4, 4, 8], 65);
    let g = GlobalTokens::new(random(&[2, 8], 66)).unwrap();
    let toggles = AttentionToggles { local: false, global: true };
    let (y, g_hat) = lightvit_attention(&x, &g, &p, 2, toggles).unwrap();
    let b = global_broadcast(&x, g_hat.tensor().unwrap(), &p).unwrap();
    let bias = p.output.bias.as_ref().unwrap().expand(&[4, 4, 8]).unwrap();
    assert!(y.max_abs_diff(&b.add(&bias).unwrap()).unwrap() < 1e-14);
}

#[test]
fn zeroed_value_projection_annihilates_broadcast() {
    let mut p = params(4, 2, 58);
    p.value = Linear::zeros(4, 4, true).unwrap();
    let x = random(&[2, 2, 4], 59);
    let g = GlobalTokens::new(random(&[2, 4], 60)).unwrap();
    let (y, g_hat) = lightvit_attention(&x, &g, &p, 2, AttentionToggles::default()).unwrap();
    let broadcast = global_broadcast(&x, g_hat.tensor().unwrap(), &p).unwrap();
    assert!(broadcast.data().iter().all(|&v| v == 0.0));
    assert!(y.bit_eq(&local_attention(&x, &p, 2).unwrap()));
}

#[test]
fn tiny_block_matches_monolithic_reference() {
    // H = W = S = 2, C = 4, T = 2, one head.
    let p = params(4, 1, 61);
    let x = random(&[2, 2, 4], 62);
    let g = random(&[2, 4], 63);
    let (y, g_hat) = lightvit_attention(&x, &GlobalTokens::new(g.clone()).unwrap(), &p, 2, AttentionToggles::default()).unwrap();

    let xr = rows(&x, 4);
    let local = ref_mha(&xr, &xr, &xr, &p, |_, _| true);
    let g_ref = ref_mha(&rows(&g, 4), &xr, &xr, &p, |_, _| true);
    let broadcast = ref_broadcast(&xr, &g_ref, &p);
    let sum: Rows = local
        .iter()
        .zip(&broadcast)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    assert_rows_close(&y, &sum, 1e-6);
    assert_rows_close(g_hat.tensor().unwrap(), &g_ref, 1e-6);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let p = params(4, 2, 70);
    let x = random(&[4, 4, 4], 71);
    let g = random(&[2, 4], 72);
    let w = random(&[4, 4, 4], 73);
    let wg = random(&[2, 4], 74);
    let mut inputs = vec![x, g];
    p.visit("", &mut |_, t| inputs.push(t.clone()));
    let reports = gradcheck::check(
        &inputs,
        |v| {
            let mut q = p.clone();
            let mut i = 2;
            q.visit_mut("", &mut |_, t| {
                *t = v[i].clone();
                i += 1;
            });
            let (y, gh) = lightvit_attention(&v[0], &GlobalTokens::new(v[1].clone())?, &q, 2, AttentionToggles::default())?;
            Ok(y.mul(&w)?.sum().add(&gh.tensor().unwrap().mul(&wg)?.sum())?)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(gradcheck::worst(&reports) < gradcheck::DEFAULT_TOLERANCE, "{reports:?}");
}
