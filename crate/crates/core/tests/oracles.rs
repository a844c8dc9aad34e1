//! Brute-force oracles for the closed-form operations, on random instances.

use combiverse_core::decomposition::build_inpaint_mask;
use combiverse_core::guidance::{
    attention_maps, depth_guidance_loss, reference_loss, reweight_attention, TokenScaling,
};
use combiverse_core::raster::Mask;
use combiverse_core::render::RenderOutput;
use combiverse_core::scene::ObjectSpec;
use combiverse_core::spatial_init::{average_object_depth, init_scale, init_translation, DepthMap};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 200;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x0AC1E ^ tag)
}

fn random_box(r: &mut ChaCha8Rng, w: u32, h: u32) -> ObjectSpec {
    let x0 = r.random_range(0..w);
    let y0 = r.random_range(0..h);
    let x1 = r.random_range(x0 + 1..=w);
    let y1 = r.random_range(y0 + 1..=h);
    ObjectSpec::new(x0, y0, x1, y1).unwrap()
}

fn random_mask(r: &mut ChaCha8Rng, w: u32, h: u32, p: f64) -> (Mask, Vec<Vec<bool>>) {
    let bits: Vec<Vec<bool>> = (0..h).map(|_| (0..w).map(|_| r.random_bool(p)).collect()).collect();
    (Mask::from_fn(w, h, |x, y| bits[y as usize][x as usize]), bits)
}

#[test]
fn init_scale_matches_ratio_oracle() {
    let mut r = rng(1);
    for _ in 0..INSTANCES {
        let (w, h) = (r.random_range(1..500u32), r.random_range(1..500u32));
        let b = random_box(&mut r, w, h);
        let wb = (b.x_max - b.x_min) as f64;
        let hb = (b.y_max - b.y_min) as f64;
        let expect = if wb / w as f64 > hb / h as f64 {
            wb / w as f64
        } else {
            hb / h as f64
        };
        let s: f64 = init_scale(&b, (w, h)).unwrap();
        assert!((s - expect).abs() <= 1e-9, "{b:?} in {w}x{h}: {s} vs {expect}");
        assert!(s > 0.0 && s <= 1.0);
    }
}

#[test]
fn init_translation_matches_hand_formula() {
    let mut r = rng(2);
    for _ in 0..INSTANCES {
        let (w, h) = (r.random_range(1..800u32), r.random_range(1..800u32));
        let b = random_box(&mut r, w, h);
        let d = r.random_range(0.1..20.0);
        let k = if r.random_bool(0.5) {
            1.0 / w as f64
        } else {
            r.random_range(1e-3..5.0)
        };
        let cx = (b.x_min + b.x_max) as f64 * 0.5;
        let cy = (b.y_min + b.y_max) as f64 * 0.5;
        let expect = [(cx - w as f64 * 0.5) * k, -(cy - h as f64 * 0.5) * k, d];
        let t = init_translation(&b, (w, h), d, k).unwrap();
        for i in 0..3 {
            assert!((t[i] - expect[i]).abs() <= 1e-9, "{b:?}: {t:?} vs {expect:?}");
        }
        if k == 1.0 / w as f64 {
            assert!(t[0].abs() <= 0.5 + 1e-12);
        }
    }
}

#[test]
fn average_depth_matches_masked_mean() {
    let mut r = rng(3);
    for _ in 0..INSTANCES {
        let (w, h) = (r.random_range(1..40u32), r.random_range(1..40u32));
        let values = Array2::from_shape_fn((h as usize, w as usize), |_| r.random_range(0.05..10.0));
        let p = r.random_range(0.05..1.0);
        let (mask, bits) = random_mask(&mut r, w, h, p);
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..h as usize {
            for x in 0..w as usize {
                if bits[y][x] {
                    sum += values[[y, x]];
                    n += 1;
                }
            }
        }
        let depth = DepthMap::new(values).unwrap();
        let got = average_object_depth(&depth, &mask);
        if n == 0 {
            assert!(got.is_err());
            continue;
        }
        let got: f64 = got.unwrap();
        assert!((got - sum / n as f64).abs() <= 1e-9);
    }
}

#[test]
fn inpaint_mask_matches_pixel_rule() {
    let mut r = rng(4);
    for _ in 0..INSTANCES {
        let (w, h) = (16, 16);
        let b = random_box(&mut r, w, h);
        let (mask, bits) = random_mask(&mut r, w, h, 0.5);
        let m = build_inpaint_mask(&mask, &b).unwrap();
        for y in 0..h {
            for x in 0..w {
                let in_box = x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
                let expect = in_box && !bits[y as usize][x as usize];
                assert_eq!(m.get(x, y), expect, "pixel ({x}, {y}) of {b:?}");
                assert!(!(m.get(x, y) && mask.get(x, y)));
                if in_box {
                    assert!(m.get(x, y) || mask.get(x, y));
                }
            }
        }
    }
}

#[test]
fn reweighting_matches_column_scaling() {
    let mut r = rng(5);
    for _ in 0..INSTANCES {
        let (nq, nk) = (r.random_range(1..20), r.random_range(1..20));
        let m: Array2<f64> = Array2::from_shape_fn((nq, nk), |_| r.random_range(0.0..1.0));
        let tokens: Vec<usize> = (0..nk).filter(|_| r.random_bool(0.3)).collect();
        let c: f64 = r.random_range(0.1..50.0);
        let out = reweight_attention(m.view(), &TokenScaling::new(tokens.clone(), c).unwrap()).unwrap();
        for i in 0..nq {
            for j in 0..nk {
                if tokens.contains(&j) {
                    assert!((out[[i, j]] - m[[i, j]] * c).abs() <= 1e-9);
                } else {
                    assert_eq!(out[[i, j]].to_bits(), m[[i, j]].to_bits());
                }
            }
        }
    }
}

#[test]
fn softmax_matches_direct_computation() {
    let mut r = rng(6);
    for _ in 0..INSTANCES {
        let d = r.random_range(1..6);
        let q = Array2::from_shape_fn((2, d), |_| r.random_range(-2.0..2.0));
        let k = Array2::from_shape_fn((2, d), |_| r.random_range(-2.0..2.0));
        let a = attention_maps(q.view(), k.view()).unwrap();
        for i in 0..2 {
            let logits: Vec<f64> = (0..2)
                .map(|j| (0..d).map(|f| q[[i, f]] * k[[j, f]]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..2 {
                assert!((a[[i, j]] - logits[j].exp() / z).abs() <= 1e-9);
            }
        }
    }
}

fn random_output(r: &mut ChaCha8Rng, h: usize, w: usize) -> RenderOutput<f64> {
    RenderOutput {
        rgb: Array3::from_shape_fn((3, h, w), |_| r.random_range(0.0..1.0)),
        alpha: Array2::from_shape_fn((h, w), |_| r.random_range(0.0..1.0)),
        depth: Array2::zeros((h, w)),
    }
}

#[test]
fn reference_loss_matches_pixel_sum() {
    let mut r = rng(7);
    for _ in 0..INSTANCES {
        let (h, w) = (r.random_range(1..24), r.random_range(1..24));
        let a = random_output(&mut r, h, w);
        let b = random_output(&mut r, h, w);
        let (lr, la) = (r.random_range(0.0..2000.0), r.random_range(0.0..2000.0));
        let mut s_rgb = 0.0;
        let mut s_a = 0.0;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    s_rgb += (a.rgb[[c, y, x]] - b.rgb[[c, y, x]]).abs();
                }
                s_a += (a.alpha[[y, x]] - b.alpha[[y, x]]).abs();
            }
        }
        let expect = lr * s_rgb / (3 * h * w) as f64 + la * s_a / (h * w) as f64;
        let got = reference_loss(&a, &b.rgb, &b.alpha, lr, la).unwrap().value;
        assert!((got - expect).abs() <= 1e-9 * expect.max(1.0), "{got} vs {expect}");
    }
}

#[test]
fn depth_loss_matches_normalized_mae() {
    let mut r = rng(8);
    for _ in 0..INSTANCES {
        let (h, w) = (r.random_range(2..20usize), r.random_range(2..20usize));
        let rendered = Array2::from_shape_fn((h, w), |_| r.random_range(0.5..5.0));
        let predicted = Array2::from_shape_fn((h, w), |_| r.random_range(0.5..5.0));
        let (mask, bits) = random_mask(&mut r, w as u32, h as u32, 0.6);
        let px: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| bits[y][x])
            .collect();
        let got = depth_guidance_loss(&rendered, &DepthMap::new(predicted.clone()).unwrap(), &mask);
        if px.is_empty() {
            assert!(got.is_err());
            continue;
        }
        let norm = |a: &Array2<f64>| -> Vec<f64> {
            let v: Vec<f64> = px.iter().map(|&p| a[p]).collect();
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n + 1e-12).sqrt();
            v.iter().map(|x| (x - mu) / sd).collect()
        };
        let (zr, zp) = (norm(&rendered), norm(&predicted));
        let expect = zr.iter().zip(&zp).map(|(a, b)| (a - b).abs()).sum::<f64>() / px.len() as f64;
        assert!((got.unwrap().value - expect).abs() <= 1e-9);
    }
}

#[test]
fn depth_loss_is_shift_and_scale_invariant() {
    let mut r = rng(9);
    let d = Array2::from_shape_fn((8, 8), |_| r.random_range(1.0..3.0));
    let mask = Mask::from_fn(8, 8, |x, y| (x + y) % 3 != 0);
    let l = depth_guidance_loss(&(&d * 2.5 + 7.0), &DepthMap::new(d.clone()).unwrap(), &mask).unwrap();
    assert!(l.value < 1e-6);
    let same = depth_guidance_loss(&d, &DepthMap::new(d.clone()).unwrap(), &mask).unwrap();
    assert_eq!(same.value, 0.0);
}

proptest! {
    #[test]
    fn scale_ignores_box_shifts(x0 in 0u32..100, y0 in 0u32..100, bw in 1u32..100, bh in 1u32..100, dx in 0u32..100, dy in 0u32..100) {
        let size = (400, 400);
        let a = ObjectSpec::new(x0, y0, x0 + bw, y0 + bh).unwrap();
        let b = ObjectSpec::new(x0 + dx, y0 + dy, x0 + dx + bw, y0 + dy + bh).unwrap();
        prop_assert_eq!(init_scale::<f64>(&a, size).unwrap(), init_scale::<f64>(&b, size).unwrap());
    }

    #[test]
    fn translation_follows_box_shifts(x0 in 0u32..100, y0 in 0u32..100, bw in 1u32..100, bh in 1u32..100, dx in 0u32..100, dy in 0u32..100, k in 0.001f64..2.0) {
        let size = (400, 400);
        let a = ObjectSpec::new(x0, y0, x0 + bw, y0 + bh).unwrap();
        let b = ObjectSpec::new(x0 + dx, y0 + dy, x0 + dx + bw, y0 + dy + bh).unwrap();
        let ta = init_translation(&a, size, 2.0, k).unwrap();
        let tb = init_translation(&b, size, 2.0, k).unwrap();
        prop_assert!((tb[0] - ta[0] - dx as f64 * k).abs() < 1e-9);
        prop_assert!((tb[1] - ta[1] + dy as f64 * k).abs() < 1e-9);
        prop_assert_eq!(ta[2], tb[2]);
    }

    #[test]
    fn average_depth_is_bounded(values in prop::collection::vec(0.01f64..100.0, 36), bits in prop::collection::vec(any::<bool>(), 36)) {
        prop_assume!(bits.iter().any(|&b| b));
        let depth = DepthMap::new(Array2::from_shape_vec((6, 6), values.clone()).unwrap()).unwrap();
        let mask = Mask::from_fn(6, 6, |x, y| bits[(y * 6 + x) as usize]);
        let picked: Vec<f64> = values.iter().zip(&bits).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
        let d: f64 = average_object_depth(&depth, &mask).unwrap();
        let lo = picked.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = picked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(d >= lo - 1e-9 && d <= hi + 1e-9);
    }

    #[test]
    fn attention_rows_sum_to_one(nq in 1usize..64, nk in 1usize..77, d in 1usize..64, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let q = Array2::from_shape_fn((nq, d), |_| r.random_range(-3.0..3.0));
        let k = Array2::from_shape_fn((nk, d), |_| r.random_range(-3.0..3.0));
        let a = attention_maps(q.view(), k.view()).unwrap();
        for row in a.rows() {
            prop_assert!((row.sum() - 1.0f64).abs() < 1e-6);
        }
    }

    #[test]
    fn reference_loss_is_symmetric_and_linear(seed in any::<u64>(), lr in 0.0f64..1000.0, la in 0.0f64..1000.0, k in 0.0f64..10.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random_output(&mut r, 5, 7);
        let b = random_output(&mut r, 5, 7);
        let ab = reference_loss(&a, &b.rgb, &b.alpha, lr, la).unwrap().value;
        let ba = reference_loss(&b, &a.rgb, &a.alpha, lr, la).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        let scaled = reference_loss(&a, &b.rgb, &b.alpha, lr * k, la * k).unwrap().value;
        prop_assert!((scaled - k * ab).abs() <= 1e-9 * (k * ab).max(1.0));
        prop_assert_eq!(reference_loss(&a, &a.rgb, &a.alpha, lr, la).unwrap().value, 0.0);
        if lr > 0.0 && la > 0.0 {
            prop_assert!(ab > 0.0);
        }
    }
}
