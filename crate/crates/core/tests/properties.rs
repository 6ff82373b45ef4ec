use proptest::prelude::*;

use arseg::backbone::ConvLayer;
use arseg::codec::{decode_clip, encode_clip, expand_mv, CodecParams, MotionField, MotionVector};
use arseg::creff::{creff_forward, local_attention_weights, warp_features, Creff, FusionConfig};
use arseg::eval::{amortized_cost, bd_miou, miou, RateCurve, RatePoint};
use arseg::ops::{bilinear_resize, conv2d, softmax, ConvGeometry};
use arseg::tensor::{LabelMap, Tensor};

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0..2.0f64, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

/// 8-bit pixel values `k / 256`.
fn pixels(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(0u8..=255, n).prop_map(move |d| Tensor::new(shape, d.into_iter().map(|v| v as f64 / 256.0).collect()).unwrap())
}

fn labels(h: usize, w: usize, k: u32) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..k, h * w).prop_map(move |d| LabelMap::new(h, w, d).unwrap())
}

fn motion(h: usize, w: usize, block: usize, range: i32) -> impl Strategy<Value = MotionField> {
    let (rows, cols) = MotionField::grid_for(h, w, block);
    prop::collection::vec((-range..=range, -range..=range), rows * cols).prop_map(move |v| MotionField {
        block_size: block,
        rows,
        cols,
        vectors: v.into_iter().map(|(dx, dy)| MotionVector::new(dx, dy)).collect(),
    })
}

/// Shifts every channel right by `s` columns, repeating the first column.
fn shift_right(t: &Tensor, s: usize) -> Tensor {
    let (c, h, w) = t.dims3().unwrap();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        t.at3(ch, y, x.saturating_sub(s))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(x in tensor(&[2, 6, 7]), y in tensor(&[2, 6, 7]), wt in tensor(&[3, 2, 3, 3]),
                      a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let geo = ConvGeometry { groups: 1, stride: 1, padding: 1 };
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv2d(&mix, &wt, None, geo).unwrap();
        let rhs = conv2d(&x, &wt, None, geo).unwrap()
            .zip_map(&conv2d(&y, &wt, None, geo).unwrap(), |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn identity_pointwise_conv(x in tensor(&[3, 5, 4])) {
        let wt = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        prop_assert_eq!(conv2d(&x, &wt, None, ConvGeometry::pointwise()).unwrap(), x);
    }

    #[test]
    fn softmax_normalizes_and_ignores_shifts(x in tensor(&[4, 3, 5]), shift in -50.0..50.0f64, t in 0.1..4.0f64) {
        let s = softmax(&x, 0, t).unwrap();
        for p in 0..15 {
            let sum: f64 = (0..4).map(|c| s.data()[c * 15 + p]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted = softmax(&x.map(|v| v + shift), 0, t).unwrap();
        prop_assert!(shifted.max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn resize_keeps_constants(v in -5.0..5.0f64, h in 1usize..12, w in 1usize..12) {
        let out = bilinear_resize(&Tensor::full(&[2, 5, 7], v), h, w).unwrap();
        prop_assert!(out.data().iter().all(|&o| o == v));
    }

    #[test]
    fn warp_is_identity_at_zero_and_linear(f in tensor(&[3, 8, 8]), g in tensor(&[3, 8, 8]),
                                           field in motion(8, 8, 4, 3), a in -2.0..2.0f64) {
        let zero = Tensor::zeros(&[2, 8, 8]);
        prop_assert_eq!(warp_features(&f, &zero).unwrap(), f.clone());
        let m = expand_mv(&field, 8, 8).unwrap();
        let lhs = warp_features(&f.zip_map(&g, |p, q| a * p + q).unwrap(), &m).unwrap();
        let rhs = warp_features(&f, &m).unwrap().zip_map(&warp_features(&g, &m).unwrap(), |p, q| a * p + q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn attention_weights_are_convex(v in tensor(&[3, 6, 5]), k in tensor(&[3, 6, 5]), q in tensor(&[3, 6, 5]),
                                    n in prop::sample::select(vec![1usize, 3, 5])) {
        let att = local_attention_weights(&v, &k, &q, n).unwrap();
        let nn = n * n;
        let r = (n / 2) as i64;
        for p in 0..30 {
            let w = &att.weights[p * nn..(p + 1) * nn];
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let (y, x) = ((p / 5) as i64, (p % 5) as i64);
            for c in 0..3 {
                let nb: Vec<f64> = (-r..=r)
                    .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| v.at3(c, (y + dy).clamp(0, 5) as usize, (x + dx).clamp(0, 4) as usize))
                    .collect();
                let lo = nb.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = nb.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let o = att.output.at3(c, y as usize, x as usize);
                prop_assert!(lo - 1e-10 <= o && o <= hi + 1e-10);
            }
        }
    }

    #[test]
    fn fusion_commutes_with_block_translation(f_i in tensor(&[2, 8, 32]), f_p in tensor(&[2, 4, 16]),
                                              field in motion(8, 32, 4, 2), seed in 0u64..1000) {
        let mut creff = Creff::new(FusionConfig::local(3), 2, 0).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let geo = ConvGeometry { groups: 2, stride: 1, padding: 1 };
        for l in creff.layers.iter_mut() {
            *l = ConvLayer::init(2, 2, 3, geo, false, &mut rng);
        }
        let s = 4;
        let mut moved = field.clone();
        for r in 0..field.rows {
            for c in 0..field.cols {
                moved.vectors[r * field.cols + c] = field.vectors[r * field.cols + c.saturating_sub(1)];
            }
        }
        let base = creff_forward(&f_i, &expand_mv(&field, 8, 32).unwrap(), &f_p, &creff).unwrap();
        let out = creff_forward(&shift_right(&f_i, s), &expand_mv(&moved, 8, 32).unwrap(), &shift_right(&f_p, s / 2), &creff).unwrap();
        for c in 0..2 {
            for y in 0..8 {
                for x in s + 8..32 - 8 {
                    prop_assert!((out.at3(c, y, x) - base.at3(c, y, x - s)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn miou_ignores_class_renaming(pred in labels(8, 8, 4), gt in labels(8, 8, 4),
                                   perm in Just(vec![0u32, 1, 2, 3]).prop_shuffle()) {
        let rename = |l: &LabelMap| LabelMap::new(8, 8, l.data.iter().map(|&c| perm[c as usize]).collect()).unwrap();
        let a = miou(&pred, &gt, 4, 255).unwrap();
        let b = miou(&rename(&pred), &rename(&gt), 4, 255).unwrap();
        prop_assert_eq!(a.miou, b.miou);
    }

    #[test]
    fn miou_matches_counting(pred in labels(8, 8, 3), gt in labels(8, 8, 3)) {
        let mut ious = Vec::new();
        for k in 0..3u32 {
            let inter = pred.data.iter().zip(&gt.data).filter(|(&p, &g)| p == k && g == k).count();
            let union = pred.data.iter().zip(&gt.data).filter(|(&p, &g)| p == k || g == k).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let expect = ious.iter().sum::<f64>() / ious.len() as f64;
        prop_assert!((miou(&pred, &gt, 3, 255).unwrap().miou.unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn amortized_cost_falls_with_gop_length(hr in 1.0..1e9f64, frac in 0.0..0.99f64, split in 0.0..1.0f64, l in 1usize..40) {
        let rest = hr * frac;
        let a = amortized_cost(hr, rest * split, rest * (1.0 - split), l).unwrap();
        let b = amortized_cost(hr, rest * split, rest * (1.0 - split), l + 1).unwrap();
        prop_assert!(b.average < a.average);
    }

    #[test]
    fn bd_miou_is_antisymmetric(base in prop::collection::vec(0.1..1.0f64, 4), gains in prop::collection::vec(0.01..0.2f64, 4),
                                offset in -0.3..0.3f64, stretch in 0.5..2.0f64) {
        let mut acc = 0.2;
        let curve = |scale: f64, shift: f64, acc: &mut f64| -> RateCurve {
            let mut f = 1e6;
            let pts = base.iter().zip(&gains).map(|(b, g)| {
                f *= 1.0 + b * scale;
                *acc += g;
                RatePoint { flops: f, miou: *acc + shift }
            }).collect();
            RateCurve::new(pts).unwrap()
        };
        let a = curve(1.0, 0.0, &mut acc);
        acc = 0.2;
        let b = curve(stretch, offset, &mut acc);
        let ab = bd_miou(&a, &b).unwrap();
        let ba = bd_miou(&b, &a).unwrap();
        prop_assert!((ab + ba).abs() < 1e-9);
    }

    #[test]
    fn lossless_codec_round_trip(frames in prop::collection::vec(pixels(&[1, 8, 12]), 1..6), gop in 1usize..4, search in 0usize..4) {
        let params = CodecParams { gop_length: gop, block_size: 4, search_range: search, quant_step: 0.0 };
        let clip = encode_clip(&frames, params).unwrap();
        let decoded = decode_clip(&clip).unwrap();
        prop_assert_eq!(&decoded.frames, &frames);
        prop_assert!(decoded.motion.iter().flatten().all(|m| m.max_magnitude() <= search as i32));
        prop_assert_eq!(encode_clip(&frames, params).unwrap().to_bytes(), clip.to_bytes());
    }

    #[test]
    fn tensor_bytes_round_trip(t in tensor(&[2, 3, 4])) {
        prop_assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
    }
}
