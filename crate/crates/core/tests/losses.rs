mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::Rng;

use common::{rng, scalar, tensor, values};
use fogflow::losses::{
    hazeline_with_chroma, loss_epe_cross_domain, loss_flow_consistency, loss_gan_generator, loss_hazeline,
    loss_l1_transform, loss_transform_consistency, photometric_consistency_mask, ConsistencyMask, StopTarget,
    DEFAULT_MASK_TAU,
};

fn filled(v: f64, shape: &[usize]) -> Tensor {
    tensor(vec![v; shape.iter().product()], shape)
}

fn random(r: &mut impl Rng, lo: f64, hi: f64, shape: &[usize]) -> Tensor {
    tensor((0..shape.iter().product()).map(|_| r.random_range(lo..hi)).collect(), shape)
}

/// Vertical stripes of period 4 with sharp edges, so a horizontal shift is visible.
fn stripes(h: usize, w: usize, offset: usize) -> Tensor {
    let mut v = vec![0f64; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                v[(c * h + y) * w + x] = if ((x + offset) / 2) % 2 == 0 { 0.9 } else { 0.1 };
            }
        }
    }
    tensor(v, &[1, 3, h, w])
}

#[test]
fn l1_of_a_uniform_offset_is_the_offset() {
    let mut r = rng(1);
    let gt = random(&mut r, 0.2, 0.8, &[2, 3, 8, 8]);
    assert_eq!(scalar(&loss_l1_transform(&gt, &gt).unwrap()), 0.0);
    let shifted = (&gt + 0.1).unwrap();
    assert!((scalar(&loss_l1_transform(&shifted, &gt).unwrap()) - 0.1).abs() < 1e-12);
}

#[test]
fn cycle_consistency_counts_each_frame() {
    let mut r = rng(2);
    let (a, b) = (random(&mut r, 0.0, 0.7, &[1, 3, 8, 8]), random(&mut r, 0.0, 0.7, &[1, 3, 8, 8]));
    assert_eq!(scalar(&loss_transform_consistency(&a, &b, &a, &b).unwrap()), 0.0);
    let off = (&b + 0.2).unwrap();
    assert!((scalar(&loss_transform_consistency(&a, &b, &a, &off).unwrap()) - 0.2).abs() < 1e-12);
}

#[test]
fn mask_accepts_the_true_shift_and_rejects_no_motion() {
    let (h, w) = (8, 24);
    // frame 2 is frame 1 moved 5 px to the left, so frame1(x) = frame2(x - 5)
    let (f1, f2) = (stripes(h, w, 0), stripes(h, w, 5));
    let shift = tensor([vec![-5.0; h * w], vec![0.0; h * w]].concat(), &[1, 2, h, w]);
    let mask = values(photometric_consistency_mask(&f1, &f2, &shift, DEFAULT_MASK_TAU).unwrap().tensor());
    for y in 0..h {
        for x in 5..w {
            assert_eq!(mask[y * w + x], 1.0, "interior pixel ({y}, {x})");
        }
    }
    let still = filled(0.0, &[1, 2, h, w]);
    let mask = values(photometric_consistency_mask(&f1, &f2, &still, DEFAULT_MASK_TAU).unwrap().tensor());
    let (v1, v2) = (values(&f1), values(&f2));
    for i in 0..h * w {
        if (v1[i] - v2[i]).abs() >= DEFAULT_MASK_TAU {
            assert_eq!(mask[i], 0.0);
        }
    }
    assert!(mask.contains(&0.0));
}

#[test]
fn mask_on_a_constant_image_is_full_for_in_bounds_flow() {
    let mut r = rng(3);
    let img = filled(0.4, &[1, 3, 8, 8]);
    let flow = random(&mut r, -0.9, 0.9, &[1, 2, 8, 8]);
    // keep every target inside the frame
    let flow_v: Vec<f64> = values(&flow)
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let (p, c) = (i % 64, i / 64);
            let pos = if c == 0 { (p % 8) as f64 } else { (p / 8) as f64 };
            (pos + f).clamp(0.0, 7.0) - pos
        })
        .collect();
    let mask = photometric_consistency_mask(&img, &img, &tensor(flow_v, &[1, 2, 8, 8]), DEFAULT_MASK_TAU).unwrap();
    assert!(values(mask.tensor()).iter().all(|&m| m == 1.0));
}

#[test]
fn flow_consistency_cases() {
    let a = filled(1.0, &[1, 2, 4, 4]);
    let full = ConsistencyMask::full_like(&a).unwrap();
    assert_eq!(scalar(&loss_flow_consistency(&a, &a, &full).unwrap().unwrap()), 0.0);

    // difference (3, 4) everywhere
    let b = tensor([vec![4.0; 16], vec![5.0; 16]].concat(), &[1, 2, 4, 4]);
    assert_eq!(scalar(&loss_flow_consistency(&b, &a, &full).unwrap().unwrap()), 5.0);

    // difference (0, 1) on half of the masked pixels
    let mut c = vec![1.0; 32];
    for i in 0..4 {
        c[16 + i] = 2.0;
    }
    let mask = ConsistencyMask::new(tensor([vec![1.0; 8], vec![0.0; 8]].concat(), &[1, 1, 4, 4])).unwrap();
    let v = scalar(&loss_flow_consistency(&tensor(c, &[1, 2, 4, 4]), &a, &mask).unwrap().unwrap());
    assert_eq!(v, 0.5);
}

#[test]
fn generator_loss_vanishes_for_confident_scores() {
    let v = scalar(&loss_gan_generator(&filled(40.0, &[1, 1, 3, 3])).unwrap());
    assert!(v < 1e-15 && v >= 0.0);
}

#[test]
fn hazeline_cases() {
    let mut r = rng(4);
    let img = random(&mut r, 0.05, 1.0, &[1, 3, 8, 8]);
    assert!(scalar(&loss_hazeline(&img, &img, 3).unwrap()).abs() < 1e-12);

    // one pixel whose two directions from `a` are orthogonal contributes exactly 1
    let a = tensor(vec![1.0 / 3.0; 3], &[1, 3, 1, 1]);
    let clean = tensor(vec![0.5, 0.25, 0.25], &[1, 3, 1, 1]);
    let fog = tensor(vec![1.0 / 3.0, 1.0 / 3.0 + 0.1, 1.0 / 3.0 - 0.1], &[1, 3, 1, 1]);
    let v = scalar(&hazeline_with_chroma(&clean, &fog, &a).unwrap());
    assert!((v - 1.0).abs() < 1e-5, "{v}");
}

fn permute_pixels(t: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c, h, w) = t.dims4().unwrap();
    let v = values(t);
    let hw = h * w;
    let mut out = vec![0f64; v.len()];
    for plane in 0..n * c {
        for (dst, &src) in perm.iter().enumerate() {
            out[plane * hw + dst] = v[plane * hw + src];
        }
    }
    tensor(out, &[n, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cross_domain_epe_ignores_pixel_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random(&mut r, -3.0, 3.0, &[1, 2, 4, 5]);
        let b = random(&mut r, -3.0, 3.0, &[1, 2, 4, 5]);
        let m: Vec<f64> = (0..20).map(|i| if i == 0 { 1.0 } else { r.random_range(0..2) as f64 }).collect();
        let mut perm: Vec<usize> = (0..20).collect();
        for i in (1..20).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let mask = tensor(m, &[1, 1, 4, 5]);
        let before = loss_epe_cross_domain(&a, &b, &ConsistencyMask::new(mask.clone()).unwrap(), StopTarget::B).unwrap().unwrap();
        let pm = ConsistencyMask::new(permute_pixels(&mask, &perm)).unwrap();
        let after = loss_epe_cross_domain(&permute_pixels(&a, &perm), &permute_pixels(&b, &perm), &pm, StopTarget::B).unwrap().unwrap();
        prop_assert!((scalar(&before) - scalar(&after)).abs() < 1e-12);
    }

    #[test]
    fn hazeline_is_a_per_pixel_statistic_given_the_light(seed in any::<u64>()) {
        let mut r = rng(seed);
        let clean = random(&mut r, 0.0, 1.0, &[1, 3, 4, 4]);
        let fog = random(&mut r, 0.0, 1.0, &[1, 3, 4, 4]);
        let a = random(&mut r, 0.2, 0.5, &[1, 3, 1, 1]);
        let mut perm: Vec<usize> = (0..16).collect();
        for i in (1..16).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let before = scalar(&hazeline_with_chroma(&clean, &fog, &a).unwrap());
        let after = scalar(&hazeline_with_chroma(&permute_pixels(&clean, &perm), &permute_pixels(&fog, &perm), &a).unwrap());
        prop_assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn mask_is_binary(seed in any::<u64>(), tau in 0.01f64..0.5) {
        let mut r = rng(seed);
        let img1 = random(&mut r, 0.0, 1.0, &[1, 3, 6, 6]);
        let img2 = random(&mut r, 0.0, 1.0, &[1, 3, 6, 6]);
        let flow = random(&mut r, -4.0, 4.0, &[1, 2, 6, 6]);
        let m1 = values(photometric_consistency_mask(&img1, &img2, &flow, tau).unwrap().tensor());
        let m2 = values(photometric_consistency_mask(&img1, &img2, &flow, tau).unwrap().tensor());
        prop_assert!(m1.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(m1, m2);
    }

    #[test]
    fn non_gan_losses_are_non_negative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random(&mut r, 0.0, 1.0, &[1, 3, 6, 6]);
        let y = random(&mut r, 0.0, 1.0, &[1, 3, 6, 6]);
        prop_assert!(scalar(&loss_l1_transform(&x, &y).unwrap()) >= 0.0);
        prop_assert!(scalar(&loss_hazeline(&x, &y, 3).unwrap()) >= 0.0);
        let f = random(&mut r, -2.0, 2.0, &[1, 2, 6, 6]);
        let g = random(&mut r, -2.0, 2.0, &[1, 2, 6, 6]);
        let full = ConsistencyMask::full_like(&f).unwrap();
        prop_assert!(scalar(&loss_flow_consistency(&f, &g, &full).unwrap().unwrap()) >= 0.0);
    }
}

#[test]
fn losses_accept_f32_batches() {
    let x = Tensor::rand(0f32, 1f32, (2, 3, 8, 8), &Device::Cpu).unwrap();
    let y = Tensor::rand(0f32, 1f32, (2, 3, 8, 8), &Device::Cpu).unwrap();
    let v = loss_hazeline(&x, &y, 3).unwrap();
    assert_eq!(v.dtype(), DType::F32);
    assert!(scalar(&v).is_finite());
}
