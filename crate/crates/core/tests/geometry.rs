mod common;

use common::{numeric_gradient, random_box, raster_iou, relative_error};
use pathground::geometry::{giou, iou, loss, loss_gradient, BoundingBox, IouVariant, LossConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.01f64..=1.0, 0.01f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(w, h, u, v)| {
        let cx = w / 2.0 + u * (1.0 - w);
        let cy = h / 2.0 + v * (1.0 - h);
        BoundingBox::new(cx, cy, w, h).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let x = iou(&a, &b);
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn giou_never_exceeds_iou(a in arb_box(), b in arb_box()) {
        let g = giou(&a, &b);
        prop_assert!(g <= iou(&a, &b) + 1e-15);
        prop_assert!((-1.0..=1.0).contains(&g));
    }

    #[test]
    fn iou_is_scale_invariant(a in arb_box(), b in arb_box(), s in 0.05f64..=1.0) {
        let scale = |x: &BoundingBox| BoundingBox::new(x.cx() * s, x.cy() * s, x.w() * s, x.h() * s).unwrap();
        prop_assert!((iou(&scale(&a), &scale(&b)) - iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn identical_boxes_overlap_fully(a in arb_box()) {
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        let l = loss(&a, &a, &LossConfig::default());
        prop_assert!(l.total.abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum(a in arb_box(), b in arb_box(), l1 in 0.1f64..10.0, li in 0.1f64..10.0) {
        for variant in [IouVariant::Plain, IouVariant::Generalized] {
            let cfg = LossConfig { lambda_l1: l1, lambda_iou: li, iou_variant: variant };
            let r = loss(&a, &b, &cfg);
            prop_assert!((r.total - (l1 * r.l1_term + li * r.iou_term)).abs() < 1e-12);
            prop_assert!(r.l1_term >= 0.0);
        }
    }

    #[test]
    fn corners_round_trip(a in arb_box()) {
        let back = BoundingBox::from_corners(a.to_corners()).unwrap();
        for (x, y) in a.to_array().iter().zip(back.to_array()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn iou_matches_rasterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (a, b) = (random_box(&mut rng, 0.05), random_box(&mut rng, 0.05));
        let (x, y) = (iou(&a, &b), raster_iou(&a, &b));
        assert!((x - y).abs() < 2e-3, "{a:?} {b:?}: {x} vs {y}");
    }
}

#[test]
fn raster_oracle_reproduces_one_seventh() {
    let a = BoundingBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
    let b = BoundingBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
    assert!((raster_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-6);
    assert!((iou(&a, &b) - 0.142857).abs() < 1e-6);
}

#[test]
fn disjoint_giou_is_minus_seven_eighths() {
    // Enclosure [0.1, 0.9]² has area 0.64, union 0.08: 0 - 0.56 / 0.64.
    let a = BoundingBox::new(0.2, 0.2, 0.2, 0.2).unwrap();
    let b = BoundingBox::new(0.8, 0.8, 0.2, 0.2).unwrap();
    assert!((giou(&a, &b) + 0.875).abs() < 1e-9);
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 100 {
        let (p, g) = (random_box(&mut rng, 0.1), random_box(&mut rng, 0.1));
        if iou(&p, &g) <= 0.0 {
            continue;
        }
        for variant in [IouVariant::Plain, IouVariant::Generalized] {
            let cfg = LossConfig { lambda_l1: 5.0, lambda_iou: 2.0, iou_variant: variant };
            let a = loss_gradient(&p, &g, &cfg);
            let n = numeric_gradient(&p, &g, &cfg, 1e-5);
            for i in 0..4 {
                assert!(relative_error(a[i], n[i]) < 1e-4, "{variant:?} {p:?} {g:?} coord {i}: {} vs {}", a[i], n[i]);
            }
        }
        checked += 1;
    }
}
