mod common;

#[test]
fn hand_oracles_reproduce() {
    let checks = common::fixture_checks();
    assert!(checks.len() >= 20);
    for (label, dev) in checks {
        assert!(dev <= 1e-6, "{label}: deviation {dev}");
    }
}

#[test]
fn raster_oracle_exact_on_grid_aligned_boxes() {
    use grounding_loss::geometry::{iou, CornerBox};
    let a = CornerBox::from_array([0.0, 0.0, 200.0, 200.0]);
    let b = CornerBox::from_array([100.0, 100.0, 300.0, 300.0]);
    let r = common::raster_iou(&a, &b);
    assert!((r - iou(&a, &b)).abs() < 1e-12);
    assert!((r - 1.0 / 7.0).abs() < 1e-12);
}

#[test]
fn resolution_interval_rejects_wrong_iou() {
    use grounding_loss::geometry::iou;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let (mut inside, mut wrong_inside, mut overlapping) = (0, 0, 0);
    for _ in 0..200 {
        let a = common::random_grid_box(&mut rng, 100.0);
        let b = common::random_nearby_box(&mut rng, &a, 100.0);
        let (lo, hi) = common::raster_iou_interval(&a, &b);
        let v = iou(&a, &b);
        inside += usize::from(v >= lo && v <= hi);
        if v > 0.05 {
            overlapping += 1;
            // Intersection over summed areas instead of the union.
            let wrong = v / (1.0 + v);
            wrong_inside += usize::from(wrong >= lo && wrong <= hi);
        }
    }
    assert_eq!(inside, 200);
    assert!(overlapping > 100);
    assert_eq!(wrong_inside, 0);
}
