mod common;

use common::{giou_report, random_pixel_box, raster_areas, raster_areas_by_axis, RASTER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn axis_counts_agree_with_full_raster() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (a, b) = (random_pixel_box(&mut rng), random_pixel_box(&mut rng));
        assert_eq!(raster_areas_by_axis(a, b, RASTER), raster_areas(a, b, RASTER));
    }
}

#[test]
fn random_pairs_and_worked_example_match_raster() {
    let rep = giou_report(10_000, 29);
    println!("max |giou - raster| = {:.2e}", rep.worst);
    assert!(rep.violations.is_empty(), "{:?}", &rep.violations[..rep.violations.len().min(5)]);
    assert!(rep.worst < 2e-3);
    assert_eq!(rep.example_raster, -0.5);
    assert!((rep.example + 0.5).abs() < 1e-6);
}
