use fclip::augment::*;
use fclip::geometry::*;
use fclip::image::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seg(x1: f64, y1: f64, x2: f64, y2: f64) -> LineSegment {
    LineSegment::from_coords(x1, y1, x2, y2).unwrap()
}

fn ramp(size: Size) -> Image {
    Image::new(size, (0..size.area()).map(|i| i as f64 / size.area() as f64).collect()).unwrap()
}

#[test]
fn horizontal_flip_example() {
    let s = GeoTransform::FlipH.apply_segment(&seg(1.0, 2.0, 5.0, 2.0), Size::square(10));
    assert_eq!(s.coords(), [4.0, 2.0, 8.0, 2.0]);
}

#[test]
fn two_clockwise_turns_equal_both_flips() {
    let size = Size::new(6, 9);
    let im = ramp(size);
    let s = seg(1.0, 2.0, 7.0, 4.5);
    let (im1, s1) = GeoTransform::Rot90Cw.apply(&im, &[s]);
    let (im2, s2) = GeoTransform::Rot90Cw.apply(&im1, &s1);
    let (im3, s3) = GeoTransform::FlipHV.apply(&im, &[s]);
    assert_eq!(im2, im3);
    assert_eq!(s2, s3);
}

#[test]
fn rotation_moves_pixels_with_points() {
    let size = Size::new(4, 7);
    let im = ramp(size);
    for t in GeoTransform::ALL {
        let out = t.apply_image(&im);
        for (x, y) in [(0, 0), (6, 1), (3, 3)] {
            let p = t.apply_point(Point::new(x as f64, y as f64), size);
            assert_eq!(out.get(p.x as usize, p.y as usize), im.get(x, y), "{t:?}");
        }
    }
}

#[test]
fn full_size_expansion_is_identity() {
    let im = ramp(Size::square(8));
    let s = vec![seg(0.0, 0.0, 7.0, 3.0)];
    let (out, segs) = Expansion { k: 8, x0: 0, y0: 0 }.apply(&im, &s).unwrap();
    assert_eq!(out, im);
    assert_eq!(segs, s);
}

#[test]
fn half_size_expansion_halves_lengths() {
    let im = ramp(Size::square(16));
    let s = vec![seg(0.0, 0.0, 15.0, 9.0), seg(3.0, 12.0, 3.0, 1.0)];
    let (_, out) = Expansion { k: 8, x0: 5, y0: 2 }.apply(&im, &s).unwrap();
    for (a, b) in s.iter().zip(&out) {
        assert_eq!(b.length(), a.length() / 2.0);
    }
}

#[test]
fn bad_expansion_is_rejected() {
    let im = ramp(Size::square(8));
    assert!(Expansion { k: 9, x0: 0, y0: 0 }.apply(&im, &[]).is_err());
    assert!(Expansion { k: 4, x0: 5, y0: 0 }.apply(&im, &[]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(random_expand(&im, &[], &mut rng, (0.0, 1.0)).is_err());
}

fn arb_scene(side: usize) -> impl Strategy<Value = Vec<LineSegment>> {
    let m = (side - 1) as f64;
    prop::collection::vec((0.0..=m, 0.0..=m, 0.0..=m, 0.0..=m), 1..6)
        .prop_map(|v| v.into_iter().filter_map(|(a, b, c, d)| LineSegment::from_coords(a, b, c, d).ok()).collect())
}

proptest! {
    #[test]
    fn transform_then_inverse_restores_scene(segs in arb_scene(12), t in 0usize..6, h in 5usize..10) {
        let size = Size::new(h, 12);
        let segs: Vec<_> = segs.into_iter().filter(|s| s.within(size)).collect();
        let t = GeoTransform::ALL[t];
        let im = ramp(size);
        let (im1, s1) = t.apply(&im, &segs);
        prop_assert!(s1.iter().all(|s| s.within(im1.size)));
        for (a, b) in segs.iter().zip(&s1) {
            prop_assert!((a.length() - b.length()).abs() < 1e-12);
        }
        let (im2, s2) = t.inverse().apply(&im1, &s1);
        prop_assert_eq!(im2, im);
        for (a, b) in segs.iter().zip(&s2) {
            prop_assert!(a.coords().iter().zip(b.coords()).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn expanded_endpoints_stay_in_region(segs in arb_scene(32), seed in 0u64..1000) {
        let im = ramp(Size::square(32));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(16..=32);
        let e = Expansion { k, x0: rng.random_range(0..=32 - k), y0: rng.random_range(0..=32 - k) };
        let (_, out) = e.apply(&im, &segs).unwrap();
        // The placed region covers pixels x0..x0+k-1, i.e. [x0 - ½, x0 + k - ½).
        let (lo_x, lo_y) = (e.x0 as f64 - 0.5, e.y0 as f64 - 0.5);
        let (hi_x, hi_y) = ((e.x0 + k) as f64 - 0.5, (e.y0 + k) as f64 - 0.5);
        for (a, s) in segs.iter().zip(&out) {
            for p in [s.left(), s.right()] {
                prop_assert!(p.x >= lo_x && p.x < hi_x && p.y >= lo_y && p.y < hi_y);
            }
            prop_assert!(s.midpoint().x < 32.0 && s.midpoint().y < 32.0);
            let scaled = a.scaled(k as f64 / 32.0);
            prop_assert!((s.length() - scaled.length()).abs() < 1e-12);
        }
    }
}
