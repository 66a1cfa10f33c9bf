use fclip::geometry::*;
use fclip::Error;
use proptest::prelude::*;
use std::f64::consts::PI;

fn seg(x1: f64, y1: f64, x2: f64, y2: f64) -> LineSegment {
    LineSegment::from_coords(x1, y1, x2, y2).unwrap()
}

#[test]
fn horizontal_segment() {
    let r = to_cla(&seg(6.0, 10.0, 14.0, 10.0)).unwrap();
    assert_eq!(r.center, Point::new(10.0, 10.0));
    assert_eq!(r.length, 8.0);
    assert_eq!(r.angle, 0.0);
}

#[test]
fn vertical_segment() {
    let r = to_cla(&seg(5.0, 5.0, 5.0, 9.0)).unwrap();
    assert_eq!(r.center, Point::new(5.0, 7.0));
    assert_eq!(r.length, 4.0);
    assert!((r.angle - PI / 2.0).abs() < 1e-15);
}

#[test]
fn three_four_five() {
    let r = to_cla(&seg(0.0, 0.0, 3.0, 4.0)).unwrap();
    assert_eq!(r.center, Point::new(1.5, 2.0));
    assert_eq!(r.length, 5.0);
    assert!((r.angle - 4f64.atan2(3.0)).abs() < 1e-15);
}

#[test]
fn from_cla_inverts_examples() {
    let s = from_cla(&ClaRep { center: Point::new(10.0, 10.0), length: 8.0, angle: 0.0 }).unwrap();
    assert_eq!(s.coords(), [6.0, 10.0, 14.0, 10.0]);
    let s = from_cla(&ClaRep { center: Point::new(0.0, 0.0), length: 2.0, angle: PI / 2.0 }).unwrap();
    let [x1, y1, x2, y2] = s.coords();
    assert!(x1.abs() < 1e-15 && x2.abs() < 1e-15);
    assert!((y1 + 1.0).abs() < 1e-15 && (y2 - 1.0).abs() < 1e-15);
}

#[test]
fn zero_length_is_rejected() {
    assert!(matches!(LineSegment::from_coords(1.0, 1.0, 1.0, 1.0), Err(Error::ZeroLength(..))));
    let rep = ClaRep { center: Point::new(0.0, 0.0), length: 0.0, angle: 0.0 };
    assert!(from_cla(&rep).is_err());
}

#[test]
fn endpoints_are_canonical() {
    let s = seg(14.0, 10.0, 6.0, 10.0);
    assert_eq!(s.left(), Point::new(6.0, 10.0));
    let s = seg(5.0, 9.0, 5.0, 5.0);
    assert_eq!(s.left(), Point::new(5.0, 5.0));
}

#[test]
fn struct_distance_examples() {
    let a = seg(0.0, 0.0, 4.0, 0.0);
    assert_eq!(struct_distance(&a, &a), 0.0);
    let swapped = LineSegment::unchecked(a.right(), a.left(), 1.0);
    assert_eq!(struct_distance(&a, &swapped), 0.0);
    assert_eq!(struct_distance(&a, &seg(0.0, 1.0, 4.0, 1.0)), 2.0);
}

#[test]
fn fold_angle_range() {
    assert_eq!(fold_angle(PI), 0.0);
    assert!((0.0..PI).contains(&fold_angle(-1e-17)));
    assert!((fold_angle(-PI / 4.0) - 3.0 * PI / 4.0).abs() < 1e-15);
}

fn arb_segment() -> impl Strategy<Value = LineSegment> {
    (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64)
        .prop_filter("non-degenerate", |(a, b, c, d)| (a - c).hypot(b - d) > 1e-3)
        .prop_map(|(a, b, c, d)| seg(a, b, c, d))
}

proptest! {
    #[test]
    fn struct_distance_is_symmetric_and_non_negative(a in arb_segment(), b in arb_segment()) {
        let d = struct_distance(&a, &b);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, struct_distance(&b, &a));
    }

    #[test]
    fn cla_round_trip(center_x in -100.0..100.0f64, center_y in -100.0..100.0f64,
                      length in 0.01..200.0f64, angle in 0.0..PI) {
        let rep = ClaRep { center: Point::new(center_x, center_y), length, angle };
        let s1 = from_cla(&rep).unwrap();
        let back = to_cla(&s1).unwrap();
        prop_assert!((back.length - length).abs() < 1e-9);
        let s2 = from_cla(&back).unwrap();
        prop_assert!(struct_distance(&s1, &s2).sqrt() < 1e-9);
    }
}
