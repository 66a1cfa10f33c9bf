use fclip::encoding::*;
use fclip::geometry::*;
use fclip::Error;

fn seg(x1: f64, y1: f64, x2: f64, y2: f64) -> LineSegment {
    LineSegment::from_coords(x1, y1, x2, y2).unwrap()
}

#[test]
fn grid_aligned_center() {
    let maps = encode(&[seg(36.0, 40.0, 44.0, 40.0)], Size::square(128), Size::square(32)).unwrap();
    let cell = 10 * 32 + 10;
    assert_eq!(maps.center[cell], 1.0);
    assert_eq!(maps.offset[cell], 0.0);
    assert_eq!(maps.offset[32 * 32 + cell], 0.0);
    assert_eq!(maps.positives(), 1);
}

#[test]
fn fractional_center() {
    let maps = encode(&[seg(38.0, 41.0, 46.0, 41.0)], Size::square(128), Size::square(32)).unwrap();
    let cell = 10 * 32 + 10;
    assert_eq!(maps.center[cell], 1.0);
    assert_eq!(maps.offset[cell], 0.5);
    assert_eq!(maps.offset[32 * 32 + cell], 0.25);
    assert_eq!(maps.length[cell], 8.0 / Size::square(128).diagonal());
    assert_eq!(maps.angle[cell], 0.0);
}

#[test]
fn empty_list_gives_zero_maps() {
    let maps = encode(&[], Size::square(64), Size::square(64)).unwrap();
    assert!(maps.center.iter().chain(&maps.offset).chain(&maps.length).chain(&maps.angle).all(|&v| v == 0.0));
}

#[test]
fn collision_keeps_longer_segment_regardless_of_order() {
    let short = seg(8.0, 10.0, 12.0, 10.0);
    let long = seg(0.0, 10.2, 20.0, 10.2);
    let a = encode(&[short, long], Size::square(32), Size::square(32)).unwrap();
    let b = encode(&[long, short], Size::square(32), Size::square(32)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.length[10 * 32 + 10], 20.0 / Size::square(32).diagonal());
}

#[test]
fn center_outside_image_is_an_error() {
    let err = encode(&[seg(60.0, 10.0, 70.0, 10.0)], Size::square(64), Size::square(64)).unwrap_err();
    assert!(matches!(err, Error::CenterOutsideImage { .. }));
}

#[test]
fn non_dividing_map_is_rejected() {
    assert!(encode(&[], Size::square(64), Size::square(30)).is_err());
}

#[test]
fn zero_scores_still_fill_k() {
    let maps = encode(&[], Size::square(16), Size::square(16)).unwrap();
    let dets = decode(&PredictionMaps::from_targets(&maps), 1.0, Size::square(16), 5).unwrap();
    assert_eq!(dets.len(), 5);
    assert!(dets.iter().all(|s| s.score == 0.0));
}

#[test]
fn single_positive_is_top_one() {
    let gt = seg(3.25, 7.5, 11.0, 2.0);
    let maps = encode(&[gt], Size::square(16), Size::square(16)).unwrap();
    let dets = decode(&PredictionMaps::from_targets(&maps), 1.0, Size::square(16), 1).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets.segments()[0].score, 1.0);
    assert!(struct_distance(&dets.segments()[0], &gt).sqrt() < 1e-12);
}

#[test]
fn decode_orders_ties_by_cell_index() {
    let map_size = Size::new(1, 4);
    let maps = PredictionMaps {
        map_size,
        center: vec![0.5, 0.9, 0.5, 0.1],
        offset: vec![0.5; 8],
        length: vec![0.1; 4],
        angle: vec![0.0; 4],
    };
    let image = Size::new(4, 16);
    let dets = decode(&maps, 4.0, image, 3).unwrap();
    let cells: Vec<f64> = dets.iter().map(|s| (s.midpoint().x / 4.0).floor()).collect();
    assert_eq!(cells, vec![1.0, 0.0, 2.0]);
    assert_eq!(decode(&maps, 4.0, image, 10).unwrap().len(), 4);
}
