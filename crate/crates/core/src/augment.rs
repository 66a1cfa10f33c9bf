//! Joint image and annotation augmentation: the six flip/rotation maps and the
//! shrink-into-canvas expansion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LineSegment, Point, Size};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeoTransform {
    Identity,
    FlipH,
    FlipV,
    FlipHV,
    Rot90Cw,
    Rot90Ccw,
}

impl GeoTransform {
    pub const ALL: [GeoTransform; 6] = [
        GeoTransform::Identity,
        GeoTransform::FlipH,
        GeoTransform::FlipV,
        GeoTransform::FlipHV,
        GeoTransform::Rot90Cw,
        GeoTransform::Rot90Ccw,
    ];

    pub fn inverse(self) -> Self {
        match self {
            GeoTransform::Rot90Cw => GeoTransform::Rot90Ccw,
            GeoTransform::Rot90Ccw => GeoTransform::Rot90Cw,
            t => t,
        }
    }

    pub fn output_size(self, size: Size) -> Size {
        match self {
            GeoTransform::Rot90Cw | GeoTransform::Rot90Ccw => Size::new(size.width, size.height),
            _ => size,
        }
    }

    /// Maps a point of an image of `size` into the transformed image.
    pub fn apply_point(self, p: Point, size: Size) -> Point {
        let (w1, h1) = (size.width as f64 - 1.0, size.height as f64 - 1.0);
        match self {
            GeoTransform::Identity => p,
            GeoTransform::FlipH => Point::new(w1 - p.x, p.y),
            GeoTransform::FlipV => Point::new(p.x, h1 - p.y),
            GeoTransform::FlipHV => Point::new(w1 - p.x, h1 - p.y),
            GeoTransform::Rot90Cw => Point::new(h1 - p.y, p.x),
            GeoTransform::Rot90Ccw => Point::new(p.y, w1 - p.x),
        }
    }

    pub fn apply_segment(self, seg: &LineSegment, size: Size) -> LineSegment {
        seg.map_points(|p| self.apply_point(p, size))
    }

    pub fn apply_image(self, image: &Image) -> Image {
        let src = image.size;
        let dst = self.output_size(src);
        let inv = self.inverse();
        let mut data = Vec::with_capacity(dst.area());
        for y in 0..dst.height {
            for x in 0..dst.width {
                let p = inv.apply_point(Point::new(x as f64, y as f64), dst);
                data.push(image.get(p.x as usize, p.y as usize));
            }
        }
        Image { size: dst, data }
    }

    pub fn apply(self, image: &Image, segments: &[LineSegment]) -> (Image, Vec<LineSegment>) {
        let segs = segments.iter().map(|s| self.apply_segment(s, image.size)).collect();
        (self.apply_image(image), segs)
    }
}

/// One of the six transforms with equal probability.
pub fn random_geo<R: Rng + ?Sized>(image: &Image, segments: &[LineSegment], rng: &mut R) -> (Image, Vec<LineSegment>) {
    let t = GeoTransform::ALL[rng.random_range(0..GeoTransform::ALL.len())];
    t.apply(image, segments)
}

/// Placement of a shrunken copy inside a zero canvas of the original size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expansion {
    pub k: usize,
    pub x0: usize,
    pub y0: usize,
}

impl Expansion {
    /// `x ↦ x0 + x·k/S`, which scales every length by exactly k/S. Mapped
    /// points stay inside the placed region's pixels, at most ½ px past its
    /// last pixel center.
    pub fn apply_point(&self, p: Point, side: usize) -> Point {
        let r = self.k as f64 / side as f64;
        Point::new(self.x0 as f64 + p.x * r, self.y0 as f64 + p.y * r)
    }

    pub fn apply(&self, image: &Image, segments: &[LineSegment]) -> Result<(Image, Vec<LineSegment>)> {
        let side = image.size.width;
        if image.size.height != side {
            return Err(Error::Config(format!("expansion needs a square image, got {:?}", image.size)));
        }
        if self.k == 0 || self.k > side || self.x0 + self.k > side || self.y0 + self.k > side {
            return Err(Error::Config(format!("expansion {self:?} does not fit a {side}px image")));
        }
        let inv = side as f64 / self.k as f64;
        let mut out = Image::filled(image.size, 0.0);
        for y in self.y0..self.y0 + self.k {
            for x in self.x0..self.x0 + self.k {
                let sx = (x - self.x0) as f64 * inv;
                let sy = (y - self.y0) as f64 * inv;
                out.data[y * side + x] = image.sample(sx, sy);
            }
        }
        let segs = segments.iter().map(|s| s.map_points(|p| self.apply_point(p, side))).collect();
        Ok((out, segs))
    }
}

/// Shrinks the scene to a random k×k square, k/S drawn from `fraction`, at a
/// random position.
pub fn random_expand<R: Rng + ?Sized>(
    image: &Image,
    segments: &[LineSegment],
    rng: &mut R,
    fraction: (f64, f64),
) -> Result<(Image, Vec<LineSegment>)> {
    let side = image.size.width;
    let (lo, hi) = fraction;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("expansion range {fraction:?} outside (0, 1]")));
    }
    let kmin = ((lo * side as f64).ceil() as usize).max(1);
    let kmax = ((hi * side as f64).floor() as usize).max(kmin);
    let k = rng.random_range(kmin..=kmax);
    let x0 = rng.random_range(0..=side - k);
    let y0 = rng.random_range(0..=side - k);
    Expansion { k, x0, y0 }.apply(image, segments)
}
