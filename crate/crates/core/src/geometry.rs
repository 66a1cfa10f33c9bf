//! Line segments, the center/length/angle parameterization, and the
//! structural distance between segments.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height × width of an image or a map grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Size {
    pub height: usize,
    pub width: usize,
}

impl Size {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn square(side: usize) -> Self {
        Self { height: side, width: side }
    }

    pub fn area(self) -> usize {
        self.height * self.width
    }

    pub fn diagonal(self) -> f64 {
        (self.height as f64).hypot(self.width as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_sq(self, other: Point) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        dx * dx + dy * dy
    }

    pub fn scaled(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }
}

/// `left` precedes `right` under (x, then y) ordering.
fn canonical(a: Point, b: Point) -> (Point, Point) {
    if (a.x, a.y) <= (b.x, b.y) {
        (a, b)
    } else {
        (b, a)
    }
}

/// A scored 2-D segment in image pixel coordinates. The left endpoint is the
/// one with smaller x (ties: smaller y).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    left: Point,
    right: Point,
    pub score: f64,
}

impl LineSegment {
    /// A ground-truth segment (score 1.0). Fails when the endpoints coincide.
    pub fn new(a: Point, b: Point) -> Result<Self> {
        if a.distance_sq(b) == 0.0 || !(a.x.is_finite() && a.y.is_finite() && b.x.is_finite() && b.y.is_finite()) {
            return Err(Error::ZeroLength(a.x, a.y));
        }
        Ok(Self::unchecked(a, b, 1.0))
    }

    pub fn from_coords(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(Point::new(x1, y1), Point::new(x2, y2))
    }

    /// Builds a segment without the positive-length check; decoded
    /// detections on empty cells may be degenerate.
    pub fn unchecked(a: Point, b: Point, score: f64) -> Self {
        let (left, right) = canonical(a, b);
        Self { left, right, score }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn left(&self) -> Point {
        self.left
    }

    pub fn right(&self) -> Point {
        self.right
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.left.x, self.left.y, self.right.x, self.right.y]
    }

    pub fn length(&self) -> f64 {
        self.left.distance_sq(self.right).sqrt()
    }

    pub fn midpoint(&self) -> Point {
        Point::new(0.5 * (self.left.x + self.right.x), 0.5 * (self.left.y + self.right.y))
    }

    /// Applies `f` to both endpoints and re-canonicalizes.
    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Self {
        Self::unchecked(f(self.left), f(self.right), self.score)
    }

    /// Uniformly rescales coordinates, e.g. into the 128×128 evaluation frame.
    pub fn scaled(&self, k: f64) -> Self {
        self.map_points(|p| p.scaled(k))
    }

    pub fn to_cla(&self) -> Result<ClaRep> {
        to_cla(self)
    }

    /// Both endpoints lie inside the pixel-center domain `[0, W-1] × [0, H-1]`.
    pub fn within(&self, size: Size) -> bool {
        let (w, h) = (size.width as f64 - 1.0, size.height as f64 - 1.0);
        let inside = |p: Point| p.x >= 0.0 && p.y >= 0.0 && p.x <= w && p.y <= h;
        inside(self.left) && inside(self.right)
    }
}

/// Center, length and undirected angle of a segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaRep {
    pub center: Point,
    pub length: f64,
    /// Radians in [0, π).
    pub angle: f64,
}

/// Folds any angle into [0, π).
pub fn fold_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(PI);
    if a >= PI {
        a -= PI;
    }
    a
}

pub fn to_cla(seg: &LineSegment) -> Result<ClaRep> {
    let length = seg.length();
    if length <= 0.0 {
        return Err(Error::ZeroLength(seg.left.x, seg.left.y));
    }
    let (dx, dy) = (seg.right.x - seg.left.x, seg.right.y - seg.left.y);
    Ok(ClaRep { center: seg.midpoint(), length, angle: fold_angle(dy.atan2(dx)) })
}

/// Endpoints `center ± ½·l·(cos α, sin α)`, canonicalized.
pub fn from_cla(rep: &ClaRep) -> Result<LineSegment> {
    if !(rep.length > 0.0) {
        return Err(Error::ZeroLength(rep.center.x, rep.center.y));
    }
    Ok(from_cla_unchecked(rep, 1.0))
}

pub(crate) fn from_cla_unchecked(rep: &ClaRep, score: f64) -> LineSegment {
    let half = 0.5 * rep.length;
    let (s, c) = rep.angle.sin_cos();
    let a = Point::new(rep.center.x + half * c, rep.center.y + half * s);
    let b = Point::new(rep.center.x - half * c, rep.center.y - half * s);
    LineSegment::unchecked(a, b, score)
}

/// Minimum over the two endpoint pairings of the summed squared endpoint
/// distances.
pub fn struct_distance(a: &LineSegment, b: &LineSegment) -> f64 {
    let straight = a.left.distance_sq(b.left) + a.right.distance_sq(b.right);
    let crossed = a.left.distance_sq(b.right) + a.right.distance_sq(b.left);
    straight.min(crossed)
}
