//! Oriented rectangles: canonical form, corner conversion, exact overlap.
//!
//! An [`Obb`] stores its long extent in `w`, its short extent in `h`, and
//! `theta` as the angle between the long axis and the x-axis, reduced into
//! `[0, π)`. Exact squares have no long axis, so their angle is reduced into
//! `[0, π/2)` instead.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Edges shorter than this (pixels) make a quad degenerate.
pub const MIN_EDGE: f64 = 1e-6;

/// Relative extent difference under which a box is treated as a square.
const SQUARE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Four rectangle vertices, counterclockwise for quads produced by
/// [`Obb::corners`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerQuad(pub [Point; 4]);

impl CornerQuad {
    pub fn from_coords(c: [f64; 8]) -> Self {
        CornerQuad([
            Point::new(c[0], c[1]),
            Point::new(c[2], c[3]),
            Point::new(c[4], c[5]),
            Point::new(c[6], c[7]),
        ])
    }

    pub fn coords(&self) -> [f64; 8] {
        let p = &self.0;
        [
            p[0].x, p[0].y, p[1].x, p[1].y, p[2].x, p[2].y, p[3].x, p[3].y,
        ]
    }

    /// Signed shoelace area; positive for counterclockwise winding.
    pub fn signed_area(&self) -> f64 {
        shoelace(&self.0)
    }

    /// Reverses the vertex order if the quad winds clockwise.
    pub fn to_ccw(mut self) -> Self {
        if self.signed_area() < 0.0 {
            self.0.reverse();
        }
        self
    }
}

/// Canonical oriented bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Obb {
    /// Builds a canonical box from arbitrary extents and angle.
    ///
    /// Extents are swapped (and the angle rotated by π/2) when `w < h`; the
    /// angle is then reduced mod π, or mod π/2 for squares.
    pub fn canonicalize(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Result<Obb> {
        if !(x.is_finite() && y.is_finite() && theta.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "non-finite box parameters ({x}, {y}, {theta})"
            )));
        }
        if !(w.is_finite() && h.is_finite()) || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "extents must be finite and positive, got w={w} h={h}"
            )));
        }
        let (mut w, mut h, mut theta) = (w, h, theta);
        if w < h {
            std::mem::swap(&mut w, &mut h);
            theta += FRAC_PI_2;
        }
        theta = wrap_half_turn(theta);
        if w - h <= SQUARE_RTOL * w {
            theta = reduce(theta, FRAC_PI_2);
        }
        Ok(Obb { x, y, w, h, theta })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Corners in counterclockwise order starting from the (-w/2, -h/2)
    /// corner of the box frame.
    pub fn corners(&self) -> CornerQuad {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let local = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)];
        CornerQuad(local.map(|(u, v)| Point::new(self.x + c * u - s * v, self.y + s * u + c * v)))
    }

    /// Fits a box to a (possibly imperfect) rectangle by averaging opposite
    /// edges.
    pub fn from_corners(quad: &CornerQuad) -> Result<Obb> {
        let p = &quad.0;
        if p.iter().any(|q| !(q.x.is_finite() && q.y.is_finite())) {
            return Err(Error::InvalidGeometry("non-finite corner".into()));
        }
        let edges = [p[1].sub(p[0]), p[2].sub(p[1]), p[3].sub(p[2]), p[0].sub(p[3])];
        if let Some(e) = edges.iter().find(|e| e.norm() < MIN_EDGE) {
            return Err(Error::InvalidGeometry(format!(
                "degenerate quad, edge length {}",
                e.norm()
            )));
        }
        let cx = (p[0].x + p[1].x + p[2].x + p[3].x) / 4.0;
        let cy = (p[0].y + p[1].y + p[2].y + p[3].y) / 4.0;

        // Opposite edges point in opposite directions; flip the second of each
        // pair before summing so the directions reinforce.
        let dir_a = edges[0].sub(edges[2]);
        let dir_b = edges[1].sub(edges[3]);
        let len_a = (edges[0].norm() + edges[2].norm()) / 2.0;
        let len_b = (edges[1].norm() + edges[3].norm()) / 2.0;

        let (w, h, dir) = if len_a >= len_b {
            (len_a, len_b, dir_a)
        } else {
            (len_b, len_a, dir_b)
        };
        Obb::canonicalize(cx, cy, w, h, dir.y.atan2(dir.x))
    }

    /// Total order over the raw parameters, used for deterministic tie-breaks.
    pub fn total_cmp(&self, other: &Obb) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
            .then(self.theta.total_cmp(&other.theta))
    }
}

/// Reduces an angle into `[0, π)`.
pub fn wrap_half_turn(theta: f64) -> f64 {
    reduce(theta, PI)
}

fn reduce(theta: f64, period: f64) -> f64 {
    let r = theta.rem_euclid(period);
    // rem_euclid can round up to exactly `period` for tiny negative inputs
    if r >= period {
        0.0
    } else {
        r
    }
}

/// Shoelace area of a simple polygon, positive when counterclockwise.
pub fn shoelace(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += poly[i].cross(poly[(i + 1) % n]);
    }
    acc / 2.0
}

/// Sutherland-Hodgman clipping of `subject` by the convex counterclockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let edge = clip[(i + 1) % n].sub(a);
        let side = |p: Point| edge.cross(p.sub(a));
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Exact area of the overlap of two boxes. Symmetric in its arguments.
pub fn intersection_area(a: &Obb, b: &Obb) -> f64 {
    if a == b {
        return a.area();
    }
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let reach = (a.w.hypot(a.h) + b.w.hypot(b.h)) / 2.0;
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    // Clip in a fixed order so that swapping arguments is bit-identical.
    let (subject, clip) = if a.total_cmp(b) == Ordering::Less {
        (a, b)
    } else {
        (b, a)
    };
    let poly = clip_convex(&subject.corners().0, &clip.corners().0);
    shoelace(&poly).max(0.0)
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &Obb, b: &Obb) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Signed difference `theta1 - theta2` folded into `[-π/2, π/2]`, treating
/// orientations as undirected.
pub fn relative_angle(theta1: f64, theta2: f64) -> Result<f64> {
    for t in [theta1, theta2] {
        if !(0.0..PI).contains(&t) {
            return Err(Error::Domain(format!("angle {t} outside [0, π)")));
        }
    }
    let d = theta1 - theta2;
    Ok(if d.abs() <= FRAC_PI_2 {
        d
    } else if d < -FRAC_PI_2 {
        d + PI
    } else {
        d - PI
    })
}
