//! Planar geometry: polylines with arc-length coordinates and oriented boxes.

use std::f64::consts::PI;

pub type Vec2 = nalgebra::Vector2<f64>;

/// Wrap an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

pub fn heading_vec(psi: f64) -> Vec2 {
    Vec2::new(psi.cos(), psi.sin())
}

/// Left normal of a unit direction.
pub fn left_of(d: Vec2) -> Vec2 {
    Vec2::new(-d.y, d.x)
}

/// Open polyline parameterized by arc length `s`.
#[derive(Clone, Debug)]
pub struct Polyline {
    points: Vec<Vec2>,
    cum: Vec<f64>,
    lo: Vec2,
    hi: Vec2,
}

/// Position of a point relative to a polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalCoords {
    pub s: f64,
    /// Signed offset, positive to the left of the direction of travel.
    pub lateral: f64,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        assert!(points.len() >= 2, "polyline needs two points");
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in points.windows(2) {
            acc += (w[1] - w[0]).norm();
            cum.push(acc);
        }
        let lo = points.iter().fold(Vec2::repeat(f64::INFINITY), |a, p| a.inf(p));
        let hi = points.iter().fold(Vec2::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
        Self { points, cum, lo, hi }
    }

    pub fn straight(from: Vec2, to: Vec2) -> Self {
        Self::new(vec![from, to])
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    fn segment_at(&self, s: f64) -> usize {
        let idx = self.cum.partition_point(|&c| c <= s);
        idx.saturating_sub(1).min(self.points.len() - 2)
    }

    /// Point at arc length `s` and lateral offset; extrapolates past both ends.
    pub fn position(&self, s: f64, lateral: f64) -> Vec2 {
        let k = self.segment_at(s);
        let (a, b) = (self.points[k], self.points[k + 1]);
        let d = (b - a).normalize();
        a + d * (s - self.cum[k]) + left_of(d) * lateral
    }

    pub fn heading(&self, s: f64) -> f64 {
        let k = self.segment_at(s);
        let d = self.points[k + 1] - self.points[k];
        d.y.atan2(d.x)
    }

    /// Closest-segment projection, searching only segments overlapping
    /// `[s_hint − window, s_hint + window]` when a hint is given.
    pub fn project(&self, p: Vec2, hint: Option<(f64, f64)>) -> LocalCoords {
        let n = self.points.len() - 1;
        let (k0, k1) = match hint {
            Some((s, w)) => (self.segment_at(s - w), self.segment_at(s + w)),
            None => (0, n - 1),
        };
        let mut best = (f64::INFINITY, LocalCoords { s: 0.0, lateral: 0.0 });
        for k in k0..=k1 {
            let (a, b) = (self.points[k], self.points[k + 1]);
            let seg = b - a;
            let len = seg.norm();
            let d = seg / len;
            let mut t = (p - a).dot(&d);
            // Only the end segments extrapolate.
            if k > 0 {
                t = t.max(0.0);
            }
            if k < n - 1 {
                t = t.min(len);
            }
            let foot = a + d * t;
            let dist = (p - foot).norm();
            if dist < best.0 {
                let lateral = (p - a).dot(&left_of(d));
                best = (dist, LocalCoords { s: self.cum[k] + t, lateral });
            }
        }
        best.1
    }

    /// True when `p` may lie within `margin` of the polyline.
    pub fn near_bbox(&self, p: Vec2, margin: f64) -> bool {
        p.x >= self.lo.x - margin && p.x <= self.hi.x + margin && p.y >= self.lo.y - margin && p.y <= self.hi.y + margin
    }
}

/// Quadratic Bézier sampled into `n + 1` points.
pub fn bezier(p0: Vec2, p1: Vec2, p2: Vec2, n: usize) -> Vec<Vec2> {
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            p0 * (1.0 - t).powi(2) + p1 * (2.0 * (1.0 - t) * t) + p2 * t * t
        })
        .collect()
}

/// Counter-clockwise arc from `from` to `to` (radians), `to > from`.
pub fn arc(center: Vec2, radius: f64, from: f64, to: f64, step: f64) -> Vec<Vec2> {
    let n = (((to - from) * radius / step).ceil() as usize).max(1);
    (0..=n)
        .map(|i| {
            let a = from + (to - from) * i as f64 / n as f64;
            center + Vec2::new(a.cos(), a.sin()) * radius
        })
        .collect()
}

/// Oriented rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn corners(&self) -> [Vec2; 4] {
        let f = heading_vec(self.heading) * (self.length / 2.0);
        let l = left_of(heading_vec(self.heading)) * (self.width / 2.0);
        let c = self.center;
        [c + f + l, c + f - l, c - f - l, c - f + l]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let d = p - self.center;
        let f = heading_vec(self.heading);
        d.dot(&f).abs() <= self.length / 2.0 && d.dot(&left_of(f)).abs() <= self.width / 2.0
    }

    /// Separating-axis overlap test; touching boxes do not overlap.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let reach = (self.length.hypot(self.width) + other.length.hypot(other.width)) / 2.0;
        if (self.center - other.center).norm() > reach {
            return false;
        }
        let (ca, cb) = (self.corners(), other.corners());
        let axes = [
            heading_vec(self.heading),
            left_of(heading_vec(self.heading)),
            heading_vec(other.heading),
            left_of(heading_vec(other.heading)),
        ];
        axes.iter().all(|ax| {
            let (a0, a1) = extent(&ca, ax);
            let (b0, b1) = extent(&cb, ax);
            a0 < b1 && b0 < a1
        })
    }
}

fn extent(corners: &[Vec2; 4], axis: &Vec2) -> (f64, f64) {
    corners.iter().map(|c| c.dot(axis)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}
