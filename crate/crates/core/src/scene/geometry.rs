//! Planar geometry over lane polygons and centerline polylines.

use crate::Scalar;

pub type Point<T = f64> = [T; 2];

#[inline]
pub fn dist<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Even-odd ray casting. Points on an edge may land on either side.
pub fn point_in_polygon<T: Scalar>(p: Point<T>, poly: &[Point<T>]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x_cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// True if `p` lies in at least one polygon.
pub fn on_road<T: Scalar>(p: Point<T>, lanes: &[Vec<Point<T>>]) -> bool {
    lanes.iter().any(|poly| point_in_polygon(p, poly))
}

fn orient<T: Scalar>(a: Point<T>, b: Point<T>, c: Point<T>) -> T {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Proper crossing test. Orientations within rounding of zero count as
/// collinear, so nearly collinear far-apart edges are not flagged.
fn segments_cross<T: Scalar>(p1: Point<T>, p2: Point<T>, q1: Point<T>, q2: Point<T>) -> bool {
    for ax in 0..2 {
        if p1[ax].max(p2[ax]) < q1[ax].min(q2[ax]) || q1[ax].max(q2[ax]) < p1[ax].min(p2[ax]) {
            return false;
        }
    }
    let tol = T::lit(1e-9) * (dist(p1, p2) * dist(q1, q2) + T::epsilon());
    let sign = |d: T| if d > tol { 1 } else if d < -tol { -1 } else { 0 };
    let d1 = sign(orient(q1, q2, p1));
    let d2 = sign(orient(q1, q2, p2));
    let d3 = sign(orient(p1, p2, q1));
    let d4 = sign(orient(p1, p2, q2));
    d1 * d2 < 0 && d3 * d4 < 0
}

/// No two non-adjacent edges properly intersect.
pub fn is_simple_polygon<T: Scalar>(poly: &[Point<T>]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (poly[i], poly[(i + 1) % n]);
        for j in i + 1..n {
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            if segments_cross(a1, a2, poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Centerline with arclength parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    points: Vec<Point>,
    cumlen: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Self {
        assert!(points.len() >= 2, "polyline needs two points");
        let mut cumlen = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumlen.push(0.0);
        for w in points.windows(2) {
            acc += dist(w[0], w[1]);
            cumlen.push(acc);
        }
        Self { points, cumlen }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumlen.last().unwrap()
    }

    fn segment(&self, s: f64) -> usize {
        let s = s.clamp(0.0, self.length());
        match self.cumlen.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => (i - 1).min(self.points.len() - 2),
        }
    }

    /// Position at arclength `s`, extrapolating linearly past either end.
    pub fn point_at(&self, s: f64) -> Point {
        let i = if s <= 0.0 {
            0
        } else if s >= self.length() {
            self.points.len() - 2
        } else {
            self.segment(s)
        };
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cumlen[i + 1] - self.cumlen[i];
        let t = (s - self.cumlen[i]) / seg;
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Unit tangent at arclength `s`.
    pub fn tangent_at(&self, s: f64) -> Point {
        let i = self.segment(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let d = dist(a, b);
        [(b[0] - a[0]) / d, (b[1] - a[1]) / d]
    }

    /// Left-hand unit normal at arclength `s`.
    pub fn normal_at(&self, s: f64) -> Point {
        let t = self.tangent_at(s);
        [-t[1], t[0]]
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let t = self.tangent_at(s);
        t[1].atan2(t[0])
    }

    /// Arclength and signed lateral offset (left positive) of the closest
    /// point on the polyline.
    pub fn project(&self, p: Point) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let t = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
            let q = [a[0] + t * d[0], a[1] + t * d[1]];
            let dd = dist(p, q);
            if dd < best.0 {
                let len = len2.sqrt();
                let side = (d[0] * (p[1] - a[1]) - d[1] * (p[0] - a[0])) / len;
                best = (dd, self.cumlen[i] + t * len, side);
            }
        }
        (best.1, best.2)
    }

    /// Polyline shifted sideways by `offset` (left positive).
    pub fn offset(&self, offset: f64) -> Polyline {
        let n = self.points.len();
        let pts = (0..n)
            .map(|i| {
                let prev = self.points[i.saturating_sub(1)];
                let next = self.points[(i + 1).min(n - 1)];
                let d = dist(prev, next);
                let nrm = [-(next[1] - prev[1]) / d, (next[0] - prev[0]) / d];
                [self.points[i][0] + offset * nrm[0], self.points[i][1] + offset * nrm[1]]
            })
            .collect();
        Polyline::new(pts)
    }

    /// Lane polygon of the given total width around this centerline.
    pub fn lane_polygon(&self, width: f64) -> Vec<Point> {
        let left = self.offset(width / 2.0);
        let right = self.offset(-width / 2.0);
        let mut poly = left.points;
        poly.extend(right.points.into_iter().rev());
        poly
    }

    pub fn transformed(&self, f: impl Fn(Point) -> Point) -> Polyline {
        Polyline::new(self.points.iter().map(|&p| f(p)).collect())
    }
}

/// Straight centerline from `start` along `heading`.
pub fn line(start: Point, heading: f64, length: f64, step: f64) -> Vec<Point> {
    let n = (length / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let s = length * i as f64 / n as f64;
            [start[0] + s * heading.cos(), start[1] + s * heading.sin()]
        })
        .collect()
}

/// Circular arc starting at `start` with initial `heading`; positive
/// `curvature` turns left.
pub fn arc(start: Point, heading: f64, curvature: f64, length: f64, step: f64) -> Vec<Point> {
    if curvature == 0.0 {
        return line(start, heading, length, step);
    }
    let r = 1.0 / curvature;
    let center = [start[0] - r * heading.sin(), start[1] + r * heading.cos()];
    let n = (length / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let s = length * i as f64 / n as f64;
            let h = heading + s * curvature;
            [center[0] + r * h.sin(), center[1] - r * h.cos()]
        })
        .collect()
}
