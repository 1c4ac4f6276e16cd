//! Planar polygon helpers.

use nalgebra::Vector2;

pub type Point = Vector2<f64>;

fn cross(o: &Point, a: &Point, b: &Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Closed convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    /// Convex hull (monotone chain), collinear points dropped. The first
    /// vertex is the one with the smallest polar angle in `[0, 2pi)`.
    pub fn hull(points: &[Point]) -> ConvexPolygon {
        let mut pts: Vec<Point> = points.to_vec();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        pts.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
        if pts.len() < 3 {
            return ConvexPolygon { vertices: pts };
        }
        let eps = 1e-12;
        let mut lower: Vec<Point> = Vec::new();
        for p in &pts {
            while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= eps {
                lower.pop();
            }
            lower.push(*p);
        }
        let mut upper: Vec<Point> = Vec::new();
        for p in pts.iter().rev() {
            while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= eps {
                upper.pop();
            }
            upper.push(*p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);

        let polar = |p: &Point| {
            let a = p.y.atan2(p.x).rem_euclid(std::f64::consts::TAU);
            // treat angles a hair below 2pi as zero
            if std::f64::consts::TAU - a < 1e-9 {
                0.0
            } else {
                a
            }
        };
        let start = lower
            .iter()
            .enumerate()
            .min_by(|a, b| polar(a.1).total_cmp(&polar(b.1)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        lower.rotate_left(start);
        ConvexPolygon { vertices: lower }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    fn edges(&self) -> impl Iterator<Item = (&Point, &Point)> {
        let n = self.vertices.len();
        (0..n).map(move |i| (&self.vertices[i], &self.vertices[(i + 1) % n]))
    }

    /// Closed-set membership with `tol` mm of slack on every edge.
    pub fn contains(&self, p: &Point, tol: f64) -> bool {
        if self.vertices.len() < 3 {
            return false;
        }
        self.edges().all(|(a, b)| {
            let len = (b - a).norm();
            cross(a, b, p) / len >= -tol
        })
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        bounding_box(&self.vertices)
    }

    pub fn circumradius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Distance from the origin to the nearest edge.
    pub fn inradius(&self) -> f64 {
        let o = Point::zeros();
        self.edges()
            .map(|(a, b)| cross(a, b, &o) / (b - a).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// `[x_min, x_max]` of the horizontal line at `y` clipped to the polygon.
    pub fn horizontal_chord(&self, y: f64) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (a, b) in self.edges() {
            let (y0, y1) = (a.y.min(b.y), a.y.max(b.y));
            if y < y0 || y > y1 {
                continue;
            }
            if (b.y - a.y).abs() < 1e-15 {
                lo = lo.min(a.x.min(b.x));
                hi = hi.max(a.x.max(b.x));
            } else {
                let t = (y - a.y) / (b.y - a.y);
                let x = a.x + t * (b.x - a.x);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }
}

pub fn bounding_box(points: &[Point]) -> (Point, Point) {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Simple polygon, either orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// Returns `None` for fewer than three vertices, zero area or a
    /// self-intersecting boundary.
    pub fn new(vertices: Vec<Point>) -> Option<Polygon> {
        let poly = Polygon { vertices };
        (poly.vertices.len() >= 3 && poly.area() > 1e-12 && poly.is_simple()).then_some(poly)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let twice: f64 = (0..n)
            .map(|i| {
                let (a, b) = (&self.vertices[i], &self.vertices[(i + 1) % n]);
                a.x * b.y - b.x * a.y
            })
            .sum();
        twice.abs() / 2.0
    }

    fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            for j in (i + 1)..n {
                // adjacent edges share a vertex
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (c, d) = (self.vertices[j], self.vertices[(j + 1) % n]);
                if segments_intersect(&a, &b, &c, &d) {
                    return false;
                }
            }
        }
        true
    }

    /// Even-odd membership test.
    pub fn contains(&self, p: &Point) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (vi, vj) = (&self.vertices[i], &self.vertices[j]);
            if (vi.y > p.y) != (vj.y > p.y) && p.x < (vj.x - vi.x) * (p.y - vi.y) / (vj.y - vi.y) + vi.x {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    pub fn boundary_distance(&self, p: &Point) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| segment_distance(p, &self.vertices[i], &self.vertices[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        bounding_box(&self.vertices)
    }
}

pub fn segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn segments_intersect(a: &Point, b: &Point, c: &Point, d: &Point) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: &Point, q: &Point, r: &Point| {
        r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    (d1 == 0.0 && on(c, d, a)) || (d2 == 0.0 && on(c, d, b)) || (d3 == 0.0 && on(a, b, c)) || (d4 == 0.0 && on(a, b, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Vec<Point> {
        vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(2.0, 2.0),
            Point::new(0.0, 2.0),
        ]
    }

    #[test]
    fn hull_drops_interior_and_collinear_points() {
        let mut pts = square();
        pts.push(Point::new(1.0, 1.0));
        pts.push(Point::new(1.0, 0.0));
        let hull = ConvexPolygon::hull(&pts);
        assert_eq!(hull.vertices().len(), 4);
        assert!(hull.contains(&Point::new(1.0, 1.0), 0.0));
        assert!(hull.contains(&Point::new(2.0, 1.0), 0.0));
        assert!(!hull.contains(&Point::new(2.1, 1.0), 1e-9));
    }

    #[test]
    fn chord_of_square() {
        let hull = ConvexPolygon::hull(&square());
        assert_eq!(hull.horizontal_chord(1.0), Some((0.0, 2.0)));
        assert_eq!(hull.horizontal_chord(3.0), None);
    }

    #[test]
    fn polygon_validation() {
        assert!(Polygon::new(square()).is_some());
        let bowtie = vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 2.0),
            Point::new(2.0, 0.0),
            Point::new(0.0, 2.0),
        ];
        assert!(Polygon::new(bowtie).is_none());
        assert!(Polygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(2.0, 0.0)]).is_none());
    }

    #[test]
    fn polygon_area_and_membership() {
        let poly = Polygon::new(square()).unwrap();
        assert_eq!(poly.area(), 4.0);
        assert!(poly.contains(&Point::new(1.0, 1.5)));
        assert!(!poly.contains(&Point::new(2.5, 1.0)));
        assert!((poly.boundary_distance(&Point::new(3.0, 1.0)) - 1.0).abs() < 1e-12);
    }
}
