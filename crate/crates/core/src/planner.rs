//! Scan planning: fine serpentine rasters inside the thermal workspace, coarse
//! tendon poses tiling a lesion, swing-back passes over residual gaps, and the
//! grid coverage metric that scores all of it.
//!
//! Two coordinate systems appear here. Lesions, coarse targets and stamped
//! spots live on the target plane. Raster waypoints are thermal deflections,
//! i.e. offsets from the coarse target of their pose.

use std::collections::VecDeque;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::geometry::{bounding_box, ConvexPolygon, Point, Polygon};
use crate::kinematics::lateral_displacement;
use crate::thermal;

/// Grid resolution used for coverage scoring, mm.
pub const DEFAULT_COVERAGE_RESOLUTION: f64 = 0.05;
/// Fraction of the spot diameter shared by neighbouring strokes.
pub const DEFAULT_RASTER_OVERLAP: f64 = 0.2;
/// Fraction of a tile shared by neighbouring coarse poses.
pub const DEFAULT_TILE_OVERLAP: f64 = 0.15;
/// mm/s
pub const DEFAULT_STROKE_SPEED: f64 = 0.1;
/// Residual gaps below this fraction of the lesion area need no swing-back.
pub const SWINGBACK_MIN_GAP_FRACTION: f64 = 0.005;

// Sampling step used to locate where a stroke enters the dilated lesion.
const CLIP_SAMPLE_STEP: f64 = 0.01;
// Slack keeping raster corners strictly inside the workspace.
const INSET: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("raster does not intersect the workspace")]
    EmptyPath,
    #[error("invalid lesion: {0}")]
    InvalidLesion(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("coarse target ({x:.3}, {y:.3}) mm is beyond the {max:.3} mm tendon reach")]
    LesionOutOfReach { x: f64, y: f64, max: f64 },
}

fn bad(name: &'static str, reason: impl Into<String>) -> PlanError {
    PlanError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Laser footprint model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotModel {
    pub spot_diameter: f64,
}

impl SpotModel {
    pub fn radius(&self) -> f64 {
        self.spot_diameter / 2.0
    }

    /// Stroke spacing that keeps neighbouring footprints overlapping.
    pub fn default_pitch(&self) -> f64 {
        self.spot_diameter * (1.0 - DEFAULT_RASTER_OVERLAP)
    }
}

impl Default for SpotModel {
    fn default() -> Self {
        Self { spot_diameter: 0.5 }
    }
}

/// One stamped laser footprint on the target plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub center: Point,
    pub radius: f64,
}

/// Target region on the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LesionDoc", into = "LesionDoc")]
pub enum Lesion {
    Polygon(Polygon),
    Disc { center: Point, radius: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LesionDoc {
    Disc { center_mm: [f64; 2], radius_mm: f64 },
    Polygon { points_mm: Vec<[f64; 2]> },
}

impl TryFrom<LesionDoc> for Lesion {
    type Error = PlanError;

    fn try_from(doc: LesionDoc) -> Result<Self, Self::Error> {
        match doc {
            LesionDoc::Disc { center_mm, radius_mm } => Lesion::disc(Point::from(center_mm), radius_mm),
            LesionDoc::Polygon { points_mm } => Lesion::polygon(points_mm.into_iter().map(Point::from).collect()),
        }
    }
}

impl From<Lesion> for LesionDoc {
    fn from(lesion: Lesion) -> Self {
        match lesion {
            Lesion::Disc { center, radius } => LesionDoc::Disc {
                center_mm: [center.x, center.y],
                radius_mm: radius,
            },
            Lesion::Polygon(p) => LesionDoc::Polygon {
                points_mm: p.vertices().iter().map(|v| [v.x, v.y]).collect(),
            },
        }
    }
}

impl Lesion {
    pub fn polygon(points: Vec<Point>) -> Result<Lesion, PlanError> {
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(PlanError::InvalidLesion("non-finite vertex".into()));
        }
        Polygon::new(points)
            .map(Lesion::Polygon)
            .ok_or_else(|| PlanError::InvalidLesion("polygon must be simple with positive area".into()))
    }

    pub fn disc(center: Point, radius: f64) -> Result<Lesion, PlanError> {
        if !(radius > 0.0 && radius.is_finite() && center.x.is_finite() && center.y.is_finite()) {
            return Err(PlanError::InvalidLesion("disc radius must be positive".into()));
        }
        Ok(Lesion::Disc { center, radius })
    }

    /// Axis-aligned rectangle from its lower-left and upper-right corners.
    pub fn rectangle(lo: Point, hi: Point) -> Result<Lesion, PlanError> {
        Lesion::polygon(vec![lo, Point::new(hi.x, lo.y), hi, Point::new(lo.x, hi.y)])
    }

    pub fn contains(&self, p: &Point) -> bool {
        match self {
            Lesion::Polygon(poly) => poly.contains(p),
            Lesion::Disc { center, radius } => (p - center).norm() <= *radius,
        }
    }

    /// Distance to the lesion, zero inside.
    pub fn distance(&self, p: &Point) -> f64 {
        match self {
            Lesion::Polygon(poly) => {
                if poly.contains(p) {
                    0.0
                } else {
                    poly.boundary_distance(p)
                }
            }
            Lesion::Disc { center, radius } => ((p - center).norm() - radius).max(0.0),
        }
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        match self {
            Lesion::Polygon(poly) => poly.bounding_box(),
            Lesion::Disc { center, radius } => {
                let r = Vector2::new(*radius, *radius);
                (center - r, center + r)
            }
        }
    }

    /// Whether the lesion lies inside `workspace` translated to `center`.
    pub fn fits_within(&self, workspace: &ConvexPolygon, center: &Point) -> bool {
        match self {
            Lesion::Polygon(poly) => poly.vertices().iter().all(|v| workspace.contains(&(v - center), 0.0)),
            Lesion::Disc { center: c, radius } => workspace.contains(&(c - center), -radius),
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Lesion::Polygon(poly) => poly.area(),
            Lesion::Disc { radius, .. } => std::f64::consts::PI * radius * radius,
        }
    }
}

/// Ordered waypoints of one fine scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterPath {
    pub waypoints: Vec<Point>,
    pub line_pitch: f64,
    pub speed: f64,
}

impl RasterPath {
    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// Stroke `k` runs from waypoint `2k` to `2k + 1`.
    pub fn strokes(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.waypoints.chunks_exact(2).map(|c| (c[0], c[1]))
    }
}

/// One horizontal stroke: constant `y` from `x0` to `x1` (unordered).
#[derive(Debug, Clone, Copy)]
struct Row {
    y: f64,
    x0: f64,
    x1: f64,
}

fn serpentine(rows: &[Row]) -> Vec<Point> {
    let mut out = Vec::with_capacity(rows.len() * 2);
    for (k, r) in rows.iter().enumerate() {
        let (lo, hi) = (r.x0.min(r.x1), r.x0.max(r.x1));
        if k % 2 == 0 {
            out.push(Point::new(lo, r.y));
            out.push(Point::new(hi, r.y));
        } else {
            out.push(Point::new(hi, r.y));
            out.push(Point::new(lo, r.y));
        }
    }
    out
}

/// Row ordinates spanning `height` at `pitch`, centred on `center`.
fn row_offsets(height: f64, pitch: f64) -> Vec<f64> {
    if height < pitch {
        return vec![0.0];
    }
    let n = (height / pitch + 1e-9).floor() as usize + 1;
    (0..n).map(|k| (k as f64 - (n - 1) as f64 / 2.0) * pitch).collect()
}

fn check_positive(name: &'static str, v: f64) -> Result<(), PlanError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(name, format!("must be > 0, got {v}")))
    }
}

/// Serpentine raster centred at the thermal origin, strokes parallel to `x`,
/// clipped to the workspace.
pub fn raster_path(
    width: f64,
    height: f64,
    pitch: f64,
    speed: f64,
    workspace: &ConvexPolygon,
) -> Result<RasterPath, PlanError> {
    check_positive("width", width)?;
    check_positive("height", height)?;
    check_positive("pitch", pitch)?;
    check_positive("speed", speed)?;
    let rows: Vec<Row> = row_offsets(height, pitch)
        .into_iter()
        .filter_map(|y| {
            let (lo, hi) = workspace.horizontal_chord(y)?;
            let x0 = (-width / 2.0).max(lo + INSET);
            let x1 = (width / 2.0).min(hi - INSET);
            (x0 <= x1).then_some(Row { y, x0, x1 })
        })
        .collect();
    if rows.is_empty() {
        return Err(PlanError::EmptyPath);
    }
    Ok(RasterPath {
        waypoints: serpentine(&rows),
        line_pitch: pitch,
        speed,
    })
}

/// Laser state attached to a plan step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LaserPhase {
    OffTransit,
    OnScan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlanStep {
    /// Tendon move to a new coarse pose with the laser off.
    OffTransit { coarse_target: Point },
    /// Fine raster at the current pose with the laser on.
    OnScan { coarse_target: Point, raster: RasterPath },
}

impl PlanStep {
    pub fn laser_phase(&self) -> LaserPhase {
        match self {
            PlanStep::OffTransit { .. } => LaserPhase::OffTransit,
            PlanStep::OnScan { .. } => LaserPhase::OnScan,
        }
    }

    pub fn coarse_target(&self) -> Point {
        match self {
            PlanStep::OffTransit { coarse_target } | PlanStep::OnScan { coarse_target, .. } => *coarse_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub steps: Vec<PlanStep>,
    /// Plane-frame gap-fill path, filled in after a first execution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swingback: Option<RasterPath>,
}

impl ScanPlan {
    pub fn pose_count(&self) -> usize {
        self.steps.iter().filter(|s| s.laser_phase() == LaserPhase::OnScan).count()
    }

    pub fn rasters(&self) -> impl Iterator<Item = (Point, &RasterPath)> {
        self.steps.iter().filter_map(|s| match s {
            PlanStep::OnScan { coarse_target, raster } => Some((*coarse_target, raster)),
            PlanStep::OffTransit { .. } => None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<ScanPlan, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    /// Fraction of a tile shared with its neighbours. Negative values space
    /// tiles apart and leave deliberate gaps.
    pub tile_overlap: f64,
    pub pitch: Option<f64>,
    pub speed: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            tile_overlap: DEFAULT_TILE_OVERLAP,
            pitch: None,
            speed: DEFAULT_STROKE_SPEED,
        }
    }
}

/// Half extents `(a, b)` of the largest origin-centred axis-aligned rectangle
/// inside the workspace.
pub fn inscribed_half_extents(workspace: &ConvexPolygon) -> (f64, f64) {
    let (lo, hi) = workspace.bounding_box();
    let b_max = (-lo.y).min(hi.y);
    let half_width = |b: f64| -> f64 {
        let top = workspace.horizontal_chord(b);
        let bottom = workspace.horizontal_chord(-b);
        match (top, bottom) {
            (Some((t0, t1)), Some((b0, b1))) => (-t0).min(t1).min(-b0).min(b1).max(0.0),
            _ => 0.0,
        }
    };
    let samples = 4000;
    let mut best = (0.0, 0.0, 0.0);
    for k in 1..=samples {
        let b = b_max * k as f64 / samples as f64;
        let a = half_width(b);
        if 4.0 * a * b > best.0 {
            best = (4.0 * a * b, a, b);
        }
    }
    (best.1 * (1.0 - 1e-9), best.2 * (1.0 - 1e-9))
}

fn tile_centers(lo: f64, hi: f64, tile: f64, spacing: f64) -> Vec<f64> {
    let extent = hi - lo;
    let n = if extent <= tile {
        1
    } else {
        ((extent - tile) / spacing - 1e-9).ceil() as usize + 1
    };
    let mid = 0.5 * (lo + hi);
    (0..n).map(|i| mid + (i as f64 - (n - 1) as f64 / 2.0) * spacing).collect()
}

/// Portion of the horizontal segment `y, [x0, x1]` within `margin` of the
/// lesion, as one interval spanning the first and last hits.
fn clip_row_to_lesion(lesion: &Lesion, margin: f64, y: f64, x0: f64, x1: f64) -> Option<(f64, f64)> {
    let inside = |x: f64| lesion.distance(&Point::new(x, y)) <= margin;
    let n = ((x1 - x0) / CLIP_SAMPLE_STEP).ceil().max(1.0) as usize;
    let xs: Vec<f64> = (0..=n).map(|i| x0 + (x1 - x0) * i as f64 / n as f64).collect();
    let first = xs.iter().position(|&x| inside(x))?;
    let last = xs.iter().rposition(|&x| inside(x))?;
    let refine = |inner: f64, outer: f64| -> f64 {
        let (mut a, mut b) = (inner, outer);
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if inside(m) {
                a = m;
            } else {
                b = m;
            }
        }
        a
    };
    let start = if first == 0 { xs[0] } else { refine(xs[first], xs[first - 1]) };
    let end = if last == n { xs[n] } else { refine(xs[last], xs[last + 1]) };
    Some((start, end))
}

/// Covers `lesion` with coarse poses and per-pose rasters using the default
/// pitch and stroke speed.
pub fn plan_scan(lesion: &Lesion, config: &Config, overlap: f64) -> Result<ScanPlan, PlanError> {
    plan_scan_with(
        lesion,
        config,
        &PlanOptions {
            tile_overlap: overlap,
            ..PlanOptions::default()
        },
    )
}

pub fn plan_scan_with(lesion: &Lesion, config: &Config, options: &PlanOptions) -> Result<ScanPlan, PlanError> {
    if !(options.tile_overlap < 1.0 && options.tile_overlap > -1.0) {
        return Err(bad("tile_overlap", "must lie in (-1, 1)"));
    }
    check_positive("speed", options.speed)?;
    let pitch = options.pitch.unwrap_or_else(|| config.spot.default_pitch());
    check_positive("pitch", pitch)?;

    let ws = thermal::workspace(&config.thermal, &config.limits, &config.geometry.heater_angles);
    let (a, b) = inscribed_half_extents(&ws);
    let (tile_w, tile_h) = (2.0 * a, 2.0 * b);
    let spacing = Vector2::new(tile_w, tile_h) * (1.0 - options.tile_overlap);
    let margin = config.spot.radius();
    let reach = lateral_displacement(&config.geometry, config.limits.max_bend_angle);

    let (lo, hi) = lesion.bounding_box();
    let offsets = row_offsets(tile_h, pitch);

    // A lesion that fits one workspace is scanned from one pose with strokes
    // spanning the full hexagon.
    let mid = (lo + hi) / 2.0;
    if lesion.fits_within(&ws, &mid) {
        if mid.norm() > reach {
            return Err(PlanError::LesionOutOfReach { x: mid.x, y: mid.y, max: reach });
        }
        let rows: Vec<Row> = offsets
            .iter()
            .filter_map(|&dy| {
                let (c0, c1) = ws.horizontal_chord(dy)?;
                let (x0, x1) = clip_row_to_lesion(lesion, margin, mid.y + dy, mid.x + c0 + INSET, mid.x + c1 - INSET)?;
                Some(Row { y: dy, x0: x0 - mid.x, x1: x1 - mid.x })
            })
            .collect();
        let steps = vec![
            PlanStep::OffTransit { coarse_target: mid },
            PlanStep::OnScan {
                coarse_target: mid,
                raster: RasterPath { waypoints: serpentine(&rows), line_pitch: pitch, speed: options.speed },
            },
        ];
        return Ok(ScanPlan { steps, swingback: None });
    }

    let xs = tile_centers(lo.x, hi.x, tile_w, spacing.x);
    let ys = tile_centers(lo.y, hi.y, tile_h, spacing.y);

    let mut steps = Vec::new();
    for (j, &cy) in ys.iter().enumerate() {
        // boustrophedon over tile rows
        let ordered: Vec<f64> = if j % 2 == 0 { xs.clone() } else { xs.iter().rev().copied().collect() };
        for cx in ordered {
            let rows: Vec<Row> = offsets
                .iter()
                .filter_map(|&dy| {
                    let (x0, x1) = clip_row_to_lesion(lesion, margin, cy + dy, cx - a, cx + a)?;
                    Some(Row { y: dy, x0: x0 - cx, x1: x1 - cx })
                })
                .collect();
            if rows.is_empty() {
                continue;
            }
            let target = Point::new(cx, cy);
            if target.norm() > reach {
                return Err(PlanError::LesionOutOfReach {
                    x: cx,
                    y: cy,
                    max: reach,
                });
            }
            steps.push(PlanStep::OffTransit { coarse_target: target });
            steps.push(PlanStep::OnScan {
                coarse_target: target,
                raster: RasterPath {
                    waypoints: serpentine(&rows),
                    line_pitch: pitch,
                    speed: options.speed,
                },
            });
        }
    }
    Ok(ScanPlan { steps, swingback: None })
}

/// Boolean raster of a lesion used for coverage scoring.
#[derive(Debug, Clone)]
pub struct CoverageGrid {
    origin: Point,
    resolution: f64,
    nx: usize,
    ny: usize,
    lesion: Vec<bool>,
    covered: Vec<bool>,
    lesion_cells: usize,
    covered_cells: usize,
}

impl CoverageGrid {
    pub fn new(lesion: &Lesion, resolution: f64) -> CoverageGrid {
        assert!(resolution > 0.0, "coverage resolution must be positive");
        let (lo, hi) = lesion.bounding_box();
        let nx = ((hi.x - lo.x) / resolution).ceil().max(1.0) as usize;
        let ny = ((hi.y - lo.y) / resolution).ceil().max(1.0) as usize;
        let mut mask = vec![false; nx * ny];
        let mut count = 0;
        for j in 0..ny {
            for i in 0..nx {
                let c = Point::new(lo.x + (i as f64 + 0.5) * resolution, lo.y + (j as f64 + 0.5) * resolution);
                if lesion.contains(&c) {
                    mask[j * nx + i] = true;
                    count += 1;
                }
            }
        }
        CoverageGrid {
            origin: lo,
            resolution,
            nx,
            ny,
            lesion: mask,
            covered: vec![false; nx * ny],
            lesion_cells: count,
            covered_cells: 0,
        }
    }

    fn center(&self, i: usize, j: usize) -> Point {
        Point::new(
            self.origin.x + (i as f64 + 0.5) * self.resolution,
            self.origin.y + (j as f64 + 0.5) * self.resolution,
        )
    }

    pub fn stamp(&mut self, spot: &Spot) {
        let res = self.resolution;
        let r = spot.radius;
        let i0 = ((spot.center.x - r - self.origin.x) / res).floor().max(0.0) as usize;
        let j0 = ((spot.center.y - r - self.origin.y) / res).floor().max(0.0) as usize;
        let i1 = ((spot.center.x + r - self.origin.x) / res).ceil().min(self.nx as f64);
        let j1 = ((spot.center.y + r - self.origin.y) / res).ceil().min(self.ny as f64);
        if i1 < 0.0 || j1 < 0.0 {
            return;
        }
        let r2 = r * r;
        for j in j0..(j1 as usize) {
            for i in i0..(i1 as usize) {
                let k = j * self.nx + i;
                if !self.lesion[k] || self.covered[k] {
                    continue;
                }
                if (self.center(i, j) - spot.center).norm_squared() <= r2 {
                    self.covered[k] = true;
                    self.covered_cells += 1;
                }
            }
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.lesion_cells == 0 {
            return 0.0;
        }
        self.covered_cells as f64 / self.lesion_cells as f64
    }

    pub fn lesion_area(&self) -> f64 {
        self.lesion_cells as f64 * self.resolution * self.resolution
    }

    pub fn uncovered_area(&self) -> f64 {
        (self.lesion_cells - self.covered_cells) as f64 * self.resolution * self.resolution
    }

    /// 8-connected clusters of uncovered lesion cells, as cell-centre lists,
    /// in scan order of their first cell.
    fn uncovered_clusters(&self) -> Vec<Vec<Point>> {
        let mut seen = vec![false; self.nx * self.ny];
        let mut clusters = Vec::new();
        for start in 0..self.nx * self.ny {
            if seen[start] || !self.lesion[start] || self.covered[start] {
                continue;
            }
            let mut cluster = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(k) = queue.pop_front() {
                let (i, j) = (k % self.nx, k / self.nx);
                cluster.push(self.center(i, j));
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= self.nx as i64 || nj >= self.ny as i64 {
                            continue;
                        }
                        let nk = nj as usize * self.nx + ni as usize;
                        if !seen[nk] && self.lesion[nk] && !self.covered[nk] {
                            seen[nk] = true;
                            queue.push_back(nk);
                        }
                    }
                }
            }
            clusters.push(cluster);
        }
        clusters
    }
}

/// Fraction of the lesion inside the union of `spots`, on a grid of cell size
/// `resolution`.
pub fn coverage(lesion: &Lesion, spots: &[Spot], resolution: f64) -> f64 {
    let mut grid = CoverageGrid::new(lesion, resolution);
    for s in spots {
        grid.stamp(s);
    }
    grid.fraction()
}

/// Gap-fill strokes over lesion regions the executed spots missed.
///
/// Waypoints are plane coordinates; stroke `k` runs from waypoint `2k` to
/// `2k + 1`. Each uncovered cluster gets parallel strokes along its longer
/// axis, placed symmetrically about the cluster centroid.
pub fn swingback_path(executed: &[Spot], lesion: &Lesion, spot: &SpotModel) -> RasterPath {
    let pitch = spot.default_pitch();
    let mut grid = CoverageGrid::new(lesion, DEFAULT_COVERAGE_RESOLUTION);
    for s in executed {
        grid.stamp(s);
    }
    let empty = RasterPath {
        waypoints: Vec::new(),
        line_pitch: pitch,
        speed: DEFAULT_STROKE_SPEED,
    };
    if grid.uncovered_area() < SWINGBACK_MIN_GAP_FRACTION * grid.lesion_area() {
        return empty;
    }
    let cell_area = grid.resolution * grid.resolution;
    let spot_area = std::f64::consts::PI * spot.radius() * spot.radius();

    let mut waypoints = Vec::new();
    for cluster in grid.uncovered_clusters() {
        // specks far smaller than one footprint are rasterization residue
        if cluster.len() as f64 * cell_area < 0.05 * spot_area {
            continue;
        }
        let (lo, hi) = bounding_box(&cluster);
        let centroid = cluster.iter().fold(Point::zeros(), |acc, p| acc + p) / cluster.len() as f64;
        let extent = hi - lo + Vector2::new(grid.resolution, grid.resolution);
        let horizontal = extent.x >= extent.y;
        let (short, long_lo, long_hi, across) = if horizontal {
            (extent.y, lo.x, hi.x, centroid.y)
        } else {
            (extent.x, lo.y, hi.y, centroid.x)
        };
        let m = if short <= spot.spot_diameter {
            1
        } else {
            ((short - spot.spot_diameter) / pitch).ceil() as usize + 1
        };
        for k in 0..m {
            let offset = across + (k as f64 - (m - 1) as f64 / 2.0) * pitch;
            let (a, b) = (long_lo, long_hi);
            let (s, e) = if k % 2 == 0 { (a, b) } else { (b, a) };
            if horizontal {
                waypoints.push(Point::new(s, offset));
                waypoints.push(Point::new(e, offset));
            } else {
                waypoints.push(Point::new(offset, s));
                waypoints.push(Point::new(offset, e));
            }
        }
    }
    RasterPath { waypoints, ..empty }
}

/// Splits a plane-frame swing-back path into executable steps: one coarse
/// pose per stroke chunk, each chunk short enough to fit the inscribed
/// workspace rectangle.
pub fn swingback_steps(path: &RasterPath, config: &Config) -> Vec<PlanStep> {
    let ws = thermal::workspace(&config.thermal, &config.limits, &config.geometry.heater_angles);
    let (a, b) = inscribed_half_extents(&ws);
    let mut steps = Vec::new();
    for (start, end) in path.strokes() {
        let d = end - start;
        let len = d.norm();
        let limit = if d.x.abs() >= d.y.abs() { 2.0 * a } else { 2.0 * b };
        let chunks = (len / limit).ceil().max(1.0) as usize;
        for c in 0..chunks {
            let s = start + d * (c as f64 / chunks as f64);
            let e = start + d * ((c + 1) as f64 / chunks as f64);
            let mid = (s + e) / 2.0;
            steps.push(PlanStep::OffTransit { coarse_target: mid });
            steps.push(PlanStep::OnScan {
                coarse_target: mid,
                raster: RasterPath {
                    waypoints: vec![s - mid, e - mid],
                    line_pitch: path.line_pitch,
                    speed: path.speed,
                },
            });
        }
    }
    steps
}
