//! Characterization data, model-constant fits and the red-dot tip tracker.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{FiberGeometry, LINEAR_POWER_LIMIT_W};
use crate::kinematics::{calibrate_moment_arm, lateral_displacement, KinematicsError};

/// Relative excess over the linear prediction above which the response is
/// reported as departing from the linear law.
pub const DEPARTURE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CharacterizationKind {
    TendonPull,
    ThermalPower,
}

impl CharacterizationKind {
    pub fn input_unit(&self) -> &'static str {
        match self {
            CharacterizationKind::TendonPull => "mm",
            CharacterizationKind::ThermalPower => "W",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationRow {
    pub input: f64,
    pub displacement_mm: f64,
    pub repeat: u32,
    /// Row generated to fill a curve rather than read off a measurement.
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationSet {
    pub kind: CharacterizationKind,
    pub rows: Vec<CharacterizationRow>,
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("failed to read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Csv { line: u64, reason: String },
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("line {line}: input {input} is negative")]
    NegativeInput { line: u64, input: f64 },
    #[error("{found} distinct input level(s), need at least {need}")]
    TooFewLevels { found: usize, need: usize },
    #[error("expected a {expected:?} set, got {found:?}")]
    WrongKind {
        expected: CharacterizationKind,
        found: CharacterizationKind,
    },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Source {
    Measured,
    Synthetic,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    input: f64,
    displacement_mm: f64,
    repeat: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<Source>,
}

const REQUIRED_COLUMNS: [&str; 3] = ["input", "displacement_mm", "repeat"];

fn distinct_levels(inputs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = inputs.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

impl CharacterizationSet {
    pub fn new(kind: CharacterizationKind, rows: Vec<CharacterizationRow>) -> Result<Self, CalibrationError> {
        for (i, r) in rows.iter().enumerate() {
            if !(r.input >= 0.0) {
                return Err(CalibrationError::NegativeInput {
                    line: i as u64 + 2,
                    input: r.input,
                });
            }
        }
        let set = CharacterizationSet { kind, rows };
        let found = set.levels().len();
        if found < 2 {
            return Err(CalibrationError::TooFewLevels { found, need: 2 });
        }
        Ok(set)
    }

    /// Parses CSV text with header `input,displacement_mm,repeat` and an
    /// optional `source` column (`measured` or `synthetic`).
    pub fn from_csv_str(kind: CharacterizationKind, text: &str) -> Result<Self, CalibrationError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| CalibrationError::Csv {
            line: 1,
            reason: e.to_string(),
        })?;
        for col in REQUIRED_COLUMNS {
            if !headers.iter().any(|h| h == col) {
                return Err(CalibrationError::MissingColumn(col));
            }
        }
        let mut rows = Vec::new();
        for rec in reader.deserialize::<CsvRow>() {
            let rec = rec.map_err(|e| CalibrationError::Csv {
                line: e.position().map_or(0, |p| p.line()),
                reason: match e.kind() {
                    csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                    _ => e.to_string(),
                },
            })?;
            if !(rec.input >= 0.0) {
                return Err(CalibrationError::NegativeInput {
                    line: rows.len() as u64 + 2,
                    input: rec.input,
                });
            }
            if !rec.displacement_mm.is_finite() {
                return Err(CalibrationError::Csv {
                    line: rows.len() as u64 + 2,
                    reason: "displacement must be finite".into(),
                });
            }
            rows.push(CharacterizationRow {
                input: rec.input,
                displacement_mm: rec.displacement_mm,
                repeat: rec.repeat,
                synthetic: rec.source == Some(Source::Synthetic),
            });
        }
        Self::new(kind, rows)
    }

    pub fn load(kind: CharacterizationKind, path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_str(kind, &text)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                input: r.input,
                displacement_mm: r.displacement_mm,
                repeat: r.repeat,
                source: Some(if r.synthetic { Source::Synthetic } else { Source::Measured }),
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    /// Distinct input levels, ascending.
    pub fn levels(&self) -> Vec<f64> {
        distinct_levels(self.rows.iter().map(|r| r.input))
    }
}

/// Onset of departure from the linear law above the fitted range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Departure {
    /// First level above the range whose mean exceeds the line by more than
    /// [`DEPARTURE_THRESHOLD`].
    pub onset_input: f64,
    /// Largest mean relative excess over any level above the range.
    pub max_relative_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub kind: CharacterizationKind,
    pub fitted_value: f64,
    pub unit: String,
    pub residual_rms: f64,
    pub max_residual: f64,
    pub r_squared: f64,
    pub linear_range_end: f64,
    pub rows_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub departure: Option<Departure>,
}

/// Origin-constrained least squares.
struct OriginFit {
    slope: f64,
    rms: f64,
    max_residual: f64,
    r_squared: f64,
}

/// `r_squared` is the uncentred coefficient of determination, the one that
/// matches a model without intercept.
fn r_squared(ss_res: f64, ss_tot: f64) -> f64 {
    if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn origin_fit(rows: &[&CharacterizationRow]) -> OriginFit {
    let sxy: f64 = rows.iter().map(|r| r.input * r.displacement_mm).sum();
    let sxx: f64 = rows.iter().map(|r| r.input * r.input).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let residuals: Vec<f64> = rows.iter().map(|r| r.displacement_mm - slope * r.input).collect();
    let ss_res: f64 = residuals.iter().map(|e| e * e).sum();
    let ss_tot: f64 = rows.iter().map(|r| r.displacement_mm * r.displacement_mm).sum();
    OriginFit {
        slope,
        rms: (ss_res / rows.len().max(1) as f64).sqrt(),
        max_residual: residuals.iter().fold(0.0, |m, e| m.max(e.abs())),
        r_squared: r_squared(ss_res, ss_tot),
    }
}

fn in_range(set: &CharacterizationSet, range_end: f64) -> Vec<&CharacterizationRow> {
    set.rows.iter().filter(|r| r.input <= range_end).collect()
}

/// Fits `D = alpha * P` over rows up to [`LINEAR_POWER_LIMIT_W`].
pub fn fit_alpha(set: &CharacterizationSet) -> Result<FitReport, CalibrationError> {
    fit_alpha_with_range(set, LINEAR_POWER_LIMIT_W)
}

pub fn fit_alpha_with_range(set: &CharacterizationSet, range_end: f64) -> Result<FitReport, CalibrationError> {
    if set.kind != CharacterizationKind::ThermalPower {
        return Err(CalibrationError::WrongKind {
            expected: CharacterizationKind::ThermalPower,
            found: set.kind,
        });
    }
    let rows = in_range(set, range_end);
    let levels = distinct_levels(rows.iter().map(|r| r.input));
    if levels.len() < 2 || !levels.iter().any(|&l| l > 0.0) {
        return Err(CalibrationError::TooFewLevels {
            found: levels.len(),
            need: 2,
        });
    }
    let fit = origin_fit(&rows);

    let mut departure: Option<Departure> = None;
    for level in set.levels().into_iter().filter(|&l| l > range_end && l > 0.0) {
        let at: Vec<f64> = set.rows.iter().filter(|r| r.input == level).map(|r| r.displacement_mm).collect();
        let mean = at.iter().sum::<f64>() / at.len() as f64;
        let predicted = fit.slope * level;
        let excess = (mean - predicted) / predicted.abs();
        if excess > DEPARTURE_THRESHOLD {
            let d = departure.get_or_insert(Departure {
                onset_input: level,
                max_relative_excess: excess,
            });
            d.max_relative_excess = d.max_relative_excess.max(excess);
        }
    }

    Ok(FitReport {
        kind: set.kind,
        fitted_value: fit.slope,
        unit: "mm/W".into(),
        residual_rms: fit.rms,
        max_residual: fit.max_residual,
        r_squared: fit.r_squared,
        linear_range_end: range_end,
        rows_used: rows.len(),
        departure,
    })
}

/// Fits the effective tendon moment arm of the bend model to a pull set.
pub fn fit_tendon(set: &CharacterizationSet, geom: &FiberGeometry) -> Result<FitReport, CalibrationError> {
    if set.kind != CharacterizationKind::TendonPull {
        return Err(CalibrationError::WrongKind {
            expected: CharacterizationKind::TendonPull,
            found: set.kind,
        });
    }
    let samples: Vec<(f64, f64)> = set.rows.iter().map(|r| (r.input, r.displacement_mm)).collect();
    let fit = calibrate_moment_arm(geom, &samples)?;
    let residuals: Vec<f64> = set
        .rows
        .iter()
        .map(|r| r.displacement_mm - lateral_displacement(geom, r.input / fit.moment_arm))
        .collect();
    let ss_res: f64 = residuals.iter().map(|e| e * e).sum();
    let ss_tot: f64 = set.rows.iter().map(|r| r.displacement_mm.powi(2)).sum();
    Ok(FitReport {
        kind: set.kind,
        fitted_value: fit.moment_arm,
        unit: "mm".into(),
        residual_rms: fit.residual_rms,
        max_residual: residuals.iter().fold(0.0, |m, e| m.max(e.abs())),
        r_squared: r_squared(ss_res, ss_tot),
        linear_range_end: set.levels().last().copied().unwrap_or(0.0),
        rows_used: set.rows.len(),
        departure: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub r_squared: f64,
    pub max_residual: f64,
    pub slope: f64,
    pub levels: usize,
}

/// Origin-constrained linearity over rows with input up to `range_end`.
pub fn check_linearity(set: &CharacterizationSet, range_end: f64) -> Result<LinearityReport, CalibrationError> {
    let rows = in_range(set, range_end);
    let levels = distinct_levels(rows.iter().map(|r| r.input)).len();
    if levels < 3 {
        return Err(CalibrationError::TooFewLevels { found: levels, need: 3 });
    }
    let fit = origin_fit(&rows);
    Ok(LinearityReport {
        r_squared: fit.r_squared,
        max_residual: fit.max_residual,
        slope: fit.slope,
        levels,
    })
}

/// Displacement-versus-input chart with the fitted curve, as SVG.
pub fn fit_svg(set: &CharacterizationSet, report: &FitReport, geom: &FiberGeometry) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let x_max = set.levels().last().copied().unwrap_or(1.0).max(1e-9);
    let model = |x: f64| match set.kind {
        CharacterizationKind::ThermalPower => report.fitted_value * x,
        CharacterizationKind::TendonPull => lateral_displacement(geom, x / report.fitted_value),
    };
    let y_max = set
        .rows
        .iter()
        .map(|r| r.displacement_mm)
        .chain(std::iter::once(model(x_max)))
        .fold(1e-9, f64::max);
    let sx = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / y_max * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {y0} L{x0} {yt} M{x0} {y0} L{xr} {y0}" stroke="black" fill="none"/>"#,
        x0 = pad,
        y0 = h - pad,
        yt = pad,
        xr = w - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">input ({}) 0 to {x_max}</text>"#,
        w / 2.0,
        h - 12.0,
        set.kind.input_unit()
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">displacement (mm) 0 to {:.3}</text>"#,
        h / 2.0,
        h / 2.0,
        y_max
    );
    let mut path = String::new();
    for i in 0..=100 {
        let x = x_max * i as f64 / 100.0;
        let _ = write!(path, "{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, sx(x), sy(model(x)));
    }
    let _ = writeln!(s, r#"<path d="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#, path.trim_end());
    for r in &set.rows {
        let (fill, stroke) = if r.synthetic { ("none", "gray") } else { ("crimson", "crimson") };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{fill}" stroke="{stroke}"/>"#,
            sx(r.input),
            sy(r.displacement_mm)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub r_min: u8,
    pub margin: u8,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { r_min: 128, margin: 50 }
    }
}

/// Red-dot position in pixel coordinates, pixel centres at integers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    pub pixels: usize,
}

fn is_red(p: &image::Rgb<u8>, cfg: &TrackerConfig) -> bool {
    let [r, g, b] = p.0;
    r >= cfg.r_min && r as i16 - g.max(b) as i16 >= cfg.margin as i16
}

fn redness(p: &image::Rgb<u8>) -> f64 {
    let [r, g, b] = p.0;
    (r as f64 - g.max(b) as f64).max(0.0)
}

/// Redness-weighted centroid (`R - max(G, B)`) of the largest 8-connected
/// red component, or `None` when no pixel passes the mask. The weighted sum
/// also covers the one-pixel ring around the component so that faint edge
/// pixels below the mask still pull on the estimate.
pub fn track_red_dot(frame: &RgbImage, cfg: &TrackerConfig) -> Option<Centroid> {
    let (w, h) = frame.dimensions();
    let (wu, hu) = (w as usize, h as usize);
    let neighbours = |x: u32, y: u32| {
        (-1i64..=1).flat_map(move |dy| (-1i64..=1).map(move |dx| (x as i64 + dx, y as i64 + dy))).filter_map(
            move |(nx, ny)| (nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64).then_some((nx as u32, ny as u32)),
        )
    };
    let mut label = vec![false; wu * hu];
    let mut best: Vec<(u32, u32)> = Vec::new();
    let mut queue = VecDeque::new();
    for y0 in 0..h {
        for x0 in 0..w {
            let i0 = y0 as usize * wu + x0 as usize;
            if label[i0] || !is_red(frame.get_pixel(x0, y0), cfg) {
                continue;
            }
            label[i0] = true;
            queue.push_back((x0, y0));
            let mut component = Vec::new();
            while let Some((x, y)) = queue.pop_front() {
                component.push((x, y));
                for (nx, ny) in neighbours(x, y) {
                    let j = ny as usize * wu + nx as usize;
                    if !label[j] && is_red(frame.get_pixel(nx, ny), cfg) {
                        label[j] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
            if component.len() > best.len() {
                best = component;
            }
        }
    }
    if best.is_empty() {
        return None;
    }
    let mut used = vec![false; wu * hu];
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for &(x, y) in &best {
        for (nx, ny) in neighbours(x, y) {
            let j = ny as usize * wu + nx as usize;
            if used[j] {
                continue;
            }
            used[j] = true;
            let wgt = redness(frame.get_pixel(nx, ny));
            sw += wgt;
            sx += wgt * nx as f64;
            sy += wgt * ny as f64;
        }
    }
    Some(Centroid {
        x: sx / sw,
        y: sy / sw,
        pixels: best.len(),
    })
}

/// Gray frame with an anti-aliased red disc, for tracker fixtures. Each
/// pixel blends disc and background by its covered area, estimated on a
/// 16 x 16 subsample grid.
pub fn synthetic_disc_frame(width: u32, height: u32, center: (f64, f64), radius: f64) -> RgbImage {
    const SUB: u32 = 16;
    let disc = [230.0, 40.0, 40.0];
    let background = [110.0, 110.0, 110.0];
    RgbImage::from_fn(width, height, |x, y| {
        let (dx0, dy0) = (x as f64 - center.0, y as f64 - center.1);
        if (dx0.abs() - 1.0).max(0.0).hypot((dy0.abs() - 1.0).max(0.0)) > radius {
            return image::Rgb(background.map(|c| c as u8));
        }
        let mut inside = 0;
        for sy in 0..SUB {
            for sx in 0..SUB {
                let dx = dx0 - 0.5 + (sx as f64 + 0.5) / SUB as f64;
                let dy = dy0 - 0.5 + (sy as f64 + 0.5) / SUB as f64;
                if dx * dx + dy * dy <= radius * radius {
                    inside += 1;
                }
            }
        }
        let c = inside as f64 / (SUB * SUB) as f64;
        image::Rgb([0, 1, 2].map(|k| (background[k] + c * (disc[k] - background[k])).round() as u8))
    })
}
