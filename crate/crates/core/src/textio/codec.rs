//! Coordinate quantization and the `<loc>` / `<obj>` text grammar.

use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::{Box3D, Point3, SceneBounds};

pub const LEVELS: f64 = 255.0;

/// Maps `x` in `[lo, hi]` to `0..=255`, rounding half up and clamping.
pub fn quantize_coord(x: f64, lo: f64, hi: f64) -> Result<u8> {
    if !(hi > lo) {
        return Err(Error::Invalid(format!("degenerate quantization bounds ({lo}, {hi})")));
    }
    let scaled = (x - lo) / (hi - lo) * LEVELS;
    Ok((scaled + 0.5).floor().clamp(0.0, LEVELS) as u8)
}

/// Linear inverse of [`quantize_coord`].
pub fn dequantize_coord(q: u32, lo: f64, hi: f64) -> Result<f64> {
    if q > 255 {
        return Err(Error::Invalid(format!("quantized value {q} outside 0..=255")));
    }
    Ok(lo + (q as f64 / LEVELS) * (hi - lo))
}

/// A point (3 values) or box (center then size, 6 values) in quantized scene coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpatialToken {
    Point([u8; 3]),
    Box([u8; 6]),
}

impl SpatialToken {
    /// Boxes need every size component ≥ 1.
    pub fn new_box(values: [u8; 6]) -> Result<Self> {
        if values[3..].contains(&0) {
            return Err(Error::Invalid(format!("box token {values:?} has a zero size")));
        }
        Ok(SpatialToken::Box(values))
    }

    pub fn values(&self) -> &[u8] {
        match self {
            SpatialToken::Point(v) => v,
            SpatialToken::Box(v) => v,
        }
    }

    pub fn quantize_point(p: &Point3, bounds: &SceneBounds) -> Result<Self> {
        let mut v = [0u8; 3];
        for a in 0..3 {
            let (lo, hi) = bounds.axis(a);
            v[a] = quantize_coord(p[a], lo, hi)?;
        }
        Ok(SpatialToken::Point(v))
    }

    /// Centers quantize like points; sizes scale by the axis extent with a floor of 1.
    pub fn quantize_box(b: &Box3D, bounds: &SceneBounds) -> Result<Self> {
        let mut v = [0u8; 6];
        for a in 0..3 {
            let (lo, hi) = bounds.axis(a);
            v[a] = quantize_coord(b.center[a], lo, hi)?;
            let s = (b.size[a] / (hi - lo) * LEVELS + 0.5).floor();
            v[a + 3] = s.clamp(1.0, LEVELS) as u8;
        }
        Ok(SpatialToken::Box(v))
    }

    pub fn to_point(&self, bounds: &SceneBounds) -> Option<Point3> {
        let SpatialToken::Point(v) = self else { return None };
        Some(std::array::from_fn(|a| {
            let (lo, hi) = bounds.axis(a);
            lo + v[a] as f64 / LEVELS * (hi - lo)
        }))
    }

    pub fn to_box(&self, bounds: &SceneBounds) -> Option<Box3D> {
        let SpatialToken::Box(v) = self else { return None };
        let center = std::array::from_fn(|a| {
            let (lo, hi) = bounds.axis(a);
            lo + v[a] as f64 / LEVELS * (hi - lo)
        });
        let size = std::array::from_fn(|a| {
            let (lo, hi) = bounds.axis(a);
            v[a + 3] as f64 / LEVELS * (hi - lo)
        });
        Box3D::new(center, size).ok()
    }
}

impl fmt::Display for SpatialToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (open, close) = match self {
            SpatialToken::Point(_) => ("<loc>", "</loc>"),
            SpatialToken::Box(_) => ("<obj>", "</obj>"),
        };
        f.write_str(open)?;
        for (i, v) in self.values().iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str(close)
    }
}

/// Exact surface form, e.g. `<obj>10, 20, 30, 4, 5, 6</obj>`.
pub fn render_spatial(t: &SpatialToken) -> String {
    t.to_string()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedSpatial {
    pub tokens: Vec<SpatialToken>,
    /// Spans that opened a tag but were malformed.
    pub skipped: usize,
}

fn parse_values(inner: &str) -> Option<Vec<u8>> {
    inner
        .split(',')
        .map(|s| {
            let s = s.trim();
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            s.parse::<u32>().ok().filter(|&v| v <= 255).map(|v| v as u8)
        })
        .collect()
}

/// Extracts every well-formed `<loc>`/`<obj>` span in order. Wrong arity,
/// out-of-range or non-integer values, zero box sizes and unclosed tags are
/// skipped and counted.
pub fn parse_spatial(text: &str) -> ParsedSpatial {
    let mut out = ParsedSpatial::default();
    let mut rest = text;
    loop {
        let next = ["<loc>", "<obj>"]
            .iter()
            .filter_map(|tag| rest.find(tag).map(|i| (i, *tag)))
            .min();
        let Some((start, open)) = next else { break };
        let body_start = start + open.len();
        let close = if open == "<loc>" { "</loc>" } else { "</obj>" };
        let body = &rest[body_start..];
        let end = body.find(close);
        let reopen = ["<loc>", "<obj>"].iter().filter_map(|t| body.find(t)).min();
        match end {
            Some(e) if reopen.is_none_or(|r| r > e) => {
                let parsed = parse_values(&body[..e]).and_then(|v| match (open, v.len()) {
                    ("<loc>", 3) => Some(SpatialToken::Point([v[0], v[1], v[2]])),
                    ("<obj>", 6) => SpatialToken::new_box([v[0], v[1], v[2], v[3], v[4], v[5]]).ok(),
                    _ => None,
                });
                match parsed {
                    Some(t) => out.tokens.push(t),
                    None => out.skipped += 1,
                }
                rest = &body[e + close.len()..];
            }
            _ => {
                out.skipped += 1;
                rest = body;
            }
        }
    }
    out
}
