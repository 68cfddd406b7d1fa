//! Pixel-space rectangles and the crop-quality metrics built on them.
//!
//! Coordinates are real-valued with the origin at the top-left corner. Boxes
//! are validated at construction, so every metric below can assume positive
//! extent on both axes.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// IoU threshold above which two crops count as the same view.
pub const DEFAULT_EQUIVALENCE_EPSILON: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}]: both axes need positive extent")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("non-finite coordinate in box")]
    NonFinite,
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("box [{x1}, {y1}, {x2}, {y2}] is outside the {width}x{height} frame")]
    OutOfFrame {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: u32,
        height: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDims")]
pub struct ImageDims {
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct RawDims {
    width: u32,
    height: u32,
}

impl TryFrom<RawDims> for ImageDims {
    type Error = GeometryError;

    fn try_from(raw: RawDims) -> Result<Self, Self::Error> {
        ImageDims::new(raw.width, raw.height)
    }
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage { width, height });
        }
        Ok(Self { width, height })
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn aspect(&self) -> f64 {
        f64::from(self.width) / f64::from(self.height)
    }

    /// The crop covering the whole image.
    pub fn full_frame(&self) -> PixelBox {
        PixelBox {
            x1: 0.0,
            y1: 0.0,
            x2: f64::from(self.width),
            y2: f64::from(self.height),
        }
    }

    pub fn contains(&self, b: &PixelBox) -> bool {
        b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= f64::from(self.width) && b.y2 <= f64::from(self.height)
    }

    pub fn check_within(&self, b: &PixelBox) -> Result<(), GeometryError> {
        if self.contains(b) {
            Ok(())
        } else {
            Err(GeometryError::OutOfFrame {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
                width: self.width,
                height: self.height,
            })
        }
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Axis-aligned crop rectangle `[x1, y1, x2, y2]` with `x1 < x2` and `y1 < y2`.
///
/// Serialized as a four-element JSON array. Integral coordinates are written
/// as JSON integers so corpora and transcripts stay readable.
#[derive(Clone, Copy, PartialEq)]
pub struct PixelBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// Box with the given center and extent.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }
    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }
    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Width over height.
    #[inline]
    pub fn aspect(&self) -> f64 {
        self.width() / self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains_box(&self, other: &PixelBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &PixelBox) -> PixelBox {
        PixelBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn intersection_area(&self, other: &PixelBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Lexicographic order on `(x1, y1, x2, y2)`, used for deterministic tie-breaks.
    pub fn lex_cmp(&self, other: &PixelBox) -> std::cmp::Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }

    /// Integer pixel rectangle covering this box, rounded outward and
    /// clipped to `dims`: `(x0, y0, x1, y1)` with exclusive upper bounds.
    pub fn pixel_bounds(&self, dims: ImageDims) -> (u32, u32, u32, u32) {
        let clip = |v: f64, hi: u32| v.max(0.0).min(f64::from(hi)) as u32;
        (
            clip(self.x1.floor(), dims.width),
            clip(self.y1.floor(), dims.height),
            clip(self.x2.ceil(), dims.width),
            clip(self.y2.ceil(), dims.height),
        )
    }
}

impl fmt::Debug for PixelBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for PixelBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// JSON number for a coordinate; integral values become integers.
pub(crate) fn coord_json(v: f64) -> serde_json::Value {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        serde_json::Value::from(v as i64)
    } else {
        serde_json::Value::from(v)
    }
}

impl Serialize for PixelBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(4))?;
        for v in self.to_array() {
            seq.serialize_element(&coord_json(v))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for PixelBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = <[f64; 4]>::deserialize(deserializer)?;
        PixelBox::from_array(raw).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union. Symmetric, and exactly 1 for identical boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Boundary displacement error: mean of the four edge offsets, x-offsets
/// normalized by image width and y-offsets by image height.
pub fn bde(pred: &PixelBox, gt: &PixelBox, dims: ImageDims) -> f64 {
    let w = f64::from(dims.width);
    let h = f64::from(dims.height);
    ((pred.x1 - gt.x1).abs() / w
        + (pred.x2 - gt.x2).abs() / w
        + (pred.y1 - gt.y1).abs() / h
        + (pred.y2 - gt.y2).abs() / h)
        / 4.0
}

/// Two crops are the same view when their IoU strictly exceeds `epsilon`.
pub fn equivalent(a: &PixelBox, b: &PixelBox, epsilon: f64) -> bool {
    iou(a, b) > epsilon
}

/// Clip a box to the image frame.
pub fn clamp(b: &PixelBox, dims: ImageDims) -> Result<PixelBox, GeometryError> {
    let w = f64::from(dims.width);
    let h = f64::from(dims.height);
    PixelBox::new(b.x1.clamp(0.0, w), b.y1.clamp(0.0, h), b.x2.clamp(0.0, w), b.y2.clamp(0.0, h))
}

/// Clip raw coordinates (which may not form a valid box yet) to the frame.
pub fn clamp_coords(c: [f64; 4], dims: ImageDims) -> Result<PixelBox, GeometryError> {
    let w = f64::from(dims.width);
    let h = f64::from(dims.height);
    if c.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    PixelBox::new(c[0].clamp(0.0, w), c[1].clamp(0.0, h), c[2].clamp(0.0, w), c[3].clamp(0.0, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> PixelBox {
        PixelBox::new(x1, y1, x2, y2).unwrap()
    }

    fn dims(w: u32, h: u32) -> ImageDims {
        ImageDims::new(w, h).unwrap()
    }

    #[test]
    fn rejects_degenerate_and_empty() {
        assert!(PixelBox::new(5.0, 0.0, 5.0, 10.0).is_err());
        assert!(PixelBox::new(0.0, 10.0, 5.0, 2.0).is_err());
        assert!(PixelBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(ImageDims::new(0, 10).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        // 50 shared pixels out of 150 covered.
        assert!((iou(&a, &bx(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
        // Touching edges do not overlap.
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn bde_examples() {
        let d = dims(100, 100);
        let full = bx(0.0, 0.0, 100.0, 100.0);
        assert_eq!(bde(&full, &full, d), 0.0);
        assert!((bde(&full, &bx(10.0, 0.0, 100.0, 100.0), d) - 0.025).abs() < 1e-15);
        assert!((bde(&full, &bx(0.0, 0.0, 50.0, 50.0), d) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn equivalence_threshold_is_strict() {
        let a = bx(0.0, 0.0, 100.0, 100.0);
        assert!(equivalent(&a, &a, DEFAULT_EQUIVALENCE_EPSILON));
        let exact = bx(0.0, 0.0, 100.0, 85.0);
        assert_eq!(iou(&a, &exact), 0.85);
        assert!(!equivalent(&a, &exact, 0.85));
        assert!(equivalent(&a, &bx(0.0, 0.0, 100.0, 86.0), 0.85));
    }

    #[test]
    fn clamp_examples() {
        let d = dims(100, 100);
        assert_eq!(clamp(&bx(-5.0, -5.0, 50.0, 50.0), d).unwrap(), bx(0.0, 0.0, 50.0, 50.0));
        let inside = bx(10.0, 20.0, 30.0, 40.0);
        assert_eq!(clamp(&inside, d).unwrap(), inside);
        assert!(matches!(
            clamp(&bx(150.0, 0.0, 160.0, 10.0), d),
            Err(GeometryError::DegenerateBox { .. })
        ));
    }

    #[test]
    fn serde_uses_integer_literals_when_integral() {
        let b = bx(0.0, 1.5, 10.0, 20.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0,1.5,10,20]");
        let back: PixelBox = serde_json::from_str("[0,1.5,10,20]").unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<PixelBox>("[10,0,5,5]").is_err());
        assert!(serde_json::from_str::<ImageDims>(r#"{"width":0,"height":3}"#).is_err());
    }

    #[test]
    fn pixel_bounds_round_outward() {
        let d = dims(50, 50);
        assert_eq!(bx(1.2, 2.7, 10.1, 49.5).pixel_bounds(d), (1, 2, 11, 50));
    }
}
