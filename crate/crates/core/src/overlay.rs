//! Deterministic annotation overlays and ID-stamped decision thumbnails.
//!
//! Strokes are hard-edged (no anti-aliasing) and overwrite pixels with the
//! category color, so renders are byte-stable and every changed pixel lies
//! inside a stroke band.

use std::collections::BTreeMap;
use std::io::Cursor;

use image::{ImageEncoder, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{CandidateId, CandidateSet, CompositionElement, ElementCategory, RuleKind};
use crate::font;
use crate::geometry::{GeometryError, ImageDims, PixelBox};

pub type Rgba = [u8; 4];

#[derive(Debug, Error)]
pub enum OverlayError {
    #[error("element box {0} lies outside the image frame")]
    OutOfFrameElement(PixelBox),
    #[error("candidate {id} crop {bbox} has no pixels")]
    DegenerateBox { id: CandidateId, bbox: PixelBox },
    #[error("pixel buffer of {len} bytes does not match {width}x{height} RGBA")]
    BufferSize { width: u32, height: u32, len: usize },
    #[error("invalid overlay style: {0}")]
    InvalidStyle(String),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Row-major 8-bit RGBA pixels.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RasterImage({}x{})", self.width, self.height)
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, OverlayError> {
        ImageDims::new(width, height)?;
        if data.len() != width as usize * height as usize * 4 {
            return Err(OverlayError::BufferSize {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, color: Rgba) -> Result<Self, OverlayError> {
        ImageDims::new(width, height)?;
        let data = color.repeat(width as usize * height as usize);
        Ok(Self { width, height, data })
    }

    /// Decode a PNG of any color type into RGBA.
    pub fn from_png(bytes: &[u8]) -> Result<Self, OverlayError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgba8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.data, self.width, self.height, image::ExtendedColorType::Rgba8)
            .expect("in-memory png encoding does not fail for valid buffers");
        out.into_inner()
    }

    /// PNG without the alpha channel.
    pub fn to_png_rgb(&self) -> Vec<u8> {
        let rgb: Vec<u8> = self.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
        let mut out = Cursor::new(Vec::new());
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&rgb, self.width, self.height, image::ExtendedColorType::Rgb8)
            .expect("in-memory png encoding does not fail for valid buffers");
        out.into_inner()
    }

    pub fn to_rgba_image(&self) -> RgbaImage {
        RgbaImage::from_raw(self.width, self.height, self.data.clone()).expect("buffer size checked")
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims::new(self.width, self.height).expect("checked at construction")
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgba {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    pub fn put(&mut self, x: u32, y: u32, c: Rgba) {
        if x < self.width && y < self.height {
            let i = (y as usize * self.width as usize + x as usize) * 4;
            self.data[i..i + 4].copy_from_slice(&c);
        }
    }

    /// Sub-image `[x0, x1) x [y0, y1)`; bounds must be inside the image.
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<RasterImage, OverlayError> {
        let w = x1.saturating_sub(x0);
        let h = y1.saturating_sub(y0);
        ImageDims::new(w, h)?;
        let mut data = Vec::with_capacity(w as usize * h as usize * 4);
        for y in y0..y1 {
            let start = (y as usize * self.width as usize + x0 as usize) * 4;
            data.extend_from_slice(&self.data[start..start + w as usize * 4]);
        }
        Self::new(w, h, data)
    }

    pub fn crop_box(&self, b: &PixelBox) -> Result<RasterImage, OverlayError> {
        let (x0, y0, x1, y1) = b.pixel_bounds(self.dims());
        self.crop(x0, y0, x1, y1)
    }

    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgba) {
        let x0 = x0.clamp(0, i64::from(self.width)) as u32;
        let x1 = x1.clamp(0, i64::from(self.width)) as u32;
        let y0 = y0.clamp(0, i64::from(self.height)) as u32;
        let y1 = y1.clamp(0, i64::from(self.height)) as u32;
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x, y, c);
            }
        }
    }
}

/// How far layout guidelines extend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuideExtent {
    WithinBox,
    #[default]
    FullFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayStyle {
    pub colors: BTreeMap<ElementCategory, Rgba>,
    pub stroke_width: u32,
    pub guide_extent: GuideExtent,
    pub stamp_foreground: Rgba,
    pub stamp_background: Rgba,
}

/// Default stroke color per category.
pub fn default_color(category: ElementCategory) -> Rgba {
    match category {
        ElementCategory::RuleOfThirds => [255, 64, 64, 255],
        ElementCategory::Center => [255, 160, 0, 255],
        ElementCategory::GoldenRatio => [255, 215, 0, 255],
        ElementCategory::Horizontal => [0, 160, 255, 255],
        ElementCategory::Symmetric => [160, 64, 255, 255],
        ElementCategory::Diagonal => [0, 200, 120, 255],
        ElementCategory::Curved => [255, 0, 200, 255],
        ElementCategory::Vertical => [0, 220, 220, 255],
        ElementCategory::Triangle => [255, 120, 160, 255],
        ElementCategory::VanishingPoint => [255, 255, 255, 255],
    }
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            colors: ElementCategory::ALL.iter().map(|&c| (c, default_color(c))).collect(),
            stroke_width: 3,
            guide_extent: GuideExtent::FullFrame,
            stamp_foreground: [255, 255, 255, 255],
            stamp_background: [0, 0, 0, 255],
        }
    }
}

impl OverlayStyle {
    pub fn validate(&self) -> Result<(), OverlayError> {
        if self.stroke_width == 0 {
            return Err(OverlayError::InvalidStyle("stroke width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn color(&self, category: ElementCategory) -> Rgba {
        self.colors.get(&category).copied().unwrap_or_else(|| default_color(category))
    }
}

struct Pen {
    color: Rgba,
    width: u32,
}

impl Pen {
    /// Outline drawn inward from the box's outer pixel bounds.
    fn outline(&self, img: &mut RasterImage, b: &PixelBox) {
        let (x0, y0, x1, y1) = b.pixel_bounds(img.dims());
        let (x0, y0, x1, y1) = (i64::from(x0), i64::from(y0), i64::from(x1), i64::from(y1));
        let s = i64::from(self.width);
        img.fill_rect(x0, y0, x1, (y0 + s).min(y1), self.color);
        img.fill_rect(x0, (y1 - s).max(y0), x1, y1, self.color);
        img.fill_rect(x0, y0, (x0 + s).min(x1), y1, self.color);
        img.fill_rect((x1 - s).max(x0), y0, x1, y1, self.color);
    }

    fn band_start(&self, center: f64) -> i64 {
        (center - f64::from(self.width) / 2.0).floor() as i64
    }

    fn hline(&self, img: &mut RasterImage, y: f64, x0: f64, x1: f64) {
        let r0 = self.band_start(y);
        img.fill_rect(x0.floor() as i64, r0, x1.ceil() as i64, r0 + i64::from(self.width), self.color);
    }

    fn vline(&self, img: &mut RasterImage, x: f64, y0: f64, y1: f64) {
        let c0 = self.band_start(x);
        img.fill_rect(c0, y0.floor() as i64, c0 + i64::from(self.width), y1.ceil() as i64, self.color);
    }

    /// Pixels whose centers lie within half the stroke width of the segment.
    fn segment(&self, img: &mut RasterImage, p: (f64, f64), q: (f64, f64)) {
        let r = f64::from(self.width) / 2.0;
        let xmin = (p.0.min(q.0) - r).floor().max(0.0) as u32;
        let ymin = (p.1.min(q.1) - r).floor().max(0.0) as u32;
        let xmax = ((p.0.max(q.0) + r).ceil() as u32).min(img.width);
        let ymax = ((p.1.max(q.1) + r).ceil() as u32).min(img.height);
        let (dx, dy) = (q.0 - p.0, q.1 - p.1);
        let len2 = dx * dx + dy * dy;
        for y in ymin..ymax {
            for x in xmin..xmax {
                let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((px - p.0) * dx + (py - p.1) * dy) / len2).clamp(0.0, 1.0)
                };
                let (ex, ey) = (p.0 + t * dx - px, p.1 + t * dy - py);
                if ex * ex + ey * ey <= r * r {
                    img.put(x, y, self.color);
                }
            }
        }
    }

    fn polyline(&self, img: &mut RasterImage, pts: &[(f64, f64)]) {
        for w in pts.windows(2) {
            self.segment(img, w[0], w[1]);
        }
    }
}

const CURVE_SEGMENTS: usize = 16;

fn draw_element(img: &mut RasterImage, category: ElementCategory, b: &PixelBox, style: &OverlayStyle) {
    let pen = Pen {
        color: style.color(category),
        width: style.stroke_width,
    };
    let (cx, cy) = b.center();
    let frame_w = f64::from(img.width);
    let frame_h = f64::from(img.height);
    let (gx0, gx1, gy0, gy1) = match style.guide_extent {
        GuideExtent::FullFrame => (0.0, frame_w, 0.0, frame_h),
        GuideExtent::WithinBox => (b.x1(), b.x2(), b.y1(), b.y2()),
    };
    if category.rule_kind() == RuleKind::Placement {
        pen.outline(img, b);
        return;
    }
    match category {
        ElementCategory::Horizontal => pen.hline(img, cy, gx0, gx1),
        ElementCategory::Vertical | ElementCategory::Symmetric => pen.vline(img, cx, gy0, gy1),
        ElementCategory::Diagonal => pen.segment(img, (b.x1(), b.y1()), (b.x2(), b.y2())),
        ElementCategory::Curved => {
            pen.outline(img, b);
            let pts: Vec<(f64, f64)> = (0..=CURVE_SEGMENTS)
                .map(|i| {
                    let t = i as f64 / CURVE_SEGMENTS as f64;
                    (b.x1() + t * b.width(), b.y2() - b.height() * 4.0 * t * (1.0 - t))
                })
                .collect();
            pen.polyline(img, &pts);
        }
        ElementCategory::Triangle => {
            pen.outline(img, b);
            pen.polyline(img, &[(b.x1(), b.y2()), (cx, b.y1()), (b.x2(), b.y2()), (b.x1(), b.y2())]);
        }
        ElementCategory::VanishingPoint => {
            pen.hline(img, cy, b.x1(), b.x2());
            pen.vline(img, cx, b.y1(), b.y2());
        }
        ElementCategory::RuleOfThirds | ElementCategory::Center | ElementCategory::GoldenRatio => {
            unreachable!("placement handled above")
        }
    }
}

/// Overlay boxes for placement elements and guidelines for layout elements.
pub fn render_enhancement(
    image: &RasterImage,
    elements: &[CompositionElement],
    style: &OverlayStyle,
) -> Result<RasterImage, OverlayError> {
    style.validate()?;
    let dims = image.dims();
    for e in elements {
        if let Some(b) = e.boxes().iter().find(|b| !dims.contains(b)) {
            return Err(OverlayError::OutOfFrameElement(*b));
        }
    }
    let mut out = image.clone();
    for e in elements {
        for b in e.boxes() {
            draw_element(&mut out, e.category, b, style);
        }
    }
    Ok(out)
}

/// Glyph scale used for a thumbnail of the given size.
pub fn stamp_scale(width: u32, height: u32) -> u32 {
    (width.min(height) / 40).clamp(1, 8)
}

/// Size of the ID stamp block in the thumbnail's top-left corner, before
/// clipping to the thumbnail.
pub fn stamp_size(width: u32, height: u32) -> (u32, u32) {
    let s = stamp_scale(width, height);
    ((font::GLYPH_WIDTH + 2) * s, (font::GLYPH_HEIGHT + 2) * s)
}

fn stamp_id(img: &mut RasterImage, id: CandidateId, style: &OverlayStyle) {
    let s = stamp_scale(img.width, img.height);
    let (w, h) = stamp_size(img.width, img.height);
    img.fill_rect(0, 0, i64::from(w), i64::from(h), style.stamp_background);
    let Some(rows) = font::glyph(id.as_char()) else {
        return;
    };
    for row in 0..font::GLYPH_HEIGHT {
        for col in 0..font::GLYPH_WIDTH {
            if font::is_set(rows, col, row) {
                let x = i64::from((col + 1) * s);
                let y = i64::from((row + 1) * s);
                img.fill_rect(x, y, x + i64::from(s), y + i64::from(s), style.stamp_foreground);
            }
        }
    }
}

/// One cropped thumbnail per candidate, in ID order, with the letter ID
/// stamped in the top-left corner.
pub fn render_decision_sheet(
    image: &RasterImage,
    candidates: &CandidateSet,
    style: &OverlayStyle,
) -> Result<Vec<(CandidateId, RasterImage)>, OverlayError> {
    let dims = image.dims();
    candidates
        .iter()
        .map(|c| {
            let (x0, y0, x1, y1) = c.bbox.pixel_bounds(dims);
            if x1 <= x0 || y1 <= y0 {
                return Err(OverlayError::DegenerateBox { id: c.id, bbox: c.bbox });
            }
            let mut thumb = image.crop(x0, y0, x1, y1)?;
            stamp_id(&mut thumb, c.id, style);
            Ok((c.id, thumb))
        })
        .collect()
}
