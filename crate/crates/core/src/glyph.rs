//! Glyph rasterization and the control images derived from it.
//!
//! Canonical polarity everywhere downstream is ink = 1 on background = 0.

use std::path::{Path, PathBuf};

use ab_glyph::{Font, FontVec, GlyphId, PxScale, ScaleFont};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;

pub const DEFAULT_SIZE_PX: usize = 512;
pub const MIN_SIZE_PX: usize = 64;
/// Margin on every side, as a fraction of the canvas edge.
pub const MARGIN_FRACTION: f64 = 0.08;
pub const BINARIZE_LEVEL: f64 = 0.5;
pub const DEFAULT_FONT: &str = "DejaVuSans.ttf";

// Layout is measured at this pixel scale before fitting to the canvas.
const LAYOUT_SCALE: f32 = 1000.0;

/// Fonts shipped with the crate.
pub fn bundled_font_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/fonts")
}

/// A rasterized, binarized glyph on a square canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphImage {
    pub pixels: Array2<f64>,
    pub text: String,
    pub font_id: String,
    pub size_px: usize,
}

impl GlyphImage {
    pub fn ink_fraction(&self) -> f64 {
        ink_fraction(&self.pixels)
    }
}

pub fn ink_fraction(pixels: &Array2<f64>) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    pixels.iter().filter(|&&v| v > 0.0).count() as f64 / pixels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlKind {
    /// Consumed by the subject-deformation stage.
    Depth,
    /// Surrounding branch.
    Scribble,
    /// Subject branch.
    Segmentation,
}

impl ControlKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlKind::Depth => "depth",
            ControlKind::Scribble => "scribble",
            ControlKind::Segmentation => "segmentation",
        }
    }
}

/// A conditioning image plus the strength it is applied with.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub kind: ControlKind,
    pub image: Array2<f64>,
    pub conditioning_scale: f64,
}

impl ControlSignal {
    pub fn with_scale(mut self, conditioning_scale: f64) -> Self {
        self.conditioning_scale = conditioning_scale;
        self
    }

    pub fn dim(&self) -> (usize, usize) {
        self.image.dim()
    }
}

/// Loads fonts by file name from a directory (or by explicit path).
#[derive(Debug, Clone)]
pub struct FontLibrary {
    dir: PathBuf,
}

impl Default for FontLibrary {
    fn default() -> Self {
        Self::new(bundled_font_dir())
    }
}

impl FontLibrary {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn resolve(&self, font_id: &str) -> Result<PathBuf> {
        let direct = Path::new(font_id);
        let path = if direct.is_absolute() {
            direct.to_path_buf()
        } else {
            self.dir.join(direct)
        };
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::FontNotFound(path))
        }
    }

    pub fn load(&self, font_id: &str) -> Result<FontVec> {
        let path = self.resolve(font_id)?;
        let bytes = std::fs::read(&path)?;
        FontVec::try_from_vec(bytes).map_err(|e| Error::Font(format!("{}: {e}", path.display())))
    }
}

// Ink bounds in layout pixels, y pointing down, baseline at y = 0.
#[derive(Debug, Clone, Copy)]
struct Bounds {
    x0: f32,
    y0: f32,
    x1: f32,
    y1: f32,
}

impl Bounds {
    fn union(self, o: Bounds) -> Bounds {
        Bounds {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
        }
    }
}

/// Rasterizes `text` with the given font: the ink bounding box is scaled to fit
/// inside the margins, centered, and the coverage binarized at 0.5.
pub fn rasterize(text: &str, font_id: &str, size_px: usize, fonts: &FontLibrary) -> Result<GlyphImage> {
    if text.is_empty() {
        return Err(Error::invalid("empty text"));
    }
    if text.chars().any(|c| c.is_control()) {
        return Err(Error::invalid("control characters (multi-line text) are not supported"));
    }
    if size_px < MIN_SIZE_PX {
        return Err(Error::invalid(format!("size_px {size_px} < {MIN_SIZE_PX}")));
    }
    let font = fonts.load(font_id)?;

    let mut ids = Vec::with_capacity(text.len());
    for c in text.chars() {
        let id = font.glyph_id(c);
        if id.0 == 0 && !c.is_whitespace() {
            return Err(Error::MissingGlyph(c));
        }
        ids.push(id);
    }

    // Pass 1: reference layout, exact outline bounds.
    let scaled = font.as_scaled(PxScale::from(LAYOUT_SCALE));
    let (sx, sy) = (scaled.h_scale_factor(), scaled.v_scale_factor());
    let mut carets = Vec::with_capacity(ids.len());
    let mut caret = 0.0f32;
    let mut bounds: Option<Bounds> = None;
    let mut prev: Option<GlyphId> = None;
    for &id in &ids {
        if let Some(p) = prev {
            caret += scaled.kern(p, id);
        }
        carets.push(caret);
        if let Some(outline) = font.outline(id) {
            let b = outline.bounds;
            // Font units are y-up and the rect's corner order varies, so sort the extents.
            let gb = Bounds {
                x0: caret + b.min.x.min(b.max.x) * sx,
                x1: caret + b.min.x.max(b.max.x) * sx,
                y0: -b.min.y.max(b.max.y) * sy,
                y1: -b.min.y.min(b.max.y) * sy,
            };
            if gb.x1 > gb.x0 && gb.y1 > gb.y0 {
                bounds = Some(bounds.map_or(gb, |acc| acc.union(gb)));
            }
        }
        caret += scaled.h_advance(id);
        prev = Some(id);
    }
    let Some(bounds) = bounds else {
        return Err(Error::invalid(format!("{text:?} renders blank")));
    };

    // Pass 2: draw at the fitted scale.
    let margin = (MARGIN_FRACTION * size_px as f64).round() as f32;
    let inner = size_px as f32 - 2.0 * margin;
    let fit = inner / (bounds.x1 - bounds.x0).max(bounds.y1 - bounds.y0);
    let center = size_px as f32 / 2.0;
    let origin_x = center - 0.5 * (bounds.x0 + bounds.x1) * fit;
    let baseline = center - 0.5 * (bounds.y0 + bounds.y1) * fit;
    let scale = PxScale::from(LAYOUT_SCALE * fit);

    let mut coverage = Array2::<f64>::zeros((size_px, size_px));
    for (&id, &caret) in ids.iter().zip(&carets) {
        let glyph = id.with_scale_and_position(scale, ab_glyph::point(origin_x + caret * fit, baseline));
        let Some(outlined) = font.outline_glyph(glyph) else {
            continue;
        };
        let min = outlined.px_bounds().min;
        outlined.draw(|x, y, c| {
            let col = min.x as i64 + x as i64;
            let row = min.y as i64 + y as i64;
            if (0..size_px as i64).contains(&col) && (0..size_px as i64).contains(&row) {
                let cell = &mut coverage[[row as usize, col as usize]];
                *cell = (*cell + c as f64).min(1.0);
            }
        });
    }

    let pixels = imageops::threshold(&coverage, BINARIZE_LEVEL);
    if ink_fraction(&pixels) == 0.0 {
        return Err(Error::invalid(format!("{text:?} renders blank at {size_px}px")));
    }
    Ok(GlyphImage {
        pixels,
        text: text.to_owned(),
        font_id: font_id.to_owned(),
        size_px,
    })
}

/// Depth control: ink is near (1.0), background far (0.0).
pub fn to_depth(pixels: &Array2<f64>) -> ControlSignal {
    ControlSignal {
        kind: ControlKind::Depth,
        image: pixels.mapv(|v| v.clamp(0.0, 1.0)),
        conditioning_scale: 1.0,
    }
}

/// Scribble control: ink rendered as white strokes on black, i.e. the pixels themselves.
pub fn to_scribble(pixels: &Array2<f64>) -> ControlSignal {
    ControlSignal {
        kind: ControlKind::Scribble,
        image: pixels.mapv(|v| v.clamp(0.0, 1.0)),
        conditioning_scale: 1.0,
    }
}

/// Segmentation control: the input binarized at 0.5.
pub fn to_segmentation(pixels: &Array2<f64>) -> ControlSignal {
    ControlSignal {
        kind: ControlKind::Segmentation,
        image: imageops::threshold(pixels, BINARIZE_LEVEL),
        conditioning_scale: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fonts() -> FontLibrary {
        FontLibrary::default()
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(
            rasterize("", DEFAULT_FONT, 128, &fonts()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn space_is_rejected_as_blank() {
        assert!(matches!(
            rasterize(" ", DEFAULT_FONT, 128, &fonts()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn unknown_font_is_reported() {
        let err = rasterize("a", "NoSuchFont.ttf", 128, &fonts()).unwrap_err();
        assert!(matches!(err, Error::FontNotFound(_)));
    }

    #[test]
    fn glyph_absent_from_font() {
        let err = rasterize("口", DEFAULT_FONT, 128, &fonts()).unwrap_err();
        assert!(matches!(err, Error::MissingGlyph('口')));
    }

    #[test]
    fn tiny_canvas_is_rejected() {
        assert!(rasterize("a", DEFAULT_FONT, 32, &fonts()).is_err());
    }

    #[test]
    fn multiline_is_rejected() {
        assert!(rasterize("a\nb", DEFAULT_FONT, 128, &fonts()).is_err());
    }

    #[test]
    fn output_is_square_and_binary() {
        let g = rasterize("O", DEFAULT_FONT, 96, &fonts()).unwrap();
        assert_eq!(g.pixels.dim(), (96, 96));
        assert!(imageops::is_binary(&g.pixels));
    }

    #[test]
    fn margin_is_left_empty() {
        let g = rasterize("O", DEFAULT_FONT, 200, &fonts()).unwrap();
        let m = (MARGIN_FRACTION * 200.0).round() as usize - 1;
        for i in 0..200 {
            for j in 0..m {
                assert_eq!(g.pixels[[i, j]], 0.0);
                assert_eq!(g.pixels[[j, i]], 0.0);
                assert_eq!(g.pixels[[i, 199 - j]], 0.0);
                assert_eq!(g.pixels[[199 - j, i]], 0.0);
            }
        }
    }

    #[test]
    fn depth_of_blank_is_zero() {
        let blank = Array2::zeros((8, 8));
        let d = to_depth(&blank);
        assert_eq!(d.kind, ControlKind::Depth);
        assert!(d.image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_mean_tracks_ink_fraction() {
        // 30 of 100 pixels inked.
        let g = Array2::from_shape_fn((10, 10), |(r, _)| if r < 3 { 1.0 } else { 0.0 });
        let d = to_depth(&g);
        assert!((d.image.mean().unwrap() - 0.30).abs() < 1e-12);
        assert_eq!(d.image[[0, 0]], 1.0);
    }

    #[test]
    fn scribble_is_identity_on_binary() {
        let checker = Array2::from_shape_fn((16, 16), |(r, c)| ((r + c) % 2) as f64);
        let s = to_scribble(&checker);
        assert_eq!(s.kind, ControlKind::Scribble);
        assert_eq!(s.image, checker);
        assert!(to_scribble(&Array2::zeros((4, 4))).image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segmentation_steps_at_half() {
        let ramp = Array2::from_shape_fn((1, 11), |(_, c)| c as f64 / 10.0);
        let s = to_segmentation(&ramp);
        assert_eq!(s.kind, ControlKind::Segmentation);
        for c in 0..11 {
            let expect = if c as f64 / 10.0 >= 0.5 { 1.0 } else { 0.0 };
            assert_eq!(s.image[[0, c]], expect, "col {c}");
        }
        assert!(imageops::is_binary(&s.image));
    }
}
