//! Subject/surrounding split of a glyph from open-vocabulary detections.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::backends::DetectorBackend;
use crate::error::{Error, Result};
use crate::glyph::GlyphImage;

pub const DEFAULT_CONF_MIN: f64 = 0.5;
pub const DEFAULT_AREA_LO: f64 = 0.4;
pub const DEFAULT_AREA_HI: f64 = 0.6;
/// Area of the box used when a detector returns nothing at all.
pub const FALLBACK_AREA: f64 = 0.5;
/// Candidates in later concepts may overlap earlier masks by at most this share of their own area.
pub const MAX_CLAIMED_OVERLAP: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 0.8;

/// Axis-aligned box in normalized canvas coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
    pub phrase: String,
}

impl DetectionBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, confidence: f64, phrase: impl Into<String>) -> Result<Self> {
        let coords_ok = [x0, y0, x1, y1].iter().all(|v| (0.0..=1.0).contains(v));
        if !coords_ok || x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!("bad box [{x0}, {y0}, {x1}, {y1}]")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self {
            x0,
            y0,
            x1,
            y1,
            confidence,
            phrase: phrase.into(),
        })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Pixel `(row, col)` of an `h × w` canvas belongs to the box when its center does
    /// (half-open on the far edges).
    pub fn contains_pixel(&self, row: usize, col: usize, (h, w): (usize, usize)) -> bool {
        let cx = (col as f64 + 0.5) / w as f64;
        let cy = (row as f64 + 0.5) / h as f64;
        self.x0 <= cx && cx < self.x1 && self.y0 <= cy && cy < self.y1
    }

    pub fn mask(&self, hw: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(hw, |(r, c)| if self.contains_pixel(r, c, hw) { 1.0 } else { 0.0 })
    }

    /// Uniformly rescales the box about its center to `target_area`. A side that would
    /// exceed the canvas is capped and the other side grows to keep the area; the box
    /// is then shifted to lie inside the canvas.
    pub fn rescaled(&self, target_area: f64) -> DetectionBox {
        let k = (target_area / self.area()).sqrt();
        let (mut w, mut h) = (self.width() * k, self.height() * k);
        if w > 1.0 {
            w = 1.0;
            h = target_area;
        }
        if h > 1.0 {
            h = 1.0;
            w = target_area;
        }
        let cx = ((self.x0 + self.x1) / 2.0).clamp(w / 2.0, 1.0 - w / 2.0);
        let cy = ((self.y0 + self.y1) / 2.0).clamp(h / 2.0, 1.0 - h / 2.0);
        DetectionBox {
            x0: (cx - w / 2.0).max(0.0),
            y0: (cy - h / 2.0).max(0.0),
            x1: (cx + w / 2.0).min(1.0),
            y1: (cy + h / 2.0).min(1.0),
            confidence: self.confidence,
            phrase: self.phrase.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionThresholds {
    pub conf_min: f64,
    pub area_lo: f64,
    pub area_hi: f64,
}

impl Default for RegionThresholds {
    fn default() -> Self {
        Self {
            conf_min: DEFAULT_CONF_MIN,
            area_lo: DEFAULT_AREA_LO,
            area_hi: DEFAULT_AREA_HI,
        }
    }
}

impl RegionThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.area_lo && self.area_lo < self.area_hi && self.area_hi <= 1.0) {
            return Err(Error::invalid(format!(
                "area bounds must satisfy 0 <= lo < hi <= 1, got [{}, {}]",
                self.area_lo, self.area_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.conf_min) {
            return Err(Error::invalid(format!(
                "confidence threshold {} outside [0, 1]",
                self.conf_min
            )));
        }
        Ok(())
    }

    fn passes(&self, b: &DetectionBox) -> bool {
        let a = b.area();
        a >= self.area_lo && a <= self.area_hi && b.confidence >= self.conf_min
    }
}

/// One subject region and the two images it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSplit {
    pub subject_image: Array2<f64>,
    pub surrounding_image: Array2<f64>,
    pub mask: Array2<f64>,
    pub bbox: DetectionBox,
    /// Set when no detection passed the filters and the box came from the fallback ladder.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRegionSplit {
    pub splits: Vec<RegionSplit>,
    pub gammas: Vec<f64>,
}

impl MultiRegionSplit {
    pub fn with_gammas(mut self, gammas: Vec<f64>) -> Result<Self> {
        if gammas.len() != self.splits.len() {
            return Err(Error::invalid(format!(
                "{} gammas for {} concepts",
                gammas.len(),
                self.splits.len()
            )));
        }
        if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g <= 1.0)) {
            return Err(Error::invalid(format!("gamma {g} outside (0, 1]")));
        }
        self.gammas = gammas;
        Ok(self)
    }

    pub fn masks(&self) -> Vec<Array2<f64>> {
        self.splits.iter().map(|s| s.mask.clone()).collect()
    }
}

pub fn detect(image: &GlyphImage, prompt: &str, backend: &dyn DetectorBackend) -> Result<Vec<DetectionBox>> {
    backend.detect(image, prompt)
}

/// Keeps boxes inside the area and confidence bounds, best first: confidence
/// descending, then larger area, then top-to-bottom, then left-to-right.
pub fn filter_and_rank(boxes: &[DetectionBox], thresholds: &RegionThresholds) -> Vec<DetectionBox> {
    let mut kept: Vec<DetectionBox> = boxes.iter().filter(|b| thresholds.passes(b)).cloned().collect();
    kept.sort_by(rank_order);
    kept
}

fn rank_order(a: &DetectionBox, b: &DetectionBox) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(b.area().total_cmp(&a.area()))
        .then(a.y0.total_cmp(&b.y0))
        .then(a.x0.total_cmp(&b.x0))
}

/// `I_sub = I ⊙ M`, `I_surr = I ⊙ (1 − M)` with `M` the box.
pub fn split_regions(image: &Array2<f64>, bbox: &DetectionBox) -> RegionSplit {
    split_with_mask(image, bbox.mask(image.dim()), bbox.clone(), false)
}

fn split_with_mask(image: &Array2<f64>, mask: Array2<f64>, bbox: DetectionBox, fallback: bool) -> RegionSplit {
    let subject_image = image * &mask;
    let surrounding_image = Zip::from(image)
        .and(&mask)
        .map_collect(|&v, &m| if m > 0.0 { 0.0 } else { v });
    RegionSplit {
        subject_image,
        surrounding_image,
        mask,
        bbox,
        fallback,
    }
}

/// Detects, filters and splits on the best box; falls back to a synthetic box when
/// nothing passes.
pub fn select_region(
    image: &GlyphImage,
    prompt: &str,
    backend: &dyn DetectorBackend,
    thresholds: &RegionThresholds,
) -> Result<RegionSplit> {
    let multi = select_regions_multi(image, &[prompt], backend, thresholds)?;
    Ok(multi.splits.into_iter().next().expect("one prompt yields one split"))
}

/// Regions for several concepts in order. Concept `i` is detected on the glyph with
/// the earlier concepts' pixels erased, and its mask excludes them.
pub fn select_regions_multi(
    image: &GlyphImage,
    prompts: &[&str],
    backend: &dyn DetectorBackend,
    thresholds: &RegionThresholds,
) -> Result<MultiRegionSplit> {
    thresholds.validate()?;
    if prompts.is_empty() {
        return Err(Error::invalid("at least one concept prompt is required"));
    }
    let hw = image.pixels.dim();
    let mut claimed = Array2::<f64>::zeros(hw);
    let mut splits = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let mut view = image.clone();
        Zip::from(&mut view.pixels).and(&claimed).for_each(|p, &c| {
            if c > 0.0 {
                *p = 0.0;
            }
        });
        let raw = backend.detect(&view, prompt)?;
        let candidates: Vec<DetectionBox> = raw
            .into_iter()
            .filter(|b| claimed_share(b, &claimed) <= MAX_CLAIMED_OVERLAP)
            .collect();
        let (bbox, fallback) = match filter_and_rank(&candidates, thresholds).into_iter().next() {
            Some(best) => (best, false),
            None => (fallback_box(&candidates, thresholds, &claimed, prompt), true),
        };
        let mask = Zip::from(&bbox.mask(hw))
            .and(&claimed)
            .map_collect(|&m, &c| if m > 0.0 && c == 0.0 { 1.0 } else { 0.0 });
        claimed.zip_mut_with(&mask, |c, &m| *c = c.max(m));
        splits.push(split_with_mask(&image.pixels, mask, bbox, fallback));
    }
    let gammas = vec![DEFAULT_GAMMA; splits.len()];
    Ok(MultiRegionSplit { splits, gammas })
}

/// Share of the box's own pixels already claimed by earlier concepts.
fn claimed_share(bbox: &DetectionBox, claimed: &Array2<f64>) -> f64 {
    let hw = claimed.dim();
    let (mut inside, mut taken) = (0usize, 0usize);
    for ((r, c), &v) in claimed.indexed_iter() {
        if bbox.contains_pixel(r, c, hw) {
            inside += 1;
            if v > 0.0 {
                taken += 1;
            }
        }
    }
    if inside == 0 {
        // Sub-pixel boxes cover nothing and so cannot be used.
        return 1.0;
    }
    taken as f64 / inside as f64
}

fn fallback_box(
    candidates: &[DetectionBox],
    thresholds: &RegionThresholds,
    claimed: &Array2<f64>,
    prompt: &str,
) -> DetectionBox {
    if let Some(best) = candidates.iter().max_by(|a, b| rank_order(b, a)) {
        let target = best.area().clamp(thresholds.area_lo, thresholds.area_hi);
        return best.rescaled(target);
    }
    let half = FALLBACK_AREA.sqrt();
    let lo = (1.0 - half) / 2.0;
    let options = [
        (lo, lo, lo + half, lo + half),
        (0.0, 0.0, 0.5, 1.0),
        (0.5, 0.0, 1.0, 1.0),
        (0.0, 0.0, 1.0, 0.5),
        (0.0, 0.5, 1.0, 1.0),
    ];
    options
        .iter()
        .map(|&(x0, y0, x1, y1)| DetectionBox {
            x0,
            y0,
            x1,
            y1,
            confidence: 0.0,
            phrase: prompt.to_owned(),
        })
        .fold(None::<(f64, DetectionBox)>, |best, b| {
            let share = claimed_share(&b, claimed);
            match best {
                Some((s, _)) if s <= share => best,
                _ => Some((share, b)),
            }
        })
        .map(|(_, b)| b)
        .expect("fallback options are non-empty")
}
