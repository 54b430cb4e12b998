//! Open-vocabulary detectors: an offline fixture/connected-component detector and
//! an HTTP adapter.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::http::{agent, png_base64, post_json};
use super::DETECTOR_URL_ENV;
use crate::error::{Error, Result};
use crate::glyph::GlyphImage;
use crate::region::DetectionBox;

pub const DEFAULT_BOX_THRESHOLD: f64 = 0.35;

pub trait DetectorBackend: Send + Sync {
    fn detect(&self, image: &GlyphImage, prompt: &str) -> Result<Vec<DetectionBox>>;

    fn id(&self) -> String;
}

/// Detector output as exchanged with services and fixture files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireBox {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default)]
    pub phrase: String,
}

impl WireBox {
    /// Coordinates are clipped to the canvas; degenerate boxes are malformed.
    pub fn into_box(self) -> Result<DetectionBox> {
        let [x0, y0, x1, y1] = self.bbox.map(|v| v.clamp(0.0, 1.0));
        DetectionBox::new(x0, y0, x1, y1, self.score, self.phrase)
            .map_err(|e| Error::MalformedResponse(format!("detector box {:?}: {e}", self.bbox)))
    }
}

impl From<&DetectionBox> for WireBox {
    fn from(b: &DetectionBox) -> Self {
        Self {
            bbox: [b.x0, b.y0, b.x1, b.y1],
            score: b.confidence,
            phrase: b.phrase.clone(),
        }
    }
}

/// Returns fixture boxes for known `(text, prompt)` pairs and otherwise proposes one
/// box per 8-connected ink component, scored by its share of the total ink.
#[derive(Debug, Clone, Default)]
pub struct ToyDetector {
    fixtures: HashMap<String, Vec<DetectionBox>>,
}

fn fixture_key(text: &str, prompt: &str) -> String {
    format!("{text}|{prompt}")
}

pub fn bundled_fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/fixtures/detector.json")
}

impl ToyDetector {
    /// Reads a JSON object mapping `"text|prompt"` to a list of `{box, score, phrase}`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw: HashMap<String, Vec<WireBox>> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut fixtures = HashMap::new();
        for (key, boxes) in raw {
            let boxes = boxes
                .into_iter()
                .map(WireBox::into_box)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            fixtures.insert(key, boxes);
        }
        Ok(Self { fixtures })
    }

    pub fn bundled() -> Result<Self> {
        Self::from_file(&bundled_fixture_path())
    }

    pub fn with_boxes(mut self, text: &str, prompt: &str, boxes: Vec<DetectionBox>) -> Self {
        self.fixtures.insert(fixture_key(text, prompt), boxes);
        self
    }
}

impl DetectorBackend for ToyDetector {
    fn detect(&self, image: &GlyphImage, prompt: &str) -> Result<Vec<DetectionBox>> {
        if let Some(boxes) = self.fixtures.get(&fixture_key(&image.text, prompt)) {
            return Ok(boxes.clone());
        }
        Ok(component_boxes(&image.pixels, prompt))
    }

    fn id(&self) -> String {
        "toy-detector".into()
    }
}

/// Bounding boxes of 8-connected ink components in raster discovery order.
pub fn component_boxes(pixels: &Array2<f64>, phrase: &str) -> Vec<DetectionBox> {
    let (h, w) = pixels.dim();
    let ink = |r: usize, c: usize| pixels[[r, c]] >= 0.5;
    let mut seen = Array2::from_elem((h, w), false);
    let mut comps = Vec::new();
    let mut total = 0usize;
    for r0 in 0..h {
        for c0 in 0..w {
            if seen[[r0, c0]] || !ink(r0, c0) {
                continue;
            }
            seen[[r0, c0]] = true;
            let mut stack = vec![(r0, c0)];
            let (mut rmin, mut rmax, mut cmin, mut cmax, mut count) = (r0, r0, c0, c0, 0usize);
            while let Some((r, c)) = stack.pop() {
                count += 1;
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if !seen[[nr, nc]] && ink(nr, nc) {
                            seen[[nr, nc]] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            total += count;
            comps.push((rmin, rmax, cmin, cmax, count));
        }
    }
    comps
        .into_iter()
        .map(|(rmin, rmax, cmin, cmax, count)| DetectionBox {
            x0: cmin as f64 / w as f64,
            y0: rmin as f64 / h as f64,
            x1: (cmax + 1) as f64 / w as f64,
            y1: (rmax + 1) as f64 / h as f64,
            confidence: count as f64 / total as f64,
            phrase: phrase.to_owned(),
        })
        .collect()
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image: String,
    text: &'a str,
    box_threshold: f64,
}

/// Posts `{image, text, box_threshold}` and expects a list of `{box, score, phrase}`.
#[derive(Debug)]
pub struct HttpDetector {
    url: String,
    box_threshold: f64,
    agent: ureq::Agent,
}

impl HttpDetector {
    pub fn new(url: impl Into<String>, box_threshold: f64, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            box_threshold,
            agent: agent(timeout),
        }
    }

    pub fn from_env(timeout: Duration) -> Result<Self> {
        let url = std::env::var(DETECTOR_URL_ENV)
            .map_err(|_| Error::BackendUnavailable(format!("{DETECTOR_URL_ENV} is not set")))?;
        Ok(Self::new(url, DEFAULT_BOX_THRESHOLD, timeout))
    }
}

impl DetectorBackend for HttpDetector {
    fn detect(&self, image: &GlyphImage, prompt: &str) -> Result<Vec<DetectionBox>> {
        let body = DetectRequest {
            image: png_base64(&image.pixels)?,
            text: prompt,
            box_threshold: self.box_threshold,
        };
        let boxes: Vec<WireBox> = post_json(&self.agent, &self.url, &body)?;
        boxes.into_iter().map(WireBox::into_box).collect()
    }

    fn id(&self) -> String {
        format!("http({})", self.url)
    }
}
