//! JSON-over-HTTP adapters and the wire encoding they share.
//!
//! Arrays travel as `{"shape": [...], "data": "<base64 of row-major little-endian f32>"}`;
//! images travel as base64 PNG.
//!
//! Denoiser service endpoints (relative to the base URL):
//!
//! | method | path       | request                                         | response                         |
//! |--------|------------|-------------------------------------------------|----------------------------------|
//! | GET    | `/info`    |                                                 | `{id, latent_channels, downsample}` |
//! | POST   | `/encode`  | `{image}`                                       | `{latent}`                       |
//! | POST   | `/decode`  | `{latent}`                                      | `{image}`                        |
//! | POST   | `/predict` | `{latent, t, prompt, control?, hooks?}`         | `{eps, captures?}`               |

use std::sync::OnceLock;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{DenoiserBackend, HookHandle, LayerFilter, DENOISER_URL_ENV};
use crate::attention::AttentionCapture;
use crate::error::{Error, Result};
use crate::glyph::ControlSignal;
use crate::imageops;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
const MAX_BODY_BYTES: u64 = 512 << 20;

pub(crate) fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn transport(url: &str, e: ureq::Error) -> Error {
    Error::BackendUnavailable(format!("{url}: {e}"))
}

fn read_body(url: &str, mut resp: ureq::http::Response<ureq::Body>) -> Result<String> {
    resp.body_mut()
        .with_config()
        .limit(MAX_BODY_BYTES)
        .read_to_string()
        .map_err(|e| transport(url, e))
}

/// POSTs `body` as JSON and returns the raw response text.
pub(crate) fn post_json_text<B: Serialize>(
    agent: &ureq::Agent,
    url: &str,
    body: &B,
    bearer: Option<&str>,
) -> Result<String> {
    let mut req = agent.post(url);
    if let Some(key) = bearer {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let resp = req.send_json(body).map_err(|e| transport(url, e))?;
    read_body(url, resp)
}

pub(crate) fn post_json<B: Serialize, R: DeserializeOwned>(agent: &ureq::Agent, url: &str, body: &B) -> Result<R> {
    let text = post_json_text(agent, url, body, None)?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedResponse(format!("{url}: {e}")))
}

fn get_json<R: DeserializeOwned>(agent: &ureq::Agent, url: &str) -> Result<R> {
    let resp = agent.get(url).call().map_err(|e| transport(url, e))?;
    let text = read_body(url, resp)?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedResponse(format!("{url}: {e}")))
}

/// An n-d float array on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireArray {
    pub shape: Vec<usize>,
    pub data: String,
}

impl WireArray {
    fn encode<'a>(shape: Vec<usize>, values: impl Iterator<Item = &'a f64>) -> Self {
        let mut bytes = Vec::new();
        for v in values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Self {
            shape,
            data: B64.encode(bytes),
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        Self::encode(a.shape().to_vec(), a.iter())
    }

    pub fn from_array3(a: &Array3<f64>) -> Self {
        Self::encode(a.shape().to_vec(), a.iter())
    }

    fn values(&self, rank: usize) -> Result<Vec<f64>> {
        if self.shape.len() != rank {
            return Err(Error::MalformedResponse(format!(
                "expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::MalformedResponse(format!("array data: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::MalformedResponse(format!(
                "shape {:?} needs {} bytes, got {}",
                self.shape,
                4 * n,
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        let v = self.values(2)?;
        Array2::from_shape_vec((self.shape[0], self.shape[1]), v).map_err(|e| Error::MalformedResponse(e.to_string()))
    }

    pub fn to_array3(&self) -> Result<Array3<f64>> {
        let v = self.values(3)?;
        Array3::from_shape_vec((self.shape[0], self.shape[1], self.shape[2]), v)
            .map_err(|e| Error::MalformedResponse(e.to_string()))
    }
}

pub fn png_base64(image: &Array2<f64>) -> Result<String> {
    Ok(B64.encode(imageops::png_bytes(image)?))
}

pub fn png_from_base64(data: &str) -> Result<Array2<f64>> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::MalformedResponse(format!("image data: {e}")))?;
    imageops::decode_png(&bytes).map_err(|e| Error::MalformedResponse(format!("image data: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserInfo {
    pub id: String,
    pub latent_channels: usize,
    /// Image pixels per latent cell along each axis.
    pub downsample: usize,
}

#[derive(Serialize)]
struct WireControl {
    kind: &'static str,
    image: String,
    scale: f64,
}

#[derive(Serialize)]
struct WireSubstitution {
    alpha: f64,
    layers: LayerFilter,
    subject_keys: Vec<Vec<WireArray>>,
    concept_masks: Vec<WireArray>,
}

#[derive(Serialize)]
struct WireHooks {
    capture: bool,
    substitution: Option<WireSubstitution>,
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    latent: WireArray,
    t: usize,
    prompt: &'a str,
    control: Option<WireControl>,
    hooks: Option<WireHooks>,
}

#[derive(Debug, Deserialize)]
struct WireCapture {
    layer_id: usize,
    step_t: usize,
    q: WireArray,
    k: WireArray,
    raw_scores: Vec<WireArray>,
    head_count: usize,
    d_dim: usize,
    grid: (usize, usize),
}

impl WireCapture {
    fn decode(self) -> Result<AttentionCapture> {
        Ok(AttentionCapture {
            layer_id: self.layer_id,
            step_t: self.step_t,
            q: self.q.to_array2()?,
            k: self.k.to_array2()?,
            raw_scores: self
                .raw_scores
                .iter()
                .map(WireArray::to_array2)
                .collect::<Result<_>>()?,
            head_count: self.head_count,
            d_dim: self.d_dim,
            grid: self.grid,
        })
    }
}

#[derive(Deserialize)]
struct PredictResponse {
    eps: WireArray,
    #[serde(default)]
    captures: Vec<WireCapture>,
}

#[derive(Serialize, Deserialize)]
struct LatentBody {
    latent: WireArray,
}

#[derive(Serialize, Deserialize)]
struct ImageBody {
    image: String,
}

/// Client for a remote control-conditioned denoiser.
#[derive(Debug)]
pub struct HttpDenoiser {
    base_url: String,
    agent: ureq::Agent,
    info: OnceLock<DenoiserInfo>,
}

impl HttpDenoiser {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            agent: agent(timeout),
            info: OnceLock::new(),
        }
    }

    pub fn from_env(timeout: Duration) -> Result<Self> {
        let url = std::env::var(DENOISER_URL_ENV)
            .map_err(|_| Error::BackendUnavailable(format!("{DENOISER_URL_ENV} is not set")))?;
        Ok(Self::new(url, timeout))
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.base_url)
    }

    pub fn info(&self) -> Result<&DenoiserInfo> {
        if let Some(info) = self.info.get() {
            return Ok(info);
        }
        let info: DenoiserInfo = get_json(&self.agent, &self.url("info"))?;
        if info.latent_channels == 0 || info.downsample == 0 {
            return Err(Error::MalformedResponse(
                "denoiser info has zero channels or downsample".into(),
            ));
        }
        Ok(self.info.get_or_init(|| info))
    }
}

impl DenoiserBackend for HttpDenoiser {
    fn id(&self) -> String {
        match self.info.get() {
            Some(info) => format!("http({}; {})", self.base_url, info.id),
            None => format!("http({})", self.base_url),
        }
    }

    fn latent_shape(&self, (h, w): (usize, usize)) -> Result<(usize, usize, usize)> {
        let info = self.info()?;
        let f = info.downsample;
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} is not a multiple of the downsample factor {f}"
            )));
        }
        Ok((h / f, w / f, info.latent_channels))
    }

    fn encode(&self, image: &Array2<f64>) -> Result<Array3<f64>> {
        let expect = self.latent_shape(image.dim())?;
        let body = ImageBody {
            image: png_base64(image)?,
        };
        let resp: LatentBody = post_json(&self.agent, &self.url("encode"), &body)?;
        let latent = resp.latent.to_array3()?;
        if latent.dim() != expect {
            return Err(Error::MalformedResponse(format!(
                "latent {:?}, expected {expect:?}",
                latent.dim()
            )));
        }
        Ok(latent)
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Array2<f64>> {
        let body = LatentBody {
            latent: WireArray::from_array3(latent),
        };
        let resp: ImageBody = post_json(&self.agent, &self.url("decode"), &body)?;
        png_from_base64(&resp.image)
    }

    fn predict_noise(
        &self,
        x_t: &Array3<f64>,
        t: usize,
        prompt: &str,
        control: Option<&ControlSignal>,
        hooks: Option<&HookHandle>,
    ) -> Result<Array3<f64>> {
        let control = control
            .map(|c| {
                Ok::<_, Error>(WireControl {
                    kind: c.kind.as_str(),
                    image: png_base64(&c.image)?,
                    scale: c.conditioning_scale,
                })
            })
            .transpose()?;
        let wire_hooks = hooks.map(|h| WireHooks {
            capture: h.captures_enabled(),
            substitution: h.substitution().map(|s| WireSubstitution {
                alpha: s.alpha,
                layers: s.layers.clone(),
                subject_keys: s
                    .subject_keys
                    .iter()
                    .map(|layers| layers.iter().map(WireArray::from_array2).collect())
                    .collect(),
                concept_masks: s.concept_masks.iter().map(WireArray::from_array2).collect(),
            }),
        });
        let body = PredictRequest {
            latent: WireArray::from_array3(x_t),
            t,
            prompt,
            control,
            hooks: wire_hooks,
        };
        let resp: PredictResponse = post_json(&self.agent, &self.url("predict"), &body)?;
        let eps = resp.eps.to_array3()?;
        if eps.dim() != x_t.dim() {
            return Err(Error::MalformedResponse(format!(
                "noise {:?} for latent {:?}",
                eps.dim(),
                x_t.dim()
            )));
        }
        if let Some(h) = hooks {
            for c in resp.captures {
                h.record(c.decode()?);
            }
        }
        Ok(eps)
    }

    fn supports_hooks(&self) -> bool {
        true
    }
}
