//! A tiny fixed-weight transformer denoiser with real self-attention layers.
//!
//! It has no training and produces no meaningful images; it exists so that key
//! substitution, attention capture and sketch fusion run against genuine q/k
//! tensors. The latent is split into a `grid × grid` token lattice.

use ndarray::{concatenate, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{identity_decode, identity_encode, DenoiserBackend, HookHandle};
use crate::attention::{
    cross_branch_scores, cross_branch_scores_per_concept, head_slice, nearest_concept, softmax_rows, AttentionCapture,
};
use crate::error::{Error, Result};
use crate::glyph::{ControlKind, ControlSignal};
use crate::sampler::DiffusionSchedule;

/// Per-token input width: patch mean and std, control mean, control kind (3),
/// time (2), prompt hash (4).
pub const INPUT_DIM: usize = 12;
const PROMPT_DIM: usize = 4;
const OUTPUT_GAIN: f64 = 0.1;
const MLP_GAIN: f64 = 0.5;

/// Subject keys per concept, the concept of each query token, and α.
pub type KeyMixing<'a> = (&'a [&'a Array2<f64>], &'a [usize], f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroConfig {
    /// Tokens per side.
    pub grid: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for MicroConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            heads: 2,
            head_dim: 8,
            layers: 2,
            channels: 4,
            seed: 0,
        }
    }
}

impl MicroConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone)]
pub struct MicroLayer {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_ff: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MicroAttentionBackend {
    config: MicroConfig,
    schedule: DiffusionSchedule,
    w_in: Array2<f64>,
    pos: Array2<f64>,
    layers: Vec<MicroLayer>,
    w_out: Array2<f64>,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

impl MicroAttentionBackend {
    pub fn new(config: MicroConfig, schedule: DiffusionSchedule) -> Result<Self> {
        if config.grid == 0 || config.heads == 0 || config.head_dim == 0 || config.layers == 0 || config.channels == 0 {
            return Err(Error::invalid(format!("degenerate micro config {config:?}")));
        }
        let d = config.model_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w_in = random_matrix(&mut rng, INPUT_DIM, d);
        let pos = random_matrix(&mut rng, config.grid * config.grid, d).mapv(|v| v * 0.1);
        let layers = (0..config.layers)
            .map(|_| MicroLayer {
                w_q: random_matrix(&mut rng, d, d),
                w_k: random_matrix(&mut rng, d, d),
                w_v: random_matrix(&mut rng, d, d),
                w_o: random_matrix(&mut rng, d, d),
                w_ff: random_matrix(&mut rng, d, d),
            })
            .collect();
        let w_out = random_matrix(&mut rng, d, 1);
        Ok(Self {
            config,
            schedule,
            w_in,
            pos,
            layers,
            w_out,
        })
    }

    pub fn config(&self) -> &MicroConfig {
        &self.config
    }

    pub fn layer(&self, i: usize) -> &MicroLayer {
        &self.layers[i]
    }

    fn patch(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        let g = self.config.grid;
        if h % g != 0 || w % g != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "{h}x{w} is not divisible into a {g}x{g} token grid"
            )));
        }
        Ok((h / g, w / g))
    }

    /// Token embeddings entering the first attention layer.
    pub fn token_features(
        &self,
        x_t: &Array3<f64>,
        t: usize,
        prompt: &str,
        control: Option<&ControlSignal>,
    ) -> Result<Array2<f64>> {
        let (h, w, ch) = x_t.dim();
        if ch != self.config.channels {
            return Err(Error::shape(format!(
                "latent has {ch} channels, backend expects {}",
                self.config.channels
            )));
        }
        let (ph, pw) = self.patch((h, w))?;
        if let Some(c) = control {
            if c.dim() != (h, w) {
                return Err(Error::shape(format!("control {:?} vs latent {:?}", c.dim(), (h, w))));
            }
        }
        let g = self.config.grid;
        let frac = t as f64 / self.schedule.train_steps() as f64;
        let time = [(frac * std::f64::consts::PI).sin(), (frac * std::f64::consts::PI).cos()];
        let prompt_code = prompt_embedding(prompt);
        let mut u = Array2::<f64>::zeros((g * g, INPUT_DIM));
        for gi in 0..g {
            for gj in 0..g {
                let patch = x_t.slice(ndarray::s![gi * ph..(gi + 1) * ph, gj * pw..(gj + 1) * pw, ..]);
                let n = patch.len() as f64;
                let mean = patch.sum() / n;
                let var = patch.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
                let mut row = u.row_mut(gi * g + gj);
                row[0] = mean;
                row[1] = var.sqrt();
                if let Some(c) = control {
                    let cs = c.conditioning_scale;
                    let cp = c
                        .image
                        .slice(ndarray::s![gi * ph..(gi + 1) * ph, gj * pw..(gj + 1) * pw]);
                    row[2] = cs * cp.sum() / cp.len() as f64;
                    let slot = match c.kind {
                        ControlKind::Depth => 3,
                        ControlKind::Scribble => 4,
                        ControlKind::Segmentation => 5,
                    };
                    row[slot] = cs;
                }
                row[6] = time[0];
                row[7] = time[1];
                for (k, v) in prompt_code.iter().enumerate() {
                    row[8 + k] = *v;
                }
            }
        }
        Ok(u.dot(&self.w_in) + &self.pos)
    }

    /// One attention + MLP block. `mixing` is `(subject keys per concept, concept of
    /// each token, α)`; the returned capture carries this layer's own keys.
    pub fn layer_forward(
        &self,
        layer_id: usize,
        features: &Array2<f64>,
        mixing: Option<KeyMixing>,
        t: usize,
    ) -> Result<(Array2<f64>, AttentionCapture)> {
        let layer = &self.layers[layer_id];
        let d = self.config.head_dim;
        let q = features.dot(&layer.w_q);
        let k = features.dot(&layer.w_k);
        let v = features.dot(&layer.w_v);
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut raw_scores = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = head_slice(&q, head, d);
            let kh = head_slice(&k, head, d);
            let scores = match mixing {
                Some((k_subs, concept_of_token, alpha)) => {
                    let subs: Vec<Array2<f64>> = k_subs
                        .iter()
                        .map(|ks| {
                            if ks.dim() != k.dim() {
                                return Err(Error::shape(format!("subject keys {:?} vs {:?}", ks.dim(), k.dim())));
                            }
                            Ok(head_slice(ks, head, d))
                        })
                        .collect::<Result<_>>()?;
                    let refs: Vec<&Array2<f64>> = subs.iter().collect();
                    cross_branch_scores_per_concept(&qh, &kh, &refs, concept_of_token, alpha, d)?
                }
                None => cross_branch_scores(&qh, &kh, d)?,
            };
            heads.push(softmax_rows(&scores).dot(&head_slice(&v, head, d)));
            raw_scores.push(scores);
        }
        let views: Vec<_> = heads.iter().map(|a| a.view()).collect();
        let attn = concatenate(Axis(1), &views).expect("head outputs share a row count");
        let mid = features + &attn.dot(&layer.w_o);
        let out = &mid + &mid.dot(&layer.w_ff).mapv(|v| MLP_GAIN * v.tanh());
        let capture = AttentionCapture {
            layer_id,
            step_t: t,
            q,
            k,
            raw_scores,
            head_count: self.config.heads,
            d_dim: d,
            grid: (self.config.grid, self.config.grid),
        };
        Ok((out, capture))
    }
}

/// Four values in [-1, 1] derived from the prompt text.
fn prompt_embedding(prompt: &str) -> [f64; PROMPT_DIM] {
    let digest = Sha256::digest(prompt.as_bytes());
    let mut out = [0.0; PROMPT_DIM];
    for (o, b) in out.iter_mut().zip(digest.iter()) {
        *o = *b as f64 / 127.5 - 1.0;
    }
    out
}

impl DenoiserBackend for MicroAttentionBackend {
    fn id(&self) -> String {
        let c = &self.config;
        format!(
            "toy-micro(grid={},heads={},head_dim={},layers={},seed={})",
            c.grid, c.heads, c.head_dim, c.layers, c.seed
        )
    }

    fn latent_shape(&self, image_hw: (usize, usize)) -> Result<(usize, usize, usize)> {
        self.patch(image_hw)?;
        Ok((image_hw.0, image_hw.1, self.config.channels))
    }

    fn encode(&self, image: &Array2<f64>) -> Result<Array3<f64>> {
        self.latent_shape(image.dim())?;
        Ok(identity_encode(image, self.config.channels))
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Array2<f64>> {
        Ok(identity_decode(latent))
    }

    fn predict_noise(
        &self,
        x_t: &Array3<f64>,
        t: usize,
        prompt: &str,
        control: Option<&ControlSignal>,
        hooks: Option<&HookHandle>,
    ) -> Result<Array3<f64>> {
        if t >= self.schedule.train_steps() {
            return Err(Error::invalid(format!("timestep {t} outside schedule")));
        }
        let mut features = self.token_features(x_t, t, prompt, control)?;
        let substitution = hooks.and_then(HookHandle::substitution);
        let concept_of_token = match substitution {
            Some(s) if !s.concept_masks.is_empty() => {
                if s.concept_masks.len() != s.subject_keys.len() {
                    return Err(Error::shape("one concept mask per subject key set is required"));
                }
                nearest_concept(&s.concept_masks, (self.config.grid, self.config.grid))
            }
            _ => vec![0; self.config.grid * self.config.grid],
        };
        for layer_id in 0..self.layers.len() {
            let keys = match substitution {
                Some(s) if s.layers.contains(layer_id) => Some((s.keys_for_layer(layer_id)?, s.alpha)),
                _ => None,
            };
            let mixing = keys
                .as_ref()
                .map(|(k, a)| (k.as_slice(), concept_of_token.as_slice(), *a));
            let (out, capture) = self.layer_forward(layer_id, &features, mixing, t)?;
            if let Some(h) = hooks {
                h.record(capture);
            }
            features = out;
        }
        let token_out = features.dot(&self.w_out).mapv(f64::tanh);
        let (h, w, ch) = x_t.dim();
        let (ph, pw) = (h / self.config.grid, w / self.config.grid);
        let scale = (1.0 - self.schedule.alpha_bar(t)).sqrt();
        Ok(Array3::from_shape_fn((h, w, ch), |(r, c, k)| {
            let tok = (r / ph) * self.config.grid + c / pw;
            scale * x_t[[r, c, k]] + OUTPUT_GAIN * token_out[[tok, 0]]
        }))
    }

    fn supports_hooks(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{install_hooks, KeySubstitution, LayerFilter};
    use crate::glyph::{to_scribble, to_segmentation};
    use crate::sampler::gaussian_noise;
    use crate::sampler::schedule::BetaSpec;

    fn backend() -> MicroAttentionBackend {
        let s = DiffusionSchedule::new(1000, 50, BetaSpec::default()).unwrap();
        MicroAttentionBackend::new(MicroConfig::default(), s).unwrap()
    }

    fn subject_keys(b: &MicroAttentionBackend, x: &Array3<f64>, t: usize) -> Vec<Array2<f64>> {
        let hooks = install_hooks(b, None, true).unwrap();
        let ctrl = to_segmentation(&Array2::ones((32, 32)));
        b.predict_noise(x, t, "subject", Some(&ctrl), Some(&hooks)).unwrap();
        hooks.remove().into_iter().map(|c| c.k).collect()
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let b = backend();
        let x = gaussian_noise((32, 32, 4), 1, 0);
        let a = b.predict_noise(&x, 500, "p", None, None).unwrap();
        assert_eq!(a, backend().predict_noise(&x, 500, "p", None, None).unwrap());
        let other = MicroAttentionBackend::new(
            MicroConfig {
                seed: 1,
                ..MicroConfig::default()
            },
            DiffusionSchedule::new(1000, 50, BetaSpec::default()).unwrap(),
        )
        .unwrap();
        assert_ne!(a, other.predict_noise(&x, 500, "p", None, None).unwrap());
    }

    #[test]
    fn prompt_and_control_kind_matter() {
        let b = backend();
        let x = gaussian_noise((32, 32, 4), 2, 0);
        let img = Array2::ones((32, 32));
        let base = b.predict_noise(&x, 300, "p", None, None).unwrap();
        assert_ne!(base, b.predict_noise(&x, 300, "q", None, None).unwrap());
        let scribble = b.predict_noise(&x, 300, "p", Some(&to_scribble(&img)), None).unwrap();
        let seg = b
            .predict_noise(&x, 300, "p", Some(&to_segmentation(&img)), None)
            .unwrap();
        assert_ne!(scribble, seg);
        let off = b
            .predict_noise(&x, 300, "p", Some(&to_scribble(&img).with_scale(0.0)), None)
            .unwrap();
        assert_eq!(off, base);
    }

    #[test]
    fn capture_hooks_are_transparent() {
        let b = backend();
        let x = gaussian_noise((32, 32, 4), 3, 0);
        let plain = b.predict_noise(&x, 400, "p", None, None).unwrap();
        let hooks = install_hooks(&b, None, true).unwrap();
        let hooked = b.predict_noise(&x, 400, "p", None, Some(&hooks)).unwrap();
        assert_eq!(plain, hooked);
        let caps = hooks.remove();
        assert_eq!(caps.len(), 2);
        assert_eq!(caps[0].raw_scores.len(), 2);
        assert_eq!(caps[0].raw_scores[0].dim(), (64, 64));
        assert_eq!(b.predict_noise(&x, 400, "p", None, None).unwrap(), plain);
    }

    #[test]
    fn alpha_one_substitution_is_transparent() {
        let b = backend();
        let x = gaussian_noise((32, 32, 4), 4, 0);
        let keys = subject_keys(&b, &x, 400);
        let plain = b.predict_noise(&x, 400, "p", None, None).unwrap();
        let hooks = install_hooks(
            &b,
            Some(KeySubstitution {
                alpha: 1.0,
                subject_keys: vec![keys],
                concept_masks: vec![],
                layers: LayerFilter::All,
            }),
            false,
        )
        .unwrap();
        assert_eq!(b.predict_noise(&x, 400, "p", None, Some(&hooks)).unwrap(), plain);
    }

    #[test]
    fn half_substitution_matches_external_layer_math() {
        let b = backend();
        let x = gaussian_noise((32, 32, 4), 5, 0);
        let keys = subject_keys(&b, &x, 600);
        let hooks = install_hooks(
            &b,
            Some(KeySubstitution {
                alpha: 0.5,
                subject_keys: vec![keys.clone()],
                concept_masks: vec![],
                layers: LayerFilter::Only(vec![0]),
            }),
            true,
        )
        .unwrap();
        let hooked = b.predict_noise(&x, 600, "p", None, Some(&hooks)).unwrap();
        assert_ne!(hooked, b.predict_noise(&x, 600, "p", None, None).unwrap());
        let caps = hooks.remove();

        // Recompute layer 0 from the raw weights with the blend done by hand.
        let f = b.token_features(&x, 600, "p", None).unwrap();
        let l = b.layer(0);
        let (q, k, v) = (f.dot(&l.w_q), f.dot(&l.w_k), f.dot(&l.w_v));
        let k_cross = &k * 0.5 + &keys[0] * 0.5;
        let d = b.config().head_dim;
        let mut heads = Vec::new();
        for h in 0..b.config().heads {
            let cols = ndarray::s![.., h * d..(h + 1) * d];
            let scores = q.slice(cols).dot(&k_cross.slice(cols).t()) / (d as f64).sqrt();
            assert_eq!(caps[0].raw_scores[h], scores);
            let mut p = scores.clone();
            for mut row in p.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|s| (s - m).exp());
                let z = row.sum();
                row /= z;
            }
            heads.push(p.dot(&v.slice(cols)));
        }
        let views: Vec<_> = heads.iter().map(|a| a.view()).collect();
        let attn = concatenate(Axis(1), &views).unwrap();
        let mid = &f + &attn.dot(&l.w_o);
        let expect = &mid + &mid.dot(&l.w_ff).mapv(|z| 0.5 * z.tanh());

        let (out, _) = b
            .layer_forward(0, &f, Some((&[&keys[0]], &vec![0; 64], 0.5)), 600)
            .unwrap();
        assert_eq!(out, expect);
        // Layer 1 was not substituted, so its scores use its own keys.
        let own = cross_branch_scores(&head_slice(&caps[1].q, 0, d), &head_slice(&caps[1].k, 0, d), d).unwrap();
        assert_eq!(caps[1].raw_scores[0], own);
    }

    #[test]
    fn rejects_bad_grid() {
        let b = backend();
        assert!(b.latent_shape((30, 32)).is_err());
        assert!(b
            .predict_noise(&Array3::zeros((30, 32, 4)), 1, "p", None, None)
            .is_err());
    }
}
