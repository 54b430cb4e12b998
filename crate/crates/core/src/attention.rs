//! Cross-branch attention and attention-driven control fusion.
//!
//! The surrounding branch queries a blend of its own keys and the subject branch's
//! keys. Its self-attention, aggregated and smoothed into a "neural sketch", is then
//! max-fused into its control image for the next denoising step.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::glyph::ControlSignal;
use crate::imageops;

pub const DEFAULT_ALPHA: f64 = 0.5;
/// Sketch smoothing radius at a 512 px canvas; scaled with the canvas.
pub const DEFAULT_SKETCH_SIGMA_512: f64 = 2.0;

/// q/k and pre-softmax scores of one attention layer during one branch pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub layer_id: usize,
    pub step_t: usize,
    /// tokens × (heads · d_dim)
    pub q: Array2<f64>,
    /// The layer's own keys (before any substitution), tokens × (heads · d_dim).
    pub k: Array2<f64>,
    /// One tokens × tokens matrix per head, already divided by √d_dim.
    pub raw_scores: Vec<Array2<f64>>,
    pub head_count: usize,
    pub d_dim: usize,
    /// Token grid (rows, cols); rows · cols = token count.
    pub grid: (usize, usize),
}

impl AttentionCapture {
    pub fn tokens(&self) -> usize {
        self.q.nrows()
    }
}

/// `q = F·W_q`, `k = F·W_k`.
pub fn compute_qk(features: &Array2<f64>, w_q: &Array2<f64>, w_k: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    for (name, w) in [("W_q", w_q), ("W_k", w_k)] {
        if w.nrows() != features.ncols() {
            return Err(Error::shape(format!(
                "{name} has {} rows, features have {} columns",
                w.nrows(),
                features.ncols()
            )));
        }
    }
    Ok((features.dot(w_q), features.dot(w_k)))
}

/// `k_cross = α·k_surr + (1 − α)·k_sub`.
pub fn mix_keys(k_surr: &Array2<f64>, k_sub: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if k_surr.dim() != k_sub.dim() {
        return Err(Error::shape(format!(
            "surrounding keys {:?} vs subject keys {:?}",
            k_surr.dim(),
            k_sub.dim()
        )));
    }
    Ok(k_surr * alpha + k_sub * (1.0 - alpha))
}

/// `A = q·kᵀ / √d_dim` (pre-softmax).
pub fn cross_branch_scores(q: &Array2<f64>, k: &Array2<f64>, d_dim: usize) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(format!(
            "query width {} vs key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if d_dim == 0 {
        return Err(Error::invalid("d_dim must be positive"));
    }
    Ok(q.dot(&k.t()) / (d_dim as f64).sqrt())
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Rescales to `[0, 1]`; a flat map carries no signal and becomes all zeros.
pub fn min_max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let min = map.fold(f64::INFINITY, |m, &v| m.min(v));
    let max = map.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - min) / range)
}

/// Attention received per token, averaged over heads, for one capture.
fn received_attention(capture: &AttentionCapture) -> Array2<f64> {
    let (gh, gw) = capture.grid;
    let mut acc = ndarray::Array1::<f64>::zeros(capture.tokens());
    for scores in &capture.raw_scores {
        acc += &softmax_rows(scores).sum_axis(Axis(0));
    }
    acc /= capture.raw_scores.len().max(1) as f64;
    acc.into_shape_with_order((gh, gw)).expect("grid matches token count")
}

/// Raw attention map: per capture, softmax rows, column sums, head mean; then the
/// mean over captures on the latent grid, min-max normalized.
pub fn aggregate_attention(captures: &[AttentionCapture], latent_hw: (usize, usize)) -> Result<Array2<f64>> {
    if captures.is_empty() {
        return Err(Error::invalid("no attention captures to aggregate"));
    }
    let mut sum = Array2::<f64>::zeros(latent_hw);
    for cap in captures {
        let (gh, gw) = cap.grid;
        if gh * gw != cap.tokens() || cap.raw_scores.iter().any(|s| s.dim() != (gh * gw, gh * gw)) {
            return Err(Error::shape(format!(
                "capture of layer {} does not match its {gh}x{gw} grid",
                cap.layer_id
            )));
        }
        let map = received_attention(cap);
        sum += &imageops::bilinear_resize(&map, latent_hw);
    }
    sum /= captures.len() as f64;
    Ok(min_max_normalize(&sum))
}

/// Smoothed attention skeleton in image space.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralSketch {
    pub map: Array2<f64>,
    pub sigma: f64,
    pub source_steps: Vec<usize>,
}

pub fn default_sketch_sigma(out_hw: (usize, usize)) -> f64 {
    DEFAULT_SKETCH_SIGMA_512 * out_hw.0.max(out_hw.1) as f64 / 512.0
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

// 1-D pass along `axis`; weights that fall off the edge are dropped and the rest
// renormalized, so constant fields stay constant.
fn blur_axis(src: &Array2<f64>, kernel: &[f64], axis: Axis) -> Array2<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = src.clone();
    for (mut dst, lane) in out.lanes_mut(axis).into_iter().zip(src.lanes(axis)) {
        let n = lane.len() as i64;
        for i in 0..n {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (j, &w) in kernel.iter().enumerate() {
                let p = i + j as i64 - radius;
                if (0..n).contains(&p) {
                    acc += w * lane[p as usize];
                    wsum += w;
                }
            }
            dst[i as usize] = acc / wsum;
        }
    }
    out
}

/// Separable Gaussian blur; `sigma <= 0` returns the input unchanged.
pub fn gaussian_blur(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return map.clone();
    }
    let k = gaussian_kernel(sigma);
    blur_axis(&blur_axis(map, &k, Axis(1)), &k, Axis(0))
}

/// Upsamples the raw map, smooths it and rescales so the peak is 1.
pub fn neural_sketch(raw_map: &Array2<f64>, sigma: f64, out_hw: (usize, usize)) -> NeuralSketch {
    let up = imageops::bilinear_resize(raw_map, out_hw);
    let blurred = gaussian_blur(&up, sigma);
    let peak = blurred.fold(0.0f64, |m, &v| m.max(v));
    let map = if peak > 0.0 {
        blurred.mapv(|v| (v / peak).clamp(0.0, 1.0))
    } else {
        Array2::zeros(out_hw)
    };
    NeuralSketch {
        map,
        sigma,
        source_steps: Vec::new(),
    }
}

/// `I_fused = max(S_neur, I_control)` per pixel; the control kind is kept.
pub fn fuse_control(sketch: &NeuralSketch, control: &ControlSignal) -> Result<ControlSignal> {
    imageops::check_same_dim(sketch.map.dim(), control.image.dim(), "sketch vs control")?;
    let mut image = control.image.clone();
    image.zip_mut_with(&sketch.map, |c, &s| *c = c.max(s));
    Ok(ControlSignal {
        kind: control.kind,
        image,
        conditioning_scale: control.conditioning_scale,
    })
}

/// For each token of a `grid`, the index of the concept whose mask lies nearest.
/// Ties go to the earlier concept.
pub fn nearest_concept(masks: &[Array2<f64>], grid: (usize, usize)) -> Vec<usize> {
    let (gh, gw) = grid;
    let claimed: Vec<Vec<(usize, usize)>> = masks
        .iter()
        .map(|m| {
            let small = imageops::area_resize(m, grid);
            small
                .indexed_iter()
                .filter(|(_, &v)| v > 0.0)
                .map(|(idx, _)| idx)
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(gh * gw);
    for r in 0..gh {
        for c in 0..gw {
            let mut best = (usize::MAX, 0usize);
            for (i, cells) in claimed.iter().enumerate() {
                let d = cells
                    .iter()
                    .map(|&(a, b)| a.abs_diff(r).pow(2) + b.abs_diff(c).pow(2))
                    .min()
                    .unwrap_or(usize::MAX);
                if d < best.0 {
                    best = (d, i);
                }
            }
            out.push(best.1);
        }
    }
    out
}

/// Pre-softmax scores when each query row blends in the keys of its own concept:
/// row `i` uses `α·k_surr + (1 − α)·k_sub[concept[i]]`.
pub fn cross_branch_scores_per_concept(
    q: &Array2<f64>,
    k_surr: &Array2<f64>,
    k_subs: &[&Array2<f64>],
    concept_of_token: &[usize],
    alpha: f64,
    d_dim: usize,
) -> Result<Array2<f64>> {
    if concept_of_token.len() != q.nrows() {
        return Err(Error::shape("token concept table does not match query rows"));
    }
    if let [only] = k_subs {
        return cross_branch_scores(q, &mix_keys(k_surr, only, alpha)?, d_dim);
    }
    let mut out = Array2::zeros((q.nrows(), k_surr.nrows()));
    for (ci, k_sub) in k_subs.iter().enumerate() {
        let rows: Vec<usize> = (0..q.nrows()).filter(|&i| concept_of_token[i] == ci).collect();
        if rows.is_empty() {
            continue;
        }
        let scores = cross_branch_scores(q, &mix_keys(k_surr, k_sub, alpha)?, d_dim)?;
        for i in rows {
            out.row_mut(i).assign(&scores.row(i));
        }
    }
    Ok(out)
}

/// Column block of head `h` in a tokens × (heads · d) matrix.
pub fn head_slice(m: &Array2<f64>, head: usize, d_dim: usize) -> Array2<f64> {
    m.slice(s![.., head * d_dim..(head + 1) * d_dim]).to_owned()
}
