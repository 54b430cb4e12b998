//! Noise-space composition of the branch predictions.

use ndarray::{Array2, Array3, Zip};

use crate::error::{Error, Result};

fn check_mask(eps: &Array3<f64>, mask: &Array2<f64>) -> Result<()> {
    let (h, w, _) = eps.dim();
    if mask.dim() != (h, w) {
        return Err(Error::shape(format!(
            "mask {:?} does not cover noise {:?}",
            mask.dim(),
            eps.dim()
        )));
    }
    Ok(())
}

fn check_same(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("noise {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `γ·M·ε_sub + (1 − M)·ε_surr`, with `M` broadcast over channels.
pub fn fuse_noise(
    eps_sub: &Array3<f64>,
    eps_surr: &Array3<f64>,
    mask: &Array2<f64>,
    gamma: f64,
) -> Result<Array3<f64>> {
    check_same(eps_sub, eps_surr)?;
    check_mask(eps_sub, mask)?;
    let mut out = Array3::zeros(eps_sub.dim());
    Zip::indexed(&mut out)
        .and(eps_sub)
        .and(eps_surr)
        .for_each(|(r, c, _), o, &s, &b| {
            let m = mask[[r, c]];
            *o = gamma * m * s + (1.0 - m) * b;
        });
    Ok(out)
}

/// `Σᵢ γⁱ·Mⁱ·ε_subⁱ + (1 − Σᵢ Mⁱ)·ε_surr`. Masks must be pairwise disjoint.
pub fn fuse_noise_multi(
    eps_subs: &[Array3<f64>],
    masks: &[Array2<f64>],
    gammas: &[f64],
    eps_surr: &Array3<f64>,
) -> Result<Array3<f64>> {
    if eps_subs.len() != masks.len() || masks.len() != gammas.len() {
        return Err(Error::shape(format!(
            "{} predictions, {} masks, {} gammas",
            eps_subs.len(),
            masks.len(),
            gammas.len()
        )));
    }
    for (eps, mask) in eps_subs.iter().zip(masks) {
        check_same(eps, eps_surr)?;
        check_mask(eps, mask)?;
    }
    check_disjoint(masks)?;

    let (h, w, ch) = eps_surr.dim();
    let mut out = Array3::zeros((h, w, ch));
    for r in 0..h {
        for c in 0..w {
            let mut mask_sum = 0.0;
            for m in masks {
                mask_sum += m[[r, c]];
            }
            for k in 0..ch {
                let mut acc = 0.0;
                for ((eps, m), &g) in eps_subs.iter().zip(masks).zip(gammas) {
                    acc += g * m[[r, c]] * eps[[r, c, k]];
                }
                out[[r, c, k]] = acc + (1.0 - mask_sum) * eps_surr[[r, c, k]];
            }
        }
    }
    Ok(out)
}

/// Errors if any two masks are both non-zero at the same cell.
pub fn check_disjoint(masks: &[Array2<f64>]) -> Result<()> {
    let Some(first) = masks.first() else {
        return Ok(());
    };
    let (h, w) = first.dim();
    for m in masks {
        if m.dim() != (h, w) {
            return Err(Error::shape("masks differ in shape"));
        }
    }
    for r in 0..h {
        for c in 0..w {
            let claimed = masks.iter().filter(|m| m[[r, c]] != 0.0).count();
            if claimed > 1 {
                return Err(Error::InvariantViolation(format!(
                    "{claimed} masks overlap at ({r}, {c})"
                )));
            }
        }
    }
    Ok(())
}

/// Guidance against the shared unconditional prediction: `ε_uc + s·(ε_overall − ε_uc)`.
pub fn harmonize(eps_uc: &Array3<f64>, eps_overall: &Array3<f64>, scale: f64) -> Result<Array3<f64>> {
    check_same(eps_uc, eps_overall)?;
    // s = 1 is plain conditional sampling; skip the round trip through ε_uc.
    if scale == 1.0 {
        return Ok(eps_overall.clone());
    }
    Ok(Zip::from(eps_uc)
        .and(eps_overall)
        .map_collect(|&uc, &o| uc + scale * (o - uc)))
}
