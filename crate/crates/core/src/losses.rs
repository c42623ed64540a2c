//! Training and editing objectives.
//!
//! All L1 terms are per-element means so weights stay comparable across
//! resolutions. Images and value maps are `(h*w) x channels`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernel::{nted_warp, region_texture_usage, CorrelationMatrix};
use crate::spatial::{avg_pool2, Grid};
use crate::tensor::{Real, Tensor};

/// Loss weights for training (`attn`, `rec`) and editing (`regu`, `r1`, `r2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub attn: f64,
    pub rec: f64,
    pub regu: f64,
    pub r1: f64,
    pub r2: f64,
    /// Always 0: the sprites have no faces to crop.
    pub face: f64,
    /// Always 0: there is no discriminator.
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            attn: 15.0,
            rec: 2.0,
            regu: 1.0,
            r1: 3e5,
            r2: 9e5,
            face: 0.0,
            adv: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.attn, self.rec, self.regu, self.r1, self.r2];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        if self.face != 0.0 || self.adv != 0.0 {
            return Err(Error::Config("face and adversarial terms are not available".into()));
        }
        Ok(())
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_mean<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("l1_mean", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x - *y).abs().as_f64()).sum();
    Ok(s / a.len() as f64)
}

/// Per-layer L1 between the downsampled target and the reference warped by
/// that layer's correlation pair, summed over layers.
pub fn attn_reconstruction<T: Real>(
    targets: &[Tensor<T>],
    references: &[Tensor<T>],
    correlations: &[(&CorrelationMatrix<T>, &CorrelationMatrix<T>)],
) -> Result<f64> {
    if targets.len() != references.len() || targets.len() != correlations.len() {
        return Err(Error::dims(
            "attn_reconstruction",
            &[targets.len(), references.len()],
            &[correlations.len()],
        ));
    }
    let mut total = 0.0;
    for ((t, r), (ce, cd)) in targets.iter().zip(references).zip(correlations) {
        let warped = nted_warp(r, ce, cd, Grid::new(1, cd.positions()))?;
        total += l1_mean(t, warped.values())?;
    }
    Ok(total)
}

/// Sum over `levels` pyramid levels of the mean absolute difference, halving
/// with 2x2 average pooling between levels.
pub fn pixel_pyramid_rec<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>, grid: Grid, levels: usize) -> Result<f64> {
    same_shape("pixel_pyramid_rec", pred, truth)?;
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let (mut p, mut t, mut g) = (pred.clone(), truth.clone(), grid);
    let mut total = l1_mean(&p, &t)?;
    for _ in 1..levels {
        p = avg_pool2(&p, g)?;
        t = avg_pool2(&t, g)?;
        g = g.halved();
        total += l1_mean(&p, &t)?;
    }
    Ok(total)
}

/// Textures whose average distribution weight over `mask` exceeds `sigma`.
pub fn select_textures<T: Real>(distribution: &CorrelationMatrix<T>, mask: &Tensor<T>, sigma: f64) -> Result<Vec<bool>> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Config(format!("selection threshold {sigma} outside (0, 1)")));
    }
    let usage = region_texture_usage(distribution, mask)?;
    Ok(usage.data().iter().map(|u| u.as_f64() > sigma).collect())
}

/// Default threshold: twice the uniform share, or one half when `k <= 2`
/// makes that unreachable.
pub fn default_sigma(k: usize) -> f64 {
    if k > 2 {
        2.0 / k as f64
    } else {
        0.5
    }
}

/// `k x 1` 0/1 column from a selection.
pub fn indicator<T: Real>(selection: &[bool]) -> Tensor<T> {
    let data = selection.iter().map(|s| if *s { T::one() } else { T::zero() }).collect();
    Tensor::from_vec(&[selection.len(), 1], data).expect("indicator")
}

/// Penalizes textures generating the region that are not taken from the
/// second reference, and textures generating the rest that are.
pub fn regu_loss<T: Real>(selections: &[Vec<bool>], complements: &[Vec<bool>], masks: &[Tensor<T>]) -> Result<f64> {
    if selections.len() != complements.len() || selections.len() != masks.len() {
        return Err(Error::dims("regu_loss", &[selections.len(), complements.len()], &[masks.len()]));
    }
    let mut total = 0.0;
    for ((sel, comp), m) in selections.iter().zip(complements).zip(masks) {
        if sel.len() != m.len() || comp.len() != m.len() {
            return Err(Error::dims("regu_loss", &[sel.len(), comp.len()], m.shape()));
        }
        for ((s, c), v) in sel.iter().zip(comp).zip(m.data()) {
            let v = v.as_f64();
            if *s {
                total += 1.0 - v;
            }
            if *c {
                total += v;
            }
        }
    }
    Ok(total)
}

fn masked<T: Real>(image: &Tensor<T>, mask: &Tensor<T>, keep_inside: bool) -> Result<Tensor<T>> {
    let weights = if keep_inside {
        mask.clone()
    } else {
        mask.map(|v| T::one() - v)
    };
    image.scale_rows(&weights)
}

/// `(L_r1, L_r2)`: pyramid reconstruction of the edited image against the
/// first transfer outside `mask` and against the second inside it.
pub fn masked_rec_losses<T: Real>(
    edited: &Tensor<T>,
    transformed_r1: &Tensor<T>,
    transformed_r2: &Tensor<T>,
    mask: &Tensor<T>,
    grid: Grid,
    levels: usize,
) -> Result<(f64, f64)> {
    same_shape("masked_rec_losses", edited, transformed_r1)?;
    same_shape("masked_rec_losses", edited, transformed_r2)?;
    if mask.shape() != [edited.rows(), 1] {
        return Err(Error::dims("masked_rec_losses", mask.shape(), &[edited.rows(), 1]));
    }
    let r1 = pixel_pyramid_rec(
        &masked(edited, mask, false)?,
        &masked(transformed_r1, mask, false)?,
        grid,
        levels,
    )?;
    let r2 = pixel_pyramid_rec(
        &masked(edited, mask, true)?,
        &masked(transformed_r2, mask, true)?,
        grid,
        levels,
    )?;
    Ok((r1, r2))
}

/// Graph versions of the losses above.
pub mod diff {
    use super::*;

    pub fn l1_mean<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
        let d = g.sub(a, b)?;
        let d = g.abs(d)?;
        g.mean(d)
    }

    /// One layer of the attention reconstruction term.
    pub fn attn_layer<T: Real>(g: &mut Graph<T>, target: Var, reference: Var, extraction: Var, distribution: Var) -> Result<Var> {
        let warped = crate::kernel::diff::warp(g, reference, extraction, distribution)?;
        l1_mean(g, target, warped)
    }

    pub fn pixel_pyramid_rec<T: Real>(g: &mut Graph<T>, pred: Var, truth: Var, grid: Grid, levels: usize) -> Result<Var> {
        if levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        let (mut p, mut t, mut gr) = (pred, truth, grid);
        let mut terms = vec![l1_mean(g, p, t)?];
        for _ in 1..levels {
            p = g.avg_pool2(p, gr)?;
            t = g.avg_pool2(t, gr)?;
            gr = gr.halved();
            terms.push(l1_mean(g, p, t)?);
        }
        g.add_all(&terms)
    }

    /// Regularizer for one layer; linear in `m`.
    pub fn regu_layer<T: Real>(g: &mut Graph<T>, selection: &[bool], complement: &[bool], m: Var) -> Result<Var> {
        let k = g.value(m).len();
        if selection.len() != k || complement.len() != k {
            return Err(Error::dims("regu_layer", &[selection.len(), complement.len()], &[k]));
        }
        let slope: Tensor<T> = indicator::<T>(complement).sub(&indicator(selection))?;
        let offset = selection.iter().filter(|s| **s).count() as f64;
        let slope = g.constant(slope);
        let weighted = g.mul(slope, m)?;
        let linear = g.sum(weighted)?;
        let offset = g.constant(Tensor::scalar(T::from_f64(offset)));
        g.add(linear, offset)
    }

    /// `(L_r1, L_r2)` with constant transfers and mask.
    pub fn masked_rec_losses<T: Real>(
        g: &mut Graph<T>,
        edited: Var,
        transformed_r1: &Tensor<T>,
        transformed_r2: &Tensor<T>,
        mask: &Tensor<T>,
        grid: Grid,
        levels: usize,
    ) -> Result<(Var, Var)> {
        let outside = g.constant(mask.map(|v| T::one() - v));
        let inside = g.constant(mask.clone());
        let t1 = g.constant(masked(transformed_r1, mask, false)?);
        let t2 = g.constant(masked(transformed_r2, mask, true)?);
        let e1 = g.scale_rows(edited, outside)?;
        let e2 = g.scale_rows(edited, inside)?;
        let r1 = pixel_pyramid_rec(g, e1, t1, grid, levels)?;
        let r2 = pixel_pyramid_rec(g, e2, t2, grid, levels)?;
        Ok((r1, r2))
    }
}
