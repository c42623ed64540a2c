//! Appearance editing by interpolating two references' neural textures.
//!
//! Per-layer coefficients `m` blend the texture banks of two references
//! before distribution. They are optimized with the model frozen so that a
//! chosen region of the render comes from the second reference and the rest
//! from the first.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Var};
use crate::error::{Error, Result};
use crate::kernel::CorrelationMatrix;
use crate::losses::{default_sigma, diff as ldiff, masked_rec_losses, select_textures, LossWeights};
use crate::renderer::Renderer;
use crate::spatial::{downsample_mask, Grid};
use crate::synth::Part;
use crate::tensor::{Axis, Real, Tensor};

/// Per-layer interpolation logits; the coefficients are their sigmoids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskCoefficients {
    pub logits: Vec<Vec<f64>>,
}

impl MaskCoefficients {
    /// Logits at 0, i.e. every coefficient at one half.
    pub fn neutral(semantics: &[usize]) -> Self {
        MaskCoefficients {
            logits: semantics.iter().map(|k| vec![0.0; *k]).collect(),
        }
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.logits
            .iter()
            .map(|l| l.iter().map(|z| crate::tensor::sigmoid(*z)).collect())
            .collect()
    }

    /// Coefficients rounded to 0/1, for inspection only.
    pub fn rounded(&self) -> Vec<Vec<u8>> {
        self.values()
            .iter()
            .map(|l| l.iter().map(|v| u8::from(*v >= 0.5)).collect())
            .collect()
    }
}

/// `(1 - m) * F_e1 + m * F_e2` with `m` broadcast over channels. Endpoints
/// reproduce the inputs bit for bit.
pub fn fuse_textures<T: Real>(first: &Tensor<T>, second: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    if first.shape() != second.shape() {
        return Err(Error::dims("fuse_textures", first.shape(), second.shape()));
    }
    if m.shape() != [first.rows(), 1] {
        return Err(Error::dims("fuse_textures", m.shape(), &[first.rows(), 1]));
    }
    let keep = m.map(|v| T::one() - v);
    first.scale_rows(&keep)?.add(&second.scale_rows(m)?)
}

/// Graph form of [`fuse_textures`] with constant banks.
pub fn fuse_textures_var<T: Real>(g: &mut Graph<T>, first: &Tensor<T>, second: &Tensor<T>, m: Var) -> Result<Var> {
    let k = first.rows();
    let a = g.constant(first.clone());
    let b = g.constant(second.clone());
    let ones = g.constant(Tensor::ones(&[k, 1]));
    let keep = g.sub(ones, m)?;
    let a = g.scale_rows(a, keep)?;
    let b = g.scale_rows(b, m)?;
    g.add(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub reference_seeds: [u64; 2],
    pub target_seed: u64,
    pub region: Part,
    pub weights: LossWeights,
    /// Selection threshold; `None` uses `2 / k` per layer.
    pub sigma: Option<f64>,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Keep the selections from the first iteration.
    pub freeze_selections: bool,
    /// Skip optimization and render with every coefficient at this value.
    pub force_mask: Option<f64>,
    pub pyramid_levels: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            reference_seeds: [0, 1],
            target_seed: 2,
            region: Part::Torso,
            weights: LossWeights::default(),
            sigma: None,
            iterations: 200,
            learning_rate: 0.05,
            freeze_selections: false,
            force_mask: None,
            pyramid_levels: 3,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Config(format!("sigma {s} outside (0, 1)")));
            }
        }
        if let Some(m) = self.force_mask {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("forced mask {m} outside [0, 1]")));
            }
        }
        if self.pyramid_levels == 0 || self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::Config("pyramid levels and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Images for one edit, all at the renderer resolution.
#[derive(Debug, Clone)]
pub struct EditInputs<T: Real = f64> {
    pub reference1: Tensor<T>,
    pub reference2: Tensor<T>,
    /// Heatmaps of the target pose.
    pub heatmaps: Tensor<T>,
    /// `(h*w) x 1` region mask of the edited render.
    pub region: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub regu: f64,
    pub r1: f64,
    pub r2: f64,
    /// Running minimum of `loss`.
    pub best: f64,
    pub selected: usize,
    pub complement_selected: usize,
}

/// Per-layer selections `(region, complement)`.
pub type Selections = Vec<(Vec<bool>, Vec<bool>)>;

#[derive(Debug, Clone)]
pub struct EditOutcome<T: Real = f64> {
    pub masks: MaskCoefficients,
    pub edited: Tensor<T>,
    pub transfer1: Tensor<T>,
    pub transfer2: Tensor<T>,
    pub trace: Vec<TraceRow>,
    pub selections: Selections,
    /// `(L_r1, L_r2)` of the returned edit and of plain transfer from the
    /// first reference.
    pub losses: (f64, f64),
    pub transfer1_losses: (f64, f64),
}

struct Prepared<T: Real> {
    skeleton: Tensor<T>,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    transfer1: Tensor<T>,
    transfer2: Tensor<T>,
    region_by_layer: Vec<Tensor<T>>,
}

fn prepare<T: Real>(renderer: &Renderer, params: &[Tensor<T>], inputs: &EditInputs<T>) -> Result<Prepared<T>> {
    let cfg = renderer.config();
    let mut g = Graph::new();
    let p = renderer.bind(&mut g, params, false)?;
    let h = g.constant(inputs.heatmaps.clone());
    let skeleton = renderer.encode_skeleton(&mut g, &p, h)?;
    let full = cfg.grid();
    if inputs.region.shape() != [full.positions(), 1] {
        return Err(Error::dims("edit region", inputs.region.shape(), &[full.positions(), 1]));
    }
    Ok(Prepared {
        skeleton: g.value(skeleton).clone(),
        first: renderer.extract_textures(params, &inputs.reference1)?,
        second: renderer.extract_textures(params, &inputs.reference2)?,
        transfer1: renderer.render(params, &inputs.heatmaps, &inputs.reference1)?.image,
        transfer2: renderer.render(params, &inputs.heatmaps, &inputs.reference2)?.image,
        region_by_layer: cfg
            .scales
            .iter()
            .map(|s| downsample_mask(&inputs.region, full, Grid::square(*s)))
            .collect::<Result<_>>()?,
    })
}

fn select_or_empty<T: Real>(cd: &CorrelationMatrix<T>, mask: &Tensor<T>, sigma: f64) -> Result<Vec<bool>> {
    match select_textures(cd, mask, sigma) {
        Err(Error::EmptyMask(_)) => Ok(vec![false; cd.k()]),
        other => other,
    }
}

struct Pass<T: Real> {
    graph: Graph<T>,
    logits: Vec<Var>,
    image: Var,
    distributions: Vec<CorrelationMatrix<T>>,
}

fn render_fused<T: Real>(
    renderer: &Renderer,
    params: &[Tensor<T>],
    prep: &Prepared<T>,
    logits: &[Tensor<T>],
) -> Result<Pass<T>> {
    let mut g = Graph::new();
    let p = renderer.bind(&mut g, params, false)?;
    let skeleton = g.constant(prep.skeleton.clone());
    let mut z = Vec::with_capacity(logits.len());
    let mut textures = Vec::with_capacity(logits.len());
    for ((l, a), b) in logits.iter().zip(&prep.first).zip(&prep.second) {
        let v = g.param(l.clone());
        let m = g.sigmoid(v)?;
        textures.push(fuse_textures_var(&mut g, a, b, m)?);
        z.push(v);
    }
    let (image, dists) = renderer.decode(&mut g, &p, skeleton, &textures)?;
    let distributions = dists
        .iter()
        .map(|d| CorrelationMatrix::from_normalized(g.value(*d).clone(), Axis::Columns, 1e-4))
        .collect::<Result<_>>()?;
    Ok(Pass {
        graph: g,
        logits: z,
        image,
        distributions,
    })
}

/// Render with every coefficient fixed at `m`; `m = 0` is plain transfer
/// from the first reference.
pub fn render_with_mask<T: Real>(renderer: &Renderer, params: &[Tensor<T>], inputs: &EditInputs<T>, m: f64) -> Result<Tensor<T>> {
    let prep = prepare(renderer, params, inputs)?;
    let mut g = Graph::new();
    let p = renderer.bind(&mut g, params, false)?;
    let skeleton = g.constant(prep.skeleton.clone());
    let mut textures = Vec::new();
    for (a, b) in prep.first.iter().zip(&prep.second) {
        let fused = fuse_textures(a, b, &Tensor::full(&[a.rows(), 1], T::from_f64(m)))?;
        textures.push(g.constant(fused));
    }
    let (image, _) = renderer.decode(&mut g, &p, skeleton, &textures)?;
    Ok(g.value(image).clone())
}

/// Optimizes the coefficients with the model frozen.
pub fn optimize_masks<T: Real>(
    renderer: &Renderer,
    params: &[Tensor<T>],
    inputs: &EditInputs<T>,
    cfg: &EditConfig,
) -> Result<EditOutcome<T>> {
    cfg.validate()?;
    let rc = renderer.config();
    let prep = prepare(renderer, params, inputs)?;
    let grid = rc.grid();
    let losses_of = |img: &Tensor<T>| masked_rec_losses(img, &prep.transfer1, &prep.transfer2, &inputs.region, grid, cfg.pyramid_levels);
    let transfer1_losses = losses_of(&prep.transfer1)?;

    let init = match cfg.force_mask {
        Some(m) => {
            let z = if m <= 0.0 {
                f64::NEG_INFINITY
            } else if m >= 1.0 {
                f64::INFINITY
            } else {
                (m / (1.0 - m)).ln()
            };
            rc.semantics.iter().map(|k| vec![z; *k]).collect()
        }
        None => MaskCoefficients::neutral(&rc.semantics).logits,
    };
    if let Some(m) = cfg.force_mask {
        let edited = render_with_mask(renderer, params, inputs, m)?;
        return Ok(EditOutcome {
            losses: losses_of(&edited)?,
            masks: MaskCoefficients { logits: init },
            edited,
            transfer1: prep.transfer1,
            transfer2: prep.transfer2,
            trace: Vec::new(),
            selections: Vec::new(),
            transfer1_losses,
        });
    }

    let mut logits: Vec<Tensor<T>> = init
        .iter()
        .map(|l| Tensor::from_vec(&[l.len(), 1], l.iter().map(|v| T::from_f64(*v)).collect()))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(cfg.learning_rate).with_betas(0.0, 0.99);
    let complements: Vec<Tensor<T>> = prep.region_by_layer.iter().map(|m| m.map(|v| T::one() - v)).collect();
    let mut frozen: Option<Selections> = None;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;
    let mut selections: Selections = Vec::new();

    for it in 0..cfg.iterations {
        let mut pass = render_fused(renderer, params, &prep, &logits)?;
        selections = match &frozen {
            Some(s) => s.clone(),
            None => pass
                .distributions
                .iter()
                .enumerate()
                .map(|(l, cd)| {
                    let sigma = cfg.sigma.unwrap_or_else(|| default_sigma(rc.semantics[l]));
                    Ok((
                        select_or_empty(cd, &prep.region_by_layer[l], sigma)?,
                        select_or_empty(cd, &complements[l], sigma)?,
                    ))
                })
                .collect::<Result<_>>()?,
        };
        if cfg.freeze_selections && frozen.is_none() {
            frozen = Some(selections.clone());
        }
        let g = &mut pass.graph;
        let mut regu_terms = Vec::new();
        for ((sel, comp), z) in selections.iter().zip(&pass.logits) {
            let m = g.sigmoid(*z)?;
            regu_terms.push(ldiff::regu_layer(g, sel, comp, m)?);
        }
        let regu = g.add_all(&regu_terms)?;
        let (r1, r2) = ldiff::masked_rec_losses(g, pass.image, &prep.transfer1, &prep.transfer2, &inputs.region, grid, cfg.pyramid_levels)?;
        let terms = [
            g.scale(regu, cfg.weights.regu)?,
            g.scale(r1, cfg.weights.r1)?,
            g.scale(r2, cfg.weights.r2)?,
        ];
        let total = g.add_all(&terms)?;
        let loss = g.value(total).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: it,
                detail: format!("edit loss {loss}"),
            });
        }
        let running = trace.last().map_or(loss, |r: &TraceRow| r.best.min(loss));
        trace.push(TraceRow {
            iteration: it,
            loss,
            regu: g.value(regu).item().as_f64(),
            r1: g.value(r1).item().as_f64(),
            r2: g.value(r2).item().as_f64(),
            best: running,
            selected: selections.iter().map(|(s, _)| s.iter().filter(|v| **v).count()).sum(),
            complement_selected: selections.iter().map(|(_, c)| c.iter().filter(|v| **v).count()).sum(),
        });
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, logits.clone()));
        }
        let mut grads = g.backward(total)?;
        let grads: Vec<Tensor<T>> = pass
            .logits
            .iter()
            .zip(&logits)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        adam.step(&mut logits, &grads)?;
    }

    if let (Some(first), Some(last), Some((_, best_logits))) = (trace.first(), trace.last(), best.as_ref()) {
        if last.loss >= first.loss && trace.len() > 1 {
            warn!("edit loss did not decrease ({} -> {}); returning the best iterate", first.loss, last.loss);
            logits = best_logits.clone();
        }
    }
    let pass = render_fused(renderer, params, &prep, &logits)?;
    let edited = pass.graph.value(pass.image).clone();
    Ok(EditOutcome {
        losses: losses_of(&edited)?,
        masks: MaskCoefficients {
            logits: logits.iter().map(|l| l.data().iter().map(|v| v.as_f64()).collect()).collect(),
        },
        edited,
        transfer1: prep.transfer1,
        transfer2: prep.transfer2,
        trace,
        selections,
        transfer1_losses,
    })
}

/// Largest gap between the coefficients and the selection indicator over
/// entries selected by exactly one of the region and its complement.
pub fn indicator_gap(masks: &MaskCoefficients, selections: &Selections) -> f64 {
    let mut gap: f64 = 0.0;
    for (vals, (sel, comp)) in masks.values().iter().zip(selections) {
        for ((v, s), c) in vals.iter().zip(sel).zip(comp) {
            match (s, c) {
                (true, false) => gap = gap.max(1.0 - v),
                (false, true) => gap = gap.max(*v),
                _ => {}
            }
        }
    }
    gap
}

/// Mean color of `image` over a `(h*w) x 1` mask.
pub fn masked_mean_color<T: Real>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<[f64; 3]> {
    if image.cols() != 3 || mask.shape() != [image.rows(), 1] {
        return Err(Error::dims("masked_mean_color", image.shape(), mask.shape()));
    }
    let area: f64 = mask.data().iter().map(|v| v.as_f64()).sum();
    if area <= 0.0 {
        return Err(Error::EmptyMask("masked_mean_color"));
    }
    let mut acc = [0.0; 3];
    for (i, w) in mask.data().iter().enumerate() {
        for (c, a) in acc.iter_mut().enumerate() {
            *a += image.get(i, c).as_f64() * w.as_f64();
        }
    }
    Ok(acc.map(|v| v / area))
}
