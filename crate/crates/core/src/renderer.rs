//! Desk-scale pose-transfer generator.
//!
//! A skeleton encoder turns target keypoint heatmaps into a coarse feature
//! map, a reference encoder keeps the features of every block, and a decoder
//! runs coarse to fine. At each scale the decoder extracts neural textures
//! from the reference features, distributes them over its own features as a
//! residual, and emits an RGB image that is upsampled and summed with the
//! previous scales. Convolutions are 3x3 unfold-plus-matmul products.

use std::collections::BTreeMap;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Adam, Graph, Var};
use crate::error::{Error, Result};
use crate::kernel::{diff as kdiff, CorrelationMatrix};
use crate::losses::{diff as ldiff, LossWeights};
use crate::spatial::{resize_down, Grid};
use crate::synth::{Pair, KEYPOINTS};
use crate::tensor::{Axis, Real, Tensor};

const LEAKY_SLOPE: f64 = 0.2;

/// Architecture description. Scales run coarse to fine and double each step;
/// the finest scale is half the input resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RendererConfig {
    pub resolution: usize,
    pub scales: Vec<usize>,
    pub semantics: Vec<usize>,
    pub channels: Vec<usize>,
    pub keypoints: usize,
    /// Channels of the full-resolution output block.
    pub output_channels: usize,
    /// Multiplier on the semantic filters, so attention logits can sharpen
    /// at the shared learning rate.
    pub filter_gain: f64,
    /// Drops every NTED residual, leaving a skeleton-only decoder.
    pub ablate_nted: bool,
}

impl Default for RendererConfig {
    fn default() -> Self {
        RendererConfig {
            resolution: 64,
            scales: vec![8, 16, 32],
            semantics: vec![4, 8, 8],
            channels: vec![64, 64, 32],
            keypoints: KEYPOINTS,
            output_channels: 8,
            filter_gain: 8.0,
            ablate_nted: false,
        }
    }
}

impl RendererConfig {
    /// Two-scale configuration small enough for finite differences.
    pub fn micro() -> Self {
        RendererConfig {
            resolution: 8,
            scales: vec![2, 4],
            semantics: vec![2, 3],
            channels: vec![3, 2],
            keypoints: 2,
            output_channels: 2,
            filter_gain: 1.0,
            ablate_nted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scales.len();
        if n == 0 || self.semantics.len() != n || self.channels.len() != n {
            return Err(Error::Config(format!(
                "scales, semantics and channels must have equal nonzero length ({}, {}, {})",
                n,
                self.semantics.len(),
                self.channels.len()
            )));
        }
        if self.scales.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!("scales must double: {:?}", self.scales)));
        }
        if self.scales[n - 1] * 2 != self.resolution {
            return Err(Error::Config(format!(
                "finest scale {} must be half the resolution {}",
                self.scales[n - 1],
                self.resolution
            )));
        }
        if !(self.filter_gain.is_finite() && self.filter_gain > 0.0) {
            return Err(Error::Config(format!("filter gain {} must be positive", self.filter_gain)));
        }
        if self.semantics.iter().chain(&self.channels).any(|v| *v == 0) || self.keypoints == 0 || self.output_channels == 0 {
            return Err(Error::Config("widths and counts must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn grid(&self) -> Grid {
        Grid::square(self.resolution)
    }

    pub fn layers(&self) -> usize {
        self.scales.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct LayerIdx {
    up: Option<ConvIdx>,
    we: usize,
    wd: usize,
    f: ConvIdx,
    rgb: ConvIdx,
}

/// Parameter order and shapes for one configuration.
#[derive(Debug, Clone)]
pub struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    skeleton: Vec<ConvIdx>,
    reference: Vec<ConvIdx>,
    layers: Vec<LayerIdx>,
    output: ConvIdx,
    output_rgb: ConvIdx,
}

impl Layout {
    fn new(cfg: &RendererConfig) -> Self {
        let mut layout = Layout {
            names: Vec::new(),
            shapes: Vec::new(),
            skeleton: Vec::new(),
            reference: Vec::new(),
            layers: Vec::new(),
            output: ConvIdx { w: 0, b: 0 },
            output_rgb: ConvIdx { w: 0, b: 0 },
        };
        let n = cfg.layers();
        // encoder blocks run fine to coarse
        let widths: Vec<usize> = cfg.channels.iter().rev().copied().collect();
        for (name, input) in [("skeleton", cfg.keypoints), ("reference", 3)] {
            let mut cin = input;
            let mut blocks = Vec::new();
            for (i, cout) in widths.iter().enumerate() {
                blocks.push(layout.conv(&format!("{name}.{i}"), 9 * cin, *cout));
                cin = *cout;
            }
            if name == "skeleton" {
                layout.skeleton = blocks;
            } else {
                layout.reference = blocks;
            }
        }
        for l in 0..n {
            let c = cfg.channels[l];
            let k = cfg.semantics[l];
            let up = (l > 0).then(|| layout.conv(&format!("decoder.{l}.up"), 9 * cfg.channels[l - 1], c));
            let we = layout.push(&format!("decoder.{l}.extraction"), &[k, c]);
            let wd = layout.push(&format!("decoder.{l}.distribution"), &[k, c]);
            let f = layout.conv(&format!("decoder.{l}.value"), c, c);
            let rgb = layout.conv(&format!("decoder.{l}.rgb"), c, 3);
            layout.layers.push(LayerIdx { up, we, wd, f, rgb });
        }
        layout.output = layout.conv("output.conv", 9 * cfg.channels[n - 1], cfg.output_channels);
        layout.output_rgb = layout.conv("output.rgb", cfg.output_channels, 3);
        layout
    }

    fn push(&mut self, name: &str, shape: &[usize]) -> usize {
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.names.len() - 1
    }

    fn conv(&mut self, name: &str, fan_in: usize, cout: usize) -> ConvIdx {
        ConvIdx {
            w: self.push(&format!("{name}.weight"), &[fan_in, cout]),
            b: self.push(&format!("{name}.bias"), &[1, cout]),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Per-layer graph handles from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub grid: Grid,
    pub textures: Var,
    pub extraction: Var,
    pub distribution: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub image: Var,
    pub layers: Vec<LayerVars>,
}

/// Result of an inference pass.
#[derive(Debug, Clone)]
pub struct Rendered<T: Real = f64> {
    pub image: Tensor<T>,
    pub extractions: Vec<CorrelationMatrix<T>>,
    pub distributions: Vec<CorrelationMatrix<T>>,
    pub textures: Vec<Tensor<T>>,
}

/// Architecture with its parameter layout; holds no weights.
#[derive(Debug, Clone)]
pub struct Renderer {
    config: RendererConfig,
    layout: Layout,
}

fn conv<T: Real>(g: &mut Graph<T>, x: Var, grid: Grid, stride: usize, w: Var, b: Var) -> Result<Var> {
    let cols = g.unfold3x3(x, grid, stride)?;
    let y = g.matmul(cols, w)?;
    g.add_row(y, b)
}

fn dense<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

impl Renderer {
    pub fn new(config: RendererConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Renderer { config, layout })
    }

    pub fn config(&self) -> &RendererConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// He-style normal init for convolutions, `1/sqrt(c)` for the semantic
    /// filters and value maps, small RGB heads, zero biases.
    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut std = vec![0.0; self.layout.len()];
        let conv_std = |idx: ConvIdx, shapes: &[Vec<usize>], gain: f64, std: &mut [f64]| {
            std[idx.w] = gain / (shapes[idx.w][0] as f64).sqrt();
        };
        let shapes = &self.layout.shapes;
        let he = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        for c in self.layout.skeleton.iter().chain(&self.layout.reference) {
            conv_std(*c, shapes, he, &mut std);
        }
        for layer in &self.layout.layers {
            if let Some(up) = layer.up {
                conv_std(up, shapes, he, &mut std);
            }
            std[layer.we] = 1.0 / (shapes[layer.we][1] as f64).sqrt();
            std[layer.wd] = 1.0 / (shapes[layer.wd][1] as f64).sqrt();
            conv_std(layer.f, shapes, 1.0, &mut std);
            conv_std(layer.rgb, shapes, 0.1, &mut std);
        }
        conv_std(self.layout.output, shapes, he, &mut std);
        conv_std(self.layout.output_rgb, shapes, 0.1, &mut std);
        shapes
            .iter()
            .zip(&std)
            .map(|(shape, s)| {
                Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::from_f64(z * s)
                })
                .expect("finite init")
            })
            .collect()
    }

    /// Adds parameters to `g`, as trainable leaves or as constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, params: &[Tensor<T>], trainable: bool) -> Result<Vec<Var>> {
        self.check_params(params)?;
        Ok(params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect())
    }

    pub fn check_params<T: Real>(&self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::dims("params", &[params.len()], &[self.layout.len()]));
        }
        for (p, shape) in params.iter().zip(&self.layout.shapes) {
            if p.shape() != shape.as_slice() {
                return Err(Error::dims("params", p.shape(), shape));
            }
        }
        Ok(())
    }

    fn check_input<T: Real>(&self, op: &'static str, x: &Tensor<T>, channels: usize) -> Result<()> {
        let n = self.config.grid().positions();
        if x.shape() != [n, channels] {
            return Err(Error::dims(op, x.shape(), &[n, channels]));
        }
        Ok(())
    }

    fn encode<T: Real>(&self, g: &mut Graph<T>, p: &[Var], blocks: &[ConvIdx], input: Var) -> Result<Vec<Var>> {
        let mut grid = self.config.grid();
        let mut x = input;
        let mut out = Vec::with_capacity(blocks.len());
        for c in blocks {
            x = conv(g, x, grid, 2, p[c.w], p[c.b])?;
            x = g.leaky_relu(x, LEAKY_SLOPE)?;
            grid = grid.conv_out(2);
            out.push(x);
        }
        // stored coarse to fine, matching the decoder
        out.reverse();
        Ok(out)
    }

    /// Coarsest skeleton feature map from `(res^2) x K` heatmaps.
    pub fn encode_skeleton<T: Real>(&self, g: &mut Graph<T>, p: &[Var], heatmaps: Var) -> Result<Var> {
        self.check_input("encode_skeleton", g.value(heatmaps), self.config.keypoints)?;
        Ok(self.encode(g, p, &self.layout.skeleton, heatmaps)?[0])
    }

    /// Reference features at every decoder scale, coarse to fine.
    pub fn encode_reference<T: Real>(&self, g: &mut Graph<T>, p: &[Var], image: Var) -> Result<Vec<Var>> {
        self.check_input("encode_reference", g.value(image), 3)?;
        self.encode(g, p, &self.layout.reference, image)
    }

    fn filters<T: Real>(&self, g: &mut Graph<T>, w: Var) -> Result<Var> {
        if self.config.filter_gain == 1.0 {
            Ok(w)
        } else {
            g.scale(w, self.config.filter_gain)
        }
    }

    /// Neural textures and extraction correlations for every layer.
    pub fn extract<T: Real>(&self, g: &mut Graph<T>, p: &[Var], features: &[Var]) -> Result<Vec<(Var, Var)>> {
        self.layout
            .layers
            .iter()
            .zip(features)
            .map(|(layer, f)| {
                let proj = kdiff::ProjectionVars {
                    weight: p[layer.f.w],
                    bias: Some(p[layer.f.b]),
                };
                let we = self.filters(g, p[layer.we])?;
                kdiff::extract(g, *f, we, proj)
            })
            .collect()
    }

    /// Decoder from skeleton features and per-layer textures. Returns the
    /// image and the distribution correlations.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p: &[Var], skeleton: Var, textures: &[Var]) -> Result<(Var, Vec<Var>)> {
        if textures.len() != self.config.layers() {
            return Err(Error::dims("decode", &[textures.len()], &[self.config.layers()]));
        }
        let mut grid = Grid::square(self.config.scales[0]);
        let mut x = skeleton;
        let mut image: Option<Var> = None;
        let mut dists = Vec::with_capacity(textures.len());
        for (l, (layer, tex)) in self.layout.layers.iter().zip(textures).enumerate() {
            if let Some(up) = layer.up {
                x = g.upsample2(x, grid)?;
                grid = grid.doubled();
                x = conv(g, x, grid, 1, p[up.w], p[up.b])?;
                x = g.leaky_relu(x, LEAKY_SLOPE)?;
            }
            let wd = self.filters(g, p[layer.wd])?;
            let (out, cd) = kdiff::distribute(g, x, wd, *tex)?;
            dists.push(cd);
            if !self.config.ablate_nted {
                x = g.add(x, out)?;
            }
            let rgb = dense(g, x, p[layer.rgb.w], p[layer.rgb.b])?;
            image = Some(match image {
                None => rgb,
                Some(prev) => {
                    let prev = g.upsample2(prev, grid.halved())?;
                    g.add(prev, rgb)?
                }
            });
            debug_assert_eq!(grid.h, self.config.scales[l]);
        }
        x = g.upsample2(x, grid)?;
        let prev = g.upsample2(image.expect("at least one layer"), grid)?;
        grid = grid.doubled();
        let o = self.layout.output;
        x = conv(g, x, grid, 1, p[o.w], p[o.b])?;
        x = g.leaky_relu(x, LEAKY_SLOPE)?;
        let rgb = dense(g, x, p[self.layout.output_rgb.w], p[self.layout.output_rgb.b])?;
        Ok((g.add(prev, rgb)?, dists))
    }

    /// Full pass from constant inputs.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], heatmaps: Var, reference: Var) -> Result<Forward> {
        let skeleton = self.encode_skeleton(g, p, heatmaps)?;
        let features = self.encode_reference(g, p, reference)?;
        let extracted = self.extract(g, p, &features)?;
        let textures: Vec<Var> = extracted.iter().map(|(t, _)| *t).collect();
        let (image, dists) = self.decode(g, p, skeleton, &textures)?;
        let layers = extracted
            .iter()
            .zip(dists)
            .zip(&self.config.scales)
            .map(|(((t, ce), cd), s)| LayerVars {
                grid: Grid::square(*s),
                textures: *t,
                extraction: *ce,
                distribution: cd,
            })
            .collect();
        Ok(Forward { image, layers })
    }

    /// Inference with fixed parameters.
    pub fn render<T: Real>(&self, params: &[Tensor<T>], heatmaps: &Tensor<T>, reference: &Tensor<T>) -> Result<Rendered<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params, false)?;
        let h = g.constant(heatmaps.clone());
        let r = g.constant(reference.clone());
        let fwd = self.forward(&mut g, &p, h, r)?;
        let mut out = Rendered {
            image: g.value(fwd.image).clone(),
            extractions: Vec::new(),
            distributions: Vec::new(),
            textures: Vec::new(),
        };
        for layer in &fwd.layers {
            out.extractions
                .push(CorrelationMatrix::from_normalized(g.value(layer.extraction).clone(), Axis::Rows, 1e-4)?);
            out.distributions
                .push(CorrelationMatrix::from_normalized(g.value(layer.distribution).clone(), Axis::Columns, 1e-4)?);
            out.textures.push(g.value(layer.textures).clone());
        }
        Ok(out)
    }

    /// Neural textures of `reference` at every layer.
    pub fn extract_textures<T: Real>(&self, params: &[Tensor<T>], reference: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params, false)?;
        let r = g.constant(reference.clone());
        let features = self.encode_reference(&mut g, &p, r)?;
        let extracted = self.extract(&mut g, &p, &features)?;
        Ok(extracted.iter().map(|(t, _)| g.value(*t).clone()).collect())
    }

    /// Loss graph for one sample: `attn * L_attn + rec * L_rec`.
    pub fn sample_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        sample: &TrainSample<T>,
        weights: &LossWeights,
        pyramid_levels: usize,
    ) -> Result<SampleLoss> {
        let h = g.constant(sample.heatmaps.clone());
        let r = g.constant(sample.reference.clone());
        let fwd = self.forward(g, p, h, r)?;
        let truth = g.constant(sample.target.clone());
        let rec = ldiff::pixel_pyramid_rec(g, fwd.image, truth, self.config.grid(), pyramid_levels)?;
        let mut terms = Vec::new();
        for (layer, (rs, ts)) in fwd.layers.iter().zip(sample.reference_scales.iter().zip(&sample.target_scales)) {
            let rv = g.constant(rs.clone());
            let tv = g.constant(ts.clone());
            terms.push(ldiff::attn_layer(g, tv, rv, layer.extraction, layer.distribution)?);
        }
        let attn = g.add_all(&terms)?;
        let weighted_rec = g.scale(rec, weights.rec)?;
        let total = if self.config.ablate_nted {
            weighted_rec
        } else {
            let weighted_attn = g.scale(attn, weights.attn)?;
            g.add(weighted_attn, weighted_rec)?
        };
        Ok(SampleLoss { total, attn, rec })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub total: Var,
    pub attn: Var,
    pub rec: Var,
}

/// Inputs plus per-scale downsampled images for the attention loss.
#[derive(Debug, Clone)]
pub struct TrainSample<T: Real = f64> {
    pub seed: u64,
    pub reference: Tensor<T>,
    pub heatmaps: Tensor<T>,
    pub target: Tensor<T>,
    pub reference_scales: Vec<Tensor<T>>,
    pub target_scales: Vec<Tensor<T>>,
}

impl<T: Real> TrainSample<T> {
    pub fn from_pair(pair: &Pair<T>, cfg: &RendererConfig) -> Result<Self> {
        let grid = cfg.grid();
        if pair.reference.spec.canvas != cfg.resolution {
            return Err(Error::dims("sample", &[pair.reference.spec.canvas], &[cfg.resolution]));
        }
        if pair.target.heatmaps.cols() != cfg.keypoints {
            return Err(Error::dims("sample", pair.target.heatmaps.shape(), &[grid.positions(), cfg.keypoints]));
        }
        let down = |img: &Tensor<T>| -> Result<Vec<Tensor<T>>> {
            cfg.scales.iter().map(|s| resize_down(img, grid, Grid::square(*s))).collect()
        };
        Ok(TrainSample {
            seed: pair.seed,
            reference_scales: down(&pair.reference.image)?,
            target_scales: down(&pair.target.image)?,
            reference: pair.reference.image.clone(),
            heatmaps: pair.target.heatmaps.clone(),
            target: pair.target.image.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub ema_decay: f64,
    pub pyramid_levels: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            batch_size: 4,
            steps: 1000,
            ema_decay: 0.999,
            pyramid_levels: 3,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema decay {} outside (0, 1)", self.ema_decay)));
        }
        if self.batch_size == 0 || self.pyramid_levels == 0 {
            return Err(Error::Config("batch size and pyramid levels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("adam betas ({}, {}) outside [0, 1)", self.beta1, self.beta2)));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Loss values of one step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub attn: f64,
    pub rec: f64,
}

/// Parameters, their running average, and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real = f32> {
    renderer: Renderer,
    pub config: TrainConfig,
    pub params: Vec<Tensor<T>>,
    pub ema: Vec<Tensor<T>>,
    adam: Adam,
    threads: usize,
}

struct SampleGrad<T: Real> {
    loss: f64,
    attn: f64,
    rec: f64,
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(renderer: Renderer, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = renderer.init_params(seed);
        Ok(Trainer {
            ema: params.clone(),
            params,
            adam: Adam::new(config.learning_rate).with_betas(config.beta1, config.beta2),
            renderer,
            config,
            threads: 1,
        })
    }

    /// Batch-level parallelism; results do not depend on the thread count.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    fn sample_grad(&self, sample: &TrainSample<T>) -> Result<SampleGrad<T>> {
        let mut g = Graph::new();
        let p = self.renderer.bind(&mut g, &self.params, true)?;
        let loss = self.renderer.sample_loss(&mut g, &p, sample, &self.config.weights, self.config.pyramid_levels)?;
        let mut grads = g.backward(loss.total)?;
        Ok(SampleGrad {
            loss: g.value(loss.total).item().as_f64(),
            attn: g.value(loss.attn).item().as_f64(),
            rec: g.value(loss.rec).item().as_f64(),
            grads: p
                .iter()
                .zip(&self.params)
                .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect(),
        })
    }

    /// Mean loss and gradient over `batch`, summed in sample order.
    pub fn batch_gradients(&self, batch: &[&TrainSample<T>]) -> Result<(StepStats, Vec<Tensor<T>>)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let per_sample: Vec<Result<SampleGrad<T>>> = if self.threads > 1 && batch.len() > 1 {
            let chunk = batch.len().div_ceil(self.threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .chunks(chunk)
                    .map(|c| s.spawn(move || c.iter().map(|x| self.sample_grad(x)).collect::<Vec<_>>()))
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            })
        } else {
            batch.iter().map(|x| self.sample_grad(x)).collect()
        };
        let n = batch.len() as f64;
        let mut stats = StepStats {
            step: self.adam.steps_taken(),
            loss: 0.0,
            attn: 0.0,
            rec: 0.0,
        };
        let mut total: Option<Vec<Tensor<T>>> = None;
        for sg in per_sample {
            let sg = sg?;
            stats.loss += sg.loss / n;
            stats.attn += sg.attn / n;
            stats.rec += sg.rec / n;
            match total.as_mut() {
                None => total = Some(sg.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&sg.grads) {
                        a.add_assign(g)?;
                    }
                }
            }
        }
        let inv = T::from_f64(1.0 / n);
        let grads = total
            .expect("nonempty batch")
            .into_iter()
            .map(|g| g.map(|v| v * inv))
            .collect();
        Ok((stats, grads))
    }

    /// One Adam step followed by the EMA update.
    pub fn train_step(&mut self, batch: &[&TrainSample<T>]) -> Result<StepStats> {
        let (mut stats, grads) = self.batch_gradients(batch)?;
        if !stats.loss.is_finite() {
            return Err(Error::Diverged {
                step: stats.step as usize,
                detail: format!("loss {} (attn {}, rec {})", stats.loss, stats.attn, stats.rec),
            });
        }
        self.adam.step(&mut self.params, &grads)?;
        let t = self.adam.steps_taken() as f64;
        let decay = self.config.ema_decay.min((1.0 + t) / (10.0 + t));
        let e = T::from_f64(1.0 - decay);
        for (avg, p) in self.ema.iter_mut().zip(&self.params) {
            for (a, v) in avg.data_mut().iter_mut().zip(p.data()) {
                *a += (*v - *a) * e;
            }
        }
        stats.step = self.adam.steps_taken();
        debug!("step {} loss {:.5} attn {:.5} rec {:.5}", stats.step, stats.loss, stats.attn, stats.rec);
        Ok(stats)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.renderer, &self.config, &self.params, &self.ema, &self.adam)
    }

    /// Resumes from `ckpt`; its config hash must match `renderer`.
    pub fn from_checkpoint(renderer: Renderer, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.verify(&renderer)?;
        Ok(Trainer {
            params: ckpt.params(&renderer)?,
            ema: ckpt.ema(&renderer)?,
            adam: ckpt.adam.clone(),
            config: ckpt.train.clone(),
            renderer,
            threads: 1,
        })
    }
}

/// Evaluation metrics on a set of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub pixel_l1: f64,
    pub attn_l1: f64,
    pub identity_l1: f64,
}

pub fn evaluate<T: Real>(renderer: &Renderer, params: &[Tensor<T>], samples: &[TrainSample<T>]) -> Result<EvalMetrics> {
    let mut m = EvalMetrics {
        samples: samples.len(),
        pixel_l1: 0.0,
        attn_l1: 0.0,
        identity_l1: 0.0,
    };
    if samples.is_empty() {
        return Ok(m);
    }
    for s in samples {
        let out = renderer.render(params, &s.heatmaps, &s.reference)?;
        m.pixel_l1 += crate::losses::l1_mean(&out.image, &s.target)?;
        m.identity_l1 += crate::losses::l1_mean(&s.reference, &s.target)?;
        let pairs: Vec<_> = out.extractions.iter().zip(&out.distributions).collect();
        m.attn_l1 += crate::losses::attn_reconstruction(&s.target_scales, &s.reference_scales, &pairs)?;
    }
    let n = samples.len() as f64;
    m.pixel_l1 /= n;
    m.attn_l1 /= n;
    m.identity_l1 /= n;
    Ok(m)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: flat arrays with names and shapes, keyed by config hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RendererConfig,
    pub config_hash: String,
    pub train: TrainConfig,
    pub params: Vec<NamedArray>,
    pub ema: Vec<NamedArray>,
    pub adam: Adam,
}

fn to_arrays<T: Real>(layout: &Layout, tensors: &[Tensor<T>]) -> Vec<NamedArray> {
    layout
        .names
        .iter()
        .zip(tensors)
        .map(|(name, t)| NamedArray {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        })
        .collect()
}

impl Checkpoint {
    pub fn new<T: Real>(renderer: &Renderer, train: &TrainConfig, params: &[Tensor<T>], ema: &[Tensor<T>], adam: &Adam) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: renderer.config.clone(),
            config_hash: renderer.config.hash(),
            train: train.clone(),
            params: to_arrays(&renderer.layout, params),
            ema: to_arrays(&renderer.layout, ema),
            adam: adam.clone(),
        }
    }

    pub fn verify(&self, renderer: &Renderer) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", self.version)));
        }
        let expected = renderer.config.hash();
        if self.config_hash != expected || self.config.hash() != expected {
            return Err(Error::ConfigHash {
                expected,
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    fn load<T: Real>(renderer: &Renderer, arrays: &[NamedArray]) -> Result<Vec<Tensor<T>>> {
        let by_name: BTreeMap<&str, &NamedArray> = arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let tensors = renderer
            .layout
            .names
            .iter()
            .map(|name| {
                let a = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
                Tensor::from_vec(&a.shape, a.data.iter().map(|v| T::from_f64(*v)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        renderer.check_params(&tensors)?;
        Ok(tensors)
    }

    pub fn params<T: Real>(&self, renderer: &Renderer) -> Result<Vec<Tensor<T>>> {
        Self::load(renderer, &self.params)
    }

    pub fn ema<T: Real>(&self, renderer: &Renderer) -> Result<Vec<Tensor<T>>> {
        Self::load(renderer, &self.ema)
    }

    pub fn renderer(&self) -> Result<Renderer> {
        let r = Renderer::new(self.config.clone())?;
        self.verify(&r)?;
        Ok(r)
    }
}
