//! Browser bindings. Everything here runs without trained weights: sprites
//! come from the synthetic generator and the texture transfer uses
//! hand-built semantic filters over part labels.

use nted::cost::{account_cost, Mechanism};
use nted::kernel::{distribute, extract, FeatureMap, Projection, SemanticFilters};
use nted::synth::{generate_pair, Part, SpriteSpec, SynthConfig};
use nted::{ppm, Tensor};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Label channels: background then one per part.
const LABELS: usize = 1 + Part::ALL.len();
const CHANNELS: usize = LABELS + 3;

fn pair(seed: u64, canvas: usize) -> (SpriteSpec, SpriteSpec) {
    let p = generate_pair::<f64>(seed, &SynthConfig { canvas, ..SynthConfig::default() });
    (p.reference.spec, p.target.spec)
}

fn label_index(label: Option<Part>) -> usize {
    label.map_or(0, |p| 1 + p.index())
}

/// Per-pixel `[one-hot label | rgb]`; the target carries no color.
fn features(spec: &SpriteSpec, with_color: bool) -> nted::Result<FeatureMap> {
    let image = spec.render::<f64>();
    let labels = spec.labels();
    let values = Tensor::from_fn(&[labels.len(), CHANNELS], |i| {
        let (px, ch) = (i / CHANNELS, i % CHANNELS);
        if ch < LABELS {
            f64::from(u8::from(label_index(labels[px]) == ch))
        } else if with_color {
            image.get(px, ch - LABELS)
        } else {
            0.0
        }
    })?;
    FeatureMap::new(spec.grid(), values)
}

/// One semantic per label, with logits `sharpness` on matching pixels.
fn label_filters(sharpness: f64) -> nted::Result<SemanticFilters> {
    SemanticFilters::new(Tensor::from_fn(&[LABELS, CHANNELS], |i| {
        if i / CHANNELS == i % CHANNELS {
            sharpness
        } else {
            0.0
        }
    })?)
}

/// Keeps only the color channels as texture values.
fn color_projection() -> nted::Result<Projection> {
    let w = Tensor::from_fn(&[CHANNELS, CHANNELS], |i| {
        let (r, c) = (i / CHANNELS, i % CHANNELS);
        f64::from(u8::from(r == c && r >= LABELS))
    })?;
    Projection::new(w, None)
}

/// Target pose painted with the reference's per-part textures, as a
/// `(canvas^2) x 3` image.
pub fn transfer_image(seed: u64, canvas: usize, sharpness: f64) -> nted::Result<Tensor> {
    let (reference, target) = pair(seed, canvas);
    let filters = label_filters(sharpness)?;
    let (textures, _) = extract(&features(&reference, true)?, &filters, &color_projection()?)?;
    let (out, _) = distribute(&features(&target, false)?, &filters, &textures)?;
    let v = out.values();
    Tensor::from_fn(&[v.rows(), 3], |i| v.get(i / 3, LABELS + i % 3))
}

fn rgba(images: &[&Tensor], canvas: usize) -> nted::Result<Vec<u8>> {
    let grid = nted::spatial::Grid::square(canvas);
    let (sheet, g) = ppm::montage(images, grid, images.len())?;
    let rgb = ppm::to_rgb8(&sheet, g)?;
    Ok(rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

/// Reference, target and transfer side by side as RGBA, with one-pixel
/// gutters: `3 * canvas + 2` wide and `canvas` tall.
pub fn transfer_panel(seed: u64, canvas: usize, sharpness: f64) -> nted::Result<Vec<u8>> {
    let (reference, target) = pair(seed, canvas);
    let out = transfer_image(seed, canvas, sharpness)?;
    rgba(&[&reference.render(), &target.render(), &out], canvas)
}

/// Resource counts for square maps of side `8, 16, ..` up to `max_side`.
pub fn cost_rows(max_side: usize, channels: usize, semantics: usize) -> serde_json::Value {
    let mut rows = Vec::new();
    let mut side = 8;
    while side <= max_side {
        let n = account_cost(side, side, channels, semantics, Mechanism::Nted);
        let v = account_cost(side, side, channels, semantics, Mechanism::Vanilla);
        rows.push(json!({
            "positions": side * side,
            "nted_macs": n.multiply_adds,
            "vanilla_macs": v.multiply_adds,
            "nted_allocs": n.element_allocations,
            "vanilla_allocs": v.element_allocations,
        }));
        side *= 2;
    }
    serde_json::Value::Array(rows)
}

fn js_err(e: nted::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub fn render_panel(seed: u64, canvas: usize, sharpness: f64) -> Result<Vec<u8>, JsValue> {
    transfer_panel(seed, canvas, sharpness).map_err(js_err)
}

#[wasm_bindgen]
pub fn panel_width(canvas: usize) -> usize {
    3 * canvas + 2
}

#[wasm_bindgen]
pub fn cost_table(max_side: usize, channels: usize, semantics: usize) -> String {
    cost_rows(max_side, channels, semantics).to_string()
}
