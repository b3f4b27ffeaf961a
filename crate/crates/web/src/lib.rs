//! Browser bindings for three interactive views of the core library. Each
//! function returns a JSON string so the page needs no glue beyond
//! `JSON.parse`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vqd_core::attention::{build_denoising_mask, separated_group_attention, AttentionParams, GroupQuerySet};
use vqd_core::diagnostics::{attention_negative_entropy, noisy_to_learnable_mass};
use vqd_core::geometry::{bev_intersection, iou3d, polygon_area, OrientedBox3D};
use vqd_core::numerics::{Graph, ParameterStore, Tensor};
use vqd_core::vqd::{sample_reparameterized, DenoisingMode, LatentDistribution};
use wasm_bindgen::prelude::*;

fn to_js(v: Result<Value, String>) -> Result<String, JsValue> {
    v.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

/// Mask and head-averaged attention map of one group with `n` learnable
/// queries and `c` noisy blocks of `k` objects, on random inputs of width
/// `4 * heads`. `unmasked` swaps in an all-true mask for comparison.
pub fn attention_map(n: usize, k: usize, c: usize, heads: usize, seed: u64, unmasked: bool) -> Result<Value, String> {
    if n == 0 || heads == 0 || n + k * c > 64 {
        return Err("need n >= 1, heads >= 1 and at most 64 queries".into());
    }
    let width = 4 * heads;
    let s = n + k * c;
    let mask = build_denoising_mask(n, k, c);
    let used = if unmasked { build_denoising_mask(s, 0, 0) } else { mask.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new(seed);
    let params = AttentionParams::register(&mut store, "demo", width, &mut rng);
    let input = Tensor::matrix(s, width, (0..s * width).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let q = g.constant(input);
    let set = GroupQuerySet { groups: vec![q], num_learnable: n, num_objects: k, num_noisy_groups: c, width };
    let out = separated_group_attention(&mut g, &store, &set, &used, &params, heads).map_err(|e| e.to_string())?;
    let attn = &out[0].attn_map;
    let allowed: Vec<Vec<bool>> = (0..s).map(|i| (0..s).map(|j| mask.allows(i, j)).collect()).collect();
    Ok(json!({
        "size": s,
        "mask": allowed,
        "attn": rows(attn),
        "neg_entropy": attention_negative_entropy(attn, None).map_err(|e| e.to_string())?,
        "mass": noisy_to_learnable_mass(attn, n, k, c).map_err(|e| e.to_string())?,
    }))
}

/// `[x, y, z, l, w, h, yaw]`.
fn parse_box(v: &[f64]) -> Result<OrientedBox3D, String> {
    match v {
        &[x, y, z, l, w, h, yaw] if l > 0.0 && w > 0.0 && h > 0.0 => Ok(OrientedBox3D { center: [x, y, z], dims: [l, w, h], yaw }),
        _ => Err("a box is [x, y, z, l, w, h, yaw] with positive sizes".into()),
    }
}

/// IoU3D of two boxes with both footprints and their clipped intersection
/// in the x-z plane.
pub fn bev_iou(a: &[f64], b: &[f64]) -> Result<Value, String> {
    let (a, b) = (parse_box(a)?, parse_box(b)?);
    let poly = bev_intersection(&a, &b);
    let pts = |p: &[(f64, f64)]| p.iter().map(|&(x, z)| [x, z]).collect::<Vec<_>>();
    Ok(json!({
        "iou3d": iou3d(&a, &b),
        "a": pts(&a.bev_corners()),
        "b": pts(&b.bev_corners()),
        "intersection": pts(&poly),
        "intersection_area": polygon_area(&poly),
    }))
}

/// `count` reparameterised draws from `N(mu, exp(log_var))` per coordinate,
/// with the closed-form KL to the standard normal.
pub fn latent_samples(mu: &[f64], log_var: &[f64], count: usize, seed: u64) -> Result<Value, String> {
    let d = mu.len();
    if d == 0 || log_var.len() != d || count == 0 || count > 100_000 {
        return Err("mu and log_var need the same non-zero length and 1..=100000 samples".into());
    }
    let tile = |v: &[f64]| Tensor::matrix(count, d, (0..count).flat_map(|_| v.iter().copied()).collect());
    let mut g = Graph::new();
    let m = g.constant(tile(mu).map_err(|e| e.to_string())?);
    let l = g.constant(tile(log_var).map_err(|e| e.to_string())?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_reparameterized(&mut g, &LatentDistribution { mu: m, log_var: l }, DenoisingMode::Variational, &mut rng)
        .map_err(|e| e.to_string())?;
    let samples = rows(g.value(z));
    let m1 = g.constant(Tensor::matrix(1, d, mu.to_vec()).map_err(|e| e.to_string())?);
    let l1 = g.constant(Tensor::matrix(1, d, log_var.to_vec()).map_err(|e| e.to_string())?);
    let kl = g.gaussian_kl(m1, l1).map_err(|e| e.to_string())?;
    let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|r| r[j]).sum::<f64>() / count as f64).collect();
    let var: Vec<f64> =
        (0..d).map(|j| samples.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (count.max(2) - 1) as f64).collect();
    Ok(json!({ "samples": samples, "kl": g.scalar(kl), "mean": mean, "var": var }))
}

#[wasm_bindgen(js_name = attentionMap)]
pub fn attention_map_js(n: usize, k: usize, c: usize, heads: usize, seed: u32, unmasked: bool) -> Result<String, JsValue> {
    to_js(attention_map(n, k, c, heads, seed.into(), unmasked))
}

#[wasm_bindgen(js_name = bevIou)]
pub fn bev_iou_js(a: Vec<f64>, b: Vec<f64>) -> Result<String, JsValue> {
    to_js(bev_iou(&a, &b))
}

#[wasm_bindgen(js_name = latentSamples)]
pub fn latent_samples_js(mu: Vec<f64>, log_var: Vec<f64>, count: usize, seed: u32) -> Result<String, JsValue> {
    to_js(latent_samples(&mu, &log_var, count, seed.into()))
}
