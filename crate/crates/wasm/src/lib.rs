//! wasm-bindgen bindings for the static demo page in `www/`.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: tenvoo::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA pixels of axial slice `z` of a phantom.
#[wasm_bindgen]
pub fn phantom_slice(tag: &str, size: usize, seed: u32, z: usize) -> Result<Vec<u8>, JsError> {
    let v = demo::phantom(tag, size, seed as u64).map_err(js)?;
    Ok(demo::to_rgba(&demo::axial(&v, z).map_err(js)?, 0.0, 1.0))
}

/// RGBA pixels of the same slice after `t` of `steps` forward diffusion steps.
#[wasm_bindgen]
pub fn noised_slice(
    tag: &str,
    size: usize,
    seed: u32,
    z: usize,
    t: usize,
    steps: usize,
) -> Result<Vec<u8>, JsError> {
    let s = demo::noised(tag, size, seed as u64, z, t, steps).map_err(js)?;
    Ok(demo::to_rgba(&s, -2.0, 2.0))
}

#[wasm_bindgen]
pub fn alpha_bar(t: usize, steps: usize) -> Result<f64, JsError> {
    demo::alpha_bar(t, steps).map_err(js)
}

/// Adapter parameters for ranks `1..=max_rank`.
#[wasm_bindgen]
pub fn param_curve(
    kind: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    max_rank: usize,
) -> Result<Vec<u32>, JsError> {
    let counts = demo::param_curve(kind, c_out, c_in, k, max_rank).map_err(js)?;
    Ok(counts.into_iter().map(|c| c as u32).collect())
}
