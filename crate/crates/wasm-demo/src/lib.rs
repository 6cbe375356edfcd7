//! wasm-bindgen entry points for the static demo page in `www/`.
//!
//! The logic lives in [`ops`] so it can be tested on the host; the exported
//! wrappers only turn errors into JS exceptions.

pub mod ops;

use wasm_bindgen::prelude::*;

fn js_err(e: String) -> JsError {
    JsError::new(&e)
}

/// Band-limit a series to its `n_lf` lowest DFT components, in the original
/// units.
#[wasm_bindgen(js_name = lowPass)]
pub fn low_pass(series: Vec<f64>, n_lf: usize) -> Result<Vec<f64>, JsError> {
    ops::low_pass_view(&series, n_lf).map_err(js_err)
}

/// |X_k| for bins 1..=T/2 of the z-scored series.
#[wasm_bindgen(js_name = spectrum)]
pub fn spectrum(series: Vec<f64>) -> Result<Vec<f64>, JsError> {
    ops::magnitudes(&series).map_err(js_err)
}

/// Template text the generator would attach to this future window.
#[wasm_bindgen(js_name = describe)]
pub fn describe(series: Vec<f64>) -> Result<String, JsError> {
    ops::describe(&series).map_err(js_err)
}

/// One synthetic paired instance as JSON.
#[wasm_bindgen(js_name = generateInstance)]
pub fn generate_instance(
    seed: u64,
    n_harmonics: usize,
    noise_std: f64,
    trend_break: bool,
) -> Result<String, JsError> {
    ops::generate_instance(seed, n_harmonics, noise_std, trend_break).map_err(js_err)
}

/// Hashed bag-of-words embedding of a text.
#[wasm_bindgen(js_name = embedText)]
pub fn embed_text(text: &str, dim: usize) -> Result<Vec<f64>, JsError> {
    ops::embed(text, dim).map_err(js_err)
}
