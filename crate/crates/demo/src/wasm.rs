//! JSON exports for the page.

use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_PATHS: usize = 2000;
const MAX_STEPS: usize = 5000;

fn json<T: Serialize>(r: sra_core::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

fn capped(name: &str, v: usize, max: usize) -> Result<usize, JsError> {
    if v > max {
        return Err(JsError::new(&format!("{name} is limited to {max}")));
    }
    Ok(v)
}

/// Noising paths and alignment kernels.
#[wasm_bindgen]
pub fn curves(points: usize, beta: f64) -> Result<String, JsError> {
    json(crate::curves(capped("points", points, MAX_STEPS)?, beta))
}

/// Oracle sampling paths on the 2-D mixture.
#[wasm_bindgen]
pub fn trajectories(num_paths: usize, steps: usize, sde: bool, seed: u32) -> Result<String, JsError> {
    json(crate::trajectories(
        capped("paths", num_paths, MAX_PATHS)?,
        capped("steps", steps, MAX_STEPS)?,
        sde,
        seed as u64,
    ))
}

/// EMA teacher following a noisy student.
#[wasm_bindgen]
pub fn ema_trace(alpha: f64, steps: usize, noise: f64, seed: u32) -> Result<String, JsError> {
    json(crate::ema_trace(alpha, capped("steps", steps, 100 * MAX_STEPS)?, noise, seed as u64))
}
