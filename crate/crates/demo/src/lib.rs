//! Three interactive views of the codec's building blocks, exported with
//! `wasm-bindgen` for a static page: a flow-warp preview on a synthetic
//! moving texture, the hierarchical GOP plan, and the coded rate of one
//! latent sample against its predicted scale.
//!
//! Every export is a thin wrapper over a plain function so the logic is
//! testable natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use zeromotion::data::{Frame, MovingTexture};
use zeromotion::entropy::cdf::{gaussian_tables, sigma_index, snap_sigma, MAX_SYMBOL};
use zeromotion::entropy::coding::table_codelength;
use zeromotion::gop::build_gop_plan;
use zeromotion::interp::warp_frame;
use zeromotion::metrics::psnr;
use zeromotion::nn::Tensor;

/// Largest preview side; keeps a single warp well under a frame budget.
pub const MAX_SIDE: usize = 256;

fn scene(seed: u64, side: usize) -> Result<MovingTexture, String> {
    if !(8..=MAX_SIDE).contains(&side) {
        return Err(format!("side must be in 8..={MAX_SIDE}, got {side}"));
    }
    Ok(MovingTexture::random(side, side, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn rgba(frame: &Frame) -> Vec<u8> {
    frame
        .to_rgb8()
        .chunks(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

fn constant_flow(side: usize, dx: f32, dy: f32) -> Tensor {
    let plane = side * side;
    let mut data = vec![dx; 2 * plane];
    data[plane..].fill(dy);
    Tensor::from_vec([1, 2, side, side], data)
}

/// Frame `t + 1` predicted by warping frame `t` with a constant flow.
/// Returns `(target, prediction)`.
pub fn predict(seed: u64, side: usize, t: usize, dx: f32, dy: f32) -> Result<(Frame, Frame), String> {
    let s = scene(seed, side)?;
    let (src, target) = (s.render(t), s.render(t + 1));
    let warped = warp_frame(&src.data, &constant_flow(side, dx, dy));
    Ok((target, Frame::new(warped, t + 1)))
}

/// Side-by-side RGBA image `2 * side` wide: the true next frame, then the
/// warped prediction.
pub fn warp_preview_rgba(seed: u64, side: usize, t: usize, dx: f32, dy: f32) -> Result<Vec<u8>, String> {
    let (target, pred) = predict(seed, side, t, dx, dy)?;
    let (a, b) = (rgba(&target), rgba(&pred));
    let row = 4 * side;
    Ok(a.chunks(row).zip(b.chunks(row)).flat_map(|(l, r)| l.iter().chain(r).copied()).collect())
}

pub fn warp_psnr(seed: u64, side: usize, t: usize, dx: f32, dy: f32) -> Result<f64, String> {
    let (target, pred) = predict(seed, side, t, dx, dy)?;
    psnr(&target.data, &pred.data).map_err(|e| e.to_string())
}

/// The GOP plan in coding order as JSON.
pub fn gop_plan(num_frames: usize, gop_size: usize) -> Result<String, String> {
    let plan = build_gop_plan(num_frames, gop_size).map_err(|e| e.to_string())?;
    serde_json::to_string(&plan).map_err(|e| e.to_string())
}

/// Bits per latent sample when the residual `round(z - mu)` follows a
/// gaussian of scale `sigma`: the ideal entropy and the cost under the
/// coder's snapped table. Escaped tails are left out of both.
pub fn rate_at(sigma: f32) -> (f64, f64) {
    let phi = |x: f64| 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
    let table = std::slice::from_ref(&gaussian_tables()[sigma_index(sigma)]);
    let sg = sigma as f64;
    // Residuals past the alphabet take the escape path; ten sigmas bound the tail.
    let reach = MAX_SYMBOL + (10.0 * sg).ceil() as i32;
    let (mut ideal, mut coded) = (0.0, 0.0);
    for s in -reach..=reach {
        let a = (s as f64).abs();
        let p = phi(-(a - 0.5) / sg) - phi(-(a + 0.5) / sg);
        if p > 0.0 {
            ideal -= p * p.log2();
            coded += p * table_codelength(&[s], |_| 0, table);
        }
    }
    (ideal, coded)
}

/// `points` log-spaced scales from `lo` to `hi`, flattened as
/// `[sigma, snapped sigma, ideal bits, coded bits]` per point.
pub fn rate_curve_values(lo: f32, hi: f32, points: usize) -> Result<Vec<f64>, String> {
    if !(lo > 0.0 && hi > lo && points >= 2) {
        return Err("need 0 < lo < hi and at least two points".into());
    }
    let (l0, l1) = (lo.ln(), hi.ln());
    Ok((0..points)
        .flat_map(|i| {
            let sigma = (l0 + (l1 - l0) * i as f32 / (points - 1) as f32).exp();
            let (ideal, coded) = rate_at(sigma);
            [sigma as f64, snap_sigma(sigma) as f64, ideal, coded]
        })
        .collect())
}

#[wasm_bindgen]
pub fn warp_preview(seed: u32, side: usize, t: usize, dx: f32, dy: f32) -> Result<Vec<u8>, JsError> {
    warp_preview_rgba(seed as u64, side, t, dx, dy).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn prediction_psnr(seed: u32, side: usize, t: usize, dx: f32, dy: f32) -> Result<f64, JsError> {
    warp_psnr(seed as u64, side, t, dx, dy).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn gop_plan_json(num_frames: usize, gop_size: usize) -> Result<String, JsError> {
    gop_plan(num_frames, gop_size).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn rate_curve(lo: f32, hi: f32, points: usize) -> Result<Vec<f64>, JsError> {
    rate_curve_values(lo, hi, points).map_err(|e| JsError::new(&e))
}
