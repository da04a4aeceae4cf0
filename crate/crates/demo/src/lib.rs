//! WebAssembly bindings for the browser demo. Every export returns plain
//! bytes or JSON so the page needs no framework.

use serde_json::json;
use streamdiff::diffusion::{q_sample, GuidanceConfig, NoiseSchedule};
use streamdiff::editor::{open_session, SessionOptions};
use streamdiff::memory::{memory_init, MemoryParams, Strategy};
use streamdiff::model::{Denoiser, DenoiserConfig};
use streamdiff::nn::{Init, ParamStore};
use streamdiff::rng::gaussian_tensor;
use streamdiff::video::{generate_video, VideoSpec};
use streamdiff::{SeedTree, Tensor};
use wasm_bindgen::prelude::*;

pub const IMAGE_SIZE: usize = 32;
pub const SCHEDULE_STEPS: usize = 100;

fn err(e: streamdiff::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[3, H, W]` values in [0, 1] to row-major RGBA bytes.
pub fn to_rgba(frame: &Tensor) -> Vec<u8> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let d = frame.data();
    let mut out = Vec::with_capacity(4 * h * w);
    for px in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + px].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn concat_width(a: &[u8], b: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for row in 0..h {
        out.extend_from_slice(&a[row * 4 * w..(row + 1) * 4 * w]);
        out.extend_from_slice(&b[row * 4 * w..(row + 1) * 4 * w]);
    }
    out
}

pub fn noise_preview_native(seed: u64, frame: usize, t: usize) -> streamdiff::Result<Vec<u8>> {
    let spec = VideoSpec::random(&SeedTree::new(seed), 0, frame + 1, IMAGE_SIZE);
    let video = generate_video(&spec)?;
    let clean = &video.frames[frame];
    let sched = NoiseSchedule::scaled_linear(SCHEDULE_STEPS)?;
    let mut rng = SeedTree::new(seed).rng("demo.noise", frame as u64);
    let eps = gaussian_tensor(&mut rng, clean.shape());
    let noisy = if t == 0 {
        clean.clone()
    } else {
        q_sample(clean, t, &eps, &sched)?
    };
    Ok(concat_width(
        &to_rgba(clean),
        &to_rgba(&noisy),
        IMAGE_SIZE,
        IMAGE_SIZE,
    ))
}

/// Frame `frame` of the random video for `seed`, next to its forward-noised
/// copy at step `t` (0 = clean). Returns a 64x32 RGBA image.
#[wasm_bindgen]
pub fn noise_preview(seed: u64, frame: u32, t: u32) -> Result<Vec<u8>, JsError> {
    noise_preview_native(seed, frame as usize, t as usize).map_err(err)
}

#[wasm_bindgen]
pub fn alpha_bar(t: u32) -> Result<f64, JsError> {
    NoiseSchedule::scaled_linear(SCHEDULE_STEPS)
        .and_then(|s| s.alpha_bar(t as usize))
        .map_err(err)
}

pub fn memory_grid_native(
    h: usize,
    w: usize,
    seed: u64,
    scale: f32,
) -> streamdiff::Result<Vec<u8>> {
    let d = 16;
    let mut store = ParamStore::new();
    let mut init = Init::new(&SeedTree::new(seed), "demo.memory");
    let params = MemoryParams::new(&mut store, &mut init, "memory", d, 4)?;
    for id in [params.init_fc1.weight, params.init_fc2.weight] {
        let v = store.value(id).scale(scale)?;
        store.set(id, v)?;
    }
    let mem = memory_init(&store.bind(), &params, h, w)?;
    // First three channels, each stretched to [0, 1].
    let s = mem.state.data();
    let mut out = Vec::with_capacity(4 * h * w);
    let mut range = [(f32::MAX, f32::MIN); 3];
    for tok in 0..h * w {
        for c in 0..3 {
            let v = s[tok * d + c];
            range[c] = (range[c].0.min(v), range[c].1.max(v));
        }
    }
    for tok in 0..h * w {
        for (c, &(lo, hi)) in range.iter().enumerate() {
            let v = if hi > lo {
                (s[tok * d + c] - lo) / (hi - lo)
            } else {
                0.5
            };
            out.push((v * 255.0).round() as u8);
        }
        out.push(255);
    }
    Ok(out)
}

/// Initial memory grid `M^0` for an `h x w` grid with randomly initialized
/// position FFN weights multiplied by `scale`. Returns h*w RGBA pixels.
#[wasm_bindgen]
pub fn memory_grid(h: u32, w: u32, seed: u64, scale: f32) -> Result<Vec<u8>, JsError> {
    memory_grid_native(h as usize, w as usize, seed, scale).map_err(err)
}

pub fn strategy_costs_native(frames: usize, grid: usize) -> streamdiff::Result<serde_json::Value> {
    let cfg = DenoiserConfig {
        image_size: 16,
        patch_size: 4,
        d: 32,
        layers: 2,
        heads: 2,
        total_steps: 20,
        memory_h: grid,
        memory_w: grid,
        ..DenoiserConfig::default()
    };
    let model = Denoiser::new(cfg, &SeedTree::new(7))?;
    let sched = NoiseSchedule::scaled_linear(20)?;
    let guidance = GuidanceConfig::evenly_spaced(1.0, 3, 20)?;
    let video = generate_video(&VideoSpec::random(&SeedTree::new(7), 0, frames, 16))?;
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        let mut session = open_session(
            &model,
            &sched,
            &guidance,
            1,
            strategy,
            SessionOptions::default(),
        )?;
        let mut flops = Vec::with_capacity(frames);
        let mut state = Vec::with_capacity(frames);
        for f in &video.frames {
            flops.push(session.process_frame(f)?.flops);
            state.push(session.state_size());
        }
        rows.push(json!({ "strategy": strategy.to_string(), "flops": flops, "state": state }));
    }
    Ok(json!({ "frames": frames, "grid": grid, "rows": rows }))
}

/// Streams `frames` frames through a small untrained model under every
/// strategy and reports per-frame FLOPs and cached state size as JSON.
#[wasm_bindgen]
pub fn strategy_costs(frames: u32, grid: u32) -> Result<String, JsError> {
    strategy_costs_native(frames.max(1) as usize, grid.max(1) as usize)
        .map(|v| v.to_string())
        .map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preview_is_two_frames_wide() {
        let img = noise_preview_native(3, 5, 40).unwrap();
        assert_eq!(img.len(), 4 * 2 * IMAGE_SIZE * IMAGE_SIZE);
        assert_eq!(noise_preview_native(3, 5, 40).unwrap(), img);
        let clean = noise_preview_native(3, 5, 0).unwrap();
        let row = 4 * IMAGE_SIZE;
        assert_eq!(clean[..row], clean[row..2 * row]);
    }

    #[test]
    fn memory_grid_has_one_pixel_per_token() {
        assert_eq!(memory_grid_native(8, 4, 1, 10.0).unwrap().len(), 4 * 32);
        let flat = memory_grid_native(1, 1, 1, 10.0).unwrap();
        assert_eq!(flat, vec![128, 128, 128, 255]);
    }

    #[test]
    fn costs_cover_every_strategy() {
        let v = strategy_costs_native(5, 2).unwrap();
        let rows = v["rows"].as_array().unwrap();
        assert_eq!(rows.len(), Strategy::ALL.len());
        let svdiff = rows.iter().find(|r| r["strategy"] == "svdiff").unwrap();
        let flops: Vec<u64> = serde_json::from_value(svdiff["flops"].clone()).unwrap();
        assert!(flops.windows(2).all(|w| w[0] == w[1]));
    }
}
