//! Browser bindings: sequence-length calculator, attention scratch of the
//! naive and tiled kernels, and compute-cost curves.
//!
//! Each export wraps a plain function returning `Result<_, String>` so the
//! logic can be tested natively.

use seqvit::attention::{meter, mha_backward, mha_forward, tiled_attention_backward, tiled_attention_forward};
use seqvit::attention::{AttentionKernel, AttentionSpec, TileSpec};
use seqvit::costmodel::{attention_scratch, emit_cost_curves};
use seqvit::numerics::SeededRng;
use seqvit::vit::{seq_len_for, EmbedMode};
use wasm_bindgen::prelude::*;

/// Largest sequence the page will actually run the kernels on.
pub const MEASURE_LIMIT: usize = 512;

pub fn seq_len_text(h: usize, w: usize, patch: usize, channels: usize, mode: &str) -> Result<usize, String> {
    let mode: EmbedMode = mode.parse()?;
    seq_len_for(h, w, patch, channels, mode).map_err(|e| e.to_string())
}

/// Naive and tiled attention scratch as JSON. Estimates always; meter
/// readings from real f32 kernel runs when `seq_len <= MEASURE_LIMIT`.
pub fn attention_memory_json(seq_len: usize, heads: usize, head_dim: usize, block: usize) -> Result<String, String> {
    let spec = AttentionSpec::new(seq_len, heads, head_dim).map_err(|e| e.to_string())?;
    if block == 0 {
        return Err("block size must be positive".into());
    }
    let tiled = AttentionKernel::Tiled {
        block_q: block,
        block_k: block,
    };
    let naive_est = attention_scratch(seq_len, heads, head_dim, AttentionKernel::Naive);
    let tiled_est = attention_scratch(seq_len, heads, head_dim, tiled);
    let measured = if seq_len <= MEASURE_LIMIT {
        Some(measure(&spec, block).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let json = serde_json::json!({
        "seq_len": seq_len,
        "naive_estimate": naive_est,
        "tiled_estimate": tiled_est,
        "ratio": tiled_est as f64 / naive_est as f64,
        "naive_measured": measured.map(|m| m.0),
        "tiled_measured": measured.map(|m| m.1),
    });
    Ok(json.to_string())
}

fn measure(spec: &AttentionSpec, block: usize) -> seqvit::Result<(usize, usize)> {
    let [q, k, v, d] = [0, 1, 2, 3].map(|s| SeededRng::new(0, s).normal_tensor::<f32>(&[spec.seq_len, spec.width()], 1.0));
    meter::reset();
    let (_, saved) = mha_forward(spec, &q, &k, &v)?;
    mha_backward(spec, &saved, &d)?;
    drop(saved);
    let naive = meter::peak();
    meter::reset();
    let tiles = TileSpec::square(block.min(spec.seq_len));
    let (out, lse) = tiled_attention_forward(spec, &tiles, &q, &k, &v)?;
    tiled_attention_backward(spec, &tiles, &lse, &q, &k, &v, &out, &d)?;
    Ok((naive, meter::peak()))
}

fn parse_grid(text: &str) -> Result<Vec<u64>, String> {
    text.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let t = t.trim();
            t.parse::<u64>()
                .or_else(|_| match t.parse::<f64>() {
                    Ok(f) if f >= 1.0 && f.fract() == 0.0 && f < 1.8e19 => Ok(f as u64),
                    _ => Err(format!("`{t}` is not a positive integer")),
                })
        })
        .collect()
}

pub fn cost_curves_csv(d_grid: &str, p_grid: &str, r_peak: f64, n: u64) -> Result<String, String> {
    emit_cost_curves(&parse_grid(d_grid)?, &parse_grid(p_grid)?, r_peak, n).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn seq_len(h: usize, w: usize, patch: usize, channels: usize, mode: &str) -> Result<usize, JsValue> {
    seq_len_text(h, w, patch, channels, mode).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn attention_memory(seq_len: usize, heads: usize, head_dim: usize, block: usize) -> Result<String, JsValue> {
    attention_memory_json(seq_len, heads, head_dim, block).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn cost_curves(d_grid: &str, p_grid: &str, r_peak: f64, n: u32) -> Result<String, JsValue> {
    cost_curves_csv(d_grid, p_grid, r_peak, n as u64).map_err(|e| JsValue::from_str(&e))
}
