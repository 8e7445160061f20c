//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export takes a JSON model description and returns a JSON string, so
//! the page needs no generated typings.

use serde::Serialize;
use spikelab::limits::{hdlss_limit_sample, predict, IndexLimit};
use spikelab::model::{build_model, classify_regime, ModelConfig, Regime, SpikeModel};
use spikelab::montecarlo::{kde, run_replications, Density, Metric, RunOptions};
use wasm_bindgen::prelude::*;

/// Browsers run single-threaded, so keep demo workloads small.
const MAX_REPS: usize = 200;
const MAX_DRAWS: usize = 20_000;
const MAX_CELLS: usize = 400_000;

fn model_from(config: &str) -> Result<SpikeModel, String> {
    let cfg: ModelConfig = serde_json::from_str(config).map_err(|e| format!("config: {e}"))?;
    build_model(&cfg).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Prediction {
    regime: Regime,
    predictions: Vec<IndexLimit>,
}

pub fn predict_angles_impl(config: &str) -> Result<String, String> {
    let model = model_from(config)?;
    let regime = classify_regime(&model, false);
    let limits = predict(&model, &regime).map_err(|e| e.to_string())?;
    to_json(&Prediction {
        regime: limits.regime,
        predictions: limits.spikes,
    })
}

#[derive(Serialize)]
struct AngleDensity {
    /// 1-based sample index.
    index: usize,
    predicted_deg: Option<f64>,
    mean_deg: f64,
    density: Density,
}

pub fn simulate_angles_impl(config: &str, reps: usize, seed: u64) -> Result<String, String> {
    let model = model_from(config)?;
    if reps == 0 || reps > MAX_REPS {
        return Err(format!("reps must be in 1..={MAX_REPS}"));
    }
    if model.d() * model.n() > MAX_CELLS {
        return Err(format!("d·n must be at most {MAX_CELLS} in the browser"));
    }
    let limits = predict(&model, &classify_regime(&model, false)).ok();
    let opts = RunOptions {
        monitored_noise: 0,
        pairwise: false,
        ..RunOptions::default()
    };
    let summary = run_replications(&model, reps, seed, &opts).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for j in 0..model.spike_count() {
        let values = summary.values(j, Metric::AngleVectorDeg);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let density = if values.len() < 2 {
            Density::PointMass { at: mean }
        } else {
            kde(&values, None).map_err(|e| e.to_string())?
        };
        out.push(AngleDensity {
            index: j + 1,
            predicted_deg: limits.as_ref().and_then(|l| l.spike(j)).map(|s| s.angle_limit_deg),
            mean_deg: mean,
            density,
        });
    }
    to_json(&out)
}

#[derive(Serialize)]
struct RatioDensity {
    index: usize,
    mean: f64,
    density: Density,
}

pub fn hdlss_ratio_density_impl(config: &str, draws: usize, seed: u64) -> Result<String, String> {
    let model = model_from(config)?;
    if draws < 2 || draws > MAX_DRAWS {
        return Err(format!("draws must be in 2..={MAX_DRAWS}"));
    }
    let sample = hdlss_limit_sample(&model, draws, seed).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for j in 0..sample.spike_count() {
        let values = sample.eigenvalue_ratio_draws(j);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        out.push(RatioDensity {
            index: j + 1,
            mean,
            density: kde(&values, None).map_err(|e| e.to_string())?,
        });
    }
    to_json(&out)
}

/// Limiting angles for each spike of the model.
#[wasm_bindgen(js_name = predictAngles)]
pub fn predict_angles(config: &str) -> Result<String, JsValue> {
    predict_angles_impl(config).map_err(|e| JsValue::from_str(&e))
}

/// Simulated angle densities per spike index, with the predicted limit.
#[wasm_bindgen(js_name = simulateAngles)]
pub fn simulate_angles(config: &str, reps: usize, seed: u64) -> Result<String, JsValue> {
    simulate_angles_impl(config, reps, seed).map_err(|e| JsValue::from_str(&e))
}

/// Density of the fixed-n limiting eigenvalue ratio per spike index.
#[wasm_bindgen(js_name = hdlssRatioDensity)]
pub fn hdlss_ratio_density(config: &str, draws: usize, seed: u64) -> Result<String, JsValue> {
    hdlss_ratio_density_impl(config, draws, seed).map_err(|e| JsValue::from_str(&e))
}
