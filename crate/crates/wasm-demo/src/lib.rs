//! Browser demo bindings: a small pretrained model is embedded in the
//! binary, and three interactive operations are exposed to JavaScript as
//! JSON-returning functions:
//!
//! * `decode_utterance` - decode one synthetic utterance under a chosen mode,
//!   threshold, and look-ahead cap; returns the transcript, the per-step
//!   exposed boundary, and per-(layer, head) applied-attention grids for
//!   heatmap rendering.
//! * `sweep` - decoding cost vs threshold over a small eval set.
//! * `halting_playground` - raw halting arithmetic on hand-edited
//!   probability rows.

use hsdacs::checkpoint;
use hsdacs::config::HaltingMode;
use hsdacs::decoder::{decode_greedy, DecodeConfig};
use hsdacs::error::Error;
use hsdacs::eval::{alignment_grids, coverage_ratio, edit_distance, sweep_thresholds};
use hsdacs::halting::{dacs_halt, hs_dacs_halt, HaltReason};
use hsdacs::training::Trainer;
use hsdacs::transformer::encode_states;
use serde::Serialize;
use std::sync::OnceLock;
use wasm_bindgen::prelude::*;

/// Checkpoint trained by `configs/demo.cfg` (see the repository README).
static MODEL_BYTES: &[u8] = include_bytes!("../assets/demo-model.ckpt");

static ENGINE: OnceLock<Result<Trainer, String>> = OnceLock::new();

fn engine() -> Result<&'static Trainer, String> {
    ENGINE
        .get_or_init(|| {
            let data = checkpoint::load_bytes(MODEL_BYTES).map_err(|e| e.to_string())?;
            Trainer::from_checkpoint_data(data).map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(|e| e.clone())
}

fn to_js_err(e: Error) -> String {
    e.to_string()
}

fn parse_mode(mode: &str) -> Result<HaltingMode, String> {
    HaltingMode::parse(mode).map_err(to_js_err)
}

#[derive(Serialize)]
struct Info {
    heads: usize,
    dec_layers: usize,
    enc_layers: usize,
    d_model: usize,
    data_vocab: usize,
    max_lookahead: usize,
    dacs_threshold: f64,
    joint_threshold: f64,
    eval_utterances: usize,
}

/// Model metadata for initialising the page controls.
#[wasm_bindgen]
pub fn demo_info() -> Result<String, String> {
    let t = engine()?;
    let m = &t.run_cfg.model;
    let info = Info {
        heads: m.heads,
        dec_layers: m.dec_layers,
        enc_layers: m.enc_layers,
        d_model: m.d_model,
        data_vocab: t.run_cfg.data.vocab,
        max_lookahead: m.max_lookahead,
        dacs_threshold: m.dacs_threshold,
        joint_threshold: m.joint_threshold,
        eval_utterances: t.run_cfg.data.eval_samples,
    };
    Ok(serde_json::to_string(&info).unwrap())
}

#[derive(Serialize)]
struct HeadGrid {
    layer: usize,
    head: usize,
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

#[derive(Serialize)]
struct DecodeResult {
    reference: Vec<usize>,
    hypothesis: Vec<usize>,
    enc_len: usize,
    /// Exposed boundary t_i after each output step.
    boundaries: Vec<usize>,
    /// Per-step halting positions, per layer and head.
    positions: Vec<Vec<Vec<usize>>>,
    coverage_ratio: f64,
    edits: usize,
    grids: Vec<HeadGrid>,
}

/// Decode eval utterance `utt` and return everything the page renders.
#[wasm_bindgen]
pub fn decode_utterance(
    mode: &str,
    threshold: f64,
    max_lookahead: usize,
    utt: u32,
) -> Result<String, String> {
    let t = engine()?;
    let mode = parse_mode(mode)?;
    let model = &t.model;
    let idx = t.run_cfg.train.train_samples as u64 + utt as u64;
    let sample = t.dataset.sample(idx);
    let enc = encode_states(model, &sample.features, sample.frames).map_err(to_js_err)?;
    let dcfg = DecodeConfig {
        mode,
        threshold,
        max_lookahead: max_lookahead.max(1),
        max_len: 2 * t.run_cfg.data.len_max + 8,
    };
    let (hyp, trace) = decode_greedy(model, &enc, &dcfg).map_err(to_js_err)?;
    let r = coverage_ratio(
        &trace,
        model.cfg.dec_layers,
        model.cfg.heads,
        trace.steps.len(),
        enc.t,
    )
    .map_err(to_js_err)?;
    let mut grids = Vec::new();
    for layer in 0..model.cfg.dec_layers {
        for g in alignment_grids(&trace, layer, model.cfg.heads).map_err(to_js_err)? {
            grids.push(HeadGrid {
                layer: g.layer,
                head: g.head,
                rows: g.rows,
                cols: g.cols,
                weights: g.weights,
            });
        }
    }
    let positions = trace
        .steps
        .iter()
        .map(|s| s.layers.iter().map(|l| l.s.clone()).collect())
        .collect();
    let result = DecodeResult {
        edits: edit_distance(&sample.target, &hyp).distance,
        reference: sample.target,
        hypothesis: hyp,
        enc_len: enc.t,
        boundaries: trace.boundaries(),
        positions,
        coverage_ratio: r,
        grids,
    };
    Ok(serde_json::to_string(&result).unwrap())
}

#[derive(Serialize)]
struct SweepOut {
    threshold: f64,
    error_rate: f64,
    ratio: f64,
}

/// Error rate and mean coverage ratio per threshold over `num_utts` eval
/// utterances.
#[wasm_bindgen]
pub fn sweep(mode: &str, thresholds_csv: &str, num_utts: u32) -> Result<String, String> {
    let t = engine()?;
    let mode = parse_mode(mode)?;
    let thresholds: Vec<f64> = thresholds_csv
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad threshold '{s}'"))
        })
        .collect::<Result<_, _>>()?;
    if thresholds.is_empty() {
        return Err("no thresholds given".into());
    }
    let base = t.run_cfg.train.train_samples as u64;
    let indices: Vec<u64> = (0..num_utts.max(1) as u64).map(|i| base + i).collect();
    let rows = sweep_thresholds(
        &t.model,
        &t.dataset,
        &indices,
        mode,
        &thresholds,
        t.run_cfg.model.max_lookahead,
        2 * t.run_cfg.data.len_max + 8,
    )
    .map_err(to_js_err)?;
    let out: Vec<SweepOut> = rows
        .iter()
        .map(|r| SweepOut {
            threshold: r.threshold,
            error_rate: r.error_rate,
            ratio: r.ratio,
        })
        .collect();
    Ok(serde_json::to_string(&out).unwrap())
}

#[derive(Serialize)]
struct PlaygroundHead {
    n: usize,
    reason: String,
}

#[derive(Serialize)]
struct PlaygroundOut {
    per_head: Vec<PlaygroundHead>,
    joint: PlaygroundHead,
    pooled: Vec<f64>,
}

fn reason_str(r: HaltReason) -> String {
    match r {
        HaltReason::Threshold => "threshold".into(),
        HaltReason::Window => "window".into(),
    }
}

/// Halting arithmetic on hand-edited probability rows: one line per head,
/// whitespace-separated probabilities. Returns each head's halting decision
/// under `theta` and the joint decision under `joint_theta`.
#[wasm_bindgen]
pub fn halting_playground(rows: &str, theta: f64, joint_theta: f64) -> Result<String, String> {
    let mut heads: Vec<Vec<f64>> = Vec::new();
    for line in rows.lines() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| format!("bad value '{s}'")))
            .collect::<Result<_, _>>()?;
        if !vals.is_empty() {
            if vals.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err("probabilities must lie in [0, 1]".into());
            }
            heads.push(vals);
        }
    }
    if heads.is_empty() {
        return Err("enter at least one row of probabilities".into());
    }
    let width = heads.iter().map(|h| h.len()).min().unwrap();
    for h in heads.iter_mut() {
        h.truncate(width);
    }
    let per_head = heads
        .iter()
        .map(|p| {
            dacs_halt(p, theta, width).map(|r| PlaygroundHead {
                n: r.n,
                reason: reason_str(r.reason),
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_js_err)?;
    let joint = hs_dacs_halt(&heads, joint_theta, width).map_err(to_js_err)?;
    let pooled: Vec<f64> = (0..width)
        .map(|j| heads.iter().map(|h| h[j]).sum::<f64>())
        .collect();
    let out = PlaygroundOut {
        per_head,
        joint: PlaygroundHead {
            n: joint.n,
            reason: reason_str(joint.reason),
        },
        pooled,
    };
    Ok(serde_json::to_string(&out).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_model_loads() {
        let info = demo_info().unwrap();
        assert!(info.contains("\"heads\""));
    }

    #[test]
    fn decode_returns_grids_for_every_layer_head() {
        let t = engine().unwrap();
        let out = decode_utterance("hsdacs", t.run_cfg.model.joint_threshold, 16, 0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let grids = v["grids"].as_array().unwrap();
        assert_eq!(
            grids.len(),
            t.run_cfg.model.dec_layers * t.run_cfg.model.heads
        );
        assert!(v["coverage_ratio"].as_f64().unwrap() > 0.0);
        assert!(!v["boundaries"].as_array().unwrap().is_empty());
    }

    #[test]
    fn decode_is_deterministic_across_calls() {
        let a = decode_utterance("dacs", 1.0, 16, 3).unwrap();
        let b = decode_utterance("dacs", 1.0, 16, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_rows_follow_threshold_list() {
        let out = sweep("hsdacs", "4.0, 2.0", 4).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0]["threshold"].as_f64().unwrap(), 4.0);
    }

    #[test]
    fn playground_matches_hand_arithmetic() {
        let out = halting_playground("0.9 0.9\n0.2 0.2", 1.0, 2.0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        // Head 1: 0.9 then 1.8 > 1 at n=2. Head 2: window halt at 2.
        assert_eq!(v["per_head"][0]["n"], 2);
        assert_eq!(v["per_head"][1]["reason"], "window");
        // Pooled: 1.1, then 2.2 > 2.0 at n=2.
        assert_eq!(v["joint"]["n"], 2);
    }

    #[test]
    fn playground_rejects_bad_input() {
        assert!(halting_playground("", 1.0, 1.0).is_err());
        assert!(halting_playground("1.5 0.2", 1.0, 1.0).is_err());
        assert!(halting_playground("abc", 1.0, 1.0).is_err());
    }
}
