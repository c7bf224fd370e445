//! WebAssembly bindings for the demo page in `www/`. Every operation takes
//! plain numbers and strings and returns a JSON document.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use agrl::adjacency::{adaptive_adjacency, build_affinity_adjacency, build_pose_adjacency, GraphKind};
use agrl::bench::{benchmark_synth, benchmark_train, evaluate, Variant};
use agrl::dataset::Tracklet;
use agrl::diff::Tensor;
use agrl::evalkit::{baseline_representation, extract_representation, RankingResult, Strategy};
use agrl::pose::{Part, NUM_REGIONS};
use agrl::propagation::{propagate, Mode, PropagationLayer, PropagationStack};
use agrl::synth::{generate, OcclusionPart, SynthConfig};
use agrl::trainer::{train, TrainConfig, TrainSet, TrainState};

const REGION_NAMES: [&str; NUM_REGIONS] = ["whole", "top 1/2", "bottom 1/2", "1st 1/4", "2nd 1/4", "3rd 1/4", "4th 1/4"];
const MAX_RANK: usize = 20;

fn parse_occlusion(name: &str) -> Result<Option<OcclusionPart>, String> {
    match name {
        "none" => Ok(None),
        "head" => Ok(Some(OcclusionPart::Head)),
        "trunk" => Ok(Some(OcclusionPart::Trunk)),
        "leg" => Ok(Some(OcclusionPart::Leg)),
        other => Err(format!("unknown occlusion `{other}` (none, head, trunk, leg)")),
    }
}

/// One synthetic tracklet of `frames` frames, occluded throughout or not at all.
fn demo_tracklet(seed: u64, occlusion: &str, frames: usize) -> Result<Tracklet, String> {
    let part = parse_occlusion(occlusion)?;
    let cfg = SynthConfig {
        identities: 2,
        tracklets_per_identity: 1,
        frames_min: frames,
        frames_max: frames,
        occlusion_prob: if part.is_some() { 1.0 } else { 0.0 },
        occlusion_part: part.unwrap_or(OcclusionPart::Random),
        seed,
        ..SynthConfig::default()
    };
    let data = generate(&cfg).map_err(|e| e.to_string())?;
    let mut set = data.to_dataset(agrl::pose::DEFAULT_CONF_THRESHOLD).map_err(|e| e.to_string())?;
    Ok(set.tracklets.swap_remove(0))
}

fn rows(m: &Tensor) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn labels(frames: usize) -> Vec<String> {
    (0..frames)
        .flat_map(|t| REGION_NAMES.iter().map(move |r| format!("f{t} {r}")))
        .collect()
}

fn distances(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..x.rows())
                .map(|j| {
                    x.row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect()
}

fn mean_offdiag(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let total: f64 = m.iter().enumerate().map(|(i, r)| r.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum::<f64>()).sum();
    total / (n * (n - 1)).max(1) as f64
}

/// Pose, affinity and combined adjacency over the nodes of one tracklet.
pub fn graphs_json(seed: u64, occlusion: &str, frames: usize, gamma: f64) -> Result<Value, String> {
    let t = demo_tracklet(seed, occlusion, frames)?;
    let all: Vec<usize> = (0..frames).collect();
    let nodes = t.nodes(&all);
    let sets = t.node_part_sets(&all);
    let pose = build_pose_adjacency(&sets);
    let affinity = build_affinity_adjacency(&nodes);
    let combined = adaptive_adjacency(&pose, &nodes, GraphKind::Both, gamma).map_err(|e| e.to_string())?;
    Ok(json!({
        "labels": labels(frames),
        "parts": sets
            .iter()
            .map(|s| Part::ALL.iter().filter(|&&p| s.contains(p)).map(|p| p.name()).collect::<Vec<_>>().join("+"))
            .collect::<Vec<_>>(),
        "pose": rows(pose.matrix()),
        "affinity": rows(affinity.matrix()),
        "combined": rows(combined.matrix()),
    }))
}

/// Node distances before and after `layers` identity-initialized
/// propagation layers, which isolates the smoothing done by the graph.
pub fn propagation_json(seed: u64, occlusion: &str, frames: usize, alpha: f64, layers: usize, gamma: f64) -> Result<Value, String> {
    let t = demo_tracklet(seed, occlusion, frames)?;
    let all: Vec<usize> = (0..frames).collect();
    let nodes = t.nodes(&all);
    let d = nodes.cols();
    let stack = PropagationStack::from_layers(vec![PropagationLayer::identity(d); layers], alpha, gamma, GraphKind::Both)
        .map_err(|e| e.to_string())?;
    let out = propagate(&stack, &nodes, &t.node_part_sets(&all), Mode::Eval).map_err(|e| e.to_string())?;
    let (before, after) = (distances(&nodes), distances(&out));
    Ok(json!({
        "labels": labels(frames),
        "before": before,
        "after": after,
        "mean_before": mean_offdiag(&before),
        "mean_after": mean_offdiag(&after),
    }))
}

fn curve(r: &RankingResult) -> Value {
    json!({
        "cmc": (1..=MAX_RANK).map(|k| r.rank(k)).collect::<Vec<_>>(),
        "map": r.map,
        "queries": r.evaluated,
    })
}

/// CMC of the temporal-mean baseline on the synthetic benchmark, plus the
/// full model when `epochs > 0`.
pub fn ranking_json(seed: u64, occlusion_prob: f64, epochs: usize) -> Result<Value, String> {
    let synth = SynthConfig {
        occlusion_prob,
        ..benchmark_synth(seed)
    };
    let cfg = TrainConfig {
        epochs,
        ..benchmark_train(seed, 2)
    };
    let data = generate(&synth)
        .and_then(|d| d.to_dataset(cfg.conf_threshold))
        .map_err(|e| e.to_string())?;
    let err = |e: agrl::Error| e.to_string();
    let baseline = evaluate(&data, |t| baseline_representation(t, NUM_REGIONS, cfg.frames, Strategy::First)).map_err(err)?;
    let mut out = json!({ "baseline": curve(&baseline) });
    if epochs > 0 {
        let cfg = Variant::Full.configure(&cfg);
        let set = TrainSet::new(&data).map_err(err)?;
        let state = TrainState::init(&cfg, set.dim, set.classes).map_err(err)?;
        let state = train(&cfg, &set, state, |_| {}).map_err(err)?;
        let full = evaluate(&data, |t| extract_representation(t, &state.model, cfg.frames, Strategy::First)).map_err(err)?;
        out["full"] = curve(&full);
    }
    Ok(out)
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn graphs(seed: u32, occlusion: &str, frames: u32, gamma: f64) -> Result<String, JsError> {
    to_js(graphs_json(seed.into(), occlusion, frames as usize, gamma))
}

#[wasm_bindgen]
pub fn propagation(seed: u32, occlusion: &str, frames: u32, alpha: f64, layers: u32, gamma: f64) -> Result<String, JsError> {
    to_js(propagation_json(seed.into(), occlusion, frames as usize, alpha, layers as usize, gamma))
}

#[wasm_bindgen]
pub fn ranking(seed: u32, occlusion_prob: f64, epochs: u32) -> Result<String, JsError> {
    to_js(ranking_json(seed.into(), occlusion_prob, epochs as usize))
}
