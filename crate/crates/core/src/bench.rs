//! Ablation runs on synthetic data: train a variant, then rank the test
//! tracklets against each other.

use crate::adjacency::GraphKind;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::evalkit::{baseline_representation, extract_representation, rank, Entry, RankingResult, Strategy};
use crate::pose::NUM_REGIONS;
use crate::sampling::Split;
use crate::synth::{generate, SynthConfig};
use crate::trainer::{train, TrainConfig, TrainSet, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Temporal mean of the global region, no training.
    Baseline,
    /// Pose graph only, no subsequence consistency.
    PoseOnly,
    /// Affinity graph only, no subsequence consistency.
    AffinityOnly,
    /// Both graphs with subsequence consistency.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::PoseOnly, Variant::AffinityOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PoseOnly => "+pose graph",
            Variant::AffinityOnly => "+affinity graph",
            Variant::Full => "full",
        }
    }

    /// The training configuration for this variant, derived from `base`.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        match self {
            Variant::Baseline | Variant::Full => base.clone(),
            Variant::PoseOnly => TrainConfig {
                graph: GraphKind::PoseOnly,
                subsequences: 0,
                ..base.clone()
            },
            Variant::AffinityOnly => TrainConfig {
                graph: GraphKind::AffinityOnly,
                subsequences: 0,
                ..base.clone()
            },
        }
    }
}

/// Test tracklets serve as both queries and gallery.
pub fn evaluate(data: &Dataset, embed: impl Fn(&crate::dataset::Tracklet) -> Result<Vec<f64>>) -> Result<RankingResult> {
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for t in data.tracklets.iter().filter(|t| t.record.split != Split::Train) {
        let entry = Entry {
            vector: embed(t)?,
            identity: t.record.identity,
            camera: t.record.camera,
        };
        if t.record.split.is_query() {
            queries.push(entry.clone());
        }
        if t.record.split.is_gallery() {
            gallery.push(entry);
        }
    }
    rank(&queries, &gallery)
}

/// Trains (unless baseline) and evaluates one variant.
pub fn run_variant(data: &Dataset, variant: Variant, base: &TrainConfig, strategy: Strategy) -> Result<RankingResult> {
    if variant == Variant::Baseline {
        return evaluate(data, |t| baseline_representation(t, NUM_REGIONS, base.frames, strategy));
    }
    let cfg = variant.configure(base);
    let set = TrainSet::new(data)?;
    let state = TrainState::init(&cfg, set.dim, set.classes)?;
    let state = train(&cfg, &set, state, |_| {})?;
    evaluate(data, |t| extract_representation(t, &state.model, cfg.frames, strategy))
}

/// Synthetic benchmark for one seed: 32 identities, 4 tracklets each,
/// occlusion probability 0.3.
pub fn benchmark_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..SynthConfig::default()
    }
}

/// Training settings for the synthetic benchmark. The dataset is tiny, so
/// the step size is larger and the schedule shorter than the defaults.
pub fn benchmark_train(seed: u64, layers: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 30,
        lr_step: 30,
        layers,
        seed,
        ..TrainConfig::default()
    }
}

/// Rank-1 of `variant` with `layers` propagation layers, one entry per seed.
pub fn benchmark_rank1(variant: Variant, layers: usize, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&seed| {
            let train = benchmark_train(seed, layers);
            let data = generate(&benchmark_synth(seed))?.to_dataset(train.conf_threshold)?;
            Ok(run_variant(&data, variant, &train, Strategy::First)?.rank(1))
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
