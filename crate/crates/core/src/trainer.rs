//! Adam optimization of the model over PK batches.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjacency::{build_pose_adjacency, GraphKind};
use crate::attention::{plan_subsequences, SubsequencePlan};
use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Tracklet};
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::heads::LossValues;
use crate::model::{Model, ModelConfig};
use crate::pose::NUM_REGIONS;
use crate::propagation::{BatchNorm, PropagationLayer, PropagationStack};
use crate::sampling::{pk_batch, restricted_random_sample, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub frames: usize,
    pub p: usize,
    pub k: usize,
    pub subsequences: usize,
    pub layers: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub graph: GraphKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub conf_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            epochs: 300,
            lr_step: 100,
            lr_decay: 0.1,
            frames: 8,
            p: 4,
            k: 4,
            subsequences: 3,
            layers: 2,
            alpha: 0.1,
            gamma: 1.0,
            graph: GraphKind::Both,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            conf_threshold: crate::pose::DEFAULT_CONF_THRESHOLD,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("adam_eps", self.adam_eps),
            ("bn_eps", self.bn_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config("weight_decay and gamma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("bn_momentum", self.bn_momentum)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.frames == 0 || self.layers == 0 || self.lr_step == 0 {
            return Err(Error::Config("frames, layers and lr_step must be at least 1".into()));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config("P and K must both be at least 2".into()));
        }
        if self.subsequences >= self.frames && self.subsequences > 0 {
            return Err(Error::Config(format!(
                "subsequences ({}) must be smaller than frames ({})",
                self.subsequences, self.frames
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            dim,
            regions: NUM_REGIONS,
            classes,
            layers: self.layers,
            alpha: self.alpha,
            gamma: self.gamma,
            graph: self.graph,
        }
    }

    /// Learning rate during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = epoch.saturating_sub(1) / self.lr_step;
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adam_step", format!("parameter {i}: {:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, gd) = (p.data_mut(), g.data());
        for (j, (m, v)) in m.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let grad = gd[j] + cfg.weight_decay * pd[j];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * grad;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * grad * grad;
            pd[j] -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Loss values of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iter: usize,
    pub loss: LossValues,
}

pub const LOSS_HEADER: &str = "epoch,iter,l_total,l_xent_global,l_htri_global,l_xent_graph,l_htri_graph";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.iter, l.total, l.xent_global, l.htri_global, l.xent_graph, l.htri_graph
        )
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

/// Random stream for 1-based `epoch`; stream 0 initializes the model.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Training tracklets with their dense class labels.
pub struct TrainSet<'a> {
    pub tracklets: Vec<&'a Tracklet>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub dim: usize,
}

impl<'a> TrainSet<'a> {
    pub fn new(data: &'a Dataset) -> Result<Self> {
        let tracklets: Vec<&Tracklet> = data
            .tracklets
            .iter()
            .filter(|t| t.record.split == Split::Train && !t.record.is_distractor())
            .collect();
        let mut ids: Vec<i64> = tracklets.iter().map(|t| t.record.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 2 {
            return Err(Error::invalid(format!("training needs at least 2 identities, found {}", ids.len())));
        }
        let labels = tracklets
            .iter()
            .map(|t| ids.binary_search(&t.record.identity).expect("collected above"))
            .collect();
        let dim = tracklets[0].features.dim;
        if let Some(t) = tracklets.iter().find(|t| t.features.dim != dim) {
            return Err(Error::format(&t.record.feature_path, format!("feature width {} differs from {dim}", t.features.dim)));
        }
        Ok(Self {
            tracklets,
            labels,
            classes: ids.len(),
            dim,
        })
    }
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, dim: usize, classes: usize) -> Result<Self> {
        let mut rng = epoch_rng(cfg.seed, 0);
        let mut model = Model::new(&cfg.model_config(dim, classes), &mut rng)?;
        for bn in model
            .stack
            .layers
            .iter_mut()
            .map(|l| &mut l.bn)
            .chain([&mut model.neck_global, &mut model.neck_graph])
        {
            bn.eps = cfg.bn_eps;
            bn.momentum = cfg.bn_momentum;
        }
        let adam = AdamState::new(model.trainable());
        Ok(Self {
            model,
            adam,
            epoch: 0,
            seed: cfg.seed,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        for (name, t) in self.model.named_tensors() {
            c.push(name, t.clone());
        }
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            c.push(format!("adam.m.{i}"), m.clone());
            c.push(format!("adam.v.{i}"), v.clone());
        }
        let s = &self.model.stack;
        let bn = &self.model.neck_global;
        let meta = vec![
            self.epoch as f64,
            (self.seed >> 32) as f64,
            (self.seed & 0xffff_ffff) as f64,
            self.adam.step as f64,
            s.alpha,
            s.gamma,
            graph_code(s.graph),
            self.model.regions as f64,
            bn.eps,
            bn.momentum,
        ];
        c.push("meta", Tensor::from_parts(vec![1, meta.len()], meta));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, path: &Path) -> Result<Self> {
        let meta = c.require("meta", path)?.data().to_vec();
        if meta.len() != 10 {
            return Err(Error::format(path, "malformed checkpoint metadata"));
        }
        let graph = graph_from_code(meta[6]).ok_or_else(|| Error::format(path, "unknown graph kind"))?;
        let layers = (0..).take_while(|i| c.get(&format!("prop.{i}.weight")).is_some()).count();
        let get = |name: String| c.require(&name, path).cloned();
        let bn = |prefix: &str| -> Result<BatchNorm> {
            Ok(BatchNorm {
                gain: get(format!("{prefix}.gain"))?,
                shift: get(format!("{prefix}.shift"))?,
                running_mean: get(format!("{prefix}.running_mean"))?,
                running_var: get(format!("{prefix}.running_var"))?,
                eps: meta[8],
                momentum: meta[9],
            })
        };
        let layer_list = (0..layers)
            .map(|i| {
                Ok(PropagationLayer {
                    weight: get(format!("prop.{i}.weight"))?,
                    bias: get(format!("prop.{i}.bias"))?,
                    bn: bn(&format!("prop.{i}"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stack = PropagationStack::from_layers(layer_list, meta[4], meta[5], graph)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let model = Model {
            stack,
            neck_global: bn("neck_global")?,
            neck_graph: bn("neck_graph")?,
            cls_global: crate::heads::Classifier {
                weight: get("cls_global.weight".into())?,
            },
            cls_graph: crate::heads::Classifier {
                weight: get("cls_graph.weight".into())?,
            },
            regions: meta[7] as usize,
        };
        let n = model.trainable().len();
        let adam = AdamState {
            m: (0..n).map(|i| get(format!("adam.m.{i}"))).collect::<Result<_>>()?,
            v: (0..n).map(|i| get(format!("adam.v.{i}"))).collect::<Result<_>>()?,
            step: meta[3] as u64,
        };
        for (p, m) in model.trainable().iter().zip(&adam.m) {
            if p.shape() != m.shape() {
                return Err(Error::format(path, "optimizer moments do not match parameter shapes"));
            }
        }
        Ok(Self {
            model,
            adam,
            epoch: meta[0] as usize,
            seed: ((meta[1] as u64) << 32) | meta[2] as u64,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

fn graph_code(g: GraphKind) -> f64 {
    match g {
        GraphKind::Both => 0.0,
        GraphKind::PoseOnly => 1.0,
        GraphKind::AffinityOnly => 2.0,
    }
}

fn graph_from_code(c: f64) -> Option<GraphKind> {
    match c as i64 {
        0 => Some(GraphKind::Both),
        1 => Some(GraphKind::PoseOnly),
        2 => Some(GraphKind::AffinityOnly),
        _ => None,
    }
}

/// Runs one optimization step on the given batch.
fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    set: &TrainSet,
    rng: &mut ChaCha8Rng,
    lr: f64,
) -> Result<LossValues> {
    let batch = pk_batch(&set.labels, cfg.p, cfg.k, rng)?;
    let mut nodes = Vec::with_capacity(batch.len());
    let mut pose = Vec::with_capacity(batch.len());
    let mut plans: Vec<SubsequencePlan> = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &i in &batch {
        let t = set.tracklets[i];
        let frames = restricted_random_sample(t.frames(), cfg.frames, rng)?;
        nodes.push(t.nodes(&frames));
        pose.push(build_pose_adjacency(&t.node_part_sets(&frames)));
        plans.push(plan_subsequences(cfg.frames, cfg.subsequences, rng)?);
        labels.push(set.labels[i]);
    }
    let mut tape = Tape::new();
    let vars = state.model.register(&mut tape, true);
    let out = state.model.forward_batch(&mut tape, &vars, &nodes, &pose, &labels, &plans, None)?;
    let values = out.loss.values(&tape);
    let mut grads = tape.backward(out.loss.total)?;
    let grads: Vec<Tensor> = vars.trainable().into_iter().map(|v| grads.take(v)).collect();
    let adam_cfg = AdamConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    adam_step(&mut state.model.trainable_mut(), &grads, &mut state.adam, lr, &adam_cfg)?;
    state.model.update_running(&out.stats);
    Ok(values)
}

/// Trains until `cfg.epochs` epochs are complete, starting from `state`.
/// Every iteration is reported to `log`.
pub fn train(
    cfg: &TrainConfig,
    set: &TrainSet,
    mut state: TrainState,
    mut log: impl FnMut(&LossRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    let iterations = (set.classes / cfg.p).max(1);
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut rng = epoch_rng(state.seed, epoch);
        let lr = cfg.lr_at(epoch);
        for iter in 1..=iterations {
            let loss = match train_step(&mut state, cfg, set, &mut rng, lr) {
                Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { epoch, iter }),
                other => other?,
            };
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, iter });
            }
            log(&LossRecord { epoch, iter, loss });
        }
        state.epoch = epoch;
    }
    Ok(state)
}
