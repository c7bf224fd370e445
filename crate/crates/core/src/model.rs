//! The two-branch model: graph propagation with attention pooling, and the
//! global temporal-mean branch, each followed by a BNNeck and a classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjacency::{build_pose_adjacency, CombinedAdjacency, GraphKind, PoseAdjacency};
use crate::attention::{attend, graph_branch_vars, plan_subsequences, SubsequencePlan};
use crate::diff::{grad_check, GradCheckReport, Tape, Tensor, Var, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::heads::{
    batch_hard_soft_triplet, cross_entropy, global_representation, global_representation_var, total_loss, Classifier,
    LossTerms,
};
use crate::pose::{Part, PartSet, NUM_REGIONS};
use crate::propagation::{BatchNorm, BatchNormVars, BatchStats, Mode, PropagationLayer, PropagationStack, StackVars};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub regions: usize,
    pub classes: usize,
    pub layers: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub graph: GraphKind,
}

impl ModelConfig {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            regions: NUM_REGIONS,
            classes,
            layers: crate::propagation::DEFAULT_LAYERS,
            alpha: crate::propagation::DEFAULT_ALPHA,
            gamma: crate::propagation::DEFAULT_GAMMA,
            graph: GraphKind::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub stack: PropagationStack,
    pub neck_global: BatchNorm,
    pub neck_graph: BatchNorm,
    pub cls_global: Classifier,
    pub cls_graph: Classifier,
    pub regions: usize,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub stack: StackVars,
    pub neck_global: BatchNormVars,
    pub neck_graph: BatchNormVars,
    pub cls_global: Var,
    pub cls_graph: Var,
}

impl ModelVars {
    /// Leaves in the order of [`Model::trainable`].
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.stack.layers {
            out.extend([l.weight, l.bias, l.bn.gain, l.bn.shift]);
        }
        out.extend([
            self.neck_global.gain,
            self.neck_global.shift,
            self.neck_graph.gain,
            self.neck_graph.shift,
            self.cls_global,
            self.cls_graph,
        ]);
        out
    }

    /// Replaces the trainable slots with `leaves`, given in [`ModelVars::trainable`] order.
    pub fn bind_trainable(&mut self, leaves: &[Var]) -> Result<()> {
        if leaves.len() != self.trainable().len() {
            return Err(Error::shape("bind_trainable", format!("{} leaves for {} slots", leaves.len(), self.trainable().len())));
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("length checked");
        for l in &mut self.stack.layers {
            l.weight = next();
            l.bias = next();
            l.bn.gain = next();
            l.bn.shift = next();
        }
        self.neck_global.gain = next();
        self.neck_global.shift = next();
        self.neck_graph.gain = next();
        self.neck_graph.shift = next();
        self.cls_global = next();
        self.cls_graph = next();
        Ok(())
    }
}

/// Batch statistics gathered during one training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardStats {
    pub propagation: Vec<BatchStats>,
    pub neck_global: BatchStats,
    pub neck_graph: BatchStats,
}

#[derive(Clone, Debug)]
pub struct BatchForward {
    pub loss: LossTerms,
    pub stats: ForwardStats,
    pub adjacency: Vec<Vec<CombinedAdjacency>>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.regions == 0 || cfg.dim == 0 || cfg.classes == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let stack = PropagationStack::new(cfg.dim, cfg.layers, cfg.alpha, cfg.gamma, cfg.graph, rng)?;
        Ok(Self {
            stack,
            neck_global: BatchNorm::new(cfg.dim),
            neck_graph: BatchNorm::new(cfg.dim),
            cls_global: Classifier::init(cfg.dim, cfg.classes, rng),
            cls_graph: Classifier::init(cfg.dim, cfg.classes, rng),
            regions: cfg.regions,
        })
    }

    pub fn dim(&self) -> usize {
        self.neck_global.dim()
    }

    pub fn classes(&self) -> usize {
        self.cls_global.classes()
    }

    /// Every named tensor, trainable parameters first, then running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.named_trainable();
        for (i, l) in self.stack.layers.iter().enumerate() {
            out.push((format!("prop.{i}.running_mean"), &l.bn.running_mean));
            out.push((format!("prop.{i}.running_var"), &l.bn.running_var));
        }
        for (name, bn) in [("neck_global", &self.neck_global), ("neck_graph", &self.neck_graph)] {
            out.push((format!("{name}.running_mean"), &bn.running_mean));
            out.push((format!("{name}.running_var"), &bn.running_var));
        }
        out
    }

    fn named_trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.stack.layers.iter().enumerate() {
            out.push((format!("prop.{i}.weight"), &l.weight));
            out.push((format!("prop.{i}.bias"), &l.bias));
            out.push((format!("prop.{i}.gain"), &l.bn.gain));
            out.push((format!("prop.{i}.shift"), &l.bn.shift));
        }
        out.push(("neck_global.gain".into(), &self.neck_global.gain));
        out.push(("neck_global.shift".into(), &self.neck_global.shift));
        out.push(("neck_graph.gain".into(), &self.neck_graph.gain));
        out.push(("neck_graph.shift".into(), &self.neck_graph.shift));
        out.push(("cls_global.weight".into(), &self.cls_global.weight));
        out.push(("cls_graph.weight".into(), &self.cls_graph.weight));
        out
    }

    /// Trainable tensors in a fixed order.
    pub fn trainable(&self) -> Vec<&Tensor> {
        self.named_trainable().into_iter().map(|(_, t)| t).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let n = self.trainable().len();
        self.named_tensors_mut().into_iter().take(n).map(|(_, t)| t).collect()
    }

    /// Mutable access to every named tensor, in [`Model::named_tensors`] order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        let Model {
            stack,
            neck_global,
            neck_graph,
            cls_global,
            cls_graph,
            ..
        } = self;
        let mut trainable: Vec<&mut Tensor> = Vec::new();
        let mut running: Vec<&mut Tensor> = Vec::new();
        for PropagationLayer { weight, bias, bn } in stack.layers.iter_mut() {
            trainable.extend([weight, bias, &mut bn.gain, &mut bn.shift]);
            running.extend([&mut bn.running_mean, &mut bn.running_var]);
        }
        for bn in [neck_global, neck_graph] {
            trainable.extend([&mut bn.gain, &mut bn.shift]);
            running.extend([&mut bn.running_mean, &mut bn.running_var]);
        }
        trainable.extend([&mut cls_global.weight, &mut cls_graph.weight]);
        trainable.extend(running);
        names.into_iter().zip(trainable).collect()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let reg = |tape: &mut Tape, t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let stack = self.stack.register(tape, trainable);
        let neck_global = self.neck_global.register(tape, trainable);
        let neck_graph = self.neck_graph.register(tape, trainable);
        let cls_global = reg(tape, &self.cls_global.weight);
        let cls_graph = reg(tape, &self.cls_graph.weight);
        ModelVars {
            stack,
            neck_global,
            neck_graph,
            cls_global,
            cls_graph,
        }
    }

    /// Training forward pass over a batch of tracklets with equal frame
    /// counts. `plans[b]` selects the subsequences of tracklet `b`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        nodes: &[Tensor],
        pose: &[PoseAdjacency],
        labels: &[usize],
        plans: &[SubsequencePlan],
        frozen: Option<&[Vec<CombinedAdjacency>]>,
    ) -> Result<BatchForward> {
        let b = nodes.len();
        if b == 0 || pose.len() != b || labels.len() != b || plans.len() != b {
            return Err(Error::shape(
                "forward_batch",
                format!(
                    "{b} tracklets, {} pose graphs, {} labels, {} plans",
                    pose.len(),
                    labels.len(),
                    plans.len()
                ),
            ));
        }
        let n = nodes[0].rows();
        if nodes.iter().any(|t| t.rows() != n || t.cols() != self.dim()) {
            return Err(Error::shape("forward_batch", "tracklets differ in node count or feature width"));
        }
        let mut stacked = Vec::with_capacity(b * n * self.dim());
        for t in nodes {
            stacked.extend_from_slice(t.data());
        }
        let x = tape.constant(Tensor::from_parts(vec![b * n, self.dim()], stacked));
        let prop = self.stack.forward(tape, &vars.stack, x, pose, Mode::Train, frozen)?;

        let mut graph_reps = Vec::new();
        let mut graph_labels = Vec::new();
        let mut global_reps = Vec::with_capacity(b);
        for (i, plan) in plans.iter().enumerate() {
            let rows: Vec<usize> = (i * n..(i + 1) * n).collect();
            let block = tape.index_select(prop.output, &rows)?;
            let reps = graph_branch_vars(tape, block, self.regions, plan)?;
            graph_labels.extend(std::iter::repeat_n(labels[i], reps.len()));
            graph_reps.extend(reps);
            let raw = tape.index_select(x, &rows)?;
            global_reps.push(global_representation_var(tape, raw, self.regions)?);
        }
        let graph = tape.concat(&graph_reps)?;
        let global = tape.concat(&global_reps)?;

        let (global_bn, s_global) = self.neck_global.apply(tape, vars.neck_global, global, Mode::Train)?;
        let (graph_bn, s_graph) = self.neck_graph.apply(tape, vars.neck_graph, graph, Mode::Train)?;
        let xent_global = cross_entropy(tape, global_bn, labels, vars.cls_global)?;
        let htri_global = batch_hard_soft_triplet(tape, global, labels)?;
        let xent_graph = cross_entropy(tape, graph_bn, &graph_labels, vars.cls_graph)?;
        let htri_graph = batch_hard_soft_triplet(tape, graph, &graph_labels)?;
        let loss = total_loss(tape, xent_global, htri_global, xent_graph, htri_graph)?;
        Ok(BatchForward {
            loss,
            stats: ForwardStats {
                propagation: prop.stats,
                neck_global: s_global.expect("train mode"),
                neck_graph: s_graph.expect("train mode"),
            },
            adjacency: prop.adjacency,
        })
    }

    pub fn update_running(&mut self, stats: &ForwardStats) {
        self.stack.update_running(&stats.propagation);
        self.neck_global.update_running(&stats.neck_global);
        self.neck_graph.update_running(&stats.neck_graph);
    }

    /// Evaluation-mode representations `(x_graph, x_gap)` before the BNNecks.
    pub fn branches(&self, nodes: &Tensor, part_sets: &[PartSet]) -> Result<(Vec<f64>, Vec<f64>)> {
        let propagated = crate::propagation::propagate(&self.stack, nodes, part_sets, Mode::Eval)?;
        Ok((attend(&propagated)?, global_representation(nodes, self.regions)?))
    }

    /// `BN(x_graph) ∥ BN(x_gap)` in evaluation mode.
    pub fn embed(&self, nodes: &Tensor, part_sets: &[PartSet]) -> Result<Vec<f64>> {
        let (graph, global) = self.branches(nodes, part_sets)?;
        let d = self.dim();
        let g = self.neck_graph.eval_rows(&Tensor::from_parts(vec![1, d], graph));
        let p = self.neck_global.eval_rows(&Tensor::from_parts(vec![1, d], global));
        let mut out = g.into_data();
        out.extend(p.into_data());
        Ok(out)
    }

    pub fn pose_graph(part_sets: &[PartSet]) -> PoseAdjacency {
        build_pose_adjacency(part_sets)
    }
}

/// Finite-difference check of the whole training loss on a toy batch:
/// P=2 identities, K=2 tracklets each, T=3 frames, d=8, C=4, two layers and
/// two subsequences. The adjacency is computed once at the base point and
/// held fixed, since it is a stop-gradient function of the features.
pub fn end_to_end_grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, k, t, d, c) = (2, 2, 3, 8, 4);
    let model = Model::new(&ModelConfig::new(d, c), &mut rng)?;
    let nodes = (0..p * k)
        .map(|_| Tensor::matrix(t * NUM_REGIONS, d, (0..t * NUM_REGIONS * d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let pose: Vec<PoseAdjacency> = (0..p * k)
        .map(|_| {
            let sets: Vec<PartSet> = (0..t * NUM_REGIONS)
                .map(|_| {
                    let mut s = PartSet::EMPTY;
                    for part in Part::ALL {
                        if rng.random_bool(0.5) {
                            s.insert(part);
                        }
                    }
                    s
                })
                .collect();
            build_pose_adjacency(&sets)
        })
        .collect();
    let labels = [0, 0, 3, 3];
    let plans = (0..p * k)
        .map(|_| plan_subsequences(t, 2, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let frozen = {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, false);
        model.forward_batch(&mut tape, &vars, &nodes, &pose, &labels, &plans, None)?.adjacency
    };
    let point: Vec<Tensor> = model.trainable().into_iter().cloned().collect();
    grad_check(
        |tape, leaves| {
            let mut vars = model.register(tape, false);
            vars.bind_trainable(leaves)?;
            let out = model.forward_batch(tape, &vars, &nodes, &pose, &labels, &plans, Some(&frozen))?;
            Ok(out.loss.total)
        },
        &point,
        DEFAULT_STEP,
    )
}
