//! Graph feature propagation.
//!
//! Each layer updates node features as
//! `X ← (1 − α)·X + α·A·F(X)` where `F` is a fully connected map followed by
//! batch normalization over the node axis, and `A` is the adaptive adjacency
//! rebuilt from the layer's input features. The adjacency is a constant on
//! the tape: no gradient flows through its construction.

use rand::Rng;

use crate::adjacency::{adaptive_adjacency, build_pose_adjacency, CombinedAdjacency, GraphKind, PoseAdjacency};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pose::PartSet;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_LAYERS: usize = 2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[1, d]),
            shift: Tensor::zeros(&[1, d]),
            running_mean: Tensor::zeros(&[1, d]),
            running_var: Tensor::ones(&[1, d]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.cols()
    }

    /// Normalizes `x` on the tape. Training mode uses batch statistics and
    /// reports them; evaluation mode applies the running statistics.
    pub fn apply(&self, tape: &mut Tape, vars: BatchNormVars, x: Var, mode: Mode) -> Result<(Var, Option<BatchStats>)> {
        match mode {
            Mode::Train => {
                let y = tape.batch_norm(x, vars.gain, vars.shift, self.eps)?;
                let (mean, var) = tape.batch_stats(y).expect("batch_norm node");
                let stats = BatchStats {
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                    count: tape.value(x).rows(),
                };
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                let inv_std = self.running_var.map(|v| 1.0 / (v + self.eps).sqrt());
                let rm = tape.constant(self.running_mean.clone());
                let inv = tape.constant(inv_std);
                let centered = tape.sub(x, rm)?;
                let scale = tape.mul(vars.gain, inv)?;
                let scaled = tape.mul(centered, scale)?;
                Ok((tape.add(scaled, vars.shift)?, None))
            }
        }
    }

    /// Momentum update of the running statistics. The running variance uses
    /// the unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BatchNormVars {
        BatchNormVars {
            gain: register(tape, &self.gain, trainable),
            shift: register(tape, &self.shift, trainable),
        }
    }

    /// Plain evaluation-mode normalization of the rows of `x`.
    pub fn eval_rows(&self, x: &Tensor) -> Tensor {
        let d = self.dim();
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let inv = 1.0 / (self.running_var.data()[j] + self.eps).sqrt();
                *v = (*v - self.running_mean.data()[j]) * inv * self.gain.data()[j] + self.shift.data()[j];
            }
        }
        debug_assert_eq!(out.cols(), d);
        out
    }
}

fn register(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormVars {
    pub gain: Var,
    pub shift: Var,
}

/// Batch statistics observed in one training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// `F(x) = BN(x·W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: BatchNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub bn: BatchNormVars,
}

impl PropagationLayer {
    /// Uniform `±1/√d` initialization for weight and bias.
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        Self {
            weight: Tensor::from_parts(vec![d, d], draw(d * d)),
            bias: Tensor::from_parts(vec![1, d], draw(d)),
            bn: BatchNorm::new(d),
        }
    }

    /// Weight `I`, zero bias, unit gain and zero shift.
    pub fn identity(d: usize) -> Self {
        Self {
            weight: Tensor::identity(d),
            bias: Tensor::zeros(&[1, d]),
            bn: BatchNorm::new(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> LayerVars {
        LayerVars {
            weight: register(tape, &self.weight, trainable),
            bias: register(tape, &self.bias, trainable),
            bn: self.bn.register(tape, trainable),
        }
    }
}

/// Affine map then batch normalization over the rows of `nodes`.
pub fn layer_transform(
    tape: &mut Tape,
    layer: &PropagationLayer,
    vars: LayerVars,
    nodes: Var,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    if mode == Mode::Train && tape.value(nodes).rows() < 2 {
        return Err(Error::invalid("training-mode transform needs at least 2 nodes"));
    }
    let lin = tape.matmul(nodes, vars.weight)?;
    let lin = tape.add(lin, vars.bias)?;
    layer.bn.apply(tape, vars.bn, lin, mode)
}

/// One propagation step over a batch of equally sized tracklet graphs whose
/// nodes are stacked in `x_prev`; `blocks[b]` is the adjacency of tracklet `b`.
pub fn propagate_layer(
    tape: &mut Tape,
    x_prev: Var,
    blocks: &[CombinedAdjacency],
    layer: &PropagationLayer,
    vars: LayerVars,
    alpha: f64,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    let rows = tape.value(x_prev).rows();
    let n = blocks.first().map_or(0, CombinedAdjacency::size);
    if blocks.is_empty() || blocks.iter().any(|b| b.size() != n) || n * blocks.len() != rows {
        return Err(Error::shape(
            "propagate_layer",
            format!("{} node rows do not match {} adjacency blocks of size {n}", rows, blocks.len()),
        ));
    }
    let (messages, stats) = layer_transform(tape, layer, vars, x_prev, mode)?;
    let mut aggregated = Vec::with_capacity(blocks.len());
    for (b, adj) in blocks.iter().enumerate() {
        let idx: Vec<usize> = (b * n..(b + 1) * n).collect();
        let local = if blocks.len() == 1 { messages } else { tape.index_select(messages, &idx)? };
        let a = tape.constant(adj.matrix().clone());
        aggregated.push(tape.matmul(a, local)?);
    }
    let agg = if aggregated.len() == 1 { aggregated[0] } else { tape.concat(&aggregated)? };
    let keep = tape.scale(x_prev, 1.0 - alpha)?;
    let mix = tape.scale(agg, alpha)?;
    Ok((tape.add(keep, mix)?, stats))
}

/// `L` propagation layers with the residual weight `alpha` and the graph
/// mixing weight `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationStack {
    pub layers: Vec<PropagationLayer>,
    pub alpha: f64,
    pub gamma: f64,
    pub graph: GraphKind,
}

#[derive(Clone, Debug)]
pub struct StackVars {
    pub layers: Vec<LayerVars>,
}

/// Result of running the stack on a tape.
#[derive(Clone, Debug)]
pub struct Propagated {
    pub output: Var,
    /// Adjacency used at each layer, per tracklet.
    pub adjacency: Vec<Vec<CombinedAdjacency>>,
    /// Training-mode batch statistics per layer.
    pub stats: Vec<BatchStats>,
}

impl PropagationStack {
    pub fn new(d: usize, layers: usize, alpha: f64, gamma: f64, graph: GraphKind, rng: &mut impl Rng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("propagation stack needs at least one layer"));
        }
        Self::from_layers((0..layers).map(|_| PropagationLayer::init(d, rng)).collect(), alpha, gamma, graph)
    }

    pub fn from_layers(layers: Vec<PropagationLayer>, alpha: f64, gamma: f64, graph: GraphKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("propagation stack needs at least one layer"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        Ok(Self {
            layers,
            alpha,
            gamma,
            graph,
        })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> StackVars {
        StackVars {
            layers: self.layers.iter().map(|l| l.register(tape, trainable)).collect(),
        }
    }

    /// Runs every layer over the stacked nodes of `pose.len()` tracklets.
    /// With `frozen` set, those adjacency matrices are used instead of being
    /// rebuilt from the features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &StackVars,
        x: Var,
        pose: &[PoseAdjacency],
        mode: Mode,
        frozen: Option<&[Vec<CombinedAdjacency>]>,
    ) -> Result<Propagated> {
        let n = pose.first().map_or(0, PoseAdjacency::size);
        if pose.is_empty() || tape.value(x).rows() != n * pose.len() {
            return Err(Error::shape(
                "propagate",
                format!("{} node rows for {} tracklets of {n} nodes", tape.value(x).rows(), pose.len()),
            ));
        }
        let mut current = x;
        let mut adjacency = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        for (l, (layer, lv)) in self.layers.iter().zip(&vars.layers).enumerate() {
            let blocks = match frozen {
                Some(f) => f[l].clone(),
                None => {
                    let values = tape.value(current);
                    pose.iter()
                        .enumerate()
                        .map(|(b, ap)| {
                            let idx: Vec<usize> = (b * n..(b + 1) * n).collect();
                            adaptive_adjacency(ap, &values.select_rows(&idx), self.graph, self.gamma)
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            };
            let (next, s) = propagate_layer(tape, current, &blocks, layer, *lv, self.alpha, mode)?;
            stats.extend(s);
            adjacency.push(blocks);
            current = next;
        }
        Ok(Propagated {
            output: current,
            adjacency,
            stats,
        })
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            layer.bn.update_running(s);
        }
    }
}

/// Propagates one tracklet's nodes outside any training tape.
pub fn propagate(stack: &PropagationStack, x: &Tensor, part_sets: &[PartSet], mode: Mode) -> Result<Tensor> {
    if x.rows() != part_sets.len() {
        return Err(Error::shape(
            "propagate",
            format!("{} nodes but {} part sets", x.rows(), part_sets.len()),
        ));
    }
    let mut tape = Tape::new();
    let vars = stack.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let pose = [build_pose_adjacency(part_sets)];
    let out = stack.forward(&mut tape, &vars, xv, &pose, mode, None)?;
    Ok(tape.value(out.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjacency::{build_affinity_adjacency, combine};
    use crate::diff::{grad_check, DEFAULT_STEP};
    use crate::pose::{Part, NUM_REGIONS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, d: usize) -> PropagationLayer {
        let mut l = PropagationLayer::init(d, rng);
        l.bn.gain = random(rng, 1, d).map(|x| 1.0 + 0.25 * x);
        l.bn.shift = random(rng, 1, d).map(|x| 0.1 * x);
        l.bn.running_mean = random(rng, 1, d);
        l.bn.running_var = random(rng, 1, d).map(|x| 0.5 + x.abs());
        l
    }

    fn run_transform(layer: &PropagationLayer, x: &Tensor, mode: Mode) -> Tensor {
        let mut tape = Tape::new();
        let vars = layer.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (y, _) = layer_transform(&mut tape, layer, vars, xv, mode).unwrap();
        tape.value(y).clone()
    }

    fn random_part_sets(rng: &mut ChaCha8Rng, n: usize) -> Vec<PartSet> {
        (0..n)
            .map(|_| {
                let mut s = PartSet::EMPTY;
                for p in Part::ALL {
                    if rng.random_bool(0.4) {
                        s.insert(p);
                    }
                }
                s
            })
            .collect()
    }

    #[test]
    fn identity_layer_in_eval_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 6, 4);
        let y = run_transform(&PropagationLayer::identity(4), &x, Mode::Eval);
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn train_mode_standardizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = PropagationLayer::init(5, &mut rng);
        layer.bn.eps = 0.0;
        let x = random(&mut rng, 9, 5);
        let y = run_transform(&layer, &x, Mode::Train);
        for j in 0..5 {
            let col: Vec<f64> = (0..9).map(|i| y.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 9.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn transform_matches_two_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(&mut rng, 4);
        let x = random(&mut rng, 7, 4);
        // affine step
        let mut affine = x.matmul(&layer.weight).unwrap();
        for i in 0..7 {
            for j in 0..4 {
                affine.set(i, j, affine.at(i, j) + layer.bias.data()[j]);
            }
        }
        // train-mode normalization step
        let mut expect = affine.clone();
        for j in 0..4 {
            let col: Vec<f64> = (0..7).map(|i| affine.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 7.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            for i in 0..7 {
                let z = (affine.at(i, j) - mean) / (var + layer.bn.eps).sqrt();
                expect.set(i, j, z * layer.bn.gain.data()[j] + layer.bn.shift.data()[j]);
            }
        }
        assert!(run_transform(&layer, &x, Mode::Train).max_abs_diff(&expect) < 1e-12);
        // eval-mode normalization step
        let expect_eval = layer.bn.eval_rows(&affine);
        assert!(run_transform(&layer, &x, Mode::Eval).max_abs_diff(&expect_eval) < 1e-12);
    }

    #[test]
    fn train_mode_needs_two_nodes() {
        let layer = PropagationLayer::identity(3);
        let mut tape = Tape::new();
        let vars = layer.register(&mut tape, false);
        let x = tape.constant(Tensor::ones(&[1, 3]));
        assert!(layer_transform(&mut tape, &layer, vars, x, Mode::Train).is_err());
    }

    #[test]
    fn running_stats_update() {
        let mut bn = BatchNorm::new(1);
        bn.update_running(&BatchStats {
            mean: vec![2.0],
            var: vec![1.0],
            count: 2,
        });
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    fn one_layer(x: &Tensor, adj: &CombinedAdjacency, layer: &PropagationLayer, alpha: f64, mode: Mode) -> Tensor {
        let mut tape = Tape::new();
        let vars = layer.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (y, _) = propagate_layer(&mut tape, xv, std::slice::from_ref(adj), layer, vars, alpha, mode).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn alpha_zero_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 14, 3);
        let sets = random_part_sets(&mut rng, 14);
        let layers = vec![random_layer(&mut rng, 3), random_layer(&mut rng, 3)];
        let stack = PropagationStack::from_layers(layers, 0.0, 1.0, GraphKind::Both).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            assert_eq!(propagate(&stack, &x, &sets, mode).unwrap(), x);
        }
    }

    #[test]
    fn uniform_adjacency_moves_towards_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5;
        let x = random(&mut rng, n, 3);
        let ap = build_pose_adjacency(&vec![PartSet::of(&Part::ALL); n]);
        // all-ones affinity: every row uniform after combination
        let af = build_affinity_adjacency(&Tensor::zeros(&[n, 1]));
        let adj = combine(&ap, &af, 0.0).unwrap();
        let uniform = combine(&crate::adjacency::build_pose_adjacency(&vec![PartSet::EMPTY; n]), &af, 1.0).unwrap();
        let alpha = 0.3;
        let y = one_layer(&x, &uniform, &PropagationLayer::identity(3), alpha, Mode::Eval);
        let mean: Vec<f64> = (0..3).map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64).collect();
        // the eval-mode identity layer rescales by 1/sqrt(1 + eps)
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        for i in 0..n {
            for j in 0..3 {
                let expect = (1.0 - alpha) * x.at(i, j) + alpha * s * mean[j];
                assert!((y.at(i, j) - expect).abs() < 1e-12);
            }
        }
        // the pose-only graph over a complete part overlap excludes self
        let y2 = one_layer(&x, &adj, &PropagationLayer::identity(3), alpha, Mode::Eval);
        for j in 0..3 {
            let others: f64 = (1..n).map(|i| x.at(i, j)).sum::<f64>() / (n - 1) as f64;
            assert!((y2.at(0, j) - ((1.0 - alpha) * x.at(0, j) + alpha * s * others)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_node_hand_evaluation() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let adj = combine(
            &build_pose_adjacency(&[PartSet::of(&[Part::Head]), PartSet::of(&[Part::Head])]),
            &build_affinity_adjacency(&x),
            1.0,
        )
        .unwrap();
        let mut layer = PropagationLayer::identity(2);
        layer.weight = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, -1.0]]).unwrap();
        layer.bias = Tensor::row_vector(vec![0.5, 0.0]).unwrap();
        layer.bn.eps = 0.0;
        let y = one_layer(&x, &adj, &layer, 0.1, Mode::Eval);
        // F(x1) = (2.5, 0), F(x2) = (2.5, -2); a = affinity at distance √5
        let a = 2.0 / (5f64.sqrt().exp() + 1.0);
        let w_self = 0.5 * (1.0 / (1.0 + a));
        let w_other = 0.5 + 0.5 * (a / (1.0 + a));
        let msg0 = [w_self * 2.5 + w_other * 2.5, w_other * -2.0];
        let msg1 = [w_other * 2.5 + w_self * 2.5, w_self * -2.0];
        let expect = [
            [0.9 * 1.0 + 0.1 * msg0[0], 0.1 * msg0[1]],
            [0.1 * msg1[0], 0.9 * 2.0 + 0.1 * msg1[1]],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((y.at(i, j) - expect[i][j]).abs() < 1e-12, "{i},{j}");
            }
        }
    }

    #[test]
    fn single_layer_stack_matches_single_call() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 14, 3);
        let sets = random_part_sets(&mut rng, 14);
        let layer = random_layer(&mut rng, 3);
        let stack = PropagationStack::from_layers(vec![layer.clone()], 0.1, 1.0, GraphKind::Both).unwrap();
        let adj = combine(&build_pose_adjacency(&sets), &build_affinity_adjacency(&x), 1.0).unwrap();
        let direct = one_layer(&x, &adj, &layer, 0.1, Mode::Eval);
        assert_eq!(propagate(&stack, &x, &sets, Mode::Eval).unwrap(), direct);
    }

    #[test]
    fn identical_nodes_stay_put() {
        let x = Tensor::from_rows(&vec![vec![0.3, -1.2, 2.0]; 7]).unwrap();
        let sets = vec![PartSet::of(&[Part::Trunk]); 7];
        let stack = PropagationStack::from_layers(
            vec![PropagationLayer::identity(3), PropagationLayer::identity(3)],
            0.1,
            1.0,
            GraphKind::Both,
        )
        .unwrap();
        let mut s = stack.clone();
        for l in &mut s.layers {
            l.bn.running_mean = Tensor::row_vector(vec![0.3, -1.2, 2.0]).unwrap();
            l.bn.running_var = Tensor::full(&[1, 3], 1.0 - BN_EPS);
            l.bn.shift = Tensor::row_vector(vec![0.3, -1.2, 2.0]).unwrap();
        }
        let y = propagate(&s, &x, &sets, Mode::Eval).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn infinity_norm_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = random(&mut rng, 14, 4);
            let sets = random_part_sets(&mut rng, 14);
            let layer = random_layer(&mut rng, 4);
            let adj = combine(&build_pose_adjacency(&sets), &build_affinity_adjacency(&x), 1.0).unwrap();
            let f = run_transform(&layer, &x, Mode::Eval);
            let y = one_layer(&x, &adj, &layer, 0.1, Mode::Eval);
            let inf = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(inf(&y) <= 0.9 * inf(&x) + 0.1 * inf(&f) + 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_with_frozen_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d, n, b) = (3, 2 * NUM_REGIONS, 2);
        let layers = vec![random_layer(&mut rng, d), random_layer(&mut rng, d)];
        let stack = PropagationStack::from_layers(layers, 0.1, 1.0, GraphKind::Both).unwrap();
        let x = random(&mut rng, n * b, d);
        let pose: Vec<PoseAdjacency> = (0..b).map(|_| build_pose_adjacency(&random_part_sets(&mut rng, n))).collect();
        let target = random(&mut rng, n * b, d);

        let frozen = {
            let mut tape = Tape::new();
            let vars = stack.register(&mut tape, false);
            let xv = tape.constant(x.clone());
            stack.forward(&mut tape, &vars, xv, &pose, Mode::Train, None).unwrap().adjacency
        };

        let mut point = vec![x.clone()];
        for l in &stack.layers {
            point.extend([l.weight.clone(), l.bias.clone(), l.bn.gain.clone(), l.bn.shift.clone()]);
        }
        let report = grad_check(
            |tape, leaves| {
                let vars = StackVars {
                    layers: leaves[1..]
                        .chunks(4)
                        .map(|c| LayerVars {
                            weight: c[0],
                            bias: c[1],
                            bn: BatchNormVars { gain: c[2], shift: c[3] },
                        })
                        .collect(),
                };
                let out = stack.forward(tape, &vars, leaves[0], &pose, Mode::Train, Some(&frozen))?;
                let t = tape.constant(target.clone());
                let p = tape.mul(out.output, t)?;
                let s = tape.softplus(p)?;
                tape.sum_all(s)
            },
            &point,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn two_layers_match_explicit_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 3 * NUM_REGIONS;
        let x = random(&mut rng, n, 4);
        let sets = random_part_sets(&mut rng, n);
        let layers = vec![random_layer(&mut rng, 4), random_layer(&mut rng, 4)];
        let stack = PropagationStack::from_layers(layers.clone(), 0.1, 1.0, GraphKind::Both).unwrap();
        let ap = build_pose_adjacency(&sets);
        for mode in [Mode::Train, Mode::Eval] {
            let mut h = x.clone();
            for layer in &layers {
                let a = combine(&ap, &build_affinity_adjacency(&h), 1.0).unwrap();
                let f = run_transform(layer, &h, mode);
                let msg = a.matrix().matmul(&f).unwrap();
                let mut next = h.clone();
                for (o, m) in next.data_mut().iter_mut().zip(msg.data()) {
                    *o = 0.9 * *o + 0.1 * m;
                }
                h = next;
            }
            assert!(propagate(&stack, &x, &sets, mode).unwrap().max_abs_diff(&h) < 1e-12);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(64))]
        #[test]
        fn permutation_equivariance(seed in proptest::prelude::any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 2 * NUM_REGIONS;
            let x = random(&mut rng, n, 3);
            let sets = random_part_sets(&mut rng, n);
            let layers = vec![random_layer(&mut rng, 3), random_layer(&mut rng, 3)];
            let stack = PropagationStack::from_layers(layers, 0.1, 1.0, GraphKind::Both).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let psets: Vec<PartSet> = perm.iter().map(|&i| sets[i]).collect();
            for mode in [Mode::Train, Mode::Eval] {
                let y = propagate(&stack, &x, &sets, mode).unwrap();
                let yp = propagate(&stack, &x.select_rows(&perm), &psets, mode).unwrap();
                proptest::prop_assert!(yp.max_abs_diff(&y.select_rows(&perm)) < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(PropagationStack::new(4, 0, 0.1, 1.0, GraphKind::Both, &mut rng).is_err());
        assert!(PropagationStack::new(4, 2, 1.5, 1.0, GraphKind::Both, &mut rng).is_err());
        assert!(PropagationStack::new(4, 2, 0.1, -1.0, GraphKind::Both, &mut rng).is_err());
    }
}
