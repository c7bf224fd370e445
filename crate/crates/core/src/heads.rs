//! Global branch pooling, identity classifiers and the training losses.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_P: usize = 4;
pub const DEFAULT_K: usize = 4;

/// Bias-free linear classifier. The weight is stored `d × C` so that
/// `logits = x · W`; column `c` scores identity class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub weight: Tensor,
}

impl Classifier {
    /// Gaussian initialization with standard deviation 0.001.
    pub fn init(d: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1e-3).expect("valid normal");
        let data = (0..d * classes).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::from_parts(vec![d, classes], data),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }
}

/// Temporal mean of the frame-level global region (region 0) of every frame.
pub fn global_representation(nodes: &Tensor, regions: usize) -> Result<Vec<f64>> {
    let frames = frame_count(nodes.rows(), regions)?;
    let mut out = vec![0.0; nodes.cols()];
    for t in 0..frames {
        for (o, v) in out.iter_mut().zip(nodes.row(t * regions)) {
            *o += v;
        }
    }
    Ok(out.into_iter().map(|v| v / frames as f64).collect())
}

pub fn global_representation_var(tape: &mut Tape, nodes: Var, regions: usize) -> Result<Var> {
    let frames = frame_count(tape.value(nodes).rows(), regions)?;
    let idx: Vec<usize> = (0..frames).map(|t| t * regions).collect();
    let sel = tape.index_select(nodes, &idx)?;
    tape.mean(sel, Axis::Rows)
}

fn frame_count(rows: usize, regions: usize) -> Result<usize> {
    if regions == 0 || rows == 0 || !rows.is_multiple_of(regions) {
        return Err(Error::shape(
            "global_representation",
            format!("{rows} node rows is not a whole number of {regions}-region frames"),
        ));
    }
    Ok(rows / regions)
}

/// Mean negative log-softmax of the labelled class over all rows of
/// `features: [V, d]` with classifier weight `[d, C]`.
pub fn cross_entropy(tape: &mut Tape, features: Var, labels: &[usize], weight: Var) -> Result<Var> {
    let v = tape.value(features).rows();
    let classes = tape.value(weight).cols();
    if labels.len() != v {
        return Err(Error::shape("cross_entropy", format!("{v} feature rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let logits = tape.matmul(features, weight)?;
    let lse = tape.log_sum_exp(logits, Axis::Cols)?;
    let mut onehot = Tensor::zeros(&[v, classes]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(i, l, 1.0);
    }
    let onehot = tape.constant(onehot);
    let masked = tape.mul(logits, onehot)?;
    let picked = tape.sum(masked, Axis::Cols)?;
    let nll = tape.sub(lse, picked)?;
    let total = tape.sum_all(nll)?;
    tape.scale(total, 1.0 / v as f64)
}

/// Hardest positive and hardest negative for every anchor row, chosen by
/// Euclidean distance; ties go to the lowest index.
pub fn hardest_indices(features: &Tensor, labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let v = features.rows();
    if labels.len() != v {
        return Err(Error::shape("triplet", format!("{v} feature rows but {} labels", labels.len())));
    }
    let dist = |i: usize, j: usize| -> f64 {
        features
            .row(i)
            .iter()
            .zip(features.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let mut pos = Vec::with_capacity(v);
    let mut neg = Vec::with_capacity(v);
    for i in 0..v {
        let mut best_p: Option<(f64, usize)> = None;
        let mut best_n: Option<(f64, usize)> = None;
        for j in 0..v {
            if j == i {
                continue;
            }
            let d = dist(i, j);
            if labels[j] == labels[i] {
                if best_p.is_none_or(|(bd, _)| d > bd) {
                    best_p = Some((d, j));
                }
            } else if best_n.is_none_or(|(bd, _)| d < bd) {
                best_n = Some((d, j));
            }
        }
        match (best_p, best_n) {
            (Some((_, p)), Some((_, n))) => {
                pos.push(p);
                neg.push(n);
            }
            (None, _) => {
                return Err(Error::invalid(format!(
                    "identity {} has a single feature vector; triplet mining needs a positive",
                    labels[i]
                )))
            }
            (_, None) => return Err(Error::invalid("triplet mining needs at least two identities")),
        }
    }
    Ok((pos, neg))
}

/// `Σ_anchors softplus(max positive distance − min negative distance)`.
pub fn batch_hard_soft_triplet(tape: &mut Tape, features: Var, labels: &[usize]) -> Result<Var> {
    let terms = triplet_anchor_terms(tape, features, labels)?;
    tape.sum_all(terms)
}

/// Per-anchor soft-margin terms as a `[V, 1]` column.
pub fn triplet_anchor_terms(tape: &mut Tape, features: Var, labels: &[usize]) -> Result<Var> {
    let (pos, neg) = hardest_indices(tape.value(features), labels)?;
    let p = tape.index_select(features, &pos)?;
    let n = tape.index_select(features, &neg)?;
    let dp = tape.sq_dist(features, p)?;
    let dp = tape.sqrt(dp)?;
    let dn = tape.sq_dist(features, n)?;
    let dn = tape.sqrt(dn)?;
    let gap = tape.sub(dp, dn)?;
    tape.softplus(gap)
}

/// The four loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub xent_global: Var,
    pub htri_global: Var,
    pub xent_graph: Var,
    pub htri_graph: Var,
    pub total: Var,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub xent_global: f64,
    pub htri_global: f64,
    pub xent_graph: f64,
    pub htri_graph: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).data()[0];
        LossValues {
            total: v(self.total),
            xent_global: v(self.xent_global),
            htri_global: v(self.htri_global),
            xent_graph: v(self.xent_graph),
            htri_graph: v(self.htri_graph),
        }
    }
}

pub fn total_loss(tape: &mut Tape, xent_global: Var, htri_global: Var, xent_graph: Var, htri_graph: Var) -> Result<LossTerms> {
    let a = tape.add(xent_global, htri_global)?;
    let b = tape.add(xent_graph, htri_graph)?;
    let total = tape.add(a, b)?;
    Ok(LossTerms {
        xent_global,
        htri_global,
        xent_graph,
        htri_graph,
        total,
    })
}
