//! L1-norm attention pooling and subsequence representations.

use rand::seq::index::sample;
use rand::Rng;

use crate::diff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_SUBSEQUENCES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Full,
    /// Subsequence `j` (1-based) of `T − j` frames.
    Subsequence(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRepresentation {
    pub vector: Vec<f64>,
    pub source: Source,
}

/// Frame subsets for the subsequence representations; subset `j − 1` holds
/// `T − j` ascending frame indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsequencePlan {
    pub frames: usize,
    pub subsets: Vec<Vec<usize>>,
}

impl SubsequencePlan {
    /// A plan with no subsequences.
    pub fn none(frames: usize) -> Self {
        Self {
            frames,
            subsets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }
}

pub fn plan_subsequences(frames: usize, count: usize, rng: &mut impl Rng) -> Result<SubsequencePlan> {
    if count >= frames && count > 0 {
        return Err(Error::invalid(format!(
            "{count} subsequences need more than {count} frames, got {frames}"
        )));
    }
    let subsets = (1..=count)
        .map(|j| {
            let mut idx = sample(rng, frames, frames - j).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(SubsequencePlan { frames, subsets })
}

/// Attention weights `‖x_i‖₁ / Σ_j ‖x_j‖₁` for the rows of `nodes`.
pub fn attention_weights(nodes: &Tensor) -> Result<Vec<f64>> {
    let norms: Vec<f64> = (0..nodes.rows())
        .map(|i| nodes.row(i).iter().map(|v| v.abs()).sum())
        .collect();
    let total: f64 = norms.iter().sum();
    if nodes.rows() == 0 || total == 0.0 {
        return Err(Error::invalid("attention over nodes whose L1 norms are all zero"));
    }
    Ok(norms.into_iter().map(|n| n / total).collect())
}

pub fn attend(nodes: &Tensor) -> Result<Vec<f64>> {
    let w = attention_weights(nodes)?;
    let mut out = vec![0.0; nodes.cols()];
    for (i, wi) in w.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(nodes.row(i)) {
            *o += wi * v;
        }
    }
    Ok(out)
}

/// Differentiable attention pooling of `nodes: [M, d]` into `[1, d]`.
pub fn attend_var(tape: &mut Tape, nodes: Var) -> Result<Var> {
    let norms = tape.l1_norm(nodes, Axis::Cols)?;
    let total = tape.sum(norms, Axis::Rows)?;
    if tape.value(total).data()[0] == 0.0 {
        return Err(Error::invalid("attention over nodes whose L1 norms are all zero"));
    }
    let weighted = tape.mul(nodes, norms)?;
    let pooled = tape.sum(weighted, Axis::Rows)?;
    let log_total = tape.ln(total)?;
    let neg = tape.scale(log_total, -1.0)?;
    let inv = tape.exp(neg)?;
    tape.mul(pooled, inv)
}

/// Node rows (frame-major) that belong to `frames`.
pub fn frame_rows(frames: &[usize], regions: usize) -> Vec<usize> {
    frames.iter().flat_map(|&t| t * regions..(t + 1) * regions).collect()
}

/// `x_graph` followed by one representation per planned subsequence, for one
/// tracklet's propagated nodes.
pub fn graph_branch_vars(tape: &mut Tape, nodes: Var, regions: usize, plan: &SubsequencePlan) -> Result<Vec<Var>> {
    let rows = tape.value(nodes).rows();
    if rows != plan.frames * regions {
        return Err(Error::shape(
            "graph_branch",
            format!("{rows} node rows for {} frames of {regions} regions", plan.frames),
        ));
    }
    let mut out = vec![attend_var(tape, nodes)?];
    for subset in &plan.subsets {
        let sub = tape.index_select(nodes, &frame_rows(subset, regions))?;
        out.push(attend_var(tape, sub)?);
    }
    Ok(out)
}

pub fn graph_branch_outputs(nodes: &Tensor, regions: usize, plan: &SubsequencePlan) -> Result<Vec<VideoRepresentation>> {
    if nodes.rows() != plan.frames * regions {
        return Err(Error::shape(
            "graph_branch",
            format!("{} node rows for {} frames of {regions} regions", nodes.rows(), plan.frames),
        ));
    }
    let mut out = vec![VideoRepresentation {
        vector: attend(nodes)?,
        source: Source::Full,
    }];
    for (j, subset) in plan.subsets.iter().enumerate() {
        out.push(VideoRepresentation {
            vector: attend(&nodes.select_rows(&frame_rows(subset, regions)))?,
            source: Source::Subsequence(j + 1),
        });
    }
    Ok(out)
}
