//! Pose-alignment, feature-affinity and combined adjacency over the `T·N`
//! region nodes of one tracklet. Nodes are ordered frame-major.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::pose::PartSet;

/// Binary, symmetric, zero diagonal: nodes are linked when their part sets
/// share a part.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseAdjacency(Tensor);

/// Dense affinity `2 / (e^‖x_i − x_j‖ + 1)`; symmetric with unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityAdjacency(Tensor);

/// Row-stochastic mix of the two normalized graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedAdjacency {
    matrix: Tensor,
    pub gamma: f64,
}

macro_rules! matrix_accessors {
    ($t:ty, $field:tt) => {
        impl $t {
            pub fn matrix(&self) -> &Tensor {
                &self.$field
            }

            pub fn into_matrix(self) -> Tensor {
                self.$field
            }

            pub fn size(&self) -> usize {
                self.$field.rows()
            }
        }
    };
}

matrix_accessors!(PoseAdjacency, 0);
matrix_accessors!(AffinityAdjacency, 0);
matrix_accessors!(CombinedAdjacency, matrix);

/// Which graphs feed the propagation layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GraphKind {
    /// Pose alignment and feature affinity, mixed by `gamma`.
    #[default]
    #[serde(rename = "both")]
    Both,
    /// Pose alignment only; rows without pose edges fall back to affinity.
    #[serde(rename = "pose")]
    PoseOnly,
    /// Feature affinity only.
    #[serde(rename = "affinity")]
    AffinityOnly,
}

impl GraphKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "pose" => Ok(Self::PoseOnly),
            "affinity" => Ok(Self::AffinityOnly),
            other => Err(Error::Config(format!(
                "unknown graph kind `{other}` (expected both, pose or affinity)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::PoseOnly => "pose",
            Self::AffinityOnly => "affinity",
        }
    }
}

pub fn build_pose_adjacency(part_sets: &[PartSet]) -> PoseAdjacency {
    let n = part_sets.len();
    let mut m = Tensor::zeros(&[n.max(1), n.max(1)]);
    for i in 0..n {
        for j in 0..n {
            if i != j && part_sets[i].intersects(part_sets[j]) {
                m.set(i, j, 1.0);
            }
        }
    }
    PoseAdjacency(m)
}

/// `2 / (e^d + 1)` for Euclidean distance `d`, written as
/// `2 e^{-d} / (1 + e^{-d})` so large distances underflow towards zero
/// instead of overflowing.
pub fn affinity(xi: &[f64], xj: &[f64]) -> f64 {
    let d = xi
        .iter()
        .zip(xj)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    affinity_from_distance(d)
}

pub fn affinity_from_distance(d: f64) -> f64 {
    let e = (-d).exp();
    2.0 * e / (1.0 + e)
}

pub fn build_affinity_adjacency(nodes: &Tensor) -> AffinityAdjacency {
    let n = nodes.rows();
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        m.set(i, i, 1.0);
        for j in i + 1..n {
            let a = affinity(nodes.row(i), nodes.row(j));
            m.set(i, j, a);
            m.set(j, i, a);
        }
    }
    AffinityAdjacency(m)
}

/// `A_ij = (A^p_ij / Σ_j A^p_ij + γ A^f_ij / Σ_j A^f_ij) / (1 + γ)`.
///
/// A row of `A^p` that sums to zero has no pose term; that row of the result
/// is the normalized affinity row alone.
pub fn combine(ap: &PoseAdjacency, af: &AffinityAdjacency, gamma: f64) -> Result<CombinedAdjacency> {
    let n = ap.size();
    if af.size() != n {
        return Err(Error::shape(
            "combine",
            format!("pose graph is {n}x{n}, affinity graph is {0}x{0}", af.size()),
        ));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    let (p, f) = (ap.matrix(), af.matrix());
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let p_sum: f64 = p.row(i).iter().sum();
        let f_sum: f64 = f.row(i).iter().sum();
        let row = out.row_mut(i);
        if p_sum > 0.0 {
            let w = 1.0 / (1.0 + gamma);
            for ((o, &pv), &fv) in row.iter_mut().zip(p.row(i)).zip(f.row(i)) {
                *o = w * (pv / p_sum + gamma * fv / f_sum);
            }
        } else {
            for (o, &fv) in row.iter_mut().zip(f.row(i)) {
                *o = fv / f_sum;
            }
        }
    }
    Ok(CombinedAdjacency { matrix: out, gamma })
}

/// Adjacency for one propagation layer, given the layer's input features.
pub fn adaptive_adjacency(
    pose: &PoseAdjacency,
    nodes: &Tensor,
    kind: GraphKind,
    gamma: f64,
) -> Result<CombinedAdjacency> {
    let af = build_affinity_adjacency(nodes);
    match kind {
        GraphKind::Both => combine(pose, &af, gamma),
        GraphKind::PoseOnly => combine(pose, &af, 0.0),
        GraphKind::AffinityOnly => {
            let empty = PoseAdjacency(Tensor::zeros(&[af.size(), af.size()]));
            combine(&empty, &af, gamma)
        }
    }
}

/// Row-major CSV with 17 significant digits.
pub fn matrix_to_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
