use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per leaf, in the order the leaves were given.
    pub per_leaf: Vec<f64>,
    pub max_rel_error: f64,
    /// Number of scalar entries perturbed.
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NotScalar {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    Ok((tape, leaves, out))
}

/// Checks the gradient of the scalar function `f` at `point` against central
/// differences with the given step. `f` receives one leaf per tensor of
/// `point` and is re-evaluated on a fresh tape for every perturbation.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, leaves, out) = evaluate(&f, point)?;
    let grads = tape.backward(out)?;

    let scalar_at = |p: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = evaluate(&f, p)?;
        Ok(tape.value(out).data()[0])
    };

    let mut per_leaf = Vec::with_capacity(point.len());
    let mut evaluations = 0;
    let mut probe = point.to_vec();
    for (li, &leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf);
        let mut worst: f64 = 0.0;
        for k in 0..point[li].numel() {
            let orig = point[li].data()[k];
            probe[li].data_mut()[k] = orig + step;
            let plus = scalar_at(&probe)?;
            probe[li].data_mut()[k] = orig - step;
            let minus = scalar_at(&probe)?;
            probe[li].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
            evaluations += 1;
        }
        per_leaf.push(worst);
    }
    let max_rel_error = per_leaf.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_leaf,
        max_rel_error,
        evaluations,
    })
}
