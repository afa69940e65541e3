use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Acceptance band for analytic vs. numeric gradients: a coordinate passes
/// when `|analytic - numeric| <= max(abs, rel * max(|analytic|, |numeric|))`.
#[derive(Clone, Copy, Debug)]
pub struct GradTolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Default for GradTolerance {
    fn default() -> Self {
        GradTolerance {
            abs: 1e-4,
            rel: 1e-3,
        }
    }
}

impl GradTolerance {
    fn allowed(&self, a: f64, b: f64) -> f64 {
        self.abs.max(self.rel * a.abs().max(b.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Coordinate with the largest error relative to its allowance.
    pub worst: Option<GradMismatch>,
    worst_ratio: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    /// Largest `error / allowance` seen; below 1 means every coordinate passed.
    pub fn worst_ratio(&self) -> f64 {
        self.worst_ratio
    }
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central finite differences with step `step`.
///
/// `f` receives a fresh tape with `leaves` registered in order and must
/// return a scalar. Up to `samples_per_leaf` coordinates of every leaf are
/// drawn at random (all of them when the leaf is smaller).
pub fn check_gradients<F>(
    leaves: &[Tensor],
    f: F,
    samples_per_leaf: usize,
    step: f64,
    tol: GradTolerance,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient after backward"))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let coords: Vec<usize> = if n <= samples_per_leaf {
            (0..n).collect()
        } else {
            (0..samples_per_leaf)
                .map(|_| rng.random_range(0..n))
                .collect()
        };
        for idx in coords {
            let orig = leaf.data()[idx];
            work[li].data_mut()[idx] = orig + step;
            let plus = eval(&work)?;
            work[li].data_mut()[idx] = orig - step;
            let minus = eval(&work)?;
            work[li].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads[li].data()[idx];
            let ratio = (analytic - numeric).abs() / tol.allowed(analytic, numeric);
            report.checked += 1;
            if ratio > 1.0 || !ratio.is_finite() {
                report.failures += 1;
            }
            if ratio > report.worst_ratio || report.worst.is_none() {
                report.worst_ratio = ratio;
                report.worst = Some(GradMismatch {
                    leaf: li,
                    index: idx,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::Autodiff(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
