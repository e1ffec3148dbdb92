//! Central finite-difference gradient verification.

use rand::seq::index::sample;
use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{GscError, Result};

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub relative: f64,
    pub absolute: f64,
    pub step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            relative: 1e-3,
            absolute: 1e-6,
            step: 1e-4,
        }
    }
}

impl Tolerance {
    /// Error normalized so that a value `<= relative` passes: relative error
    /// for large magnitudes, absolute error scaled by `relative / absolute`
    /// near zero.
    pub fn normalized_error(&self, analytic: f64, numeric: f64) -> f64 {
        let floor = self.absolute / self.relative;
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    /// Worst normalized error over all checked coordinates.
    pub worst: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradCheck {
    pub fn merge(&mut self, other: &GradCheck) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
        self.failures += other.failures;
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares tape gradients of `build`'s scalar output against central
/// differences. `inputs` are registered as trainable leaves; when
/// `max_coords` is set, only that many randomly chosen coordinates per input
/// are perturbed.
pub fn check<R: Rng>(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    tol: Tolerance,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs)?;
        let v = t.value(l);
        if v.len() != 1 {
            return Err(GscError::contract("gradcheck", "loss is not a scalar"));
        }
        Ok(v.item())
    };

    let mut report = GradCheck::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (slot, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.len() => sample(rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            work[slot].data_mut()[j] = orig + tol.step;
            let plus = eval(&work)?;
            work[slot].data_mut()[j] = orig - tol.step;
            let minus = eval(&work)?;
            work[slot].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * tol.step);
            let err = tol.normalized_error(analytic[slot].data()[j], numeric);
            report.worst = report.worst.max(err);
            report.checked += 1;
            if err > tol.relative {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}
