//! Finite-difference verification of reverse-mode gradients.
//!
//! [`check_against_fd`] rebuilds a scalar-valued computation from scratch for
//! every probe, so it is safe for any graph the tape can record, including
//! ones with internal caches. Central differences run in f64 to keep the
//! quotient honest at small step sizes.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, ValueId};

/// Central-difference step applied to each input element.
pub const DEFAULT_STEP: f32 = 1e-3;
/// Accepted relative error between analytic and numeric gradients.
pub const DEFAULT_REL_TOL: f32 = 1e-2;
/// Absolute floor below which disagreement is ignored.
pub const DEFAULT_ABS_TOL: f32 = 1e-3;

/// Checks the tape gradient of `build` against central differences for every
/// element of every input, using the default step and tolerances.
///
/// `build` must record a scalar loss from the leaves it is handed, in the
/// same order as `inputs`. All inputs are treated as differentiable.
pub fn check_against_fd<F>(inputs: &[Tensor], build: F) -> Result<()>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    check_against_fd_with(inputs, DEFAULT_STEP, DEFAULT_REL_TOL, DEFAULT_ABS_TOL, build)
}

/// [`check_against_fd`] with explicit step size and tolerances.
pub fn check_against_fd_with<F>(
    inputs: &[Tensor],
    step: f32,
    rel_tol: f32,
    abs_tol: f32,
    build: F,
) -> Result<()>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(inputs.len());
    for input in inputs {
        let live = input.clone().with_requires_grad(true);
        ids.push(tape.leaf(&live)?);
    }
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, input)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; input.numel()])
        })
        .collect();

    // Probe pass: rebuild the forward computation per perturbed element.
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(probe.len());
        for input in probe {
            let frozen = input.clone().with_requires_grad(false);
            ids.push(tape.leaf(&frozen)?);
        }
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss)[0] as f64)
    };

    let mut worst_rel = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        for elem in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[elem] += step;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[elem] -= step;
            let numeric = ((eval(&plus)? - eval(&minus)?) / (2.0 * step as f64)) as f32;
            let a = analytic[which][elem];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if diff > abs_tol && diff > rel_tol * scale {
                return Err(Error::Domain(format!(
                    "gradient mismatch at input {which} element {elem}: \
                     analytic {a}, numeric {numeric}, |diff| {diff}, scale {scale}"
                )));
            }
            if scale > 0.0 {
                worst_rel = worst_rel.max((diff / scale) as f64);
            }
        }
    }
    let _ = worst_rel;
    Ok(())
}
