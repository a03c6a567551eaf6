//! Reverse-mode versus central finite differences.

use crate::error::{Result, TensorError};
use crate::nn::{Mode, Network};
use crate::ops::{apply, Op};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradients are compared absolutely rather than
/// relatively; central differences at `FD_STEP` carry roughly `1e-11`
/// absolute round-off for O(1) losses.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over its entries)`.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Loss used by the check: MSE against a fixed, input-independent target.
fn probe_loss(net: &Network, params: &[Tensor], input: &Tensor, mode: Mode) -> Result<f64> {
    let y = net.arch.forward(params, input, mode)?;
    let target = probe_target(&y);
    Ok(apply(&Op::MseLoss, &[&y, &target])?.item())
}

fn probe_target(y: &Tensor) -> Tensor {
    let data = (0..y.numel()).map(|i| (i as f64 * 0.7).sin()).collect();
    Tensor::new(y.shape().to_vec(), data).expect("same element count")
}

/// Compares every parameter gradient of `net` on `input` with central
/// differences. Refuses to run when dropout would make the loss random.
pub fn gradient_check(net: &Network, input: &Tensor, mode: Mode, tolerance: f64) -> Result<GradCheckReport> {
    if matches!(mode, Mode::Train { .. }) && net.arch.has_dropout() {
        return Err(TensorError::NonDeterministic(
            "dropout is active; run the check in eval mode".into(),
        ));
    }

    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let leaves = net.leaves(&mut tape, true);
    let y = net.forward_tape(&mut tape, x, &leaves, mode)?;
    let target = tape.leaf(probe_target(tape.value(y)));
    let loss = tape.apply(Op::MseLoss, &[y, target])?;
    let mut grads = tape.backward(loss)?;

    let names = net.param_names();
    let mut params = net.params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst = 0.0_f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.take_or_zeros(*leaf, net.params[i].shape());
        let mut max_err = 0.0_f64;
        for j in 0..params[i].numel() {
            let orig = params[i].data()[j];
            params[i].data_mut()[j] = orig + FD_STEP;
            let up = probe_loss(net, &params, input, mode)?;
            params[i].data_mut()[j] = orig - FD_STEP;
            let down = probe_loss(net, &params, input, mode)?;
            params[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_err = max_err.max(relative_error(analytic.data()[j], numeric));
        }
        worst = worst.max(max_err);
        per_param.push((names[i].clone(), max_err));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}
