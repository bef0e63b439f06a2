//! Finite-difference gradient checking.

use super::{ParamSet, Tape, Tensor, TensorError, VarId};

/// Relative error between an analytic and a central-difference value.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

/// Check the gradient of a scalar-valued tape function at `x` against
/// central finite differences with step `eps`. Returns the max relative
/// error over the entries of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId, TensorError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x)?;
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(leaf)
        .expect("leaf is tracked; backward populates it")
        .to_vec();

    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t)?;
        let loss = f(&mut tape, leaf)?;
        tape.scalar(loss)
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        max_err = max_err.max(rel_err(analytic[i], fd));
    }
    Ok(max_err)
}

/// Per-parameter result of [`grad_check_params`].
#[derive(Debug)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over its entries).
    pub per_param: Vec<(String, f64)>,
    pub max_err: f64,
}

/// Check ∂loss/∂θ for every parameter in `params` against central finite
/// differences. `f` must build the loss on the provided tape from the
/// current parameter values.
pub fn grad_check_params<F>(
    f: F,
    params: &mut ParamSet,
    eps: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<VarId, TensorError>,
{
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(params);

    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.tensor.grad().expect("parameters track grads").to_vec())
        .collect();

    let mut per_param = Vec::new();
    let mut overall: f64 = 0.0;
    for i in 0..params.len() {
        let pid = super::ParamId(i);
        let name = params.name(pid).to_string();
        let mut worst: f64 = 0.0;
        for j in 0..params.tensor(pid).numel() {
            let orig = params.tensor(pid).data()[j];
            params.tensor_mut(pid).data_mut()[j] = orig + eps;
            let up = {
                let mut tape = Tape::new();
                let loss = f(params, &mut tape)?;
                tape.scalar(loss)?
            };
            params.tensor_mut(pid).data_mut()[j] = orig - eps;
            let down = {
                let mut tape = Tape::new();
                let loss = f(params, &mut tape)?;
                tape.scalar(loss)?
            };
            params.tensor_mut(pid).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[i][j], fd));
        }
        overall = overall.max(worst);
        per_param.push((name, worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_err: overall,
    })
}
