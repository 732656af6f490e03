use crate::network::{gradients, Network};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::DiffError;

/// Denominator floor so near-zero gradients compare by absolute error.
const REL_FLOOR: f64 = 1e-7;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Max relative error between tape gradients and central differences of the
/// MSE between `net(input)` and `target`, over every parameter element.
pub fn finite_difference_check(net: &Network, input: &Tensor, target: &Tensor, eps: f64) -> Result<f64, DiffError> {
    let loss = |net: &Network, tape: &mut Tape, params: &[Var]| -> Result<Var, DiffError> {
        let x = tape.leaf(input.clone());
        let t = tape.leaf(target.clone());
        let y = net.forward_on_tape(tape, params, x)?;
        tape.mse(y, t)
    };
    let (_, analytic) = gradients(net, |tape, params| loss(net, tape, params))?;
    let analytic: Vec<Tensor> = analytic.0;
    finite_difference_check_with(net.params(), &analytic, eps, |tape, params| loss(net, tape, params))
}

/// Central-difference comparison for any scalar graph over `params`.
///
/// `analytic` holds the gradients to verify, aligned with `params`.
pub fn finite_difference_check_with(
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
) -> Result<f64, DiffError> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(DiffError::Precondition(format!("finite-difference step must be positive, got {eps}")));
    }
    if analytic.len() != params.len() {
        return Err(DiffError::Shape(format!("{} gradients for {} parameters", analytic.len(), params.len())));
    }
    let coords: Vec<(usize, usize)> = params.iter().enumerate().flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j))).collect();
    check_coords(params, analytic, eps, &coords, f)
}

/// Like [`finite_difference_check`] but only over the parameter elements in
/// `coords` (parameter index, element index); for networks too large to
/// perturb exhaustively.
pub fn finite_difference_check_at(
    net: &Network,
    input: &Tensor,
    target: &Tensor,
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64, DiffError> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(DiffError::Precondition(format!("finite-difference step must be positive, got {eps}")));
    }
    let loss = |tape: &mut Tape, params: &[Var]| -> Result<Var, DiffError> {
        let x = tape.leaf(input.clone());
        let t = tape.leaf(target.clone());
        let y = net.forward_on_tape(tape, params, x)?;
        tape.mse(y, t)
    };
    let (_, analytic) = gradients(net, loss)?;
    check_coords(net.params(), &analytic.0, eps, coords, loss)
}

fn check_coords(
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
) -> Result<f64, DiffError> {
    let eval = |ps: &[Tensor]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut shifted = params.to_vec();
    let mut worst: f64 = 0.0;
    for &(i, j) in coords {
        if i >= params.len() || j >= params[i].len() {
            return Err(DiffError::Shape(format!("no parameter element ({i}, {j})")));
        }
        let orig = params[i].data()[j];
        shifted[i].data_mut()[j] = orig + eps;
        let up = eval(&shifted)?;
        shifted[i].data_mut()[j] = orig - eps;
        let down = eval(&shifted)?;
        shifted[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i].data()[j], numeric));
    }
    Ok(worst)
}
