//! Central finite-difference gradient checking.
//!
//! Only forward values are used to form the numeric estimate, so the check
//! stays independent of the backward rules it audits.

use crate::tensor::{Graph, Tensor, Var};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the backward pass of `loss_fn` against central differences.
///
/// `loss_fn` receives one trainable leaf per entry of `inputs` and returns a
/// scalar loss. At most `max_per_input` evenly strided elements of each input
/// are probed (`usize::MAX` probes all).
pub fn check<E>(
    inputs: &[Tensor<f64>],
    step: f64,
    max_per_input: usize,
    loss_fn: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
) -> Result<GradCheckReport, E>
where
    E: From<crate::tensor::TensorError>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars = tensors.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let loss = loss_fn(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = loss_fn(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = if max_per_input >= n { 1 } else { n.div_ceil(max_per_input) };
        for ei in (0..n).step_by(stride) {
            let orig = t.data()[ei];
            probe[ti].data_mut()[ei] = orig + step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(analytic[ti][ei], numeric);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
