use super::PipelineError;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl AdamMoments {
    pub fn zeros(params: &[Tensor<f64>]) -> Self {
        let z: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: z.clone(), v: z }
    }
}

/// One bias-corrected Adam update at 1-based step `t`.
///
/// `grads[i]` must be present for every trainable tensor; frozen tensors
/// (`None` in `grads` and false in `trainable`) are left untouched.
pub fn adam_step(
    params: &mut [Tensor<f64>],
    moments: &mut AdamMoments,
    grads: &[Option<Vec<f64>>],
    trainable: &[bool],
    names: &[String],
    lr: f64,
    t: u64,
) -> Result<(), PipelineError> {
    assert!(t >= 1, "adam steps are 1-based");
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..params.len() {
        if !trainable[i] {
            continue;
        }
        let g = grads[i].as_ref().ok_or_else(|| PipelineError::MissingGrad(names[i].clone()))?;
        let p = params[i].data_mut();
        let m = moments.m[i].data_mut();
        let v = moments.v[i].data_mut();
        for k in 0..p.len() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
