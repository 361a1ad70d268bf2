//! Central finite-difference gradient verification.
//!
//! The checker re-evaluates the loss with each parameter element nudged
//! by `+h` and `-h`, so it only relies on forward evaluation and is
//! independent of the backward-pass implementation it validates.

use crate::error::Result;

use super::{no_grad, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor: differences below this scale compare absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (param name, flat element index, autodiff grad, finite-difference grad)
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare autodiff gradients of `loss_fn` w.r.t. every element of every
/// named parameter against central finite differences.
///
/// `loss_fn` must rebuild the computation from the parameter list it is
/// given and return a scalar loss; it is called once with gradients
/// enabled and `2 * total_elements` times under `no_grad`.
pub fn check<F>(cfg: GradCheck, params: &[(String, Tensor<f64>)], loss_fn: F) -> Result<GradReport>
where
    F: Fn(&[(String, Tensor<f64>)]) -> Result<Tensor<f64>>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn(params)?;
    loss.backward()?;

    let mut report = GradReport::default();
    for (pi, (name, p)) in params.iter().enumerate() {
        let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
        for j in 0..p.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = p.data().to_vec();
                data[j] += delta;
                let nudged = Tensor::param(p.shape(), data)?;
                let mut alt: Vec<(String, Tensor<f64>)> = params.to_vec();
                alt[pi] = (name.clone(), nudged);
                no_grad(|| loss_fn(&alt)).map(|t| t.item())
            };
            let fd = (eval(cfg.h)? - eval(-cfg.h)?) / (2.0 * cfg.h);
            let a = grad[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(cfg.floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), j, a, fd));
            }
        }
    }
    Ok(report)
}
