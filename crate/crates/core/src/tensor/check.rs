//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Central-difference stencil.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error `O(h²)`.
    #[default]
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error `O(h⁴)`.
    FivePoint,
    /// Three-point at `h`, `h/10` and `h/100`, keeping the estimate closest
    /// to the analytic value. Tolerates argmax switches of max-pooling
    /// inside the larger steps.
    MultiStep,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub stencil: Stencil,
    /// Test hook: perturbs the analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            stencil: Stencil::ThreePoint,
            corrupt: false,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the reverse-mode gradient of `f` at `x`
/// and central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let mut inputs = [x.clone()];
    grad_check_params(
        |g, vars| f(g, vars[0]),
        &mut inputs,
        GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

/// Like [`grad_check`] over several differentiable inputs at once.
/// Every element of every tensor is perturbed in turn.
pub fn grad_check_params<F>(f: F, inputs: &mut [Tensor<f64>], opts: GradCheckOptions) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t)).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(inputs.iter())
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t)).collect();
        Ok(f(&g, &vars)?.item())
    };
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            let mut at = |offset: f64| -> Result<f64> {
                inputs[ti].data_mut()[ei] = orig + offset;
                let v = eval(inputs);
                inputs[ti].data_mut()[ei] = orig;
                v
            };
            let h = opts.eps;
            let mut a = analytic[ti][ei];
            if opts.corrupt && ti == 0 && ei == 0 {
                a += 0.1 * a.abs().max(1.0);
            }
            let err = match opts.stencil {
                Stencil::ThreePoint => relative_error(a, (at(h)? - at(-h)?) / (2.0 * h)),
                Stencil::FivePoint => relative_error(
                    a,
                    (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h),
                ),
                Stencil::MultiStep => {
                    let mut best = f64::INFINITY;
                    for s in [h, h / 10.0, h / 100.0] {
                        best = best.min(relative_error(a, (at(s)? - at(-s)?) / (2.0 * s)));
                    }
                    best
                }
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
