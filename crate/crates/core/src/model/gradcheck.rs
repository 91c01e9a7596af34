//! Finite-difference gradient checking.

use indexmap::IndexMap;

use super::net::LossEval;
use super::params::Params;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_tensor: IndexMap<String, f64>,
    pub checked: usize,
    /// Elements whose perturbation crosses a ReLU or L1 kink at every tried
    /// step size.
    pub skipped: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares the analytic gradients of `loss` at `params` with central
/// differences of step `eps`. When a step changes which side of a kink the
/// computation is on, the step is shrunk tenfold (down to `eps * 1e-4`)
/// before the element is skipped.
pub fn grad_check(params: &Params, eps: f64, loss: impl Fn(&Params) -> LossEval) -> GradCheckReport {
    let base = loss(params);
    compare_gradients(params, &base.grads, base.signature, eps, loss)
}

/// Like [`grad_check`] but against externally supplied analytic gradients.
pub fn compare_gradients(
    params: &Params,
    analytic: &Params,
    signature: u64,
    eps: f64,
    loss: impl Fn(&Params) -> LossEval,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_tensor: IndexMap::new(),
        checked: 0,
        skipped: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in &params.tensors {
        let mut worst = 0.0f64;
        for (idx, &orig) in tensor.indexed_iter() {
            let mut step = eps;
            let numeric = loop {
                let slot = |p: &mut Params, v: f64| p.tensors.get_mut(name).expect("tensor")[idx] = v;
                slot(&mut probe, orig + step);
                let plus = loss(&probe);
                slot(&mut probe, orig - step);
                let minus = loss(&probe);
                slot(&mut probe, orig);
                if plus.signature == signature && minus.signature == signature {
                    break Some((plus.loss - minus.loss) / (2.0 * step));
                }
                step /= 10.0;
                if step < eps * 1e-4 {
                    break None;
                }
            };
            match numeric {
                Some(n) => {
                    worst = worst.max(rel_error(analytic.get(name)[idx], n));
                    report.checked += 1;
                }
                None => report.skipped += 1,
            }
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_tensor.insert(name.clone(), worst);
    }
    report
}
