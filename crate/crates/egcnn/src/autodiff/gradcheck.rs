//! Central finite-difference verification of reverse-mode gradients.
//!
//! For each parameter coordinate the loss is re-evaluated at `x ± eps` and
//! `(f(x+eps) - f(x-eps)) / 2eps` is compared against the gradient stored by
//! the preceding backward pass. Coordinates whose two evaluations produce
//! different activation signatures straddle a relu/max kink, where the
//! central difference is not a derivative: those are excluded and counted
//! in `skipped`.

use crate::error::Result;

use super::param::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation half-width.
    pub eps: f64,
    /// Activation margin used by the kink filter (see [`crate::autodiff::Tape::with_kink_margin`]).
    pub kink_margin: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            kink_margin: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Worst relative disagreement over all checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Relative error with an absolute fallback: below `1e-6` magnitude the raw
/// difference is reported, so vanishing gradients do not inflate the ratio.
fn relative_error(fd: f64, ad: f64) -> f64 {
    let denom = fd.abs().max(ad.abs());
    if denom < 1e-6 {
        (fd - ad).abs()
    } else {
        (fd - ad).abs() / denom
    }
}

/// Compare stored gradients against central differences of `loss`.
///
/// `loss` must be a pure forward evaluation returning `(value, signature)`;
/// the caller is responsible for having populated gradients via `backward`
/// (plus any analytic penalty terms) for the *same* loss beforehand.
pub fn grad_check<F>(
    store: &mut ParamStore,
    cfg: GradCheckConfig,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, u64)>,
{
    let mut report = GradCheckReport::default();
    let param_ids: Vec<_> = store.ids().collect();
    for id in param_ids {
        let n = store.value(id).len();
        for flat in 0..n {
            let orig = store.value(id).data()[flat];

            store.get_mut(id).value.data_mut()[flat] = orig + cfg.eps;
            let (f_plus, sig_plus) = loss(store)?;
            store.get_mut(id).value.data_mut()[flat] = orig - cfg.eps;
            let (f_minus, sig_minus) = loss(store)?;
            store.get_mut(id).value.data_mut()[flat] = orig;

            if sig_plus != sig_minus {
                report.skipped += 1;
                continue;
            }
            let fd = (f_plus - f_minus) / (2.0 * cfg.eps);
            let ad = store.grad(id).data()[flat];
            let err = relative_error(fd, ad);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.get(id).name.clone(), flat));
            }
        }
    }
    Ok(report)
}
