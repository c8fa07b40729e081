//! Central finite-difference checks of analytic parameter gradients.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub param: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the probed entries.
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub probed: usize,
}

/// Probes up to `max_entries` evenly spaced entries of every parameter in
/// `ids` with step `eps * max(1, |theta|)` and compares against `analytic`.
pub fn check_params<T: Scalar>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    analytic: &Gradients<T>,
    max_entries: usize,
    eps: f64,
    loss: impl Fn(&ParamStore<T>) -> T,
) -> Vec<GradCheckReport> {
    let mut work = store.clone();
    ids.iter()
        .map(|&id| {
            let n = store.get(id).len();
            let stride = (n / max_entries.max(1)).max(1);
            let mut diff2 = 0.0;
            let mut an2 = 0.0;
            let mut nu2 = 0.0;
            let mut probed = 0;
            for idx in (0..n).step_by(stride).take(max_entries) {
                let orig = store.get(id).data()[idx];
                let h = eps * orig.as_f64().abs().max(1.0);
                work.get_mut(id).data_mut()[idx] = orig + T::lit(h);
                let fp = loss(&work).as_f64();
                work.get_mut(id).data_mut()[idx] = orig - T::lit(h);
                let fm = loss(&work).as_f64();
                work.get_mut(id).data_mut()[idx] = orig;
                // the realized step can differ from h after rounding
                let step = (orig + T::lit(h)).as_f64() - (orig - T::lit(h)).as_f64();
                let numeric = (fp - fm) / step;
                let a = analytic.get(id).map(|g| g.data()[idx].as_f64()).unwrap_or(0.0);
                diff2 += (a - numeric).powi(2);
                an2 += a * a;
                nu2 += numeric * numeric;
                probed += 1;
            }
            let denom = an2.sqrt().max(nu2.sqrt());
            GradCheckReport {
                param: store.name(id).to_string(),
                rel_err: if denom < 1e-12 { 0.0 } else { diff2.sqrt() / denom },
                analytic_norm: an2.sqrt(),
                numeric_norm: nu2.sqrt(),
                probed,
            }
        })
        .collect()
}

/// Like [`check_params`], but differences are taken on a float64 copy of the
/// parameters, so a single-precision analytic gradient is judged against a
/// double-precision oracle.
pub fn check_params_promoted<T: Scalar>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    analytic: &Gradients<T>,
    max_entries: usize,
    eps: f64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> Vec<GradCheckReport> {
    check_params(&store.cast::<f64>(), ids, &analytic.cast::<f64>(), max_entries, eps, loss)
}
