//! Central finite-difference gradient checking.

use super::{Graph, Mode, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::rng::stream;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-parameter relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub entries_checked: usize,
}

/// Builds the loss with `f` on a fresh graph (same mode and dropout stream
/// each time), compares reverse-mode gradients with central differences of
/// step `h` for the parameters in `ids`. At most `max_entries` entries per
/// parameter are probed, evenly strided.
pub fn check<F>(store: &ParamStore, ids: &[ParamId], mode: Mode, h: f64, max_entries: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, mode).with_rng(stream(0, "gradcheck"));
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new(store, mode).with_rng(stream(0, "gradcheck"));
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;
    drop(g);

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        entries_checked: 0,
    };
    for &id in ids {
        let analytic = grads.param_or_zero(id);
        let n = analytic.len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in (0..n).step_by(stride) {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            report.entries_checked += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / denom };
        if rel > report.max_rel_err || report.worst_param.is_empty() {
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel >= report.max_rel_err {
                report.worst_param = store.name(id).to_string();
            }
        }
    }
    Ok(report)
}

/// Checks every parameter in the store.
pub fn check_all<F>(store: &ParamStore, mode: Mode, max_entries: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    check(store, &ids, mode, DEFAULT_STEP, max_entries, f)
}
