use crate::error::Result;
use crate::num::params::{ParamStore, Session};
use crate::num::Var;

/// Worst-element comparison between analytic and central-difference
/// gradients for one named parameter.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// Flat index of the worst element.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.rel_err <= tol)
    }

    /// Entries failing `tol`, worst first.
    pub fn failures(&self, tol: f64) -> Vec<&GradCheckEntry> {
        let mut f: Vec<_> = self.entries.iter().filter(|e| e.rel_err > tol).collect();
        f.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        f
    }
}

/// Relative error with an absolute floor: gradients below ~1e-6 sit in
/// the regime where the central-difference quotient is dominated by
/// floating-point roundoff of the loss itself, so they are compared
/// absolutely rather than relatively.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare analytic gradients against central finite differences
/// `(L(p+eps) - L(p-eps)) / (2 eps)` for every element of every trainable
/// parameter (frozen tensors are skipped: they carry no gradient by design).
///
/// `loss_fn` must be a deterministic function of the store contents: any
/// stochastic choices (dropout masks, sampling) have to be fixed by the
/// caller before checking.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    let grads = {
        let mut s = Session::with_finite_checks(store);
        let loss = loss_fn(&mut s)?;
        s.backward(loss)?
    };
    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.clone())
        .collect();
    let analytic: Vec<Vec<f64>> = names
        .iter()
        .map(|n| {
            grads
                .get(n)
                .cloned()
                .unwrap_or_else(|| vec![0.0; store.get(n).map(|t| t.numel()).unwrap_or(0)])
        })
        .collect();

    let mut eval = |store: &mut ParamStore| -> Result<f64> {
        let mut s = Session::new(store);
        let loss = loss_fn(&mut s)?;
        Ok(s.g.scalar_value(loss))
    };

    let mut report = GradCheckReport::default();
    for (name, grads) in names.iter().zip(&analytic) {
        let mut worst = GradCheckEntry {
            name: name.clone(),
            index: 0,
            analytic: grads.first().copied().unwrap_or(0.0),
            numeric: 0.0,
            rel_err: 0.0,
        };
        for (i, &a) in grads.iter().enumerate() {
            let orig = store.get(name)?.data()[i];
            store.get_mut(name)?.data_mut()[i] = orig + epsilon;
            let plus = eval(store)?;
            store.get_mut(name)?.data_mut()[i] = orig - epsilon;
            let minus = eval(store)?;
            store.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = rel_err(a, numeric);
            if err >= worst.rel_err {
                worst = GradCheckEntry {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: err,
                };
            }
        }
        report.entries.push(worst);
    }
    Ok(report)
}
