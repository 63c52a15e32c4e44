use serde::Serialize;

use super::{Graph, NumericsError, ParamStore, Primitive, Real, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Stencil: two-point `(f(x+h) - f(x-h)) / 2h`, or the fourth-order
    /// five-point rule.
    pub stencil: Stencil,
    /// Relative error above which a parameter is flagged.
    pub tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly spaced).
    pub max_entries: Option<usize>,
    /// Break this primitive's backward rule during the analytic pass.
    pub corrupt: Option<Primitive>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-4, stencil: Stencil::FourthOrder, tol: 1e-5, floor: 1e-4, max_entries: None, corrupt: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stencil {
    TwoPoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`; truncation error
    /// O(h^4), so `h` can be large enough to keep rounding noise small.
    FourthOrder,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn entry_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares analytic gradients of `loss_fn` against central differences for
/// every parameter in `store`. Parameter values are restored afterwards.
pub fn finite_diff_check<T: Real>(
    store: &mut ParamStore<T>,
    loss_fn: impl Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var, NumericsError>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError> {
    store.zero_grads();
    let mut g = Graph::new();
    if let Some(p) = opts.corrupt {
        g.corrupt_backward(p);
    }
    let loss_var = loss_fn(&mut g, store)?;
    let loss = g.backward(loss_var, store)?.to_f64();
    drop(g);

    let eval = |s: &ParamStore<T>| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, s)?;
        Ok(g.value(l).item().to_f64())
    };

    let mut params = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let idx = entry_indices(n, opts.max_entries);
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for &i in &idx {
            let orig = store.value(id).data()[i];
            let mut at = |offset: f64| -> Result<f64, NumericsError> {
                store.value_mut(id).data_mut()[i] = T::of(orig.to_f64() + offset);
                eval(store)
            };
            let h = opts.h;
            let numeric = match opts.stencil {
                Stencil::TwoPoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FourthOrder => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
            };
            store.value_mut(id).data_mut()[i] = orig;
            let analytic = store.grad(id).data()[i].to_f64();
            max_abs = max_abs.max((analytic - numeric).abs());
            max_rel = max_rel.max(relative_error(analytic, numeric, opts.floor));
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            entries_checked: idx.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel <= opts.tol,
        });
    }
    Ok(GradCheckReport { h: opts.h, tol: opts.tol, loss, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn linear_loss_is_exact_to_rounding() {
        let mut s = ParamStore::<f64>::new();
        let w = s.insert("w", Tensor::from_f64(2, 3, &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6])).unwrap();
        let c = Tensor::from_f64(2, 3, &[1.0, 2.0, -3.0, 0.5, 0.25, 4.0]);
        let report = finite_diff_check(
            &mut s,
            |g, st| {
                let wv = g.param(st, w);
                let cv = g.constant(c.clone());
                let p = g.mul(wv, cv)?;
                Ok(g.sum(p))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-9, "{}", report.max_rel_error());
    }

    #[test]
    fn corrupted_rule_is_flagged() {
        let mut s = ParamStore::<f64>::new();
        let w = s.insert("w", Tensor::from_f64(1, 3, &[0.3, -0.7, 1.1])).unwrap();
        let opts = GradCheckOptions { corrupt: Some(Primitive::Sigmoid), ..Default::default() };
        let report = finite_diff_check(
            &mut s,
            |g, st| {
                let wv = g.param(st, w);
                let y = g.sigmoid(wv);
                Ok(g.sum(y))
            },
            &opts,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().next().unwrap().name, "w");
    }

    #[test]
    fn values_are_restored() {
        let mut s = ParamStore::<f64>::new();
        let w = s.insert("w", Tensor::from_f64(1, 2, &[0.3, -0.7])).unwrap();
        let before = s.value(w).clone();
        finite_diff_check(
            &mut s,
            |g, st| {
                let wv = g.param(st, w);
                let y = g.tanh(wv);
                Ok(g.sum(y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(s.value(w), &before);
    }

    #[test]
    fn sampling_limits_entries() {
        assert_eq!(entry_indices(10, Some(3)), vec![0, 3, 6]);
        assert_eq!(entry_indices(2, Some(3)), vec![0, 1]);
    }
}
