//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::optim::ParameterStore;
use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that gradients near
/// zero are compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of a scalar function at `x` for the coordinates in
/// `indices` (all coordinates when `None`).
pub fn numeric_gradient(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, step: f64, indices: Option<&[usize]>) -> Vec<(usize, f64)> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    idx.iter()
        .map(|&i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + step;
            let fp = f(&probe);
            probe.data_mut()[i] = orig - step;
            let fm = f(&probe);
            probe.data_mut()[i] = orig;
            (i, (fp - fm) / (2.0 * step))
        })
        .collect()
}

/// Compares `analytic` with central differences of `f` at `x`.
pub fn check_gradient(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    step: f64,
    floor: f64,
    indices: Option<&[usize]>,
) -> CheckReport {
    let numeric = numeric_gradient(f, x, step, indices);
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: numeric.len(),
    };
    for (i, n) in numeric {
        let e = relative_error(analytic.data()[i], n, floor);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
        }
    }
    report
}

/// Worst disagreement found by [`check_parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Checks `grads` against central differences of `f` for every parameter
/// of `store`, probing up to `per_param` evenly spaced coordinates of each.
pub fn check_parameters(
    f: &mut dyn FnMut(&ParameterStore) -> f64,
    store: &ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    step: f64,
    floor: f64,
    per_param: usize,
) -> ParameterReport {
    let mut report = ParameterReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = store.clone();
    for (name, value) in store.iter() {
        let n = value.len();
        let count = per_param.min(n);
        let indices: Vec<usize> = (0..count).map(|k| k * n / count.max(1)).collect();
        let analytic = &grads[name];
        let mut g = |t: &Tensor| {
            probe.set(name, t.clone()).expect("same shape");
            f(&probe)
        };
        let r = check_gradient(&mut g, value, analytic, step, floor, Some(&indices));
        probe.set(name, value.clone()).expect("same shape");
        report.checked += r.checked;
        if report.worst.is_none() || r.max_rel_err > report.max_rel_err {
            report.max_rel_err = r.max_rel_err;
            report.worst = Some((name.to_string(), r.worst_index));
        }
    }
    report
}
