use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Summary of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of the scalar function `f` at `x`.
///
/// Every element is probed unless `indices` restricts the set. The step actually
/// representable in `T` is used as the denominator.
pub fn grad_check<T: Element>(
    x: &Tensor<T>,
    analytic: &[T],
    eps: f64,
    indices: Option<&[usize]>,
    f: impl Fn(&Tensor<T>) -> f64,
) -> Result<GradCheckReport> {
    if analytic.len() != x.len() {
        return Err(Error::Dimensions(format!(
            "{} analytic gradients for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} must be positive")));
    }
    let all: Vec<usize>;
    let indices = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in indices {
        let v = x.data()[i];
        let plus = v + T::of(eps);
        let minus = v - T::of(eps);
        probe.data_mut()[i] = plus;
        let fp = f(&probe);
        probe.data_mut()[i] = minus;
        let fm = f(&probe);
        probe.data_mut()[i] = v;
        let numeric = (fp - fm) / (plus.f64() - minus.f64());
        let a = analytic[i].f64();
        let err = relative_error(a, numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient check produced {err} at index {i}")));
        }
        if err > report.max_rel_err || report.checked == 0 {
            report = GradCheckReport {
                max_rel_err: err,
                worst_index: i,
                analytic: a,
                numeric,
                checked: report.checked,
            };
        }
        report.checked += 1;
    }
    Ok(report)
}
