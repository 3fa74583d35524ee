//! Small numerical kernels shared by the other modules.

use crate::error::{Error, Result};

/// Bisection on a bracketing interval.
///
/// `f(lo)` and `f(hi)` must have opposite signs (or one of them be zero).
/// Iterates until the bracket is narrower than `tol` or `max_iter` halvings
/// have been performed, and returns the midpoint of the final bracket.
pub fn bisect<F>(mut lo: f64, mut hi: f64, tol: f64, max_iter: usize, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() || f_lo.is_nan() || f_hi.is_nan() {
        return Err(Error::Domain(format!(
            "bisection interval [{lo}, {hi}] does not bracket a root (f = {f_lo}, {f_hi})"
        )));
    }
    for _ in 0..max_iter {
        if (hi - lo).abs() <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo.min(hi) || mid >= lo.max(hi) {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Composite Simpson rule with `panels` subintervals (rounded up to even).
pub fn simpson<F>(a: f64, b: f64, panels: usize, f: F) -> f64
where
    F: Fn(f64) -> f64,
{
    let n = panels.max(2) + panels % 2;
    if a == b {
        return 0.0;
    }
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Formats a float with 12 significant digits, `%g` style.
///
/// Output is deterministic and compact: trailing zeros are trimmed and
/// scientific notation is used outside `[1e-5, 1e12)`.
pub fn fmt12(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.11e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, v))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisect_sqrt2() {
        let r = bisect(0.0, 2.0, 1e-14, 200, |x| x * x - 2.0).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn bisect_requires_bracket() {
        assert!(bisect(0.0, 1.0, 1e-12, 100, |x| x + 1.0).is_err());
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let v = simpson(0.0, 2.0, 10, |x| x * x * x - x);
        assert!((v - (4.0 - 2.0)).abs() < 1e-13);
    }

    #[test]
    fn fmt12_examples() {
        assert_eq!(fmt12(0.0), "0");
        assert_eq!(fmt12(1.0), "1");
        assert_eq!(fmt12(0.1), "0.1");
        assert_eq!(fmt12(47.7), "47.7");
        assert_eq!(fmt12(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt12(-2.5e-9), "-2.5e-9");
        assert_eq!(fmt12(123456.789), "123456.789");
    }
}
