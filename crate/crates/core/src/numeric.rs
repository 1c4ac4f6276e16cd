//! Small scalar solvers shared by the kinematic and calibration code.

/// Result of a bracketed root search on a monotone function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub residual: f64,
    pub iterations: u32,
}

/// Finds `x` in `[lo, hi]` with `f(x) = target` for a non-decreasing `f`,
/// stopping once `|f(x) - target| <= tol` or after `max_iter` halvings.
///
/// Returns `None` when `target` lies outside `[f(lo), f(hi)]`.
pub fn bisect_increasing<F>(f: F, lo: f64, hi: f64, target: f64, tol: f64, max_iter: u32) -> Option<Root>
where
    F: Fn(f64) -> f64,
{
    let (mut lo, mut hi) = (lo, hi);
    let f_lo = f(lo);
    let f_hi = f(hi);
    if target < f_lo - tol || target > f_hi + tol {
        return None;
    }
    if (f_lo - target).abs() <= tol {
        return Some(Root { x: lo, residual: f_lo - target, iterations: 0 });
    }
    if (f_hi - target).abs() <= tol {
        return Some(Root { x: hi, residual: f_hi - target, iterations: 0 });
    }
    let mut best = Root { x: lo, residual: f_lo - target, iterations: 0 };
    for i in 1..=max_iter {
        let mid = 0.5 * (lo + hi);
        let r = f(mid) - target;
        best = Root { x: mid, residual: r, iterations: i };
        if r.abs() <= tol || mid <= lo || mid >= hi {
            break;
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(best)
}

/// Golden-section minimisation of a unimodal function on `[a, b]`.
pub fn golden_section_min<F>(f: F, a: f64, b: f64, x_tol: f64, max_iter: u32) -> f64
where
    F: Fn(f64) -> f64,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (a, b);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (b - a).abs() <= x_tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisection_finds_square_root() {
        let r = bisect_increasing(|x| x * x, 0.0, 2.0, 2.0, 1e-12, 200).unwrap();
        assert!((r.x - 2f64.sqrt()).abs() < 1e-11);
    }

    #[test]
    fn bisection_rejects_unbracketed_target() {
        assert!(bisect_increasing(|x| x, 0.0, 1.0, 1.5, 1e-9, 100).is_none());
        assert!(bisect_increasing(|x| x, 0.0, 1.0, -0.5, 1e-9, 100).is_none());
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let x = golden_section_min(|x| (x - 0.3).powi(2), -1.0, 2.0, 1e-12, 500);
        assert!((x - 0.3).abs() < 1e-9);
    }
}
