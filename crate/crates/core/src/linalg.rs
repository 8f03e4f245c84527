//! Small numerical helpers shared by the fitting routines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Smallest eigenvalue allowed for the unit-diagonal scaled Gram matrix.
/// Corresponds to a scaled condition number of the design of roughly 1e6.
const RANK_TOL: f64 = 1e-12;

/// Returns an error unless the Gram matrix `XᵀX` is numerically full rank.
pub(crate) fn check_full_rank(gram: &DMatrix<f64>) -> Result<()> {
    let p = gram.nrows();
    if p == 0 {
        return Err(Error::EmptySpec);
    }
    let scale: Vec<f64> = (0..p).map(|j| gram[(j, j)]).collect();
    if scale.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::RankDeficientDesign);
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] / (scale[i] * scale[j]).sqrt());
    let eig = scaled.symmetric_eigenvalues();
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > RANK_TOL) {
        return Err(Error::RankDeficientDesign);
    }
    Ok(())
}

/// Cholesky factorization of a symmetric positive definite matrix after
/// diagonal equilibration.
pub(crate) struct SpdSolver {
    scale: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl SpdSolver {
    pub(crate) fn new(m: &DMatrix<f64>) -> Result<Self> {
        let p = m.nrows();
        let scale = DVector::from_fn(p, |j, _| {
            let d = m[(j, j)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        });
        let scaled = DMatrix::from_fn(p, p, |i, j| m[(i, j)] * scale[i] * scale[j]);
        let chol = scaled.cholesky().ok_or(Error::RankDeficientDesign)?;
        Ok(Self { scale, chol })
    }

    pub(crate) fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let scaled = rhs.component_mul(&self.scale);
        self.chol.solve(&scaled).component_mul(&self.scale)
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        let p = inv.nrows();
        DMatrix::from_fn(p, p, |i, j| inv[(i, j)] * self.scale[i] * self.scale[j])
    }
}

/// Brent's derivative-free minimization on `[a, b]`.
///
/// Returns `(x_min, f(x_min), evaluations)`. `rel_tol` is relative to `|x|`
/// with a small absolute floor.
pub(crate) fn brent_minimize<F>(mut f: F, a: f64, b: f64, rel_tol: f64, max_iter: usize) -> (f64, f64, usize)
where
    F: FnMut(f64) -> f64,
{
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut evals = 1;

    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = rel_tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            // parabolic fit through x, w, v
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if !(p.abs() >= (0.5 * q * etemp).abs() || p <= q * (a - x) || p >= q * (b - x)) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        evals += 1;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx, evals)
}

/// Brent–Dekker root bracketing. Requires `f(a)` and `f(b)` of opposite sign.
pub(crate) fn brent_root<F>(mut f: F, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> Option<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() || !fa.is_finite() || !fb.is_finite() {
        return None;
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Some(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
    }
    Some(b)
}

/// Sample quantile with linear interpolation between order statistics
/// (the default "type 7" definition). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Two-sided normal p-value for a z statistic.
pub(crate) fn two_sided_p(z: f64) -> f64 {
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2)
}
