#![allow(dead_code)]

use panel_causal::panel::{read_csv, ColumnMapping};
use panel_causal::PanelDataset;

pub const TOY: &str = "unit_id,time,treat,y,x1,x2\n\
A,0,0,1,1.5,2\nA,1,1,6,1.7,2\n\
B,0,0,3,0.5,1\nB,1,1,8,0.9,1\n\
C,0,0,2,2.5,3\nC,1,0,3,2.4,3\n\
D,0,0,4,1.0,4\nD,1,0,5,1.1,4\n";

pub fn toy() -> PanelDataset {
    read_csv(TOY.as_bytes(), &ColumnMapping::default()).unwrap().0
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson integral of `f` over `[a, b]`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    // split first so the recursion never sees a deceptively flat start
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let (lo, hi) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            adaptive(&f, lo, hi, fa, fm, fb, simpson(lo, hi, fa, fm, fb), tol / pieces as f64, 40)
        })
        .sum()
}

/// Logit-link contrast averaged over `u ~ N(0, s2)` by direct integration
/// of the density-weighted integrand over ±14 standard deviations.
pub fn logit_contrast_oracle(eta1: f64, eta0: f64, s2: f64) -> f64 {
    let sd = s2.sqrt();
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let f = |u: f64| (expit(eta1 + u) - expit(eta0 + u)) * norm * (-0.5 * u * u / s2).exp();
    integrate(f, -14.0 * sd, 14.0 * sd, 1e-13)
}
