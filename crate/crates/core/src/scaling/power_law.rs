//! Fitting `E(C) = a (b + C)^(-alpha) + E_inf` to (compute, error) points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::lm::{lm_least_squares, Bounds, LeastSquares, LmOptions};

const ALPHA_MIN: f64 = 1e-6;
const ALPHA_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    /// Absent when the fit is degenerate.
    pub alpha: Option<f64>,
    pub e_inf: f64,
    /// Residual sum of squares in error space.
    pub rss: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub points: usize,
    /// Too few points, constant errors or a flat best fit; the curve is the constant `e_inf`.
    pub degenerate: bool,
}

impl PowerLawFit {
    pub fn predict(&self, c: f64) -> f64 {
        match self.alpha {
            Some(alpha) if !self.degenerate => self.a * (self.b + c).powf(-alpha) + self.e_inf,
            _ => self.e_inf,
        }
    }

    /// `n` log-spaced compute values across the fit domain.
    pub fn sample_domain(&self, n: usize) -> Vec<f64> {
        log_space(self.c_min, self.c_max, n)
    }
}

pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (l0, l1) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i + 1 == n {
                        hi
                    } else {
                        (l0 + (l1 - l0) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// The model in rescaled compute `x = C / c0`; parameters `[a', b', alpha, e_inf]`.
struct Problem<'a> {
    x: &'a [f64],
    e: &'a [f64],
}

impl LeastSquares for Problem<'_> {
    fn num_residuals(&self) -> usize {
        self.x.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for ((o, &x), &e) in out.iter_mut().zip(self.x).zip(self.e) {
            *o = p[0] * (p[1] + x).powf(-p[2]) + p[3] - e;
        }
    }

    fn jacobian(&self, p: &[f64], out: &mut [f64]) {
        let (a, b, alpha) = (p[0], p[1], p[2]);
        for (i, &x) in self.x.iter().enumerate() {
            let base = b + x;
            let pw = base.powf(-alpha);
            let row = &mut out[i * 4..i * 4 + 4];
            row[0] = pw;
            row[1] = -alpha * a * pw / base;
            row[2] = -a * pw * base.ln();
            row[3] = 1.0;
        }
    }
}

fn degenerate(c: &[f64], e: &[f64]) -> PowerLawFit {
    let mean = if e.iter().all(|&v| v == e[0]) {
        e[0]
    } else {
        e.iter().sum::<f64>() / e.len() as f64
    };
    PowerLawFit {
        a: 0.0,
        b: 0.0,
        alpha: None,
        e_inf: mean,
        rss: e.iter().map(|v| (v - mean).powi(2)).sum(),
        c_min: c.iter().cloned().fold(f64::INFINITY, f64::min),
        c_max: c.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        points: e.len(),
        degenerate: true,
    }
}

/// Initial guesses `[a', b', alpha, e_inf]` in rescaled compute.
pub(crate) fn start_grid(x: &[f64], e: &[f64]) -> Vec<[f64; 4]> {
    let min_e = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let mut starts = Vec::new();
    for alpha in log_space(0.05, 1.0, 8) {
        for e_inf in [0.0, 0.5 * min_e, 0.9 * min_e] {
            for b in [0.0, median] {
                // Pass through the first point.
                let lift = (e[0] - e_inf).max(1e-6 * e[0].max(1e-12));
                starts.push([lift * (b + x[0]).powf(alpha), b, alpha, e_inf]);
            }
        }
    }
    starts
}

/// Multi-start bounded least squares in linear error space. Points are
/// sorted internally, so the result does not depend on input order.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    for &(c, e) in points {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid(format!("compute must be positive and finite, got {c}")));
        }
        if !(0.0..=1.0).contains(&e) {
            return Err(Error::invalid(format!("error must lie in [0, 1], got {e}")));
        }
    }
    if points.is_empty() {
        return Err(Error::invalid("no points to fit"));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    let c: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let e: Vec<f64> = pts.iter().map(|p| p.1).collect();
    if pts.len() < 4 || e.iter().all(|&v| v == e[0]) {
        return Ok(degenerate(&c, &e));
    }

    let c0 = (c.iter().map(|v| v.ln()).sum::<f64>() / c.len() as f64).exp();
    let x: Vec<f64> = c.iter().map(|v| v / c0).collect();
    let min_e = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let problem = Problem { x: &x, e: &e };
    let bounds = Bounds {
        lower: vec![0.0, 0.0, ALPHA_MIN, 0.0],
        upper: vec![f64::INFINITY, f64::INFINITY, ALPHA_MAX, min_e],
    };
    let options = LmOptions::default();
    let mut best: Option<crate::scaling::lm::LmResult> = None;
    for start in start_grid(&x, &e) {
        let Ok(res) = lm_least_squares(&problem, &start, &bounds, &options) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| res.cost < b.cost) {
            best = Some(res);
        }
    }
    let best = best.ok_or_else(|| Error::NonFinite("every power-law start evaluated to a non-finite residual".into()))?;
    let [a_s, b_s, alpha, e_inf] = [best.params[0], best.params[1], best.params[2], best.params[3]];
    if !(a_s > 0.0) {
        let mut flat = degenerate(&c, &e);
        flat.e_inf = e_inf;
        flat.rss = best.cost;
        return Ok(flat);
    }
    Ok(PowerLawFit {
        a: a_s * c0.powf(alpha),
        b: b_s * c0,
        alpha: Some(alpha),
        e_inf,
        rss: best.cost,
        c_min: c[0],
        c_max: c[c.len() - 1],
        points: pts.len(),
        degenerate: false,
    })
}

/// Residual sum of squares of `fit` on `points`.
pub fn rss(fit: &PowerLawFit, points: &[(f64, f64)]) -> f64 {
    points.iter().map(|&(c, e)| (fit.predict(c) - e).powi(2)).sum()
}
