use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::records::{ErrorField, RunRecord};

fn frontier_order(a: &(f64, f64, u64, &str), b: &(f64, f64, u64, &str)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.cmp(&b.2))
        .then(a.3.cmp(b.3))
}

/// Runs not dominated in (compute, error): no other run has `C <= C_r` and
/// `E < E_r`. Sorted by compute ascending; ties on (C, E) keep the smaller
/// model. Runs lacking the chosen error, or with a non-finite one, are skipped.
pub fn pareto_frontier(runs: &[RunRecord], field: ErrorField) -> Vec<RunRecord> {
    let mut keyed: Vec<(f64, f64, u64, &str, &RunRecord)> = runs
        .iter()
        .filter_map(|r| {
            let e = r.error(field)?;
            e.is_finite().then_some((r.compute_flops as f64, e, r.params, r.run_id.as_str(), r))
        })
        .collect();
    keyed.sort_by(|a, b| frontier_order(&(a.0, a.1, a.2, a.3), &(b.0, b.1, b.2, b.3)));
    let mut best = f64::INFINITY;
    let mut out = Vec::new();
    for (_, e, _, _, r) in keyed {
        if e < best {
            best = e;
            out.push(r.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Params,
    Examples,
}

/// `ln y = intercept + exponent * ln C` fitted by ordinary least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationFit {
    pub quantity: Quantity,
    pub exponent: f64,
    /// Natural-log intercept.
    pub intercept: f64,
    pub points: usize,
}

impl AllocationFit {
    pub fn predict(&self, c: f64) -> f64 {
        (self.intercept + self.exponent * c.ln()).exp()
    }
}

/// A compute-optimal point: compute, error, parameter count and dataset size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub compute: f64,
    pub error: f64,
    pub params: f64,
    pub examples: f64,
}

impl FrontierPoint {
    pub fn from_run(r: &RunRecord, field: ErrorField) -> Option<Self> {
        Some(Self {
            compute: r.compute_flops as f64,
            error: r.error(field)?,
            params: r.params as f64,
            examples: r.dataset_size as f64,
        })
    }
}

fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Log-log fits of P and N against C. Points sharing a compute value are
/// first collapsed to the lowest-error one (ties to the smaller model).
pub fn fit_allocation(points: &[FrontierPoint]) -> Result<(AllocationFit, AllocationFit)> {
    for p in points {
        if !(p.compute > 0.0 && p.params > 0.0 && p.examples > 0.0) {
            return Err(Error::invalid(format!("allocation fit needs positive C, P and N, got {p:?}")));
        }
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| {
        a.compute
            .total_cmp(&b.compute)
            .then(a.error.total_cmp(&b.error))
            .then(a.params.total_cmp(&b.params))
            .then(a.examples.total_cmp(&b.examples))
    });
    pts.dedup_by(|later, first| later.compute == first.compute);
    if pts.len() < 2 {
        return Err(Error::invalid("allocation fit needs at least 2 distinct compute values"));
    }
    let lc: Vec<f64> = pts.iter().map(|p| p.compute.ln()).collect();
    let fit = |quantity, ys: Vec<f64>| {
        let (exponent, intercept) = ols(&lc, &ys);
        AllocationFit {
            quantity,
            exponent,
            intercept,
            points: ys.len(),
        }
    };
    Ok((
        fit(Quantity::Params, pts.iter().map(|p| p.params.ln()).collect()),
        fit(Quantity::Examples, pts.iter().map(|p| p.examples.ln()).collect()),
    ))
}

/// Frontier over `runs` followed by [`fit_allocation`].
pub fn fit_allocation_runs(runs: &[RunRecord], field: ErrorField) -> Result<(AllocationFit, AllocationFit)> {
    let pts: Vec<FrontierPoint> = pareto_frontier(runs, field)
        .iter()
        .filter_map(|r| FrontierPoint::from_run(r, field))
        .collect();
    fit_allocation(&pts)
}
