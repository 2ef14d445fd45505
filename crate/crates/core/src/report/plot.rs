use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::scaling::{log_space, ErrorField, PowerLawFit, RunRecord};

/// Number of compute values the fitted curve is sampled at.
pub const FIT_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub field: ErrorField,
    pub title: String,
    pub width: f64,
    pub height: f64,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            field: ErrorField::Upstream,
            title: "Error vs compute".into(),
            width: 720.0,
            height: 480.0,
        }
    }
}

const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    w: f64,
    h: f64,
}

impl Axes {
    fn px(&self, c: f64) -> f64 {
        MARGIN_L + (c.log10() - self.x0) / (self.x1 - self.x0) * (self.w - MARGIN_L - MARGIN_R)
    }

    fn py(&self, e: f64) -> f64 {
        self.h - MARGIN_B - (e.log10() - self.y0) / (self.y1 - self.y0) * (self.h - MARGIN_T - MARGIN_B)
    }
}

fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    let (l, h) = (lo.log10(), hi.log10());
    if h - l < 1e-9 {
        (l - 0.5, h + 0.5)
    } else {
        let pad = 0.05 * (h - l);
        (l - pad, h + pad)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Blue for the smallest model through red for the largest.
fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (40.0 + 200.0 * t).round() as u8;
    let b = (240.0 - 200.0 * t).round() as u8;
    format!("#{r:02x}40{b:02x}")
}

fn unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v.ln() - lo.ln()) / (hi.ln() - lo.ln())
    } else {
        0.5
    }
}

/// Log-log scatter of error against compute. Color encodes parameter count,
/// radius encodes dataset size, runs of one (model, N) pair are joined across
/// epoch counts and the fitted curve is overlaid across its domain.
pub fn scaling_plot_svg(runs: &[RunRecord], fit: Option<&PowerLawFit>, spec: &PlotSpec) -> Result<String> {
    let pts: Vec<(&RunRecord, f64, f64)> = runs
        .iter()
        .filter_map(|r| r.error(spec.field).map(|e| (r, r.compute_flops as f64, e)))
        .collect();
    if pts.is_empty() {
        return Err(Error::invalid("no runs with the requested error to plot"));
    }
    if let Some((r, _, e)) = pts.iter().find(|(_, c, e)| !(*c > 0.0 && *e > 0.0)) {
        return Err(Error::invalid(format!(
            "run {} has non-positive compute or error {e}; log axes need positive values",
            r.run_id
        )));
    }

    let fit_curve: Vec<(f64, f64)> = fit
        .map(|f| {
            log_space(f.c_min, f.c_max, FIT_SAMPLES)
                .into_iter()
                .map(|c| (c, f.predict(c)))
                .filter(|&(_, e)| e > 0.0)
                .collect()
        })
        .unwrap_or_default();

    let all_c = pts.iter().map(|p| p.1).chain(fit_curve.iter().map(|p| p.0));
    let all_e: Vec<f64> = pts.iter().map(|p| p.2).chain(fit_curve.iter().map(|p| p.1)).collect();
    let (cmin, cmax) = all_c.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let emin = all_e.iter().cloned().fold(f64::INFINITY, f64::min);
    let emax = all_e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1) = padded_range(cmin, cmax);
    let (y0, y1) = padded_range(emin, emax);
    let ax = Axes {
        x0,
        x1,
        y0,
        y1,
        w: spec.width,
        h: spec.height,
    };

    let pmin = pts.iter().map(|p| p.0.params as f64).fold(f64::INFINITY, f64::min);
    let pmax = pts.iter().map(|p| p.0.params as f64).fold(f64::NEG_INFINITY, f64::max);
    let nmin = pts.iter().map(|p| p.0.dataset_size as f64).fold(f64::INFINITY, f64::min);
    let nmax = pts.iter().map(|p| p.0.dataset_size as f64).fold(f64::NEG_INFINITY, f64::max);

    let mut s = String::new();
    let (w, h) = (spec.width, spec.height);
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        w / 2.0,
        escape(&spec.title)
    )
    .unwrap();

    // Frame and decade ticks.
    let (left, right, top, bottom) = (MARGIN_L, w - MARGIN_R, MARGIN_T, h - MARGIN_B);
    writeln!(
        s,
        r#"<rect class="frame" x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        right - left,
        bottom - top
    )
    .unwrap();
    for d in (x0.ceil() as i32)..=(x1.floor() as i32) {
        let x = ax.px(10f64.powi(d));
        writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{bottom}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">1e{d}</text>"#,
            bottom + 5.0,
            bottom + 18.0
        )
        .unwrap();
    }
    let mut y_ticks: Vec<f64> = Vec::new();
    let mut d = y0.floor() as i32;
    while (d as f64) <= y1 {
        for m in [1.0, 2.0, 5.0] {
            let v = m * 10f64.powi(d);
            let lv = v.log10();
            if lv >= y0 && lv <= y1 {
                y_ticks.push(v);
            }
        }
        d += 1;
    }
    for v in y_ticks {
        let y = ax.py(v);
        writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{v}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">compute C (FLOPs)</text>"#,
        (left + right) / 2.0,
        h - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">test error</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0
    )
    .unwrap();

    // One trajectory per (model, N), ordered by epochs.
    type Key = (usize, usize, usize, u64);
    let mut groups: BTreeMap<Key, Vec<(u64, f64, f64, u64)>> = BTreeMap::new();
    for (r, c, e) in &pts {
        groups
            .entry((r.depth, r.width, r.expansion, r.dataset_size))
            .or_default()
            .push((r.epochs, *c, *e, r.params));
    }
    for members in groups.values_mut() {
        members.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        if members.len() < 2 {
            continue;
        }
        let coords: Vec<String> = members
            .iter()
            .map(|(_, c, e, _)| format!("{:.2},{:.2}", ax.px(*c), ax.py(*e)))
            .collect();
        writeln!(
            s,
            r#"<polyline class="trajectory" fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            color(unit(members[0].3 as f64, pmin, pmax)),
            coords.join(" ")
        )
        .unwrap();
    }

    for (r, c, e) in &pts {
        let radius = 3.0 + 6.0 * unit(r.dataset_size as f64, nmin, nmax);
        writeln!(
            s,
            r#"<circle class="run" cx="{:.2}" cy="{:.2}" r="{radius:.2}" fill="{}" fill-opacity="0.8"><title>{} N={} T={} E={e:.4}</title></circle>"#,
            ax.px(*c),
            ax.py(*e),
            color(unit(r.params as f64, pmin, pmax)),
            escape(&r.notation()),
            r.dataset_size,
            r.epochs
        )
        .unwrap();
    }

    if !fit_curve.is_empty() {
        let coords: Vec<String> = fit_curve
            .iter()
            .map(|(c, e)| format!("{:.2},{:.2}", ax.px(*c), ax.py(*e)))
            .collect();
        let label = match fit.and_then(|f| f.alpha) {
            Some(alpha) => format!("fit: alpha = {alpha:.3}"),
            None => "fit: degenerate".to_string(),
        };
        writeln!(
            s,
            r#"<polyline class="fit" fill="none" stroke="black" stroke-dasharray="6 3" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="12">{}</text>"#,
            right - 8.0,
            top + 16.0,
            escape(&label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}
