//! Envelope-growth stability probe.

use serde::{Deserialize, Serialize};

use super::PhilError;

pub const MIN_WINDOW: usize = 64;
pub const SEGMENT_LEN: usize = 16;
pub const DEFAULT_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictKind {
    Stable,
    Marginal,
    Diverging,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    /// Fitted envelope growth, natural log per sample.
    pub growth_rate: f64,
}

impl Verdict {
    pub fn classify(growth_rate: f64, tol: f64) -> Self {
        let kind = if growth_rate > tol {
            VerdictKind::Diverging
        } else if growth_rate < -tol {
            VerdictKind::Stable
        } else {
            VerdictKind::Marginal
        };
        Verdict { kind, growth_rate }
    }
}

/// Splits the window into segments of about [`SEGMENT_LEN`] samples, takes
/// the peak magnitude of each, and fits a least-squares line through the log
/// of the peaks against segment centre. Peaks are floored at a tiny fraction
/// of the largest one so exact zeros stay finite.
pub fn stability_probe(window: &[f64], tol: f64) -> Result<Verdict, PhilError> {
    let n = window.len();
    if n < MIN_WINDOW {
        return Err(PhilError::WindowTooShort { len: n, min: MIN_WINDOW });
    }
    if window.iter().any(|x| !x.is_finite()) {
        return Ok(Verdict { kind: VerdictKind::Diverging, growth_rate: f64::INFINITY });
    }
    let segs = n / SEGMENT_LEN;
    let mut pts = Vec::with_capacity(segs);
    for k in 0..segs {
        let lo = k * n / segs;
        let hi = (k + 1) * n / segs;
        let peak = window[lo..hi].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        pts.push(((lo + hi - 1) as f64 / 2.0, peak));
    }
    let top = pts.iter().fold(0.0f64, |m, p| m.max(p.1));
    if top == 0.0 {
        return Ok(Verdict::classify(0.0, tol));
    }
    let floor = top * 1e-12;
    let ys: Vec<f64> = pts.iter().map(|p| p.1.max(floor).ln()).collect();
    let m = pts.len() as f64;
    let xm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ym = ys.iter().sum::<f64>() / m;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (p, y) in pts.iter().zip(&ys) {
        sxy += (p.0 - xm) * (y - ym);
        sxx += (p.0 - xm) * (p.0 - xm);
    }
    Ok(Verdict::classify(sxy / sxx, tol))
}
