//! Hilbert-Huang analysis: empirical mode decomposition by spline-envelope sifting,
//! the DFT-domain analytic signal, and instantaneous magnitude/frequency.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::preprocess::BreathInstance;

/// Default number of IMFs kept per channel.
pub const DEFAULT_IMFS: usize = 9;

const MIN_EMD_LEN: usize = 8;

/// Relative energy below which a sifted component is floating-point residue.
const ROUNDING_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiftingCriteria {
    /// Cauchy stop: Σ(h_prev − h)² / Σh_prev² below this ends sifting.
    pub sd_threshold: f64,
    pub max_sifts_per_imf: usize,
    /// Stop decomposing when residual energy / signal energy drops below this.
    pub residual_energy_fraction: f64,
    pub max_imfs: usize,
}

impl Default for SiftingCriteria {
    fn default() -> Self {
        Self {
            sd_threshold: 0.2,
            max_sifts_per_imf: 50,
            residual_energy_fraction: 1e-6,
            max_imfs: DEFAULT_IMFS,
        }
    }
}

impl SiftingCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(self.sd_threshold > 0.0) {
            return Err(Error::InvalidParameter(
                "sd_threshold must be positive".into(),
            ));
        }
        if self.max_sifts_per_imf == 0 {
            return Err(Error::InvalidParameter(
                "max_sifts_per_imf must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// IMFs (highest frequency first) plus the residual of one decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ImfSet {
    pub imfs: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
}

impl ImfSet {
    pub fn len(&self) -> usize {
        self.imfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imfs.is_empty()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = self.residual.clone();
        for imf in &self.imfs {
            for (o, v) in out.iter_mut().zip(imf) {
                *o += v;
            }
        }
        out
    }
}

#[derive(Debug, Default)]
pub(crate) struct Extrema {
    pub maxima: Vec<usize>,
    pub minima: Vec<usize>,
}

impl Extrema {
    fn count(&self) -> usize {
        self.maxima.len() + self.minima.len()
    }

    fn can_envelope(&self) -> bool {
        !self.maxima.is_empty() && !self.minima.is_empty() && self.count() >= 2
    }
}

/// Interior local extrema. A flat run counts once, at its middle sample.
pub(crate) fn find_extrema(x: &[f64]) -> Extrema {
    let mut ext = Extrema::default();
    let n = x.len();
    let mut i = 1;
    while i + 1 < n {
        let mut j = i;
        while j + 1 < n && x[j + 1] == x[i] {
            j += 1;
        }
        if j + 1 >= n {
            break;
        }
        let (before, value, after) = (x[i - 1], x[i], x[j + 1]);
        let at = (i + j) / 2;
        if value > before && value > after {
            ext.maxima.push(at);
        } else if value < before && value < after {
            ext.minima.push(at);
        }
        i = j + 1;
    }
    ext
}

pub fn zero_crossings(x: &[f64]) -> usize {
    x.windows(2)
        .filter(|w| (w[0] < 0.0) != (w[1] < 0.0))
        .count()
}

/// Natural cubic spline through `(xs, ys)` (strictly increasing `xs`), sampled at
/// integer positions `0..n`.
pub(crate) fn natural_spline(xs: &[f64], ys: &[f64], n: usize) -> Vec<f64> {
    let m = xs.len();
    debug_assert!(m >= 2 && m == ys.len());
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    // Second derivatives, zero at both ends; Thomas algorithm on the interior system.
    let mut second = vec![0.0; m];
    if m > 2 {
        let k = m - 2;
        let mut diag = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            diag[i] = 2.0 * (h[i] + h[i + 1]);
            rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
        }
        for i in 1..k {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * h[i];
            rhs[i] -= w * rhs[i - 1];
        }
        second[k] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            second[i + 1] = (rhs[i] - h[i + 1] * second[i + 2]) / diag[i];
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for t in 0..n {
        let t = t as f64;
        while seg + 2 < m && t > xs[seg + 1] {
            seg += 1;
        }
        let (x0, x1, hs) = (xs[seg], xs[seg + 1], h[seg]);
        let (a, b) = (x1 - t, t - x0);
        out.push(
            second[seg] * a * a * a / (6.0 * hs)
                + second[seg + 1] * b * b * b / (6.0 * hs)
                + (ys[seg] / hs - second[seg] * hs / 6.0) * a
                + (ys[seg + 1] / hs - second[seg + 1] * hs / 6.0) * b,
        );
    }
    out
}

/// Knot for an extremum at `i`: the vertex of the parabola through its neighbours.
fn refined_knot(x: &[f64], i: usize) -> (f64, f64) {
    let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
    let curvature = a - 2.0 * b + c;
    if curvature == 0.0 {
        return (i as f64, b);
    }
    let offset = (0.5 * (a - c) / curvature).clamp(-0.5, 0.5);
    (i as f64 + offset, b - 0.25 * (a - c) * offset)
}

/// Spline through the given extrema, with the two extrema nearest each end mirrored
/// across that end.
fn envelope(x: &[f64], idx: &[usize]) -> Vec<f64> {
    let n = x.len();
    let last = (n - 1) as f64;
    let knots: Vec<(f64, f64)> = idx.iter().map(|&i| refined_knot(x, i)).collect();
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(knots.len() + 4);
    for &(t, v) in knots.iter().take(2).rev() {
        pts.push((-t, v));
    }
    pts.extend_from_slice(&knots);
    for &(t, v) in knots.iter().rev().take(2) {
        pts.push((2.0 * last - t, v));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    natural_spline(&xs, &ys, n)
}

/// Mean of upper and lower envelopes, or `None` without both maxima and minima.
pub fn envelope_mean(x: &[f64]) -> Option<Vec<f64>> {
    let ext = find_extrema(x);
    if !ext.can_envelope() {
        return None;
    }
    let upper = envelope(x, &ext.maxima);
    let lower = envelope(x, &ext.minima);
    Some(
        upper
            .iter()
            .zip(&lower)
            .map(|(u, l)| 0.5 * (u + l))
            .collect(),
    )
}

/// Extrema and zero-crossing counts differ by at most one.
fn is_imf_shaped(h: &[f64]) -> bool {
    let ext = find_extrema(h).count();
    ext.abs_diff(zero_crossings(h)) <= 1
}

fn sift(mut h: Vec<f64>, criteria: &SiftingCriteria) -> Vec<f64> {
    for _ in 0..criteria.max_sifts_per_imf {
        let Some(mean) = envelope_mean(&h) else { break };
        let energy: f64 = h.iter().map(|v| v * v).sum();
        let change: f64 = mean.iter().map(|v| v * v).sum();
        for (v, m) in h.iter_mut().zip(&mean) {
            *v -= m;
        }
        if energy == 0.0 {
            break;
        }
        if change / energy < criteria.sd_threshold && is_imf_shaped(&h) {
            break;
        }
    }
    h
}

pub fn emd(signal: &[f64], criteria: &SiftingCriteria) -> Result<ImfSet> {
    criteria.validate()?;
    if signal.len() < MIN_EMD_LEN {
        return Err(Error::TooShort {
            needed: MIN_EMD_LEN,
            got: signal.len(),
        });
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("emd input"));
    }
    let total: f64 = signal.iter().map(|v| v * v).sum();
    let mut residual = signal.to_vec();
    let mut imfs = Vec::new();
    while imfs.len() < criteria.max_imfs {
        let energy: f64 = residual.iter().map(|v| v * v).sum();
        if total == 0.0 || energy < criteria.residual_energy_fraction * total {
            break;
        }
        if !find_extrema(&residual).can_envelope() {
            break;
        }
        let imf = sift(residual.clone(), criteria);
        if imf.iter().map(|v| v * v).sum::<f64>() < ROUNDING_FLOOR * total {
            // Extrema came from rounding noise on a trend.
            break;
        }
        for (r, c) in residual.iter_mut().zip(&imf) {
            *r -= c;
        }
        imfs.push(imf);
    }
    Ok(ImfSet { imfs, residual })
}

/// Complex signal whose real part is the source and imaginary part its Hilbert transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticSignal {
    pub samples: Vec<Complex64>,
}

impl AnalyticSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.samples.iter().map(|z| z.im.atan2(z.re)).collect()
    }
}

/// One-sided spectrum weights: 1 at DC and Nyquist, 2 for positive bins, 0 for negative.
fn hilbert_weight(k: usize, n: usize) -> f64 {
    if k == 0 || k == n / 2 {
        1.0
    } else if k < n / 2 {
        2.0
    } else {
        0.0
    }
}

/// Odd lengths are zero-padded by one sample for the DFT and trimmed afterwards.
pub fn analytic_signal(x: &[f64]) -> Result<AnalyticSignal> {
    if x.is_empty() {
        return Err(Error::Empty("analytic_signal input"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("analytic_signal input"));
    }
    let n = x.len() + x.len() % 2;
    let mut spec = fft::to_complex_padded(x, n);
    fft::forward(&mut spec);
    for (k, c) in spec.iter_mut().enumerate() {
        *c *= hilbert_weight(k, n);
    }
    fft::inverse(&mut spec);
    let scale = 1.0 / n as f64;
    let samples = x
        .iter()
        .zip(&spec)
        .map(|(&re, z)| Complex64::new(re, z.im * scale))
        .collect();
    Ok(AnalyticSignal { samples })
}

/// `sqrt(z · conj(z))` per sample.
pub fn instantaneous_magnitude(z: &AnalyticSignal) -> Vec<f64> {
    z.samples.iter().map(|c| (c * c.conj()).re.sqrt()).collect()
}

/// Derivative of the unwrapped phase in Hz: central differences inside, one-sided at the ends.
pub fn instantaneous_frequency(z: &AnalyticSignal, sample_rate_hz: f64) -> Result<Vec<f64>> {
    let n = z.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let mut phase = z.phase();
    for i in 1..n {
        let mut d = phase[i] - phase[i - 1];
        while d > PI {
            d -= 2.0 * PI;
        }
        while d < -PI {
            d += 2.0 * PI;
        }
        phase[i] = phase[i - 1] + d;
    }
    let scale = sample_rate_hz / (2.0 * PI);
    Ok((0..n)
        .map(|i| {
            let d = match i {
                0 => phase[1] - phase[0],
                i if i == n - 1 => phase[n - 1] - phase[n - 2],
                i => 0.5 * (phase[i + 1] - phase[i - 1]),
            };
            d * scale
        })
        .collect())
}

/// `K × N` instantaneous magnitudes of the first `k` IMFs of one signal; rows beyond
/// the number of IMFs found are zero.
pub fn channel_magnitudes(
    signal: &[f64],
    k: usize,
    criteria: &SiftingCriteria,
) -> Result<Vec<Vec<f64>>> {
    let criteria = SiftingCriteria {
        max_imfs: k,
        ..criteria.clone()
    };
    let set = emd(signal, &criteria)?;
    let mut rows = Vec::with_capacity(k);
    for imf in set.imfs.iter().take(k) {
        rows.push(instantaneous_magnitude(&analytic_signal(imf)?));
    }
    rows.resize(k, vec![0.0; signal.len()]);
    Ok(rows)
}

/// Per-channel `K × N_p` magnitude matrices for a breath instance.
pub fn hht_magnitudes(
    instance: &BreathInstance,
    k: usize,
    criteria: &SiftingCriteria,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    instance
        .channels
        .par_iter()
        .map(|c| channel_magnitudes(c, k, criteria))
        .collect()
}
