//! Signal conditioning ahead of feature extraction: high-pass FIR design and
//! application, level-threshold breath segmentation, cross-correlation channel
//! alignment and energy normalization.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::labels::Posture;

/// Linear-phase (type I) FIR filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub cutoff_hz: f64,
    pub sample_rate_hz: f64,
}

impl FirFilter {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn group_delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    /// Complex response at `freq_hz`, evaluated directly from the taps.
    pub fn response(&self, freq_hz: f64) -> (f64, f64) {
        let w = 2.0 * PI * freq_hz / self.sample_rate_hz;
        self.taps
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (i, &h)| {
                let phase = w * i as f64;
                (re + h * phase.cos(), im - h * phase.sin())
            })
    }
}

/// Windowed-sinc high-pass: a Blackman-windowed low-pass normalized to unit DC gain,
/// then spectrally inverted.
pub fn design_highpass_fir(
    num_taps: usize,
    cutoff_hz: f64,
    sample_rate_hz: f64,
) -> Result<FirFilter> {
    if num_taps < 3 || num_taps.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "tap count must be odd and >= 3, got {num_taps}"
        )));
    }
    if !(sample_rate_hz > 0.0) || !(cutoff_hz > 0.0 && cutoff_hz < sample_rate_hz / 2.0) {
        return Err(Error::InvalidParameter(format!(
            "cutoff {cutoff_hz} Hz outside (0, {}) Hz",
            sample_rate_hz / 2.0
        )));
    }
    let fc = cutoff_hz / sample_rate_hz;
    let mid = (num_taps - 1) / 2;
    let span = (num_taps - 1) as f64;
    let mut taps = vec![0.0; num_taps];
    for i in 0..=mid {
        let m = i as f64 - mid as f64;
        let sinc = if i == mid {
            2.0 * fc
        } else {
            (2.0 * PI * fc * m).sin() / (PI * m)
        };
        let x = i as f64 / span;
        let window = 0.42 - 0.5 * (2.0 * PI * x).cos() + 0.08 * (4.0 * PI * x).cos();
        taps[i] = sinc * window;
        taps[num_taps - 1 - i] = taps[i];
    }
    // Sum in mirrored pairs so normalization keeps exact symmetry.
    let sum: f64 = taps[mid] + 2.0 * taps[..mid].iter().sum::<f64>();
    for t in &mut taps {
        *t = -*t / sum;
    }
    taps[mid] += 1.0;
    Ok(FirFilter {
        taps,
        cutoff_hz,
        sample_rate_hz,
    })
}

const DIRECT_CONV_LIMIT: usize = 1 << 16;

/// Zero-padded convolution with the group delay removed, so the output has the
/// input's length and timing.
pub fn apply_fir(filter: &FirFilter, signal: &[f64]) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::Empty("signal passed to apply_fir"));
    }
    if filter.is_empty() {
        return Err(Error::Empty("filter has no taps"));
    }
    let delay = filter.group_delay();
    let n = signal.len();
    if filter.len() * n <= DIRECT_CONV_LIMIT {
        let taps = &filter.taps;
        Ok((0..n)
            .map(|out| {
                let centre = out + delay;
                let lo = centre.saturating_sub(n - 1);
                let hi = centre.min(taps.len() - 1);
                (lo..=hi).map(|i| taps[i] * signal[centre - i]).sum()
            })
            .collect())
    } else {
        let full = fft::convolve(signal, &filter.taps);
        Ok(full[delay..delay + n].to_vec())
    }
}

/// Level-threshold segmentation parameters. Durations are in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationParams {
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    /// Threshold as a multiple of the noise-floor frame RMS.
    pub threshold_factor: f64,
    /// Percentile (0..100) of framewise RMS used as the noise floor.
    pub noise_percentile: f64,
    pub min_breath_ms: f64,
    pub max_breath_ms: f64,
    pub merge_gap_ms: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            frame_len_ms: 20.0,
            hop_ms: 10.0,
            threshold_factor: 3.0,
            noise_percentile: 10.0,
            min_breath_ms: 150.0,
            max_breath_ms: 2000.0,
            merge_gap_ms: 60.0,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop_ms > 0.0 && self.frame_len_ms >= self.hop_ms) {
            return Err(Error::InvalidParameter(
                "need frame_len_ms >= hop_ms > 0".into(),
            ));
        }
        if !(self.min_breath_ms < self.max_breath_ms) {
            return Err(Error::InvalidParameter(
                "need min_breath_ms < max_breath_ms".into(),
            ));
        }
        if !(0.0..=100.0).contains(&self.noise_percentile) || !(self.threshold_factor > 0.0) {
            return Err(Error::InvalidParameter(
                "noise_percentile must be in [0, 100] and threshold_factor positive".into(),
            ));
        }
        Ok(())
    }
}

fn ms_to_samples(ms: f64, sample_rate: f64) -> usize {
    (ms * 1e-3 * sample_rate).round() as usize
}

/// Half-open sample ranges `[start, end)` whose frames exceed the level threshold.
pub fn segment_breaths(
    signal: &[f64],
    sample_rate_hz: f64,
    params: &SegmentationParams,
) -> Result<Vec<(usize, usize)>> {
    params.validate()?;
    let frame = ms_to_samples(params.frame_len_ms, sample_rate_hz).max(1);
    let hop = ms_to_samples(params.hop_ms, sample_rate_hz).max(1);
    if signal.len() < frame {
        return Err(Error::TooShort {
            needed: frame,
            got: signal.len(),
        });
    }
    let n_frames = 1 + (signal.len() - frame) / hop;
    let rms: Vec<f64> = (0..n_frames)
        .map(|f| {
            let w = &signal[f * hop..f * hop + frame];
            (w.iter().map(|v| v * v).sum::<f64>() / frame as f64).sqrt()
        })
        .collect();
    let mut sorted = rms.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = (params.noise_percentile / 100.0 * (n_frames - 1) as f64).floor() as usize;
    let threshold = params.threshold_factor * sorted[rank];

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (f, &r) in rms.iter().enumerate() {
        match (r > threshold, start) {
            (true, None) => start = Some(f),
            (false, Some(s)) => {
                runs.push((s * hop, ((f - 1) * hop + frame).min(signal.len())));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s * hop, ((n_frames - 1) * hop + frame).min(signal.len())));
    }

    let merge_gap = ms_to_samples(params.merge_gap_ms, sample_rate_hz);
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for (s, e) in runs {
        match merged.last_mut() {
            Some(last) if s < last.1 + merge_gap => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    let min_len = ms_to_samples(params.min_breath_ms, sample_rate_hz);
    let max_len = ms_to_samples(params.max_breath_ms, sample_rate_hz);
    merged.retain(|&(s, e)| e - s >= min_len && e - s <= max_len);
    Ok(merged)
}

/// Output of [`align_channels`]: shifted channels plus the lag removed from each.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub channels: Vec<Vec<f64>>,
    /// Lag in samples; positive means the channel trailed the reference.
    pub lags: Vec<isize>,
}

/// Shifts every channel onto the reference at the lag maximizing the absolute
/// cross-correlation within `±max_lag` samples. Ties go to the smaller |lag|.
pub fn align_channels(
    channels: &[Vec<f64>],
    reference: usize,
    max_lag: usize,
) -> Result<Alignment> {
    if channels.len() < 2 {
        return Err(Error::InvalidParameter(
            "alignment needs at least two channels".into(),
        ));
    }
    let reference_signal = channels.get(reference).ok_or_else(|| {
        Error::InvalidParameter(format!("reference channel {reference} out of range"))
    })?;
    let n = reference_signal.len();
    if channels.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("channels differ in length".into()));
    }
    if reference_signal.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("reference channel is all zeros".into()));
    }
    let max_lag = max_lag.min(n.saturating_sub(1));

    let lags: Vec<isize> = channels
        .par_iter()
        .enumerate()
        .map(|(c, signal)| {
            if c == reference {
                return 0;
            }
            let xc = fft::cross_correlation(reference_signal, signal, max_lag);
            let mut best = 0isize;
            let mut best_val = f64::NEG_INFINITY;
            for magnitude in 0..=max_lag as isize {
                for lag in [magnitude, -magnitude] {
                    let v = xc[(lag + max_lag as isize) as usize].abs();
                    if v > best_val {
                        best_val = v;
                        best = lag;
                    }
                    if magnitude == 0 {
                        break;
                    }
                }
            }
            best
        })
        .collect();

    let aligned = channels
        .iter()
        .zip(&lags)
        .map(|(signal, &lag)| {
            (0..n as isize)
                .map(|i| {
                    let src = i + lag;
                    if src >= 0 && (src as usize) < n {
                        signal[src as usize]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(Alignment {
        channels: aligned,
        lags,
    })
}

pub fn normalize_energy(signal: &[f64]) -> Result<Vec<f64>> {
    let energy: f64 = signal.iter().map(|v| v * v).sum();
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(Error::Degenerate(
            "signal has zero or non-finite energy".into(),
        ));
    }
    let scale = 1.0 / energy.sqrt();
    Ok(signal.iter().map(|v| v * scale).collect())
}

/// One segmented breath: aligned, unit-energy channels of a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct BreathInstance {
    pub id: u64,
    pub speaker: String,
    pub posture: Posture,
    pub channels: Vec<Vec<f64>>,
    pub sample_rate_hz: f64,
}

impl BreathInstance {
    pub fn new(
        id: u64,
        speaker: String,
        posture: Posture,
        channels: Vec<Vec<f64>>,
        sample_rate_hz: f64,
    ) -> Result<Self> {
        let n = channels.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::Empty("breath instance without samples"));
        }
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("breath channels differ in length".into()));
        }
        for c in &channels {
            let e: f64 = c.iter().map(|v| v * v).sum();
            if (e - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "breath channel energy {e} is not unit"
                )));
            }
        }
        Ok(Self {
            id,
            speaker,
            posture,
            channels,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, amp: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| amp * rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn three_tap_symmetry_and_bad_args() {
        let f = design_highpass_fir(3, 1000.0, 4000.0).unwrap();
        assert_eq!(f.taps[0], f.taps[2]);
        assert!(design_highpass_fir(4, 70.0, 48000.0).is_err());
        assert!(design_highpass_fir(1, 70.0, 48000.0).is_err());
        assert!(design_highpass_fir(101, 24000.0, 48000.0).is_err());
        assert!(design_highpass_fir(101, 0.0, 48000.0).is_err());
    }

    #[test]
    fn zero_in_zero_out_and_empty_error() {
        let f = design_highpass_fir(31, 70.0, 8000.0).unwrap();
        assert_eq!(apply_fir(&f, &[0.0; 100]).unwrap(), vec![0.0; 100]);
        assert!(apply_fir(&f, &[]).is_err());
    }

    #[test]
    fn impulse_reproduces_centered_taps() {
        for (taps, n) in [(31, 200), (1025, 5000)] {
            let f = design_highpass_fir(taps, 70.0, 8000.0).unwrap();
            let mut x = vec![0.0; n];
            let at = n / 2;
            x[at] = 1.0;
            let y = apply_fir(&f, &x).unwrap();
            let d = f.group_delay();
            for (i, &v) in y.iter().enumerate() {
                let k = i as isize - at as isize + d as isize;
                let expected = if k >= 0 && (k as usize) < f.len() {
                    f.taps[k as usize]
                } else {
                    0.0
                };
                assert!((v - expected).abs() < 1e-12, "sample {i}");
            }
        }
    }

    #[test]
    fn fir_is_linear() {
        let f = design_highpass_fir(501, 70.0, 8000.0).unwrap();
        let x = noise(3000, 1.0, 1);
        let y = noise(3000, 1.0, 2);
        let (a, b) = (0.7, -2.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = apply_fir(&f, &combo).unwrap();
        let fx = apply_fir(&f, &x).unwrap();
        let fy = apply_fir(&f, &y).unwrap();
        for i in 0..3000 {
            assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn group_delay_from_phase_slope() {
        let f = design_highpass_fir(257, 70.0, 8000.0).unwrap();
        let (f0, df) = (1000.0, 0.5);
        let phase = |freq: f64| {
            let (re, im) = f.response(freq);
            im.atan2(re)
        };
        let mut dphi = phase(f0 + df) - phase(f0);
        while dphi > PI {
            dphi -= 2.0 * PI;
        }
        while dphi < -PI {
            dphi += 2.0 * PI;
        }
        let delay = -dphi / (2.0 * PI * df / 8000.0);
        assert!((delay - 128.0).abs() < 0.5, "delay {delay}");
    }

    #[test]
    fn silence_has_no_segments() {
        let params = SegmentationParams::default();
        assert!(segment_breaths(&vec![0.0; 8000], 8000.0, &params)
            .unwrap()
            .is_empty());
        let quiet = noise(8000, 1e-3, 3);
        assert!(segment_breaths(&quiet, 8000.0, &params).unwrap().is_empty());
        assert!(segment_breaths(&[0.0; 10], 8000.0, &params).is_err());
    }

    #[test]
    fn single_burst_found_within_one_frame() {
        let fs = 8000.0;
        let mut x = noise(20000, 1e-3, 4);
        let burst = noise(4000, 0.5, 5);
        x[8000..12000]
            .iter_mut()
            .zip(&burst)
            .for_each(|(a, b)| *a += b);
        let segs = segment_breaths(&x, fs, &SegmentationParams::default()).unwrap();
        assert_eq!(segs.len(), 1);
        let frame = 160;
        assert!((segs[0].0 as isize - 8000).abs() <= frame);
        assert!((segs[0].1 as isize - 12000).abs() <= frame);
    }

    #[test]
    fn close_bursts_merge() {
        let fs = 8000.0;
        let mut x = noise(24000, 1e-3, 6);
        let burst = noise(2000, 0.5, 7);
        // 30 ms gap, below the 60 ms merge gap
        x[8000..10000]
            .iter_mut()
            .zip(&burst)
            .for_each(|(a, b)| *a += b);
        x[10240..12240]
            .iter_mut()
            .zip(&burst)
            .for_each(|(a, b)| *a += b);
        let params = SegmentationParams::default();
        let segs = segment_breaths(&x, fs, &params).unwrap();
        assert_eq!(segs.len(), 1);
        assert!(segs[0].1 >= 12000);
        assert_eq!(segs, segment_breaths(&x, fs, &params).unwrap());
    }

    #[test]
    fn align_recovers_delay_and_polarity() {
        let reference = noise(2000, 1.0, 8);
        let delayed: Vec<f64> = (0..2000)
            .map(|i| if i >= 37 { reference[i - 37] } else { 0.0 })
            .collect();
        let flipped: Vec<f64> = (0..2000)
            .map(|i| if i >= 10 { -reference[i - 10] } else { 0.0 })
            .collect();
        let out = align_channels(
            &[reference.clone(), reference.clone(), delayed, flipped],
            0,
            100,
        )
        .unwrap();
        assert_eq!(out.lags, vec![0, 0, 37, 10]);
        assert_eq!(out.channels[1], reference);
        assert_eq!(&out.channels[2][..2000 - 37], &reference[..2000 - 37]);
        assert!(out.channels[2][2000 - 37..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn align_errors() {
        assert!(align_channels(&[vec![1.0; 4]], 0, 2).is_err());
        assert!(align_channels(&[vec![1.0; 4], vec![1.0; 5]], 0, 2).is_err());
        assert!(matches!(
            align_channels(&[vec![0.0; 4], vec![1.0; 4]], 0, 2),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let out = normalize_energy(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
        let twice = normalize_energy(&out).unwrap();
        for (a, b) in out.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-9);
        }
        let x = noise(100, 1.0, 9);
        let scaled: Vec<f64> = x.iter().map(|v| 7.0 * v).collect();
        let (nx, ns) = (
            normalize_energy(&x).unwrap(),
            normalize_energy(&scaled).unwrap(),
        );
        for (a, b) in nx.iter().zip(&ns) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize_energy(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn breath_instance_requires_unit_energy() {
        let c = normalize_energy(&[1.0, 2.0, 3.0]).unwrap();
        assert!(BreathInstance::new(
            0,
            "s".into(),
            Posture::Lying,
            vec![c.clone(), c.clone()],
            8000.0
        )
        .is_ok());
        assert!(BreathInstance::new(
            0,
            "s".into(),
            Posture::Lying,
            vec![c, vec![1.0, 1.0, 1.0]],
            8000.0
        )
        .is_err());
    }
}
