//! Thin helpers over `rustfft` shared by the filtering, alignment and Hilbert code.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place forward DFT, unnormalized.
pub fn forward(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()));
    fft.process(buf);
}

/// In-place inverse DFT, unnormalized (caller divides by N).
pub fn inverse(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(buf.len()));
    fft.process(buf);
}

/// Full linear convolution, length `a.len() + b.len() - 1`.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut fa = to_complex_padded(a, n);
    let mut fb = to_complex_padded(b, n);
    forward(&mut fa);
    forward(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inverse(&mut fa);
    let scale = 1.0 / n as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Cross-correlation `r[lag] = Σ_n a[n] · b[n + lag]` for `lag` in `-max_lag..=max_lag`.
/// Returned vector is indexed by `lag + max_lag`.
pub fn cross_correlation(a: &[f64], b: &[f64], max_lag: usize) -> Vec<f64> {
    let reversed: Vec<f64> = a.iter().rev().copied().collect();
    // conv(rev(a), b)[m] = Σ_n a[n] b[m - (len_a - 1) + n]  =>  lag = m - (len_a - 1)
    let full = convolve(&reversed, b);
    let zero = a.len() as isize - 1;
    (-(max_lag as isize)..=max_lag as isize)
        .map(|lag| {
            let idx = zero + lag;
            if idx >= 0 && (idx as usize) < full.len() {
                full[idx as usize]
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn to_complex_padded(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (o, &v) in out.iter_mut().zip(x) {
        o.re = v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    #[test]
    fn convolve_matches_direct() {
        let a: Vec<f64> = (0..37).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..13).map(|i| (i as f64 * 0.3).sin()).collect();
        let fast = convolve(&a, &b);
        let slow = direct_convolve(&a, &b);
        for (f, s) in fast.iter().zip(&slow) {
            assert!((f - s).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_correlation_peaks_at_delay() {
        let a: Vec<f64> = (0..200).map(|i| ((i * i) % 17) as f64 - 8.0).collect();
        let mut b = vec![0.0; 200];
        b[5..].copy_from_slice(&a[..195]);
        let r = cross_correlation(&a, &b, 20);
        let best = r
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best as isize - 20, 5);
    }
}
