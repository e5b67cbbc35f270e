use super::resample::sinc;
use super::waveform::Waveform;
use crate::error::{Error, Result};

/// Tap count of the Hann-windowed low-pass used to synthesize band-limited inputs.
pub const LOWPASS_TAPS: usize = 513;

/// Linear-phase low-pass taps with unity DC gain. `cutoff` is in cycles per sample.
pub fn hann_lowpass_kernel(taps: usize, cutoff: f64) -> Vec<f64> {
    assert!(
        taps % 2 == 1,
        "odd tap count keeps the group delay integral"
    );
    let center = (taps / 2) as f64;
    let denom = (taps - 1) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let n = n as f64;
            let win = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n / denom).cos();
            2.0 * cutoff * sinc(2.0 * cutoff * (n - center)) * win
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Zero-padded convolution aligned on the kernel center; output has the input length.
pub(crate) fn convolve_centered(x: &[f64], h: &[f64]) -> Vec<f64> {
    let half = h.len() / 2;
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            let lo = (i - half as isize).max(0);
            let hi = (i + half as isize + 1).min(n);
            let mut acc = 0.0;
            for k in lo..hi {
                acc += x[k as usize] * h[(k - i + half as isize) as usize];
            }
            acc
        })
        .collect()
}

pub fn lowpass_hann(w: &Waveform, cutoff_hz: f64) -> Result<Waveform> {
    let nyquist = w.sample_rate() as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::InvalidArgument(format!(
            "low-pass cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    let h = hann_lowpass_kernel(LOWPASS_TAPS, cutoff_hz / w.sample_rate() as f64);
    Waveform::new(convolve_centered(w.samples(), &h), w.sample_rate())
}
