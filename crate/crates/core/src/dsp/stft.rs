//! Short-time Fourier analysis and overlap-add synthesis.
//!
//! Frames are centered: the signal is reflect-padded by `n_fft / 2` on each
//! side, so a signal of `len` samples yields `1 + len / hop` frames. The
//! Nyquist bin is discarded after analysis and re-inserted as zero before
//! synthesis.

use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::spectrogram::{ComplexSpectrogram, Compression};
use super::waveform::Waveform;
use crate::error::{Error, Result};

pub const N_FFT: usize = 1024;
pub const HOP: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: N_FFT,
            hop: HOP,
        }
    }
}

impl StftConfig {
    /// Retained bins per frame (Nyquist dropped).
    pub fn bins(&self) -> usize {
        self.n_fft / 2
    }

    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Signal length whose centered analysis yields exactly `frames` frames.
    pub fn len_for_frames(&self, frames: usize) -> usize {
        (frames - 1) * self.hop
    }

    /// Hz per bin at `sample_rate`.
    pub fn bin_hz(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.n_fft as f64
    }
}

/// Periodic Hann window; its 50 %-overlap shifts sum to one.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        Self {
            cfg,
            window: hann_periodic(cfg.n_fft),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        }
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn analyze(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        let StftConfig { n_fft, hop } = self.cfg;
        if w.len() < n_fft {
            return Err(Error::InvalidArgument(format!(
                "signal of {} samples is shorter than one {n_fft}-sample frame",
                w.len()
            )));
        }
        let padded = reflect_pad(w.samples(), n_fft / 2);
        let frames = self.cfg.frames_for(w.len());
        let bins = self.cfg.bins();
        let mut coeffs = vec![0.0; bins * frames * 2];
        let mut frame = self.forward.make_input_vec();
        let mut spectrum = self.forward.make_output_vec();
        for t in 0..frames {
            let chunk = &padded[t * hop..t * hop + n_fft];
            for ((dst, x), win) in frame.iter_mut().zip(chunk).zip(&self.window) {
                *dst = x * win;
            }
            self.forward
                .process(&mut frame, &mut spectrum)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for (f, c) in spectrum.iter().take(bins).enumerate() {
                let i = (f * frames + t) * 2;
                coeffs[i] = c.re;
                coeffs[i + 1] = c.im;
            }
        }
        ComplexSpectrogram::new(bins, frames, coeffs, n_fft, hop, w.sample_rate())
    }

    /// Weighted overlap-add inverse. Output has `length` samples when given,
    /// otherwise `hop * (T - 1)`.
    pub fn synthesize(&self, s: &ComplexSpectrogram, length: Option<usize>) -> Result<Waveform> {
        if let Compression::PowerLaw(a) = s.compression {
            return Err(Error::Compressed(a));
        }
        let StftConfig { n_fft, hop } = self.cfg;
        if s.n_fft != n_fft || s.hop != hop || s.bins() != self.cfg.bins() {
            return Err(Error::shape(
                format!("{} bins, n_fft {n_fft}, hop {hop}", self.cfg.bins()),
                format!("{} bins, n_fft {}, hop {}", s.bins(), s.n_fft, s.hop),
            ));
        }
        let frames = s.frames();
        let pad = n_fft / 2;
        let full = n_fft + hop * (frames - 1);
        let mut acc = vec![0.0; full];
        let mut env = vec![0.0; full];
        let mut spectrum = self.inverse.make_input_vec();
        let mut frame = self.inverse.make_output_vec();
        let norm = 1.0 / n_fft as f64;
        for t in 0..frames {
            for (f, c) in spectrum.iter_mut().enumerate() {
                *c = if f < s.bins() {
                    let (re, im) = s.get(f, t);
                    Complex::new(re, im)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            // A real signal has a real DC term.
            spectrum[0].im = 0.0;
            self.inverse
                .process(&mut spectrum, &mut frame)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let off = t * hop;
            for (i, (x, win)) in frame.iter().zip(&self.window).enumerate() {
                acc[off + i] += x * norm * win;
                env[off + i] += win * win;
            }
        }
        let natural = hop * (frames - 1);
        let len = length.unwrap_or(natural);
        let mut out = vec![0.0; len];
        for (i, o) in out.iter_mut().enumerate() {
            let j = i + pad;
            if j < full && env[j] > 1e-11 {
                *o = acc[j] / env[j];
            }
        }
        Waveform::new(out, s.sample_rate)
    }
}

impl Default for Stft {
    fn default() -> Self {
        Self::new(StftConfig::default())
    }
}

/// STFT with the default 1024/512 Hann configuration.
pub fn stft(w: &Waveform) -> Result<ComplexSpectrogram> {
    Stft::default().analyze(w)
}

pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    Stft::new(StftConfig {
        n_fft: s.n_fft,
        hop: s.hop,
    })
    .synthesize(s, None)
}

/// Zero-pads to a whole number of hops. Past the last frame centre only one
/// window covers the signal, so synthesis there divides by a vanishing
/// envelope; after padding every original sample is covered twice.
pub fn pad_to_hop(w: &Waveform) -> Waveform {
    w.padded_to(w.len().div_ceil(HOP) * HOP)
}

pub fn istft_with_len(s: &ComplexSpectrogram, length: usize) -> Result<Waveform> {
    Stft::new(StftConfig {
        n_fft: s.n_fft,
        hop: s.hop,
    })
    .synthesize(s, Some(length))
}
