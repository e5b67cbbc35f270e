//! Band-limited sample-rate conversion with a Kaiser-windowed sinc kernel.
//!
//! The conversion ratio is reduced to `up / down`. Output sample `n` sits at
//! input time `n * down / up`; its value is the kernel-weighted sum of the input
//! samples within `ZERO_CROSSINGS` lobes on each side. For rational ratios with
//! a modest numerator the kernel is tabulated per fractional phase.

use super::waveform::Waveform;
use crate::error::{Error, Result};

/// Sinc lobes on each side of the kernel center.
pub const ZERO_CROSSINGS: usize = 64;
/// Kaiser shape parameter; about 81 dB of stopband rejection.
pub const KAISER_BETA: f64 = 8.0;
/// Kernel cutoff relative to the lower of the two Nyquist frequencies.
pub const ROLLOFF: f64 = 0.95;

const MAX_TABLE_PHASES: u64 = 4096;

pub(crate) fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

pub(crate) fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

struct Kernel {
    cutoff: f64,
    half_width: f64,
    inv_i0_beta: f64,
}

impl Kernel {
    fn new(scale: f64) -> Self {
        let cutoff = scale * ROLLOFF;
        Self {
            cutoff,
            half_width: ZERO_CROSSINGS as f64 / cutoff,
            inv_i0_beta: 1.0 / bessel_i0(KAISER_BETA),
        }
    }

    /// Kernel value at offset `tau` input samples from the output instant.
    fn eval(&self, tau: f64) -> f64 {
        let r = tau / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let win = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) * self.inv_i0_beta;
        self.cutoff * sinc(self.cutoff * tau) * win
    }

    /// Normalized taps for fractional position `frac` in [0, 1); tap `j`
    /// multiplies input sample `i0 - reach + 1 + j`.
    fn taps(&self, frac: f64, reach: usize) -> Vec<f64> {
        let mut taps: Vec<f64> = (0..2 * reach)
            .map(|j| self.eval(reach as f64 - 1.0 - j as f64 + frac))
            .collect();
        let sum: f64 = taps.iter().sum();
        if sum.abs() > 0.0 {
            taps.iter_mut().for_each(|t| *t /= sum);
        }
        taps
    }
}

/// Output length for converting `len` samples from `from` Hz to `to` Hz.
pub fn resampled_len(len: usize, from: u32, to: u32) -> usize {
    ((len as u64 * to as u64 + from as u64 / 2) / from as u64) as usize
}

pub fn sinc_resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument(
            "target rate must be positive".into(),
        ));
    }
    let from = w.sample_rate();
    if w.is_empty() {
        return Waveform::new(Vec::new(), target_rate);
    }
    if from == target_rate {
        return Ok(w.clone());
    }
    let g = gcd(from as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = from as u64 / g;
    let kernel = Kernel::new((up as f64 / down as f64).min(1.0));
    let reach = kernel.half_width.ceil() as usize + 1;

    let input = w.samples();
    let out_len = resampled_len(input.len(), from, target_rate);
    let table: Option<Vec<Vec<f64>>> = (up <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| kernel.taps(p as f64 / up as f64, reach))
            .collect()
    });

    let mut out = Vec::with_capacity(out_len);
    let mut scratch;
    for n in 0..out_len as u64 {
        let pos = n * down;
        let i0 = (pos / up) as i64;
        let phase = pos % up;
        let taps: &[f64] = match &table {
            Some(t) => &t[phase as usize],
            None => {
                scratch = kernel.taps(phase as f64 / up as f64, reach);
                &scratch
            }
        };
        let first = i0 - reach as i64 + 1;
        let lo = (-first).max(0) as usize;
        let hi = ((input.len() as i64 - first).min(taps.len() as i64)).max(0) as usize;
        let mut acc = 0.0;
        if lo < hi {
            let base = (first + lo as i64) as usize;
            for (t, x) in taps[lo..hi].iter().zip(&input[base..base + (hi - lo)]) {
                acc += t * x;
            }
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}
