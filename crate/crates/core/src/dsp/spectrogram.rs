//! Complex spectrogram grids, magnitude compression and band partitioning.

use crate::error::{Error, Result};

/// Magnitude scaling applied to a spectrogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Compression {
    Linear,
    /// Magnitudes raised to this exponent, phase untouched.
    PowerLaw(f64),
}

/// An `F x T x 2` grid of real/imaginary STFT coefficients, frequency-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    bins: usize,
    frames: usize,
    coeffs: Vec<f64>,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub compression: Compression,
}

impl ComplexSpectrogram {
    pub fn new(
        bins: usize,
        frames: usize,
        coeffs: Vec<f64>,
        n_fft: usize,
        hop: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        if coeffs.len() != bins * frames * 2 {
            return Err(Error::shape(
                format!("{bins}x{frames}x2 = {}", bins * frames * 2),
                coeffs.len(),
            ));
        }
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("spectrogram coefficient {i}")));
        }
        Ok(Self {
            bins,
            frames,
            coeffs,
            n_fft,
            hop,
            sample_rate,
            compression: Compression::Linear,
        })
    }

    pub fn zeros(bins: usize, frames: usize, n_fft: usize, hop: usize, sample_rate: u32) -> Self {
        Self {
            bins,
            frames,
            coeffs: vec![0.0; bins * frames * 2],
            n_fft,
            hop,
            sample_rate,
            compression: Compression::Linear,
        }
    }

    /// Same STFT metadata, different coefficient grid.
    pub fn with_coeffs(&self, bins: usize, frames: usize, coeffs: Vec<f64>) -> Result<Self> {
        let mut s = Self::new(bins, frames, coeffs, self.n_fft, self.hop, self.sample_rate)?;
        s.compression = self.compression;
        Ok(s)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn is_compressed(&self) -> bool {
        matches!(self.compression, Compression::PowerLaw(_))
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.compression {
            Compression::Linear => None,
            Compression::PowerLaw(a) => Some(a),
        }
    }

    #[inline]
    fn idx(&self, bin: usize, frame: usize) -> usize {
        (bin * self.frames + frame) * 2
    }

    pub fn get(&self, bin: usize, frame: usize) -> (f64, f64) {
        let i = self.idx(bin, frame);
        (self.coeffs[i], self.coeffs[i + 1])
    }

    pub fn set(&mut self, bin: usize, frame: usize, re: f64, im: f64) {
        let i = self.idx(bin, frame);
        self.coeffs[i] = re;
        self.coeffs[i + 1] = im;
    }

    pub fn magnitude(&self, bin: usize, frame: usize) -> f64 {
        let (re, im) = self.get(bin, frame);
        re.hypot(im)
    }

    /// Contiguous coefficients of bins `[start, end)`.
    pub fn bin_range(&self, start: usize, end: usize) -> &[f64] {
        &self.coeffs[self.idx(start, 0)..self.idx(end, 0)]
    }

    /// Copy of bins `[start, end)` with the same metadata.
    pub fn select_bins(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.bins {
            return Err(Error::InvalidArgument(format!(
                "bin range [{start}, {end}) outside 0..{}",
                self.bins
            )));
        }
        self.with_coeffs(
            end - start,
            self.frames,
            self.bin_range(start, end).to_vec(),
        )
    }

    pub fn scale(&self, gain: f64) -> Self {
        let mut s = self.clone();
        s.coeffs.iter_mut().for_each(|c| *c *= gain);
        s
    }
}

fn rescale_magnitudes(coeffs: &mut [f64], exponent: f64) {
    for pair in coeffs.chunks_exact_mut(2) {
        let mag = pair[0].hypot(pair[1]);
        if mag > 0.0 {
            let gain = mag.powf(exponent - 1.0);
            pair[0] *= gain;
            pair[1] *= gain;
        }
    }
}

/// Raises every magnitude to `alpha`, keeping phase. Zero stays zero.
pub fn compress(s: &ComplexSpectrogram, alpha: f64) -> Result<ComplexSpectrogram> {
    if let Compression::PowerLaw(a) = s.compression {
        return Err(Error::SpectrogramState(format!(
            "already compressed with alpha = {a}"
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside (0, 1]"
        )));
    }
    let mut out = s.clone();
    rescale_magnitudes(&mut out.coeffs, alpha);
    out.compression = Compression::PowerLaw(alpha);
    Ok(out)
}

/// Inverse of [`compress`]; `alpha` must match the recorded exponent.
pub fn expand(s: &ComplexSpectrogram, alpha: f64) -> Result<ComplexSpectrogram> {
    match s.compression {
        Compression::Linear => Err(Error::SpectrogramState("not compressed".into())),
        Compression::PowerLaw(a) if a != alpha => Err(Error::SpectrogramState(format!(
            "alpha mismatch: spectrogram has {a}, expand called with {alpha}"
        ))),
        Compression::PowerLaw(_) => {
            let mut out = s.clone();
            rescale_magnitudes(&mut out.coeffs, 1.0 / alpha);
            out.compression = Compression::Linear;
            if let Some(i) = out.coeffs.iter().position(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("expanded coefficient {i}")));
            }
            Ok(out)
        }
    }
}

/// Frequency partition: known band `[0, cutoff)`, generated band `[min_cutoff, total)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandLayout {
    pub total_bins: usize,
    pub cutoff_bins: usize,
    pub min_cutoff_bins: usize,
}

pub const DEFAULT_TOTAL_BINS: usize = 512;
pub const MIN_CUTOFF_BINS: usize = 80;

impl BandLayout {
    pub fn new(total_bins: usize, cutoff_bins: usize, min_cutoff_bins: usize) -> Result<Self> {
        if !(min_cutoff_bins <= cutoff_bins && cutoff_bins < total_bins) {
            return Err(Error::InvalidArgument(format!(
                "band layout needs {min_cutoff_bins} <= cutoff {cutoff_bins} < {total_bins}"
            )));
        }
        Ok(Self {
            total_bins,
            cutoff_bins,
            min_cutoff_bins,
        })
    }

    /// Default 512-bin layout with the given cutoff.
    pub fn with_cutoff(cutoff_bins: usize) -> Result<Self> {
        Self::new(DEFAULT_TOTAL_BINS, cutoff_bins, MIN_CUTOFF_BINS)
    }

    /// Size of the fixed generation band.
    pub fn gen_bins(&self) -> usize {
        self.total_bins - self.min_cutoff_bins
    }

    /// Generated bins that overlap the known band and are dropped at splice time.
    pub fn overlap_bins(&self) -> usize {
        self.cutoff_bins - self.min_cutoff_bins
    }
}

pub fn split_bands(
    s: &ComplexSpectrogram,
    layout: &BandLayout,
) -> Result<(ComplexSpectrogram, ComplexSpectrogram)> {
    if s.bins != layout.total_bins {
        return Err(Error::shape(format!("{} bins", layout.total_bins), s.bins));
    }
    if layout.cutoff_bins >= s.bins {
        return Err(Error::InvalidArgument(format!(
            "cutoff {} must be below {} bins",
            layout.cutoff_bins, s.bins
        )));
    }
    Ok((
        s.select_bins(0, layout.cutoff_bins)?,
        s.select_bins(layout.cutoff_bins, s.bins)?,
    ))
}

/// Bins `[min_cutoff, total)`: the fixed-size band the generator is trained on.
pub fn generation_band(s: &ComplexSpectrogram, layout: &BandLayout) -> Result<ComplexSpectrogram> {
    if s.bins != layout.total_bins {
        return Err(Error::shape(format!("{} bins", layout.total_bins), s.bins));
    }
    s.select_bins(layout.min_cutoff_bins, layout.total_bins)
}

/// Joins the known low band with the non-overlapping part of a generated band.
pub fn splice_bands(
    low: &ComplexSpectrogram,
    gen_high: &ComplexSpectrogram,
    layout: &BandLayout,
) -> Result<ComplexSpectrogram> {
    if low.bins != layout.cutoff_bins {
        return Err(Error::shape(
            format!("low band of {} bins", layout.cutoff_bins),
            low.bins,
        ));
    }
    if gen_high.bins != layout.gen_bins() {
        return Err(Error::shape(
            format!("generated band of {} bins", layout.gen_bins()),
            gen_high.bins,
        ));
    }
    if low.frames != gen_high.frames {
        return Err(Error::shape(
            format!("{} frames", low.frames),
            format!("{} frames", gen_high.frames),
        ));
    }
    if low.compression != gen_high.compression {
        return Err(Error::SpectrogramState(format!(
            "compression differs: {:?} vs {:?}",
            low.compression, gen_high.compression
        )));
    }
    let mut coeffs = Vec::with_capacity(layout.total_bins * low.frames * 2);
    coeffs.extend_from_slice(&low.coeffs);
    coeffs.extend_from_slice(gen_high.bin_range(layout.overlap_bins(), gen_high.bins));
    low.with_coeffs(layout.total_bins, low.frames, coeffs)
}
