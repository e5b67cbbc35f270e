//! Low-rate waveform in, 48 kHz waveform out.

use std::path::Path;

use candle_core::Tensor;
use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{low_band, RateDistribution};
use crate::dsp::{
    expand, istft_with_len, pad_to_hop, sinc_resample, splice_bands, BandLayout,
    ComplexSpectrogram, Waveform, N_FFT, TARGET_RATE,
};
use crate::error::{Error, Result};
use crate::flow::{cfg_combine, check_finite, midpoint_solve};
use crate::model::{no_grad, SrModel};

pub const DEFAULT_OMEGA: f64 = 1.5;
pub const DEFAULT_STEPS: usize = 4;
/// Long inputs are processed in chunks of this many seconds...
pub const CHUNK_SECS: f64 = 10.0;
/// ...joined with a linear crossfade of this length.
pub const CROSSFADE_SECS: f64 = 0.5;
pub const LIMITER_DBFS: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SrOptions {
    pub omega: f64,
    pub steps: usize,
    /// Noise seed; drawn from entropy (and logged) when absent.
    pub seed: Option<u64>,
    pub alpha: f64,
    pub limiter: bool,
    pub rates: RateDistribution,
}

impl Default for SrOptions {
    fn default() -> Self {
        Self {
            omega: DEFAULT_OMEGA,
            steps: DEFAULT_STEPS,
            seed: None,
            alpha: 0.2,
            limiter: false,
            rates: RateDistribution::default(),
        }
    }
}

/// Maps an input rate onto the supported table. Off-grid rates use the
/// largest supported rate below them, so the kept band never extends past
/// the real content.
pub fn resolve_rate(rate: u32, table: &RateDistribution) -> Result<(u32, usize)> {
    let unsupported = || Error::UnsupportedRate {
        rate,
        supported: table.rates.clone(),
    };
    if rate >= TARGET_RATE {
        return Err(unsupported());
    }
    table
        .rates
        .iter()
        .zip(&table.cutoff_bins)
        .filter(|(&r, _)| r <= rate)
        .last()
        .map(|(&r, &c)| (r, c))
        .ok_or_else(unsupported)
}

/// Everything produced by one solve, before and after synthesis.
#[derive(Debug, Clone)]
pub struct SrOutput {
    pub waveform: Waveform,
    /// Compressed full-band spectrogram fed to the inverse STFT (last chunk for
    /// chunked inputs). The chunk is zero-padded to a whole number of hops first.
    pub spectrogram: ComplexSpectrogram,
    /// Compressed known low band of the same chunk.
    pub low_band: ComplexSpectrogram,
    pub cutoff_bins: usize,
    pub seed: u64,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::SolverDiverged { step } => Error::NonFinite(format!("solver step {step}")),
        Error::NonFinite(what) => Error::NonFinite(format!("{name}: {what}")),
        other => other,
    })
}

fn finite_or(name: &str, t: &Tensor) -> Result<()> {
    if check_finite(t)? {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn to_tensor(s: &ComplexSpectrogram, model: &SrModel) -> Result<Tensor> {
    let t = Tensor::from_slice(s.coeffs(), (1, s.bins(), s.frames(), 2), model.device())?;
    Ok(t.to_dtype(model.dtype())?)
}

/// Generates the full band for one 48 kHz chunk.
fn solve_chunk(
    up: &Waveform,
    model: &SrModel,
    opts: &SrOptions,
    layout: &BandLayout,
    rate_idx: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Waveform, ComplexSpectrogram, ComplexSpectrogram)> {
    if up.len() < N_FFT {
        return Err(Error::InvalidArgument(format!(
            "input too short: {} samples at 48 kHz, need at least {N_FFT}",
            up.len()
        )));
    }
    let padded = pad_to_hop(up);
    let x_l = stage("analysis", low_band(&padded, opts.alpha, layout))?;
    let x_l_t = to_tensor(&x_l, model)?;
    finite_or("analysis", &x_l_t)?;
    let cond = stage(
        "conditioning",
        model.condition(&x_l_t, &[rate_idx], &[false]),
    )?;
    let uncond = if opts.omega == 1.0 {
        None
    } else {
        Some(stage(
            "conditioning",
            model.condition(&x_l_t, &[rate_idx], &[true]),
        )?)
    };
    let g = layout.gen_bins();
    let frames = x_l.frames();
    let noise: Vec<f64> = (0..g * frames * 2)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let x0 = Tensor::from_vec(noise, (1, g, frames, 2), model.device())?.to_dtype(model.dtype())?;
    let field = |t: f64, x: &Tensor| -> Result<Tensor> {
        let v_c = model.vfe_forward(&[t], x, &cond)?;
        match &uncond {
            None => Ok(v_c),
            Some(u) => cfg_combine(&v_c, &model.vfe_forward(&[t], x, u)?, opts.omega),
        }
    };
    let gen = stage("solver", midpoint_solve(field, &x0, opts.steps))?;
    let gen: Vec<f64> = gen
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let gen = x_l.with_coeffs(g, frames, gen)?;
    let full = splice_bands(&x_l, &gen, layout)?;
    let linear = expand(&full, opts.alpha)?;
    let w = stage("synthesis", istft_with_len(&linear, padded.len()))?;
    Ok((w.slice(0, up.len()), full, x_l))
}

/// Chunk start offsets and the shared overlap for a signal of `len` samples.
fn chunk_plan(len: usize, chunk: usize, overlap: usize) -> Vec<usize> {
    if len <= chunk {
        return vec![0];
    }
    let stride = chunk - overlap;
    let mut starts = vec![0];
    while starts.last().unwrap() + chunk < len {
        starts.push(starts.last().unwrap() + stride);
    }
    starts
}

pub fn super_resolve_detailed(
    w_lr: &Waveform,
    model: &SrModel,
    opts: &SrOptions,
) -> Result<SrOutput> {
    if opts.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !opts.omega.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "omega {} is not finite",
            opts.omega
        )));
    }
    let _no_grad = no_grad();
    let (mapped, cutoff) = resolve_rate(w_lr.sample_rate(), &opts.rates)?;
    let layout = BandLayout::new(
        model.config().total_bins,
        cutoff,
        model.config().min_cutoff_bins,
    )?;
    let rate_idx = model.config().rate_index(mapped);
    let seed = opts.seed.unwrap_or_else(|| rand::rng().random());
    if opts.seed.is_none() {
        log::info!("noise seed {seed}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let up = stage("resampling", sinc_resample(w_lr, TARGET_RATE))?;

    let chunk = (CHUNK_SECS * TARGET_RATE as f64) as usize;
    let overlap = (CROSSFADE_SECS * TARGET_RATE as f64) as usize;
    let starts = chunk_plan(up.len(), chunk, overlap);
    let mut out = vec![0.0; up.len()];
    let mut last = None;
    for (ci, &start) in starts.iter().enumerate() {
        let len = chunk.min(up.len() - start);
        let (w, full, x_l) = solve_chunk(
            &up.slice(start, len),
            model,
            opts,
            &layout,
            rate_idx,
            &mut rng,
        )?;
        for (i, &v) in w.samples().iter().enumerate() {
            let fade_in = if ci > 0 && i < overlap {
                i as f64 / overlap as f64
            } else {
                1.0
            };
            let pos = start + i;
            if fade_in < 1.0 {
                out[pos] = out[pos] * (1.0 - fade_in) + v * fade_in;
            } else {
                out[pos] = v;
            }
        }
        last = Some((full, x_l));
    }
    let mut waveform =
        Waveform::new(out, TARGET_RATE).map_err(|_| Error::NonFinite("synthesis".into()))?;
    if opts.limiter {
        waveform = limit(&waveform, LIMITER_DBFS);
    }
    let (spectrogram, low_band) = last.expect("at least one chunk");
    Ok(SrOutput {
        waveform,
        spectrogram,
        low_band,
        cutoff_bins: cutoff,
        seed,
    })
}

pub fn super_resolve(w_lr: &Waveform, model: &SrModel, opts: &SrOptions) -> Result<Waveform> {
    Ok(super_resolve_detailed(w_lr, model, opts)?.waveform)
}

/// Scales the signal down so its peak does not exceed `ceiling_dbfs`.
pub fn limit(w: &Waveform, ceiling_dbfs: f64) -> Waveform {
    let ceiling = 10f64.powf(ceiling_dbfs / 20.0);
    let peak = w.peak();
    if peak > ceiling {
        w.scaled(ceiling / peak)
    } else {
        w.clone()
    }
}

/// Dynamic range shown by [`spectrogram_image`], dB below the maximum.
pub const IMAGE_RANGE_DB: f64 = 80.0;

/// Grayscale magnitude image: one column per frame, low frequencies at the
/// bottom, brightness linear in dB over the top [`IMAGE_RANGE_DB`].
pub fn spectrogram_image(s: &ComplexSpectrogram) -> GrayImage {
    let (f, t) = (s.bins(), s.frames());
    let db: Vec<f64> = (0..f)
        .flat_map(|b| (0..t).map(move |fr| (b, fr)))
        .map(|(b, fr)| 20.0 * s.magnitude(b, fr).max(1e-10).log10())
        .collect();
    let top = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = top - IMAGE_RANGE_DB;
    GrayImage::from_fn(t as u32, f as u32, |x, y| {
        let b = f - 1 - y as usize;
        let v = db[b * t + x as usize];
        let level = if top <= floor {
            0.0
        } else {
            ((v - floor) / IMAGE_RANGE_DB).clamp(0.0, 1.0)
        };
        Luma([(level * 255.0).round() as u8])
    })
}

pub fn emit_spectrogram_image(s: &ComplexSpectrogram, path: impl AsRef<Path>) -> Result<()> {
    spectrogram_image(s).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_resolution() {
        let t = RateDistribution::default();
        assert_eq!(resolve_rate(8000, &t).unwrap(), (8000, 80));
        assert_eq!(resolve_rate(24000, &t).unwrap(), (24000, 256));
        assert_eq!(resolve_rate(22050, &t).unwrap(), (16000, 170));
        assert_eq!(resolve_rate(44100, &t).unwrap(), (24000, 256));
        let err = resolve_rate(4000, &t).unwrap_err();
        assert!(err.to_string().contains("8000"), "{err}");
        assert!(resolve_rate(48000, &t).is_err());
    }

    #[test]
    fn chunk_plan_covers_signal() {
        assert_eq!(chunk_plan(100, 480, 24), vec![0]);
        let s = chunk_plan(1000, 480, 24);
        assert_eq!(s, vec![0, 456, 912]);
        assert!(s.last().unwrap() + 480 >= 1000);
    }

    #[test]
    fn limiter_only_attenuates() {
        let w = Waveform::new(vec![0.5, -2.0, 1.0], 48000).unwrap();
        let l = limit(&w, -1.0);
        assert!((l.peak() - 10f64.powf(-0.05)).abs() < 1e-12);
        let quiet = Waveform::new(vec![0.1, -0.2], 48000).unwrap();
        assert_eq!(limit(&quiet, -1.0).samples(), quiet.samples());
    }

    #[test]
    fn zero_spectrogram_is_uniform_and_sized() {
        let s = ComplexSpectrogram::zeros(12, 7, 1024, 512, 48000);
        let img = spectrogram_image(&s);
        assert_eq!((img.width(), img.height()), (7, 12));
        let first = img.get_pixel(0, 0)[0];
        assert!(img.pixels().all(|p| p[0] == first));
    }
}
