use std::f64::consts::PI;

use flowsr::dsp::{
    compress, expand, istft, istft_with_len, lowpass_hann, pad_to_hop, read_wav, sinc_resample,
    splice_bands, split_bands, stft, write_wav, BandLayout, ChannelPolicy, ComplexSpectrogram,
    WavFormat, Waveform, LOWPASS_TAPS, N_FFT,
};
use proptest::prelude::*;
use realfft::RealFftPlanner;

fn tone(freq: f64, len: usize, rate: u32) -> Waveform {
    Waveform::from_fn(len, rate, |t| 0.5 * (2.0 * PI * freq * t).sin()).unwrap()
}

fn multisine(len: usize, parts: &[(f64, f64, f64)]) -> Waveform {
    Waveform::from_fn(len, 48_000, |t| {
        parts
            .iter()
            .map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
            .sum()
    })
    .unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

/// Hann-windowed magnitude spectrum of the whole signal.
fn spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| v * (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()))
        .collect();
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
    let mut out = fft.make_output_vec();
    fft.process(&mut buf, &mut out).unwrap();
    out.iter().map(|c| c.norm()).collect()
}

#[test]
fn sinc_upsampled_tone_has_a_clean_peak() {
    let out = sinc_resample(&tone(1000.0, 8000, 8000), 48_000).unwrap();
    assert_eq!(out.sample_rate(), 48_000);
    assert_eq!(out.len(), 48_000);
    let mag = spectrum(out.samples());
    let hz_per_bin = 48_000.0 / out.len() as f64;
    let (peak, &peak_mag) = mag
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    assert!((peak as f64 * hz_per_bin - 1000.0).abs() <= hz_per_bin);
    let other = mag
        .iter()
        .enumerate()
        .filter(|(k, _)| k.abs_diff(peak) > 3)
        .map(|(_, m)| *m)
        .fold(0.0, f64::max);
    let margin = 20.0 * (peak_mag / other).log10();
    assert!(margin >= 40.0, "{margin} dB");
}

#[test]
fn lowpass_stops_a_tone_above_cutoff() {
    let x = tone(6000.0, 48_000, 48_000);
    let y = lowpass_hann(&x, 4000.0).unwrap();
    let inner = |w: &Waveform| {
        flowsr::dsp::waveform::rms(&w.samples()[LOWPASS_TAPS..w.len() - LOWPASS_TAPS])
    };
    let att = 20.0 * (inner(&y) / inner(&x)).log10();
    assert!(att <= -40.0, "{att} dB");
    let x = tone(1000.0, 48_000, 48_000);
    let kept = 20.0 * (inner(&lowpass_hann(&x, 4000.0).unwrap()) / inner(&x)).log10();
    assert!(kept.abs() < 0.5, "{kept} dB");
}

#[test]
fn bin_centred_sine_concentrates_energy() {
    let k = 37;
    let f = k as f64 * 48_000.0 / N_FFT as f64;
    let s = stft(&tone(f, 8 * N_FFT, 48_000)).unwrap();
    // Interior frames only; the first and last see reflected padding.
    for t in 2..s.frames() - 2 {
        let energy = |b: usize| s.magnitude(b, t).powi(2);
        let total: f64 = (0..s.bins()).map(energy).sum();
        let near: f64 = (k - 1..=k + 1).map(energy).sum();
        assert!(near / total >= 0.99, "frame {t}: {}", near / total);
    }
}

#[test]
fn one_second_gives_ninety_four_frames() {
    let s = stft(&Waveform::zeros(48_000, 48_000).unwrap()).unwrap();
    assert_eq!((s.bins(), s.frames()), (512, 1 + 48_000 / 512));
    assert!(s.coeffs().iter().all(|&c| c == 0.0));
    assert!(istft(&s).unwrap().samples().iter().all(|&x| x == 0.0));
}

#[test]
fn padding_to_whole_hops() {
    for (len, want) in [
        (1024, 1024),
        (1025, 1536),
        (24_000, 24_064),
        (15_870, 15_872),
    ] {
        let w = tone(440.0, len, 48_000);
        let p = pad_to_hop(&w);
        assert_eq!(p.len(), want);
        assert_eq!(&p.samples()[..len], w.samples());
        assert!(p.samples()[len..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn compression_examples() {
    let mut s = ComplexSpectrogram::zeros(2, 1, N_FFT, 512, 48_000);
    let angle: f64 = 0.7;
    s.set(0, 0, 32.0 * angle.cos(), 32.0 * angle.sin());
    let c = compress(&s, 0.2).unwrap();
    let (re, im) = c.get(0, 0);
    assert!((c.magnitude(0, 0) - 2.0).abs() < 1e-12);
    assert!((im.atan2(re) - angle).abs() < 1e-9);
    assert_eq!(c.get(1, 0), (0.0, 0.0));
    let e = expand(&c, 0.2).unwrap();
    assert!((e.magnitude(0, 0) - 32.0).abs() < 1e-9);
    let (re, im) = e.get(0, 0);
    assert!((im.atan2(re) - angle).abs() < 1e-9);
}

#[test]
fn wav_round_trip_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let w = tone(440.0, 4800, 48_000);
    for (name, format, tol) in [
        ("a.wav", WavFormat::Pcm16, 1.0 / 32768.0),
        ("b.wav", WavFormat::Float32, 1e-7),
    ] {
        let p = dir.path().join(name);
        write_wav(&p, &w, format).unwrap();
        let back = read_wav(&p, ChannelPolicy::Reject).unwrap();
        assert_eq!(back.sample_rate(), 48_000);
        assert_eq!(back.len(), w.len());
        let worst = w
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= tol, "{name}: {worst}");
    }
}

fn components() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((20.0..16_000.0f64, 0.01..0.3f64, 0.0..(2.0 * PI)), 1..6)
}

fn grid(bins: usize, frames: usize) -> impl Strategy<Value = ComplexSpectrogram> {
    prop::collection::vec(-10.0..10.0f64, bins * frames * 2)
        .prop_map(move |c| ComplexSpectrogram::new(bins, frames, c, N_FFT, 512, 48_000).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn round_trip_interior(parts in components(), hops in 8usize..16) {
        let len = hops * 512;
        let w = multisine(len, &parts);
        let back = istft_with_len(&stft(&w).unwrap(), len).unwrap();
        let (lo, hi) = (N_FFT / 2, len - N_FFT / 2);
        let e = rel_err(&back.samples()[lo..hi], &w.samples()[lo..hi]);
        prop_assert!(e < 1e-5, "{}", e);
    }

    /// For other lengths the padded tail frames reach back to the last hop
    /// boundary more than half a window before the end.
    #[test]
    fn round_trip_interior_any_length(parts in components(), extra in 0usize..3000) {
        let len = 4 * N_FFT + extra;
        let w = multisine(len, &parts);
        let back = istft_with_len(&stft(&w).unwrap(), len).unwrap();
        let hi = (len - N_FFT / 2) / 512 * 512;
        let e = rel_err(&back.samples()[N_FFT / 2..hi], &w.samples()[N_FFT / 2..hi]);
        prop_assert!(e < 1e-5, "{}", e);
    }

    #[test]
    fn compress_expand_inverse(s in grid(8, 3), alpha in prop::sample::select(vec![0.2, 0.5, 1.0])) {
        let back = expand(&compress(&s, alpha).unwrap(), alpha).unwrap();
        prop_assert!(rel_err(back.coeffs(), s.coeffs()) < 1e-6);
    }

    #[test]
    fn split_then_splice_is_exact(s in grid(512, 2), cutoff in prop::sample::select(vec![80usize, 128, 170, 256])) {
        let layout = BandLayout::with_cutoff(cutoff).unwrap();
        let (low, high) = split_bands(&s, &layout).unwrap();
        prop_assert_eq!(low.bins(), cutoff);
        prop_assert_eq!(high.bins(), 512 - cutoff);
        // Pad the true high band at the front to the fixed generated size.
        let pad = layout.overlap_bins();
        let mut c = vec![0.0; pad * 2 * 2];
        c.extend_from_slice(high.coeffs());
        let gen = high.with_coeffs(layout.gen_bins(), 2, c).unwrap();
        let joined = splice_bands(&low, &gen, &layout).unwrap();
        prop_assert!(joined.coeffs().iter().zip(s.coeffs()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn lowpass_is_linear(
        x in prop::collection::vec(-1.0..1.0f64, 600),
        y in prop::collection::vec(-1.0..1.0f64, 600),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
    ) {
        let f = |v: Vec<f64>| lowpass_hann(&Waveform::new(v, 48_000).unwrap(), 5000.0).unwrap().into_samples();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = f(mix);
        let fx = f(x);
        let fy = f(y);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn stft_is_linear(
        x in prop::collection::vec(-1.0..1.0f64, 2048),
        y in prop::collection::vec(-1.0..1.0f64, 2048),
        a in -2.0..2.0f64,
    ) {
        let sx = stft(&Waveform::new(x.clone(), 48_000).unwrap()).unwrap();
        let sy = stft(&Waveform::new(y.clone(), 48_000).unwrap()).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let sm = stft(&Waveform::new(mix, 48_000).unwrap()).unwrap();
        let expect: Vec<f64> = sx.coeffs().iter().zip(sy.coeffs()).map(|(p, q)| a * p + q).collect();
        prop_assert!(rel_err(sm.coeffs(), &expect) < 1e-6);

        let doubled = istft(&sx.scale(2.0)).unwrap();
        let single: Vec<f64> = istft(&sx).unwrap().samples().iter().map(|v| 2.0 * v).collect();
        prop_assert!(rel_err(doubled.samples(), &single) < 1e-6);
    }
}
