//! Corpus ingestion and training-pair synthesis.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::dsp::{
    compress, generation_band, lowpass_hann, read_wav, sinc_resample, split_bands, stft,
    BandLayout, ChannelPolicy, ComplexSpectrogram, StftConfig, Waveform, TARGET_RATE,
};
use crate::error::{Error, Result};

/// Silence threshold for corpus trimming, dBFS.
pub const SILENCE_DB: f64 = -35.0;
pub const TRIM_FRAME: usize = 1024;
pub const TRIM_HOP: usize = 512;
/// Anti-alias cutoff for synthesized low-rate inputs, as a fraction of their Nyquist.
pub const LR_CUTOFF_FRACTION: f64 = 0.95;

/// Input-rate prior used to synthesize training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDistribution {
    pub rates: Vec<u32>,
    pub probs: Vec<f64>,
    pub cutoff_bins: Vec<usize>,
}

impl Default for RateDistribution {
    fn default() -> Self {
        Self {
            rates: vec![8000, 12000, 16000, 24000],
            probs: vec![0.7, 0.1, 0.1, 0.1],
            cutoff_bins: vec![80, 128, 170, 256],
        }
    }
}

impl RateDistribution {
    pub fn validate(&self, total_bins: usize) -> Result<()> {
        let n = self.rates.len();
        if n == 0 || self.probs.len() != n || self.cutoff_bins.len() != n {
            return Err(Error::Config(
                "rates, probs and cutoff_bins must align".into(),
            ));
        }
        if (self.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || self.probs.iter().any(|&p| p < 0.0)
        {
            return Err(Error::Config(
                "rate probabilities must be non-negative and sum to 1".into(),
            ));
        }
        if self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("rates must be strictly increasing".into()));
        }
        if self.cutoff_bins.windows(2).any(|w| w[0] >= w[1])
            || self.cutoff_bins.last().is_some_and(|&c| c >= total_bins)
        {
            return Err(Error::Config(format!(
                "cutoff bins must be strictly increasing and below {total_bins}"
            )));
        }
        Ok(())
    }

    /// Cutoff bin paired with an exactly supported rate.
    pub fn cutoff_for(&self, rate: u32) -> Result<usize> {
        self.rates
            .iter()
            .position(|&r| r == rate)
            .map(|i| self.cutoff_bins[i])
            .ok_or_else(|| Error::UnsupportedRate {
                rate,
                supported: self.rates.clone(),
            })
    }

    /// Categorical draw of `(rate, cutoff_bins)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (u32, usize) {
        let dist = WeightedIndex::new(&self.probs).expect("validated probabilities");
        let i = dist.sample(rng);
        (self.rates[i], self.cutoff_bins[i])
    }
}

pub fn sample_input_rate<R: Rng + ?Sized>(dist: &RateDistribution, rng: &mut R) -> (u32, usize) {
    dist.sample(rng)
}

/// Resamples to 48 kHz and drops samples touched by any frame below the
/// silence threshold. An entirely silent input yields an empty waveform.
pub fn prepare_hr(w: &Waveform) -> Result<Waveform> {
    let hr = sinc_resample(w, TARGET_RATE)?;
    trim_silence(&hr, SILENCE_DB)
}

pub fn trim_silence(w: &Waveform, threshold_db: f64) -> Result<Waveform> {
    let x = w.samples();
    // A sample survives only if every frame covering it is loud enough.
    let mut keep = vec![true; x.len()];
    let threshold = 10f64.powf(threshold_db / 20.0);
    let mut start = 0;
    while start < x.len() {
        let end = (start + TRIM_FRAME).min(x.len());
        let frame = &x[start..end];
        let rms = (frame.iter().map(|v| v * v).sum::<f64>() / frame.len() as f64).sqrt();
        if rms < threshold {
            keep[start..end].iter_mut().for_each(|k| *k = false);
        }
        start += TRIM_HOP;
    }
    let kept = x
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v)
        .collect();
    Waveform::new(kept, w.sample_rate())
}

/// Band-limits and decimates a high-rate signal to `input_rate`.
pub fn make_lr(hr: &Waveform, input_rate: u32) -> Result<Waveform> {
    if input_rate == 0 || input_rate >= hr.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "input rate {input_rate} Hz must lie below the source rate {} Hz",
            hr.sample_rate()
        )));
    }
    let filtered = lowpass_hann(hr, LR_CUTOFF_FRACTION * input_rate as f64 / 2.0)?;
    sinc_resample(&filtered, input_rate)
}

/// Pads with zeros or truncates to exactly `len` samples.
pub(crate) fn fit_length(w: Waveform, len: usize) -> Result<Waveform> {
    let rate = w.sample_rate();
    let mut s = w.into_samples();
    s.resize(len, 0.0);
    Waveform::new(s, rate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConfig {
    pub alpha: f64,
    /// Segment length in samples at 48 kHz.
    pub segment_len: usize,
    pub layout_total_bins: usize,
    pub min_cutoff_bins: usize,
}

impl PairConfig {
    pub fn frames(&self) -> usize {
        StftConfig::default().frames_for(self.segment_len)
    }

    pub fn layout(&self, cutoff_bins: usize) -> Result<BandLayout> {
        BandLayout::new(self.layout_total_bins, cutoff_bins, self.min_cutoff_bins)
    }
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            segment_len: 130_560,
            layout_total_bins: 512,
            min_cutoff_bins: 80,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub hr_segment: Waveform,
    pub lr_input_rate: u32,
    pub cutoff_bins: usize,
    /// Compressed low band of the LR chain, `F1 x T x 2`.
    pub x_l: ComplexSpectrogram,
    /// Compressed ground truth over the fixed generation band, `(F - F1_min) x T x 2`.
    pub x_h_target: ComplexSpectrogram,
}

/// Compressed low band of a signal already upsampled to 48 kHz.
pub fn low_band(
    upsampled: &Waveform,
    alpha: f64,
    layout: &BandLayout,
) -> Result<ComplexSpectrogram> {
    let spec = compress(&stft(upsampled)?, alpha)?;
    Ok(split_bands(&spec, layout)?.0)
}

pub fn build_pair(
    hr_segment: &Waveform,
    rate: u32,
    cutoff_bins: usize,
    cfg: &PairConfig,
) -> Result<TrainingPair> {
    if hr_segment.sample_rate() != TARGET_RATE {
        return Err(Error::InvalidArgument(format!(
            "segment must be at {TARGET_RATE} Hz, got {}",
            hr_segment.sample_rate()
        )));
    }
    if hr_segment.len() != cfg.segment_len {
        return Err(Error::shape(
            format!("segment of {} samples", cfg.segment_len),
            hr_segment.len(),
        ));
    }
    let layout = cfg.layout(cutoff_bins)?;
    let lr = make_lr(hr_segment, rate)?;
    let up = fit_length(sinc_resample(&lr, TARGET_RATE)?, cfg.segment_len)?;
    let x_l = low_band(&up, cfg.alpha, &layout)?;
    let truth = compress(&stft(hr_segment)?, cfg.alpha)?;
    let x_h_target = generation_band(&truth, &layout)?;
    Ok(TrainingPair {
        hr_segment: hr_segment.clone(),
        lr_input_rate: rate,
        cutoff_bins,
        x_l,
        x_h_target,
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub domain: String,
    #[serde(default)]
    pub duration: Option<f64>,
}

/// Newline-delimited JSON records; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut e: ManifestEntry =
                serde_json::from_str(line).map_err(|err| Error::Manifest {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    reason: err.to_string(),
                })?;
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            entries.push(e);
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Prepared 48 kHz clips plus the pair-synthesis settings.
pub struct TrainingSet {
    clips: Vec<Waveform>,
    cfg: PairConfig,
    dist: RateDistribution,
    cache: HashMap<(usize, u32), TrainingPair>,
}

impl TrainingSet {
    pub fn new(clips: Vec<Waveform>, cfg: PairConfig, dist: RateDistribution) -> Result<Self> {
        dist.validate(cfg.layout_total_bins)?;
        let clips: Vec<Waveform> = clips.into_iter().filter(|c| !c.is_empty()).collect();
        if clips.is_empty() {
            return Err(Error::InvalidArgument(
                "training set has no usable audio".into(),
            ));
        }
        Ok(Self {
            clips,
            cfg,
            dist,
            cache: HashMap::new(),
        })
    }

    /// Reads, resamples and silence-trims every manifest entry.
    pub fn from_manifest(
        manifest: &Manifest,
        cfg: PairConfig,
        dist: RateDistribution,
    ) -> Result<Self> {
        let clips = manifest
            .entries
            .iter()
            .map(|e| prepare_hr(&read_wav(&e.path, ChannelPolicy::Downmix)?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clips, cfg, dist)
    }

    pub fn clips(&self) -> &[Waveform] {
        &self.clips
    }

    pub fn config(&self) -> &PairConfig {
        &self.cfg
    }

    pub fn distribution(&self) -> &RateDistribution {
        &self.dist
    }

    /// Draws a batch sharing one input rate. Clips no longer than a segment
    /// are zero-padded and their pairs cached; longer clips are cropped at a
    /// random offset.
    pub fn sample_batch<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        batch: usize,
    ) -> Result<Vec<TrainingPair>> {
        let (rate, cutoff) = self.dist.sample(rng);
        let seg = self.cfg.segment_len;
        (0..batch)
            .map(|_| {
                let ci = rng.random_range(0..self.clips.len());
                let clip = &self.clips[ci];
                if clip.len() <= seg {
                    if let Some(p) = self.cache.get(&(ci, rate)) {
                        return Ok(p.clone());
                    }
                    let segment = fit_length(clip.clone(), seg)?;
                    let pair = build_pair(&segment, rate, cutoff, &self.cfg)?;
                    self.cache.insert((ci, rate), pair.clone());
                    Ok(pair)
                } else {
                    let offset = rng.random_range(0..=clip.len() - seg);
                    build_pair(&clip.slice(offset, seg), rate, cutoff, &self.cfg)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn default_distribution_is_valid_and_paired() {
        let d = RateDistribution::default();
        d.validate(512).unwrap();
        assert_eq!(d.cutoff_for(8000).unwrap(), 80);
        assert_eq!(d.cutoff_for(12000).unwrap(), 128);
        assert_eq!(d.cutoff_for(16000).unwrap(), 170);
        assert_eq!(d.cutoff_for(24000).unwrap(), 256);
        assert!(matches!(
            d.cutoff_for(22050),
            Err(Error::UnsupportedRate { .. })
        ));
    }

    #[test]
    fn draws_are_consistent_pairs_and_reproducible() {
        let d = RateDistribution::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| d.sample(&mut rng)).collect::<Vec<_>>()
        };
        let a = draw(5);
        assert_eq!(a, draw(5));
        for (r, c) in a {
            assert_eq!(d.cutoff_for(r).unwrap(), c);
        }
    }

    #[test]
    fn bad_distributions_are_rejected() {
        let mut d = RateDistribution::default();
        d.probs = vec![0.5, 0.1, 0.1, 0.1];
        assert!(d.validate(512).is_err());
        let mut d = RateDistribution::default();
        d.cutoff_bins = vec![80, 128, 170, 600];
        assert!(d.validate(512).is_err());
    }

    #[test]
    fn silence_is_trimmed_to_empty() {
        let w = Waveform::zeros(48000, 48000).unwrap();
        assert!(prepare_hr(&w).unwrap().is_empty());
    }

    #[test]
    fn loud_tone_keeps_its_length() {
        // -20 dBFS RMS.
        let amp = 0.1 * 2f64.sqrt();
        let w = Waveform::from_fn(30000, 48000, |t| {
            amp * (2.0 * std::f64::consts::PI * 440.0 * t).sin()
        })
        .unwrap();
        assert_eq!(prepare_hr(&w).unwrap().len(), 30000);
    }

    #[test]
    fn make_lr_rejects_non_decreasing_rate() {
        let w = Waveform::zeros(4800, 48000).unwrap();
        assert!(make_lr(&w, 48000).is_err());
        assert_eq!(make_lr(&w, 8000).unwrap().len(), 800);
    }

    #[test]
    fn manifest_parses_and_resolves_paths() {
        let text = "{\"path\": \"a.wav\", \"domain\": \"speech\", \"duration\": 1.5}\n\n# note\n{\"path\": \"/abs/b.wav\"}\n";
        let m = Manifest::parse(text, Path::new("m.jsonl"), Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].path, PathBuf::from("/data/a.wav"));
        assert_eq!(m.entries[0].domain, "speech");
        assert_eq!(m.entries[1].path, PathBuf::from("/abs/b.wav"));
        let err = Manifest::parse("{bad", Path::new("m.jsonl"), Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }));
    }

    #[test]
    fn pair_rejects_wrong_length() {
        let cfg = PairConfig {
            segment_len: 15872,
            ..PairConfig::default()
        };
        let w = Waveform::zeros(15000, 48000).unwrap();
        assert!(build_pair(&w, 8000, 80, &cfg).is_err());
    }
}
