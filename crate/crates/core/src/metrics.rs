//! Log-spectral distance and manifest-level evaluation reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::data::{fit_length, make_lr, Manifest};
use crate::dsp::{
    read_wav, sinc_resample, stft, ChannelPolicy, ComplexSpectrogram, StftConfig, Waveform,
    TARGET_RATE,
};
use crate::error::{Error, Result};
use crate::inference::{super_resolve, SrOptions};
use crate::model::SrModel;

/// Floor applied to power before taking logs.
pub const POWER_FLOOR: f64 = 1e-10;

/// Bin nearest to `hz` under the analysis configuration at 48 kHz.
pub fn cutoff_bin(hz: f64) -> usize {
    (hz / StftConfig::default().bin_hz(TARGET_RATE)).round() as usize
}

fn log_power(s: &ComplexSpectrogram, bin: usize, frame: usize) -> f64 {
    let m = s.magnitude(bin, frame);
    (m * m).max(POWER_FLOOR).log10()
}

/// Mean over frames of the RMS log10-power difference over bins `[from, F)`.
pub fn lsd_from_spectrograms(
    a: &ComplexSpectrogram,
    b: &ComplexSpectrogram,
    from: usize,
) -> Result<f64> {
    if a.bins() != b.bins() || a.frames() != b.frames() {
        return Err(Error::shape(
            format!("{}x{}", a.bins(), a.frames()),
            format!("{}x{}", b.bins(), b.frames()),
        ));
    }
    if from >= a.bins() {
        return Err(Error::InvalidArgument(format!(
            "cutoff bin {from} leaves no bins below {}",
            a.bins()
        )));
    }
    let span = (a.bins() - from) as f64;
    let mut total = 0.0;
    for fr in 0..a.frames() {
        let ms: f64 = (from..a.bins())
            .map(|k| (log_power(a, k, fr) - log_power(b, k, fr)).powi(2))
            .sum::<f64>()
            / span;
        total += ms.sqrt();
    }
    Ok(total / a.frames() as f64)
}

fn check_pair(r: &Waveform, e: &Waveform) -> Result<()> {
    if r.sample_rate() != e.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            r.sample_rate(),
            e.sample_rate()
        )));
    }
    if r.len() != e.len() {
        return Err(Error::shape(format!("{} samples", r.len()), e.len()));
    }
    Ok(())
}

/// LSD restricted to bins at and above the one nearest `cutoff_hz`.
pub fn lsd_hf(reference: &Waveform, estimate: &Waveform, cutoff_hz: f64) -> Result<f64> {
    check_pair(reference, estimate)?;
    let nyquist = reference.sample_rate() as f64 / 2.0;
    if !(0.0..nyquist).contains(&cutoff_hz) {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff_hz} Hz outside [0, {nyquist})"
        )));
    }
    let bin = (cutoff_hz / StftConfig::default().bin_hz(reference.sample_rate())).round() as usize;
    lsd_from_spectrograms(&stft(reference)?, &stft(estimate)?, bin)
}

/// LSD over every bin.
pub fn lsd(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_pair(reference, estimate)?;
    lsd_from_spectrograms(&stft(reference)?, &stft(estimate)?, 0)
}

/// What produces the 48 kHz estimate from the low-rate input.
pub enum System<'a> {
    Model {
        model: &'a SrModel,
        opts: SrOptions,
    },
    /// Sinc upsampling alone.
    SincBaseline,
    /// The reference itself; scores are zero by construction.
    Reference,
}

impl System<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            System::Model { .. } => "model",
            System::SincBaseline => "sinc",
            System::Reference => "reference",
        }
    }

    pub fn estimate(&self, reference: &Waveform, input_rate: u32) -> Result<Waveform> {
        let est = match self {
            System::Reference => return Ok(reference.clone()),
            System::SincBaseline => sinc_resample(&make_lr(reference, input_rate)?, TARGET_RATE)?,
            System::Model { model, opts } => {
                super_resolve(&make_lr(reference, input_rate)?, model, opts)?
            }
        };
        fit_length(est, reference.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub item: String,
    pub domain: String,
    pub input_rate: u32,
    pub lsd_hf: f64,
    pub lsd_full: f64,
    pub runtime_ms: f64,
    pub cutoff_bin: usize,
    /// Reserved for externally computed perceptual scores.
    pub score_2f: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Report {
    pub system: String,
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMean {
    pub domain: String,
    pub input_rate: u32,
    pub items: usize,
    pub lsd_hf: f64,
    pub lsd_full: f64,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Report {
    /// Mean scores per (domain, input rate).
    pub fn summary(&self) -> Vec<GroupMean> {
        let mut groups: BTreeMap<(String, u32), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.domain.clone(), r.input_rate))
                .or_default()
                .push(r);
        }
        groups
            .into_iter()
            .map(|((domain, input_rate), rows)| {
                let n = rows.len() as f64;
                GroupMean {
                    domain,
                    input_rate,
                    items: rows.len(),
                    lsd_hf: rows.iter().map(|r| r.lsd_hf).sum::<f64>() / n,
                    lsd_full: rows.iter().map(|r| r.lsd_full).sum::<f64>() / n,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("item,domain,input_rate,lsd_hf,lsd_full,runtime_ms,cutoff_bin,score_2f\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.3},{},{}\n",
                csv_field(&r.item),
                csv_field(&r.domain),
                r.input_rate,
                r.lsd_hf,
                r.lsd_full,
                r.runtime_ms,
                r.cutoff_bin,
                r.score_2f.map(|s| s.to_string()).unwrap_or_default()
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::json!({
            "system": self.system,
            "config": self.config,
            "rows": self.rows,
            "summary": self.summary(),
        });
        Ok(serde_json::to_string_pretty(&value)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Scores one clip at one input rate.
pub fn evaluate_clip(
    system: &System,
    reference: &Waveform,
    input_rate: u32,
    item: &str,
    domain: &str,
) -> Result<ReportRow> {
    let started = Instant::now();
    let est = system.estimate(reference, input_rate)?;
    let runtime_ms = started.elapsed().as_secs_f64() * 1e3;
    let cutoff_hz = input_rate as f64 / 2.0;
    Ok(ReportRow {
        item: item.to_string(),
        domain: domain.to_string(),
        input_rate,
        lsd_hf: lsd_hf(reference, &est, cutoff_hz)?,
        lsd_full: lsd(reference, &est)?,
        runtime_ms,
        cutoff_bin: cutoff_bin(cutoff_hz),
        score_2f: None,
    })
}

/// Runs `system` on every manifest item at every requested rate.
/// References are the items resampled to 48 kHz.
pub fn evaluate_manifest(
    manifest: &Manifest,
    system: &System,
    rates: &[u32],
    config: serde_json::Value,
) -> Result<Report> {
    let mut rows = Vec::new();
    for e in &manifest.entries {
        let reference = sinc_resample(&read_wav(&e.path, ChannelPolicy::Downmix)?, TARGET_RATE)?;
        let item = e.path.display().to_string();
        for &rate in rates {
            rows.push(evaluate_clip(system, &reference, rate, &item, &e.domain)?);
        }
    }
    Ok(Report {
        system: system.name().to_string(),
        config,
        rows,
    })
}
