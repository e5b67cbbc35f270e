//! Deterministic signal processing: resampling, filtering, STFT and band handling.

pub mod dump;
pub mod filter;
pub mod resample;
pub mod spectrogram;
pub mod stft;
pub mod wav;
pub mod waveform;

pub use filter::{lowpass_hann, LOWPASS_TAPS};
pub use resample::{resampled_len, sinc_resample};
pub use spectrogram::{
    compress, expand, generation_band, splice_bands, split_bands, BandLayout, ComplexSpectrogram,
    Compression, DEFAULT_TOTAL_BINS, MIN_CUTOFF_BINS,
};
pub use stft::{istft, istft_with_len, pad_to_hop, stft, Stft, StftConfig, HOP, N_FFT};
pub use wav::{read_wav, write_wav, ChannelPolicy, WavFormat};
pub use waveform::Waveform;

/// Sample rate of every generated output.
pub const TARGET_RATE: u32 = 48_000;
