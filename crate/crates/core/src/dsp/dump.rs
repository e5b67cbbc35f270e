//! Binary spectrogram dump.
//!
//! Layout (little-endian): magic `FSRSPEC\0`, u32 version, u32 F, u32 T,
//! u32 n_fft, u32 hop, u32 sample_rate, u8 compressed, f64 alpha, then
//! `F * T * 2` f64 coefficients in frequency-major order.

use std::io::{Read, Write};
use std::path::Path;

use super::spectrogram::{ComplexSpectrogram, Compression};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FSRSPEC\0";
const VERSION: u32 = 1;

pub fn write_spectrogram(mut out: impl Write, s: &ComplexSpectrogram) -> Result<()> {
    out.write_all(MAGIC)?;
    for v in [
        VERSION,
        s.bins() as u32,
        s.frames() as u32,
        s.n_fft as u32,
        s.hop as u32,
        s.sample_rate,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&[s.is_compressed() as u8])?;
    out.write_all(&s.alpha().unwrap_or(0.0).to_le_bytes())?;
    for c in s.coeffs() {
        out.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_spectrogram(mut input: impl Read) -> Result<ComplexSpectrogram> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidArgument("not a spectrogram dump".into()));
    }
    let mut u32s = [0u32; 6];
    for v in u32s.iter_mut() {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, bins, frames, n_fft, hop, sample_rate] = u32s;
    if version != VERSION {
        return Err(Error::InvalidArgument(format!(
            "spectrogram dump version {version}, expected {VERSION}"
        )));
    }
    let mut flag = [0u8; 1];
    input.read_exact(&mut flag)?;
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let alpha = f64::from_le_bytes(b8);
    let n = bins as usize * frames as usize * 2;
    let mut coeffs = Vec::with_capacity(n);
    for _ in 0..n {
        input.read_exact(&mut b8)?;
        coeffs.push(f64::from_le_bytes(b8));
    }
    let mut s = ComplexSpectrogram::new(
        bins as usize,
        frames as usize,
        coeffs,
        n_fft as usize,
        hop as usize,
        sample_rate,
    )?;
    if flag[0] != 0 {
        s.compression = Compression::PowerLaw(alpha);
    }
    Ok(s)
}

pub fn save_spectrogram(path: impl AsRef<Path>, s: &ComplexSpectrogram) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_spectrogram(&mut f, s)?;
    f.flush()?;
    Ok(())
}

pub fn load_spectrogram(path: impl AsRef<Path>) -> Result<ComplexSpectrogram> {
    read_spectrogram(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trip_keeps_header_and_values() {
        let mut s = ComplexSpectrogram::new(
            2,
            3,
            (0..12).map(|i| i as f64 * 0.5 - 2.0).collect(),
            1024,
            512,
            48000,
        )
        .unwrap();
        s.compression = Compression::PowerLaw(0.2);
        let mut buf = Vec::new();
        write_spectrogram(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), 8 + 24 + 1 + 8 + 12 * 8);
        assert_eq!(read_spectrogram(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn truncated_dump_fails() {
        let s = ComplexSpectrogram::zeros(2, 2, 1024, 512, 48000);
        let mut buf = Vec::new();
        write_spectrogram(&mut buf, &s).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_spectrogram(buf.as_slice()).is_err());
    }
}
