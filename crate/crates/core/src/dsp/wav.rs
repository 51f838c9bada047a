//! Mono PCM16 RIFF/WAVE files.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

const HEADER_LEN: usize = 44;

/// Decodes a mono 16-bit PCM WAVE image; samples are scaled by 1/32768.
pub fn decode_wav(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::Format(format!(
                "chunk {:?} truncated",
                String::from_utf8_lossy(id)
            )));
        }
        let chunk = &bytes[body..body + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format("fmt chunk too short".into()));
                }
                let u16_at = |o: usize| u16::from_le_bytes([chunk[o], chunk[o + 1]]);
                let rate = u32::from_le_bytes(chunk[4..8].try_into().unwrap());
                format = Some((u16_at(0), u16_at(2), rate, u16_at(14)));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    format.ok_or_else(|| Error::Format("data chunk before fmt chunk".into()))?;
                if tag != 1 || channels != 1 || bits != 16 {
                    return Err(Error::Format(format!(
                        "unsupported encoding: format {tag}, {channels} channels, {bits} bits"
                    )));
                }
                if size % 2 != 0 {
                    return Err(Error::Format("odd-sized PCM16 payload".into()));
                }
                let samples = chunk
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok((samples, rate));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(Error::Format("missing data chunk".into()))
}

/// Encodes samples as a canonical 44-byte-header mono PCM16 file.
///
/// Values are scaled by 32768, rounded, and saturated to the i16 range.
pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(HEADER_LEN + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn wav_read(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    decode_wav(&fs::read(path)?)
}

pub fn wav_write(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    fs::write(path, encode_wav(samples, sample_rate))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_round_trip() {
        let bytes = encode_wav(&vec![0.0; 16000], 16000);
        let (samples, rate) = decode_wav(&bytes).unwrap();
        assert_eq!(rate, 16000);
        assert_eq!(samples.len(), 16000);
        assert!(samples.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn full_scale_scaling() {
        let bytes = encode_wav(&[32767.0 / 32768.0, -1.0], 16000);
        let (samples, _) = decode_wav(&bytes).unwrap();
        assert_eq!(samples, vec![32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn out_of_range_saturates() {
        let (samples, _) = decode_wav(&encode_wav(&[2.0, -2.0], 8000)).unwrap();
        assert_eq!(samples, vec![32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode_wav(&[0.1; 100], 16000);
        assert!(decode_wav(&bytes[..bytes.len() - 10]).is_err());
        assert!(decode_wav(&bytes[..20]).is_err());
    }

    #[test]
    fn stereo_is_unsupported() {
        let mut bytes = encode_wav(&[0.0; 4], 16000);
        bytes[22] = 2;
        assert!(matches!(decode_wav(&bytes), Err(Error::Format(_))));
    }
}
