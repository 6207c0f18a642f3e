//! RIFF/WAVE reading (mono PCM16 or float32) and PCM16 writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::audio::Waveform;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Fmt {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Reads a mono 16-bit PCM or 32-bit float WAV file. PCM samples are
/// scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_wav(&bytes).map_err(|msg| Error::Wav {
        path: path.to_path_buf(),
        msg,
    })
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut fmt: Option<Fmt> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                format!(
                    "truncated '{}' chunk: declares {size} bytes, {} available",
                    String::from_utf8_lossy(id),
                    bytes.len() - body_start
                )
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(format!("fmt chunk too short ({} bytes)", body.len()));
                }
                let mut format = le_u16(&body[0..2]);
                if format == FORMAT_EXTENSIBLE && body.len() >= 26 {
                    // first two bytes of the subformat GUID carry the codec
                    format = le_u16(&body[24..26]);
                }
                fmt = Some(Fmt {
                    format,
                    channels: le_u16(&body[2..4]),
                    sample_rate: le_u32(&body[4..8]),
                    bits: le_u16(&body[14..16]),
                });
            }
            b"data" => {
                let fmt = fmt.ok_or("data chunk precedes fmt chunk")?;
                return decode(&fmt, body);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    Err(if fmt.is_none() {
        "missing fmt chunk".into()
    } else {
        "missing data chunk".into()
    })
}

fn decode(fmt: &Fmt, body: &[u8]) -> Result<Waveform, String> {
    if fmt.channels != 1 {
        return Err(format!(
            "expected mono audio, found {} channels",
            fmt.channels
        ));
    }
    if fmt.sample_rate == 0 {
        return Err("sample rate is zero".into());
    }
    let samples: Vec<f32> = match (fmt.format, fmt.bits) {
        (FORMAT_PCM, 16) => {
            if !body.len().is_multiple_of(2) {
                return Err("PCM16 data length is not a multiple of 2".into());
            }
            body.chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
                .collect()
        }
        (FORMAT_IEEE_FLOAT, 32) => {
            if !body.len().is_multiple_of(4) {
                return Err("float32 data length is not a multiple of 4".into());
            }
            body.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        }
        (format, bits) => {
            return Err(format!(
                "unsupported codec: format tag {format} with {bits} bits (need PCM16 or float32)"
            ))
        }
    };
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(format!("non-finite sample at index {i}"));
    }
    Ok(Waveform {
        samples,
        sample_rate: fmt.sample_rate,
    })
}

/// Encodes a waveform as a 44-byte-header mono PCM16 file. Samples are
/// clamped to [-1, 1] and rounded to the nearest step of 1/32768.
pub fn encode_pcm16(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav_pcm16(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pcm16(w))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(format: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * channels as u32 * bits as u32 / 8).to_le_bytes());
        out.extend_from_slice(&(channels * bits / 8).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn pcm16_scaling() {
        let data: Vec<u8> = [-32768i16, 16384, 0, 32767]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let w = parse_wav(&header(1, 1, 16000, 16, &data)).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.samples[0], -1.0);
        assert_eq!(w.samples[1], 0.5);
        assert_eq!(w.samples[2], 0.0);
    }

    #[test]
    fn float32_samples() {
        let data: Vec<u8> = [0.25f32, -0.75]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let w = parse_wav(&header(3, 1, 16000, 32, &data)).unwrap();
        assert_eq!(w.samples, vec![0.25, -0.75]);
    }

    #[test]
    fn stereo_rejected() {
        let err = parse_wav(&header(1, 2, 16000, 16, &[0; 8])).unwrap_err();
        assert!(err.contains("2 channels"), "{err}");
    }

    #[test]
    fn unsupported_codec_rejected() {
        let err = parse_wav(&header(1, 1, 16000, 24, &[0; 6])).unwrap_err();
        assert!(err.contains("unsupported codec"), "{err}");
    }

    #[test]
    fn truncated_data_chunk_rejected() {
        let mut bytes = header(1, 1, 16000, 16, &[0; 8]);
        bytes.truncate(bytes.len() - 3);
        let err = parse_wav(&bytes).unwrap_err();
        assert!(err.contains("truncated 'data'"), "{err}");
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = header(1, 1, 16000, 16, &[1, 0, 2, 0]);
        let mut bytes = plain[..36].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[9, 9, 9, 0]); // odd size plus pad byte
        bytes.extend_from_slice(&plain[36..]);
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.samples.len(), 2);
    }

    #[test]
    fn not_riff() {
        assert!(parse_wav(b"hello world, not a wav").is_err());
    }

    #[test]
    fn encode_then_parse() {
        let w = Waveform {
            samples: vec![0.0, 0.5, -1.0, 0.999, 2.0],
            sample_rate: 16000,
        };
        let back = parse_wav(&encode_pcm16(&w)).unwrap();
        assert_eq!(back.samples[..3], [0.0, 0.5, -1.0]);
        assert!((back.samples[3] - 0.999).abs() <= 1.0 / 32768.0);
        assert_eq!(back.samples[4], 32767.0 / 32768.0);
    }
}
