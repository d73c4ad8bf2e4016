//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AudioError, Waveform};

/// Read a mono PCM16 WAV file. Sample values are scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform, AudioError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut hdr = [0u8; 12];
    r.read_exact(&mut hdr)?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(AudioError::Format(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }
    let mut sample_rate = None;
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut chunk_hdr = [0u8; 8];
        match r.read_exact(&mut chunk_hdr) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let size = u32::from_le_bytes(chunk_hdr[4..8].try_into().unwrap()) as usize;
        match &chunk_hdr[0..4] {
            b"fmt " => {
                let mut body = vec![0u8; size];
                r.read_exact(&mut body)?;
                if body.len() < 16 {
                    return Err(AudioError::Format("truncated fmt chunk".into()));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 {
                    return Err(AudioError::Format(format!(
                        "{}: only PCM supported, got format tag {}",
                        path.display(),
                        format
                    )));
                }
                if channels != 1 {
                    return Err(AudioError::Format(format!(
                        "{}: expected mono, got {} channels",
                        path.display(),
                        channels
                    )));
                }
                if bits != 16 {
                    return Err(AudioError::Format(format!(
                        "{}: expected 16-bit samples, got {}",
                        path.display(),
                        bits
                    )));
                }
                sample_rate = Some(rate);
            }
            b"data" => {
                let mut body = vec![0u8; size];
                r.read_exact(&mut body)?;
                data = Some(body);
            }
            _ => {
                // Skip unknown chunks (and their pad byte when odd-sized).
                let skip = size + (size & 1);
                std::io::copy(&mut r.by_ref().take(skip as u64), &mut std::io::sink())?;
                continue;
            }
        }
        if size & 1 == 1 {
            let mut pad = [0u8; 1];
            let _ = r.read_exact(&mut pad);
        }
    }
    let sample_rate =
        sample_rate.ok_or_else(|| AudioError::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::Format("missing data chunk".into()))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Write a mono PCM16 WAV file; samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), AudioError> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = wave.len() as u32;
    let data_bytes = n * 2;
    let sample_rate = wave.sample_rate();
    let byte_rate = sample_rate * 2;

    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_bytes).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&sample_rate.to_le_bytes())?;
    w.write_all(&byte_rate.to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_bytes.to_le_bytes())?;
    for &s in wave.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}
