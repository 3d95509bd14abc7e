use std::io::Cursor;

use crate::error::{Error, Result};

/// Mono samples in `[-1, 1)` and their rate.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAudio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Decode a 16-bit PCM RIFF/WAVE file, averaging stereo to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<DecodedAudio> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| Error::UnsupportedWav(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedWav(format!(
            "{:?} {}-bit samples (need 16-bit PCM)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedWav(format!("{channels} channels")));
    }
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::UnsupportedWav(e.to_string()))?;
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    Ok(DecodedAudio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Encode `[-1, 1]` samples as 16-bit PCM WAV (mono when `channels == 1`, interleaved otherwise).
pub fn encode_wav(samples: &[f64], sample_rate: u32, channels: u16) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(|e| Error::UnsupportedWav(e.to_string()))?;
        for &s in samples {
            let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            w.write_sample(v).map_err(|e| Error::UnsupportedWav(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::UnsupportedWav(e.to_string()))?;
    }
    Ok(buf.into_inner())
}
