//! 16-bit PCM WAV input/output.

use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

/// Quantizes a float sample to 16-bit PCM with saturation.
pub fn quantize(x: f64) -> i16 {
    (x * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn dequantize(q: i16) -> f64 {
    q as f64 / PCM_SCALE
}

/// Writes mono 16-bit little-endian PCM.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in w.samples() {
        writer.write_sample(quantize(s)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Reads a WAV file of any integer or float format, averaging channels to mono.
/// The sample rate is returned as stored; resampling is up to the caller.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
    };
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|c| c.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    Waveform::new(mono, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_values_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (-5..5).map(|i| dequantize((i * 1234) as i16)).collect();
        let w = Waveform::new(samples.clone(), 16000).unwrap();
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.samples(), &samples[..]);
        assert_eq!(r.sample_rate(), 16000);
    }

    #[test]
    fn quantize_saturates() {
        assert_eq!(quantize(2.0), i16::MAX);
        assert_eq!(quantize(-2.0), i16::MIN);
    }

    #[test]
    fn stereo_is_downmixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..4 {
            wr.write_sample(1000i16).unwrap();
            wr.write_sample(3000i16).unwrap();
        }
        wr.finalize().unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.len(), 4);
        assert!((r.samples()[0] - 2000.0 / 32768.0).abs() < 1e-12);
    }
}
