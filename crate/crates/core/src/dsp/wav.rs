use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

const PCM16_SCALE: f64 = 32768.0;

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::Unsupported("WAV encoding not supported".into()),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a PCM16 mono RIFF/WAVE file, scaling samples by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Unsupported(format!(
            "{} channels, only mono is supported",
            spec.channels
        )));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Unsupported(format!(
            "{}-bit {:?} samples, only PCM16 is supported",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes `w` as PCM16 mono, clipping to the representable range.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for &v in w.samples() {
        let q = (v * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, values: &[i16]) {
        let spec = WavSpec {
            channels,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &v in values {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn pcm_values_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("three.wav");
        write_raw(&path, 1, &[16384, -16384, 0]);
        let w = read_wav(&path).unwrap();
        let expect = [0.5, -0.5, 0.0];
        for (a, b) in w.samples().iter().zip(expect) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn silence_reads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        write_wav(&path, &Waveform::zeros(8000, 8000)).unwrap();
        let w = read_wav(&path).unwrap();
        assert_eq!(w.len(), 8000);
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("impulse.wav");
        let mut samples = vec![0.0; 16];
        samples[0] = 1.0;
        samples[3] = -0.3;
        let w = Waveform::new(samples, 8000).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        write_raw(&path, 2, &[1, 2, 3, 4]);
        assert!(matches!(read_wav(&path), Err(Error::Unsupported(_))));
    }

    #[test]
    fn garbage_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.wav");
        std::fs::write(&path, b"RIFX this is not a wave file at all").unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format(_))));
    }
}
