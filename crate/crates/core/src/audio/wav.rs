use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioClip, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Read a mono 16 kHz PCM16 or float32 WAV at its full length.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = WavReader::open(path).map_err(|e| Error::file(path, format!("cannot read WAV: {e}")))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::file(path, format!("unsupported sample rate {}", spec.sample_rate)));
    }
    if spec.channels != 1 {
        return Err(Error::file(path, format!("unsupported channel count {} (mono required)", spec.channels)));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => {
            reader.into_samples::<i16>().map(|s| s.map(|v| v as f32 / 32768.0)).collect::<std::result::Result<_, _>>()
        }
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<std::result::Result<_, _>>(),
        (fmt, bits) => return Err(Error::file(path, format!("unsupported codec {fmt:?} {bits}-bit (PCM16 or float32 required)"))),
    }
    .map_err(|e| Error::file(path, format!("corrupt WAV data: {e}")))?;
    if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::file(path, format!("non-finite sample at index {i}")));
    }
    Ok(AudioClip { samples, sample_rate: SAMPLE_RATE, source_path: Some(path.display().to_string()) })
}

/// Read a WAV and fit it to exactly one second.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let mut clip = read_wav(path)?;
    clip.samples = fit_to_length(&clip.samples, CLIP_SAMPLES);
    Ok(clip)
}

/// Center-crop longer signals; zero-pad shorter ones symmetrically (extra
/// sample of padding goes to the end).
pub fn fit_to_length(samples: &[f32], len: usize) -> Vec<f32> {
    if samples.len() >= len {
        let start = (samples.len() - len) / 2;
        samples[start..start + len].to_vec()
    } else {
        let left = (len - samples.len()) / 2;
        let mut out = vec![0.0; len];
        out[left..left + samples.len()].copy_from_slice(samples);
        out
    }
}

/// Write 16-bit PCM; samples are clamped to `[-1, 1]` and scaled by 32768.
pub fn write_wav_pcm16(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate: clip.sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let wrap = |e: hound::Error| Error::file(path, format!("cannot write WAV: {e}"));
    let mut writer = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, rate: u32, channels: u16, samples: &[i16]) {
        let spec = WavSpec { channels, sample_rate: rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn zeros_load_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_raw(&p, 16000, 1, &vec![0; 16000]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples, vec![0.0; 16000]);
    }

    #[test]
    fn short_clips_pad_symmetrically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 16000, 1, &vec![16384; 8000]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.len(), 16000);
        assert!(clip.samples[..4000].iter().all(|&s| s == 0.0));
        assert!(clip.samples[4000..12000].iter().all(|&s| s == 0.5));
        assert!(clip.samples[12000..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn long_clips_center_crop() {
        let v: Vec<f32> = (0..20).map(|i| i as f32).collect();
        assert_eq!(fit_to_length(&v, 10), (5..15).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_wrong_rate_and_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, 44100, 1, &[0; 100]);
        assert!(load_wav(&p).unwrap_err().to_string().contains("unsupported sample rate 44100"));
        write_raw(&p, 16000, 2, &[0; 100]);
        assert!(load_wav(&p).unwrap_err().to_string().contains("channel"));
    }

    #[test]
    fn float_wavs_are_supported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 32, sample_format: SampleFormat::Float };
        let mut w = WavWriter::create(&p, spec).unwrap();
        for i in 0..16000 {
            w.write_sample((i as f32 / 16000.0) - 0.5).unwrap();
        }
        w.finalize().unwrap();
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples[0], -0.5);
    }

    #[test]
    fn pcm16_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let clip = AudioClip::new((0..16000).map(|i| ((i % 200) as f32 - 100.0) / 32768.0).collect());
        write_wav_pcm16(&p, &clip).unwrap();
        assert_eq!(load_wav(&p).unwrap().samples, clip.samples);
    }
}
