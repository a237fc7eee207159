//! 16-bit mono WAV reading and writing for synthesized waveforms.
//!
//! Samples are `f64` in [-1, 1] on the library side; files store 16-bit PCM.
//! Writing quantizes symmetrically (round, clamp); reading rescales by 1/32768.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Write `samples` (clamped to [-1, 1]) as 16-bit mono PCM.
pub fn write(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)
        .with_context(|| format!("creating wav file {}", path.display()))?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(q)?;
    }
    w.finalize().with_context(|| format!("finalizing wav file {}", path.display()))?;
    Ok(())
}

/// Read a 16-bit mono PCM file back to `f64` samples and its sample rate.
pub fn read(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut r = hound::WavReader::open(path)
        .with_context(|| format!("opening wav file {}", path.display()))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        bail!(
            "{}: expected 16-bit mono PCM, found {} ch / {} bit",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        );
    }
    let samples: Vec<f64> = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("decoding samples of {}", path.display()))?;
    Ok((samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_stays_within_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<f64> =
            (0..2000).map(|i| 0.8 * (i as f64 * 0.0523).sin() * (i as f64 * 0.0037).cos()).collect();
        write(&p, &samples, 16_000).unwrap();
        let (back, sr) = read(&p).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(back.len(), samples.len());
        // One 16-bit step is 1/32768 ≈ 3.05e-5; rounding error is half that
        // plus the 32767/32768 scale skew.
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() < 6e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn clamps_out_of_range_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write(&p, &[2.0, -3.0, 0.0], 8_000).unwrap();
        let (back, _) = read(&p).unwrap();
        assert!((back[0] - 32767.0 / 32768.0).abs() < 1e-12);
        assert!((back[1] + 32767.0 / 32768.0).abs() < 1e-12);
        assert_eq!(back[2], 0.0);
    }

    #[test]
    fn write_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("d1.wav");
        let p2 = dir.path().join("d2.wav");
        let samples: Vec<f64> = (0..500).map(|i| (i as f64 * 0.11).sin()).collect();
        write(&p1, &samples, 16_000).unwrap();
        write(&p2, &samples, 16_000).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
