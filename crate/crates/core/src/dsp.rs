//! Acoustic feature extraction: framed MFCCs with deltas.
//!
//! The pipeline is the classical one: pre-emphasis, 25 ms Hamming windows at
//! a 10 ms hop, power spectrum via a radix-2 FFT, a triangular mel filterbank
//! on the HTK mel scale, floored log energies, an orthonormal DCT-II keeping
//! the first cepstra, and optional delta / delta-delta appending.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// MFCC extraction settings.
#[derive(Debug, Clone)]
pub struct MfccConfig {
    pub sample_rate: u32,
    /// Pre-emphasis coefficient applied as x[t] - a * x[t-1].
    pub pre_emphasis: f64,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    /// Floor applied inside the log of mel energies.
    pub log_floor: f64,
    /// Append delta and delta-delta features (triples the dimension).
    pub deltas: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16_000,
            pre_emphasis: 0.97,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 26,
            n_ceps: 13,
            log_floor: 1e-10,
            deltas: true,
        }
    }
}

impl MfccConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0) as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0) as usize
    }

    /// Output feature dimension.
    pub fn dim(&self) -> usize {
        if self.deltas {
            3 * self.n_ceps
        } else {
            self.n_ceps
        }
    }

    /// Number of frames extracted from `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        let win = self.win_samples();
        if len < win {
            0
        } else {
            1 + (len - win) / self.hop_samples()
        }
    }

    /// Sample count that yields exactly `t` frames with no remainder.
    pub fn samples_for_frames(&self, t: usize) -> usize {
        self.win_samples() + t.saturating_sub(1) * self.hop_samples()
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// In-place iterative radix-2 FFT over interleaved (re, im) pairs.
/// Length must be a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) -> Result<()> {
    let n = re.len();
    if n != im.len() || !n.is_power_of_two() {
        return Err(Error::Config(alloc::format!("fft length {n} must be a power of two")));
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    // Butterflies.
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        let (wr, wi) = (libm::cos(ang), libm::sin(ang));
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let next_cr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = next_cr;
            }
            i += len;
        }
        len <<= 1;
    }
    Ok(())
}

/// One-sided power spectrum (n_fft/2 + 1 bins) of a real frame, zero-padded
/// to `n_fft`.
pub fn power_spectrum(frame: &[f64], n_fft: usize) -> Result<Vec<f64>> {
    if frame.len() > n_fft {
        return Err(Error::Config(alloc::format!(
            "frame of {} samples exceeds fft size {n_fft}",
            frame.len()
        )));
    }
    let mut re = vec![0.0; n_fft];
    let mut im = vec![0.0; n_fft];
    re[..frame.len()].copy_from_slice(frame);
    fft_in_place(&mut re, &mut im)?;
    Ok((0..n_fft / 2 + 1).map(|k| re[k] * re[k] + im[k] * im[k]).collect())
}

/// Hamming window of length n.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * libm::cos(2.0 * core::f64::consts::PI * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular mel filterbank as a dense [n_mels, n_bins] matrix.
pub fn mel_filterbank(cfg: &MfccConfig) -> Tensor {
    let n_bins = cfg.n_fft / 2 + 1;
    let f_max = cfg.sample_rate as f64 / 2.0;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(f_max);
    // n_mels + 2 points equally spaced in mel, converted to fractional bins.
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| {
            let mel = mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64;
            mel_to_hz(mel) * cfg.n_fft as f64 / cfg.sample_rate as f64
        })
        .collect();
    let mut fb = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        for (k, fbv) in fb[m * n_bins..(m + 1) * n_bins].iter_mut().enumerate() {
            let k = k as f64;
            if k > lo && k < mid {
                *fbv = (k - lo) / (mid - lo);
            } else if k >= mid && k < hi {
                *fbv = (hi - k) / (hi - mid);
            }
        }
    }
    Tensor::matrix(cfg.n_mels, n_bins, fb).expect("filterbank dims")
}

/// Orthonormal DCT-II matrix with `n_out` rows over `n_in` inputs.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Tensor {
    let mut d = vec![0.0; n_out * n_in];
    for k in 0..n_out {
        let scale = if k == 0 {
            libm::sqrt(1.0 / n_in as f64)
        } else {
            libm::sqrt(2.0 / n_in as f64)
        };
        for (n, dv) in d[k * n_in..(k + 1) * n_in].iter_mut().enumerate() {
            *dv = scale
                * libm::cos(core::f64::consts::PI * k as f64 * (2.0 * n as f64 + 1.0)
                    / (2.0 * n_in as f64));
        }
    }
    Tensor::matrix(n_out, n_in, d).expect("dct dims")
}

/// Regression deltas with a +/-2 frame window; edges repeat the boundary
/// frame.
fn delta(feats: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t_len = feats.len();
    let d = feats[0].len();
    let denom = 2.0 * (1.0 + 4.0); // 2 * sum n^2 for n = 1..2
    let clamp = |i: isize| -> usize { i.clamp(0, t_len as isize - 1) as usize };
    (0..t_len)
        .map(|t| {
            (0..d)
                .map(|j| {
                    let mut acc = 0.0;
                    for n in 1..=2isize {
                        acc += n as f64
                            * (feats[clamp(t as isize + n)][j] - feats[clamp(t as isize - n)][j]);
                    }
                    acc / denom
                })
                .collect()
        })
        .collect()
}

/// Extract MFCC features from waveform samples, shape [frames, dim].
pub fn mfcc(samples: &[f64], cfg: &MfccConfig) -> Result<Tensor> {
    let win = cfg.win_samples();
    let hop = cfg.hop_samples();
    let t_len = cfg.frame_count(samples.len());
    if t_len == 0 {
        return Err(Error::InsufficientData { needed: win, got: samples.len() });
    }
    if win > cfg.n_fft {
        return Err(Error::Config(alloc::format!(
            "window of {win} samples exceeds fft size {}",
            cfg.n_fft
        )));
    }

    // Pre-emphasis over the whole signal.
    let mut emph = Vec::with_capacity(samples.len());
    emph.push(samples[0]);
    for i in 1..samples.len() {
        emph.push(samples[i] - cfg.pre_emphasis * samples[i - 1]);
    }

    let window = hamming(win);
    let fbank = mel_filterbank(cfg);
    let dct = dct_matrix(cfg.n_ceps, cfg.n_mels);
    let n_bins = cfg.n_fft / 2 + 1;

    let mut ceps: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut frame = vec![0.0; win];
    for t in 0..t_len {
        let start = t * hop;
        for (f, (s, w)) in frame
            .iter_mut()
            .zip(emph[start..start + win].iter().zip(window.iter()))
        {
            *f = s * w;
        }
        let power = power_spectrum(&frame, cfg.n_fft)?;
        let mut logmel = vec![0.0; cfg.n_mels];
        for (m, lm) in logmel.iter_mut().enumerate() {
            let mut e = 0.0;
            for k in 0..n_bins {
                e += fbank.data()[m * n_bins + k] * power[k];
            }
            *lm = libm::log(e.max(cfg.log_floor));
        }
        let mut c = vec![0.0; cfg.n_ceps];
        for (k, cv) in c.iter_mut().enumerate() {
            let mut acc = 0.0;
            for m in 0..cfg.n_mels {
                acc += dct.data()[k * cfg.n_mels + m] * logmel[m];
            }
            *cv = acc;
        }
        ceps.push(c);
    }

    if !cfg.deltas {
        return Tensor::from_rows(&ceps);
    }
    let d1 = delta(&ceps);
    let d2 = delta(&d1);
    let rows: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let mut row = ceps[t].clone();
            row.extend_from_slice(&d1[t]);
            row.extend_from_slice(&d2[t]);
            row
        })
        .collect();
    Tensor::from_rows(&rows)
}
