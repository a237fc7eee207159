//! Synthetic aligned speech corpora.
//!
//! Phone sequences follow a sticky Markov chain: each frame repeats the
//! previous phone with probability `stickiness`, otherwise switches to a
//! different phone chosen uniformly. Mean run length is `1/(1-stickiness)`.
//! Frames are emitted either directly as per-phone Gaussian feature vectors
//! or as a waveform built from per-phone harmonic signatures, which is then
//! run through the MFCC pipeline so that frame `t` is aligned with phone `t`.
//!
//! Feature emissions carry two noise components: isotropic per-coordinate
//! noise (`noise`) and a per-frame common-mode offset added to every
//! coordinate (`gain_noise`), the synthetic analogue of frame-energy or
//! channel gain variation in real acoustic features. The offset is a strong
//! nuisance direction for distance-based clustering of raw frames, while a
//! trained encoder can learn to project it away — the gap that lets
//! model-layer features cluster better than the raw features they were
//! trained on.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dsp::{mfcc, MfccConfig};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// How frames are emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitMode {
    /// Per-phone Gaussian vectors, dimension `feature_dim`.
    Features,
    /// Synthesized waveform run through MFCC extraction.
    Waveform,
}

/// Corpus generation settings.
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_utts: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub n_phones: usize,
    /// Feature dimension in [`EmitMode::Features`] mode.
    pub feature_dim: usize,
    /// Probability of repeating the previous phone.
    pub stickiness: f64,
    /// Emission noise standard deviation around the phone mean.
    pub noise: f64,
    /// Standard deviation of the per-frame common-mode offset added to every
    /// feature coordinate (feature mode only).
    pub gain_noise: f64,
    /// Scale of the per-phone mean vectors.
    pub mean_scale: f64,
    pub mode: EmitMode,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_utts: 32,
            min_frames: 80,
            max_frames: 120,
            n_phones: 8,
            feature_dim: 8,
            stickiness: 0.95,
            noise: 0.5,
            gain_noise: 1.25,
            mean_scale: 1.0,
            mode: EmitMode::Features,
        }
    }
}

/// One utterance: frames aligned one-to-one with phone labels.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    /// Feature matrix, shape [frames, dim].
    pub frames: Tensor,
    /// Ground-truth phone label per frame.
    pub phones: Vec<usize>,
    /// Raw samples when generated in waveform mode.
    pub samples: Option<Vec<f64>>,
}

/// A generated corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub n_phones: usize,
}

impl Corpus {
    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.frames.rows()).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.utterances.first().map_or(0, |u| u.frames.cols())
    }

    /// All frames stacked into one [total, dim] matrix, corpus order.
    pub fn stacked_frames(&self) -> Tensor {
        let dim = self.feature_dim();
        let mut data = Vec::with_capacity(self.total_frames() * dim);
        for u in &self.utterances {
            data.extend_from_slice(u.frames.data());
        }
        Tensor::matrix(self.total_frames(), dim, data).expect("stack dims")
    }

    /// All phone labels concatenated, corpus order.
    pub fn stacked_phones(&self) -> Vec<usize> {
        self.utterances.iter().flat_map(|u| u.phones.iter().copied()).collect()
    }
}

/// Reconcile two per-frame sequence lengths that should be aligned: lengths
/// may differ by at most one frame (boundary effects); the shorter wins.
pub fn align_lengths(context: &str, left: usize, right: usize) -> Result<usize> {
    if left.abs_diff(right) <= 1 {
        Ok(left.min(right))
    } else {
        Err(Error::Alignment { context: String::from(context), left, right })
    }
}

/// Sticky Markov phone sequence of length `len` over `n_phones` labels.
pub fn gen_phone_sequence(
    len: usize,
    n_phones: usize,
    stickiness: f64,
    stream: &mut Stream,
) -> Vec<usize> {
    debug_assert!(n_phones >= 2);
    let mut phones = Vec::with_capacity(len);
    let mut current = stream.below(n_phones);
    for _ in 0..len {
        phones.push(current);
        if !stream.coin(stickiness) {
            // Uniform over the other phones.
            let step = 1 + stream.below(n_phones - 1);
            current = (current + step) % n_phones;
        }
    }
    phones
}

/// Per-phone mean vectors, shape [n_phones, dim].
pub fn phone_means(n_phones: usize, dim: usize, scale: f64, seed: u64) -> Tensor {
    let mut s = Stream::open(seed, "phone-means", &[]);
    let data: Vec<f64> = (0..n_phones * dim).map(|_| scale * s.normal()).collect();
    Tensor::matrix(n_phones, dim, data).expect("means dims")
}

/// Gaussian emissions around the phone means: per-coordinate noise plus a
/// per-frame common-mode gain offset (one draw per frame, added everywhere).
fn synth_features(
    phones: &[usize],
    means: &Tensor,
    noise: f64,
    gain_noise: f64,
    stream: &mut Stream,
) -> Tensor {
    let dim = means.cols();
    let mut data = Vec::with_capacity(phones.len() * dim);
    for &p in phones {
        let gain = gain_noise * stream.normal();
        for &m in means.row(p) {
            data.push(m + gain + noise * stream.normal());
        }
    }
    Tensor::matrix(phones.len(), dim, data).expect("feature dims")
}

/// Harmonic waveform whose content tracks the phone labels: phone `p` gets a
/// distinct fundamental and harmonic amplitude profile. The phase runs
/// continuously across label changes so boundaries click-free. The waveform
/// length is chosen so MFCC extraction yields exactly one frame per label.
fn synth_waveform(
    phones: &[usize],
    cfg: &MfccConfig,
    noise: f64,
    stream: &mut Stream,
) -> Vec<f64> {
    let hop = cfg.hop_samples();
    let len = cfg.samples_for_frames(phones.len());
    let sr = cfg.sample_rate as f64;
    let mut out = Vec::with_capacity(len);
    let mut phase = [0.0f64; 4];
    for s in 0..len {
        let t = (s / hop).min(phones.len() - 1);
        let p = phones[t];
        // Geometric fundamental spacing keeps neighboring phones a constant
        // log-frequency step apart, matching the mel filterbank's geometry.
        let f0 = 120.0 * libm::pow(1.32, p as f64);
        let mut v = 0.0;
        for (h, ph) in phase.iter_mut().enumerate() {
            let freq = f0 * (h + 1) as f64;
            // Harmonic profile differs sharply per phone.
            let amp = 0.5 / (h + 1) as f64
                * (1.0 + 0.8 * libm::sin(1.9 * p as f64 + 2.3 * h as f64));
            *ph += 2.0 * core::f64::consts::PI * freq / sr;
            v += amp * libm::sin(*ph);
        }
        out.push(0.3 * v + noise * 0.01 * stream.normal());
    }
    out
}

/// Generate a corpus. Waveform mode extracts MFCCs with `mfcc_cfg`
/// (defaulted when `None`); feature mode ignores it.
pub fn generate(cfg: &CorpusConfig, mfcc_cfg: Option<&MfccConfig>, seed: u64) -> Result<Corpus> {
    if cfg.n_phones < 2 {
        return Err(Error::Config(format!("need at least 2 phones, got {}", cfg.n_phones)));
    }
    if cfg.min_frames == 0 || cfg.max_frames < cfg.min_frames {
        return Err(Error::Config(format!(
            "bad frame range [{}, {}]",
            cfg.min_frames, cfg.max_frames
        )));
    }
    if cfg.noise < 0.0 || cfg.gain_noise < 0.0 {
        return Err(Error::Config(format!(
            "noise deviations must be non-negative, got noise {} gain_noise {}",
            cfg.noise, cfg.gain_noise
        )));
    }
    let default_mfcc = MfccConfig::default();
    let mfcc_cfg = mfcc_cfg.unwrap_or(&default_mfcc);
    let means = phone_means(cfg.n_phones, cfg.feature_dim, cfg.mean_scale, seed);

    let mut utterances = Vec::with_capacity(cfg.n_utts);
    for u in 0..cfg.n_utts {
        let uk = u as u64;
        let mut len_s = Stream::open(seed, "utt-len", &[uk]);
        let t_len = cfg.min_frames + len_s.below(cfg.max_frames - cfg.min_frames + 1);
        let mut phone_s = Stream::open(seed, "phones", &[uk]);
        let phones = gen_phone_sequence(t_len, cfg.n_phones, cfg.stickiness, &mut phone_s);
        let mut emit_s = Stream::open(seed, "emission", &[uk]);
        let (frames, samples) = match cfg.mode {
            EmitMode::Features => (
                synth_features(&phones, &means, cfg.noise, cfg.gain_noise, &mut emit_s),
                None,
            ),
            EmitMode::Waveform => {
                let wav = synth_waveform(&phones, mfcc_cfg, cfg.noise, &mut emit_s);
                let feats = mfcc(&wav, mfcc_cfg)?;
                if feats.rows() != phones.len() {
                    return Err(Error::Alignment {
                        context: format!("utt_{u:04}: mfcc frames vs phone labels"),
                        left: feats.rows(),
                        right: phones.len(),
                    });
                }
                (feats, Some(wav))
            }
        };
        utterances.push(Utterance { id: format!("utt_{u:04}"), frames, phones, samples });
    }
    Ok(Corpus { utterances, n_phones: cfg.n_phones })
}
