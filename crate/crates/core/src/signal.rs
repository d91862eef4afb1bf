//! Synthetic multi-subject EEG generation and band-wise feature extraction.
//!
//! The generator produces stimulus-locked trials: every class owns one
//! oscillator per frequency band with a class-specific per-channel amplitude
//! topography and a class phase. Subjects see the same class signature through
//! a subject-specific linear remix plus white noise, and a per-trial phase
//! jitter process controls how tightly trials of different subjects stay
//! phase-locked to each other.
//!
//! Features are differential entropy per channel per band, computed on an
//! ideal FFT brick-wall bandpassed copy of the segment.

use crate::error::{GrnError, Result};
use crate::fft;
use crate::seeding::{normal01, rng_from};
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::PI;

/// Variance floor that keeps differential entropy finite on silent channels.
pub const DE_VARIANCE_FLOOR: f64 = 1e-12;

/// The five canonical EEG bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BandName {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl BandName {
    pub fn as_str(&self) -> &'static str {
        match self {
            BandName::Delta => "delta",
            BandName::Theta => "theta",
            BandName::Alpha => "alpha",
            BandName::Beta => "beta",
            BandName::Gamma => "gamma",
        }
    }
}

/// One frequency band, `[lo, hi)` in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandDef {
    pub name: BandName,
    pub lo: f64,
    pub hi: f64,
}

impl BandDef {
    pub fn new(name: BandName, lo: f64, hi: f64) -> Self {
        Self { name, lo, hi }
    }

    /// Center frequency; the generator places one oscillator here per band.
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// A band is only usable below the Nyquist frequency.
    pub fn validate(&self, fs: f64) -> Result<()> {
        if !(self.lo > 0.0 && self.lo < self.hi && self.hi < fs / 2.0) {
            return Err(GrnError::Config(format!(
                "band {} [{}, {}) invalid for fs={} (need 0 < lo < hi < fs/2)",
                self.name.as_str(),
                self.lo,
                self.hi,
                fs
            )));
        }
        Ok(())
    }
}

/// Default bands: delta [1,4), theta [4,8), alpha [8,14), beta [14,31), gamma [31,50) Hz.
pub fn default_bands() -> Vec<BandDef> {
    vec![
        BandDef::new(BandName::Delta, 1.0, 4.0),
        BandDef::new(BandName::Theta, 4.0, 8.0),
        BandDef::new(BandName::Alpha, 8.0, 14.0),
        BandDef::new(BandName::Beta, 14.0, 31.0),
        BandDef::new(BandName::Gamma, 31.0, 50.0),
    ]
}

/// One multi-channel EEG window: `C` channels by `T` samples in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct EegSegment {
    data: Vec<f64>,
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub subject_id: u32,
    pub trial_id: u32,
    pub label: u32,
}

impl EegSegment {
    pub fn new(
        data: Vec<f64>,
        channels: usize,
        samples: usize,
        fs: f64,
        subject_id: u32,
        trial_id: u32,
        label: u32,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(GrnError::Config(format!(
                "segment needs at least 2 channels, got {channels}"
            )));
        }
        if fs <= 0.0 {
            return Err(GrnError::Config(format!("fs must be positive, got {fs}")));
        }
        if (samples as f64) < 2.0 * fs {
            return Err(GrnError::Config(format!(
                "segment needs at least 2 seconds of data: T={samples} < 2*fs={}",
                2.0 * fs
            )));
        }
        if data.len() != channels * samples {
            return Err(GrnError::Config(format!(
                "data length {} does not match C*T = {}",
                data.len(),
                channels * samples
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(GrnError::NonFinite("segment data".into()));
        }
        Ok(Self {
            data,
            channels,
            samples,
            fs,
            subject_id,
            trial_id,
            label,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// True when both segments can be compared channel-for-channel.
    pub fn compatible_with(&self, other: &EegSegment) -> bool {
        self.channels == other.channels && self.samples == other.samples && self.fs == other.fs
    }
}

/// Band-wise differential-entropy features, `C` channels by `B` bands.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub values: Vec<f64>,
    pub channels: usize,
    pub bands: usize,
    pub subject_id: u32,
    pub trial_id: u32,
    pub label: u32,
}

impl FeatureGrid {
    pub fn value(&self, c: usize, b: usize) -> f64 {
        self.values[c * self.bands + b]
    }
}

/// Parameters of the synthetic multi-subject dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_trials_per_class: usize,
    pub n_classes: usize,
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub phase_jitter_std: f64,
    pub subject_noise_std: f64,
    pub mixing_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            n_trials_per_class: 20,
            n_classes: 3,
            channels: 8,
            samples: 512,
            fs: 128.0,
            phase_jitter_std: 0.3,
            subject_noise_std: 0.5,
            mixing_strength: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 3 {
            return Err(GrnError::Config(format!(
                "n_subjects must be >= 3, got {}",
                self.n_subjects
            )));
        }
        if self.n_classes < 2 {
            return Err(GrnError::Config(format!(
                "n_classes must be >= 2, got {}",
                self.n_classes
            )));
        }
        if self.n_trials_per_class == 0 {
            return Err(GrnError::Config("n_trials_per_class must be >= 1".into()));
        }
        if self.channels < 2 {
            return Err(GrnError::Config(format!(
                "channels must be >= 2, got {}",
                self.channels
            )));
        }
        if self.fs <= 0.0 {
            return Err(GrnError::Config(format!("fs must be positive, got {}", self.fs)));
        }
        if (self.samples as f64) < 2.0 * self.fs {
            return Err(GrnError::Config(format!(
                "samples must be >= 2*fs, got T={} at fs={}",
                self.samples, self.fs
            )));
        }
        if self.phase_jitter_std < 0.0 {
            return Err(GrnError::Config(format!(
                "phase_jitter_std must be >= 0, got {}",
                self.phase_jitter_std
            )));
        }
        if self.subject_noise_std < 0.0 {
            return Err(GrnError::Config(format!(
                "subject_noise_std must be >= 0, got {}",
                self.subject_noise_std
            )));
        }
        if !(0.0..=1.0).contains(&self.mixing_strength) {
            return Err(GrnError::Config(format!(
                "mixing_strength must lie in [0,1], got {}",
                self.mixing_strength
            )));
        }
        for band in default_bands() {
            band.validate(self.fs)?;
        }
        Ok(())
    }
}

// Seed-stream tags so each entity draws from its own ChaCha stream regardless
// of generation order.
const TAG_CLASS_SIG: u64 = 0xC1A5;
const TAG_MIXING: u64 = 0x317;
const TAG_TRIAL: u64 = 0x7219;

/// Phase jitter is a piecewise-constant process over ~0.25 s blocks rather
/// than a single per-trial offset: a constant offset is invisible to
/// time-averaged phase locking, so a constant draw would leave cross-subject
/// PLV unchanged no matter how large the jitter. Blockwise redraws keep the
/// single-knob control while making PLV respond to it.
pub fn jitter_block_len(fs: f64) -> usize {
    ((fs / 4.0).round() as usize).max(1)
}

struct ClassSignature {
    /// amplitude[c][b]
    amplitude: Vec<Vec<f64>>,
    /// phase[b]
    phase: Vec<f64>,
}

fn class_signature(cfg: &SynthConfig, label: usize, n_bands: usize) -> ClassSignature {
    let mut rng = rng_from(&[cfg.seed, TAG_CLASS_SIG, label as u64]);
    let amplitude = (0..cfg.channels)
        .map(|_| (0..n_bands).map(|_| 0.4 + 0.8 * rng.gen::<f64>()).collect())
        .collect();
    let phase = (0..n_bands).map(|_| rng.gen::<f64>() * 2.0 * PI).collect();
    ClassSignature { amplitude, phase }
}

/// Subject remix `(1-m)·I + m·R` with `R` a random dense matrix scaled by 1/sqrt(C).
fn subject_mixing(cfg: &SynthConfig, subject: usize) -> Vec<Vec<f64>> {
    let c = cfg.channels;
    let m = cfg.mixing_strength;
    let mut rng = rng_from(&[cfg.seed, TAG_MIXING, subject as u64]);
    let scale = 1.0 / (c as f64).sqrt();
    let mut w = vec![vec![0.0; c]; c];
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let r = normal01(&mut rng) * scale;
            *v = m * r + if i == j { 1.0 - m } else { 0.0 };
        }
    }
    w
}

/// Generate the full synthetic dataset: `n_subjects * n_classes * n_trials_per_class`
/// segments, bit-reproducible for a fixed seed.
pub fn gen_synthetic_dataset(cfg: &SynthConfig) -> Result<Vec<EegSegment>> {
    cfg.validate()?;
    let bands = default_bands();
    let n_bands = bands.len();
    let centers: Vec<f64> = bands.iter().map(|b| b.center()).collect();
    let signatures: Vec<ClassSignature> = (0..cfg.n_classes)
        .map(|l| class_signature(cfg, l, n_bands))
        .collect();
    let block = jitter_block_len(cfg.fs);

    let mut out = Vec::with_capacity(cfg.n_subjects * cfg.n_classes * cfg.n_trials_per_class);
    let mut trial_id: u32 = 0;
    for subject in 0..cfg.n_subjects {
        let mixing = subject_mixing(cfg, subject);
        for label in 0..cfg.n_classes {
            let sig = &signatures[label];
            for trial in 0..cfg.n_trials_per_class {
                let mut rng = rng_from(&[
                    cfg.seed,
                    TAG_TRIAL,
                    subject as u64,
                    label as u64,
                    trial as u64,
                ]);
                // Blockwise jitter per band, shared across channels.
                let n_blocks = cfg.samples.div_ceil(block);
                let jitter: Vec<Vec<f64>> = (0..n_bands)
                    .map(|_| {
                        (0..n_blocks)
                            .map(|_| normal01(&mut rng) * cfg.phase_jitter_std)
                            .collect()
                    })
                    .collect();

                let mut clean = vec![0.0; cfg.channels * cfg.samples];
                for c in 0..cfg.channels {
                    for t in 0..cfg.samples {
                        let tt = t as f64 / cfg.fs;
                        let mut v = 0.0;
                        for b in 0..n_bands {
                            let eps = jitter[b][t / block];
                            v += sig.amplitude[c][b]
                                * (2.0 * PI * centers[b] * tt + sig.phase[b] + eps).sin();
                        }
                        clean[c * cfg.samples + t] = v;
                    }
                }

                // Subject remix, then white noise.
                let mut data = vec![0.0; cfg.channels * cfg.samples];
                for i in 0..cfg.channels {
                    for j in 0..cfg.channels {
                        let w = mixing[i][j];
                        if w == 0.0 {
                            continue;
                        }
                        let src = &clean[j * cfg.samples..(j + 1) * cfg.samples];
                        let dst = &mut data[i * cfg.samples..(i + 1) * cfg.samples];
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d += w * s;
                        }
                    }
                }
                if cfg.subject_noise_std > 0.0 {
                    for v in &mut data {
                        *v += normal01(&mut rng) * cfg.subject_noise_std;
                    }
                }

                out.push(EegSegment::new(
                    data,
                    cfg.channels,
                    cfg.samples,
                    cfg.fs,
                    subject as u32,
                    trial_id,
                    label as u32,
                )?);
                trial_id += 1;
            }
        }
    }
    Ok(out)
}

/// Ideal brick-wall bandpass: FFT, zero every bin whose |frequency| falls
/// outside `[lo, hi)`, inverse FFT, real part. Zero-phase by construction.
pub fn bandpass(seg: &EegSegment, band: &BandDef) -> Result<EegSegment> {
    band.validate(seg.fs)?;
    let t = seg.samples;
    let mut data = vec![0.0; seg.channels * t];
    for c in 0..seg.channels {
        let filtered = bandpass_channel(seg.channel(c), seg.fs, band);
        data[c * t..(c + 1) * t].copy_from_slice(&filtered);
    }
    EegSegment::new(
        data,
        seg.channels,
        seg.samples,
        seg.fs,
        seg.subject_id,
        seg.trial_id,
        seg.label,
    )
}

/// Single-channel brick-wall bandpass used by [`bandpass`] and the synchrony path.
pub fn bandpass_channel(x: &[f64], fs: f64, band: &BandDef) -> Vec<f64> {
    let n = x.len();
    let mut spec = fft::fft_real(x);
    for (k, v) in spec.iter_mut().enumerate() {
        let f = fft::bin_frequency(k, n, fs).abs();
        if !(band.lo <= f && f < band.hi) {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    fft::ifft(&spec).iter().map(|v| v.re).collect()
}

/// Gaussian differential entropy `0.5*ln(2*pi*e*var)` with the variance floored
/// at [`DE_VARIANCE_FLOOR`] so silent channels stay finite.
pub fn de_feature(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let var = var.max(DE_VARIANCE_FLOOR);
    0.5 * (2.0 * PI * std::f64::consts::E * var).ln()
}

/// Differential entropy per channel per band: `values[c][b] = de(bandpass(seg, bands[b])[c])`.
pub fn extract_features(seg: &EegSegment, bands: &[BandDef]) -> Result<FeatureGrid> {
    let mut values = vec![0.0; seg.channels * bands.len()];
    for (b, band) in bands.iter().enumerate() {
        let filtered = bandpass(seg, band)?;
        for c in 0..seg.channels {
            values[c * bands.len() + b] = de_feature(filtered.channel(c));
        }
    }
    Ok(FeatureGrid {
        values,
        channels: seg.channels,
        bands: bands.len(),
        subject_id: seg.subject_id,
        trial_id: seg.trial_id,
        label: seg.label,
    })
}
