//! Cross-segment synchrony: analytic-phase PLV, Welch magnitude-squared
//! coherence, and the multi-subject resonance tensor stacking both against a
//! set of reference trials.
//!
//! Matrices here are bipartite: entry (i, j) compares channel i of the current
//! sample with channel j of the reference, so cross-segment matrices are not
//! symmetric in general. `plv_matrix(a, b)` equals `plv_matrix(b, a)` transposed
//! because negating a phase difference leaves its phasor modulus unchanged.

use crate::error::{GrnError, Result};
use crate::fft;
use crate::signal::{bandpass_channel, BandDef, EegSegment};
use num_complex::Complex64;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

/// Which synchrony measure a matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncKind {
    Plv,
    Coh,
}

/// A C-by-C synchrony matrix between two segments.
#[derive(Debug, Clone)]
pub struct SyncMatrix {
    /// Row-major `[C x C]`; rows index the sample's channels, columns the reference's.
    pub values: Vec<f64>,
    pub channels: usize,
    pub kind: SyncKind,
    /// `None` means band-averaged.
    pub band: Option<BandDef>,
    /// Channel pairs zeroed because one side had no signal power.
    pub degenerate_pairs: usize,
}

impl SyncMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.channels + j]
    }
}

/// Stacked PLV/CoH matrices against `K_r` references: `[K_r x C x C x 2]`,
/// last axis 0 = PLV, 1 = CoH.
#[derive(Debug, Clone)]
pub struct ResonanceTensor {
    pub values: Vec<f64>,
    pub k_r: usize,
    pub channels: usize,
    pub reference_subject_ids: Vec<u32>,
}

impl ResonanceTensor {
    pub fn at(&self, k: usize, i: usize, j: usize, kind: usize) -> f64 {
        let c = self.channels;
        self.values[((k * c + i) * c + j) * 2 + kind]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Welch estimation parameters. The window is always Hann.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchConfig {
    pub segment_len: usize,
    /// Fractional overlap in [0, 1).
    pub overlap: f64,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            segment_len: 256,
            overlap: 0.5,
        }
    }
}

impl WelchConfig {
    pub fn step(&self) -> usize {
        (((1.0 - self.overlap) * self.segment_len as f64).round() as usize).max(1)
    }

    pub fn n_segments(&self, signal_len: usize) -> usize {
        if signal_len < self.segment_len {
            0
        } else {
            (signal_len - self.segment_len) / self.step() + 1
        }
    }

    pub fn n_bins(&self) -> usize {
        self.segment_len / 2 + 1
    }

    pub fn validate(&self, signal_len: usize) -> Result<()> {
        if !self.segment_len.is_power_of_two() {
            return Err(GrnError::Config(format!(
                "welch segment_len must be a power of two, got {}",
                self.segment_len
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(GrnError::Config(format!(
                "welch overlap must lie in [0,1), got {}",
                self.overlap
            )));
        }
        if self.segment_len > signal_len {
            return Err(GrnError::Config(format!(
                "welch segment_len {} exceeds signal length {}",
                self.segment_len, signal_len
            )));
        }
        if self.n_segments(signal_len) < 2 {
            return Err(GrnError::Config(format!(
                "welch needs at least 2 segments, got {} (T={}, segment_len={}, overlap={})",
                self.n_segments(signal_len),
                signal_len,
                self.segment_len,
                self.overlap
            )));
        }
        Ok(())
    }
}

/// Analytic signal via the FFT construction: DC and Nyquist bins kept,
/// positive-frequency bins doubled, negative-frequency bins zeroed.
pub fn analytic_signal(x: &[f64]) -> Result<Vec<Complex64>> {
    let n = x.len();
    if n < 4 || n % 2 != 0 {
        return Err(GrnError::Invalid(format!(
            "analytic_signal needs an even length >= 4, got {n}"
        )));
    }
    let mut spec = fft::fft_real(x);
    let half = n / 2;
    for (k, v) in spec.iter_mut().enumerate() {
        if k == 0 || k == half {
            // unchanged
        } else if k < half {
            *v *= 2.0;
        } else {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    Ok(fft::ifft(&spec))
}

/// Instantaneous phase of a real signal's analytic extension.
pub fn instantaneous_phase(x: &[f64]) -> Result<Vec<f64>> {
    Ok(analytic_signal(x)?.iter().map(|z| z.arg()).collect())
}

/// Phase locking value `|mean(exp(i * (a - b)))|` over two phase sequences.
pub fn plv_pair(phase_a: &[f64], phase_b: &[f64]) -> Result<f64> {
    if phase_a.len() != phase_b.len() {
        return Err(GrnError::Invalid(format!(
            "plv_pair length mismatch: {} vs {}",
            phase_a.len(),
            phase_b.len()
        )));
    }
    let mut re = 0.0;
    let mut im = 0.0;
    for (&a, &b) in phase_a.iter().zip(phase_b.iter()) {
        let d = a - b;
        re += d.cos();
        im += d.sin();
    }
    let n = phase_a.len() as f64;
    Ok((re / n).hypot(im / n))
}

/// PLV matrix in one band: channel i of (bandpassed) `seg_a` against channel j
/// of (bandpassed) `seg_b`.
pub fn plv_matrix(seg_a: &EegSegment, seg_b: &EegSegment, band: &BandDef) -> Result<SyncMatrix> {
    if !seg_a.compatible_with(seg_b) {
        return Err(GrnError::Shape {
            op: "plv_matrix",
            details: format!(
                "({} ch, {} samples, fs={}) vs ({} ch, {} samples, fs={})",
                seg_a.channels, seg_a.samples, seg_a.fs, seg_b.channels, seg_b.samples, seg_b.fs
            ),
        });
    }
    band.validate(seg_a.fs)?;
    let phases_a = segment_phases(seg_a, band)?;
    let phases_b = segment_phases(seg_b, band)?;
    let c = seg_a.channels;
    let mut values = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            values[i * c + j] = plv_pair(&phases_a[i], &phases_b[j])?;
        }
    }
    Ok(SyncMatrix {
        values,
        channels: c,
        kind: SyncKind::Plv,
        band: Some(*band),
        degenerate_pairs: 0,
    })
}

fn segment_phases(seg: &EegSegment, band: &BandDef) -> Result<Vec<Vec<f64>>> {
    (0..seg.channels)
        .map(|c| instantaneous_phase(&bandpass_channel(seg.channel(c), seg.fs, band)))
        .collect()
}

/// One-sided Welch cross-spectral density between `x` and `y`: Hann window,
/// per-segment mean removal, density normalization by `fs * sum(w^2)`, interior
/// bins doubled. `welch_csd(x, x, ..)` is real and non-negative.
pub fn welch_csd(x: &[f64], y: &[f64], cfg: &WelchConfig, fs: f64) -> Result<Vec<Complex64>> {
    if x.len() != y.len() {
        return Err(GrnError::Invalid(format!(
            "welch_csd length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    cfg.validate(x.len())?;
    let sx = segment_spectra(x, cfg);
    let sy = segment_spectra(y, cfg);
    let n_segs = cfg.n_segments(x.len());
    let n_bins = cfg.n_bins();
    let window_power: f64 = hann(cfg.segment_len).iter().map(|w| w * w).sum();
    let scale = 1.0 / (n_segs as f64 * fs * window_power);
    let mut out = vec![Complex64::new(0.0, 0.0); n_bins];
    for s in 0..n_segs {
        for (k, v) in out.iter_mut().enumerate() {
            *v += sx[s * n_bins + k] * sy[s * n_bins + k].conj();
        }
    }
    for (k, v) in out.iter_mut().enumerate() {
        *v *= scale;
        if k != 0 && k != n_bins - 1 {
            *v *= 2.0;
        }
    }
    Ok(out)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Windowed, mean-removed one-sided segment spectra, flat `[segment][bin]`.
fn segment_spectra(x: &[f64], cfg: &WelchConfig) -> Vec<Complex64> {
    let n = cfg.segment_len;
    let n_segs = cfg.n_segments(x.len());
    let n_bins = cfg.n_bins();
    let w = hann(n);
    let mut out = Vec::with_capacity(n_segs * n_bins);
    let mut buf = vec![0.0; n];
    for s in 0..n_segs {
        let start = s * cfg.step();
        let seg = &x[start..start + n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        for (b, (&v, &wv)) in seg.iter().zip(w.iter()).enumerate() {
            buf[b] = (v - mean) * wv;
        }
        let spec = fft::fft_real(&buf);
        out.extend_from_slice(&spec[..n_bins]);
    }
    out
}

/// Welch bins whose frequency falls inside any of the given bands.
fn band_union_mask(cfg: &WelchConfig, fs: f64, bands: &[BandDef]) -> Vec<bool> {
    (0..cfg.n_bins())
        .map(|k| {
            let f = k as f64 * fs / cfg.segment_len as f64;
            bands.iter().any(|b| b.lo <= f && f < b.hi)
        })
        .collect()
}

/// Band-averaged magnitude-squared coherence matrix between two segments:
/// per channel pair, `|S_xy|^2 / (S_xx * S_yy)` per bin, averaged over every
/// bin inside the union of `bands`. Pairs touching an all-zero channel are
/// defined as 0 and counted in `degenerate_pairs`.
pub fn coherence_matrix(
    seg_a: &EegSegment,
    seg_b: &EegSegment,
    cfg: &WelchConfig,
    bands: &[BandDef],
) -> Result<SyncMatrix> {
    if !seg_a.compatible_with(seg_b) {
        return Err(GrnError::Shape {
            op: "coherence_matrix",
            details: format!(
                "({} ch, {} samples) vs ({} ch, {} samples)",
                seg_a.channels, seg_a.samples, seg_b.channels, seg_b.samples
            ),
        });
    }
    cfg.validate(seg_a.samples)?;
    let a = TrialSync::new(seg_a, bands, cfg)?;
    let b = TrialSync::new(seg_b, bands, cfg)?;
    let pair = pair_sync(&a, &b)?;
    Ok(SyncMatrix {
        values: pair.coh,
        channels: seg_a.channels,
        kind: SyncKind::Coh,
        band: None,
        degenerate_pairs: pair.degenerate_pairs,
    })
}

/// Resonance tensor of a sample against `K_r` references: slice k holds the
/// band-averaged PLV matrix (last axis 0) and band-averaged CoH matrix (last
/// axis 1) against `refs[k]`. Guards against a reference sharing the sample's
/// subject; the protocol layer is the primary guard, this one is defense in
/// depth for the cross-subject use of the tensor.
pub fn build_resonance_tensor(
    sample: &EegSegment,
    refs: &[&EegSegment],
    bands: &[BandDef],
    cfg: &WelchConfig,
) -> Result<ResonanceTensor> {
    for r in refs {
        if r.subject_id == sample.subject_id {
            return Err(GrnError::Leakage(format!(
                "reference trial {} shares subject {} with the sample",
                r.trial_id, r.subject_id
            )));
        }
    }
    build_resonance_tensor_unchecked(sample, refs, bands, cfg)
}

/// Tensor assembly without the subject guard. Exists for unit tests and for the
/// subject-dependent protocol, where references legitimately come from the
/// sample's own training trials.
pub fn build_resonance_tensor_unchecked(
    sample: &EegSegment,
    refs: &[&EegSegment],
    bands: &[BandDef],
    cfg: &WelchConfig,
) -> Result<ResonanceTensor> {
    if refs.is_empty() {
        return Err(GrnError::Invalid(
            "resonance tensor needs at least 1 reference".into(),
        ));
    }
    let sample_sync = TrialSync::new(sample, bands, cfg)?;
    let c = sample.channels;
    let mut values = vec![0.0; refs.len() * c * c * 2];
    let mut reference_subject_ids = Vec::with_capacity(refs.len());
    for (k, r) in refs.iter().enumerate() {
        if !sample.compatible_with(r) {
            return Err(GrnError::Shape {
                op: "build_resonance_tensor",
                details: "sample and reference segments differ in shape or fs".into(),
            });
        }
        let ref_sync = TrialSync::new(r, bands, cfg)?;
        let pair = pair_sync(&sample_sync, &ref_sync)?;
        for i in 0..c {
            for j in 0..c {
                values[((k * c + i) * c + j) * 2] = pair.plv[i * c + j];
                values[((k * c + i) * c + j) * 2 + 1] = pair.coh[i * c + j];
            }
        }
        reference_subject_ids.push(r.subject_id);
    }
    Ok(ResonanceTensor {
        values,
        k_r: refs.len(),
        channels: c,
        reference_subject_ids,
    })
}

// ---------------------------------------------------------------------------
// Precomputed per-trial state and the pair cache used by the training loop.
// ---------------------------------------------------------------------------

/// Everything synchrony needs about one trial, computed once: per-band unit
/// phasors of each channel's instantaneous phase, and Welch segment spectra.
pub struct TrialSync {
    pub channels: usize,
    pub samples: usize,
    /// `[band]` then flat `[channel][t]`.
    phasors: Vec<Vec<Complex64>>,
    /// Flat `[channel][segment][bin]`.
    spectra: Vec<Complex64>,
    /// Total spectral power per channel; zero marks a silent channel.
    ch_power: Vec<f64>,
    n_segs: usize,
    n_bins: usize,
    mask: Vec<bool>,
}

impl TrialSync {
    pub fn new(seg: &EegSegment, bands: &[BandDef], cfg: &WelchConfig) -> Result<Self> {
        cfg.validate(seg.samples)?;
        for band in bands {
            band.validate(seg.fs)?;
        }
        let c = seg.channels;
        let t = seg.samples;
        let mut phasors = Vec::with_capacity(bands.len());
        for band in bands {
            let mut per_band = Vec::with_capacity(c * t);
            for ch in 0..c {
                let filtered = bandpass_channel(seg.channel(ch), seg.fs, band);
                for z in analytic_signal(&filtered)? {
                    let phi = z.arg();
                    per_band.push(Complex64::new(phi.cos(), phi.sin()));
                }
            }
            phasors.push(per_band);
        }
        let n_segs = cfg.n_segments(t);
        let n_bins = cfg.n_bins();
        let mut spectra = Vec::with_capacity(c * n_segs * n_bins);
        let mut ch_power = Vec::with_capacity(c);
        for ch in 0..c {
            let spec = segment_spectra(seg.channel(ch), cfg);
            ch_power.push(spec.iter().map(|z| z.norm_sqr()).sum());
            spectra.extend_from_slice(&spec);
        }
        Ok(Self {
            channels: c,
            samples: t,
            phasors,
            spectra,
            ch_power,
            n_segs,
            n_bins,
            mask: band_union_mask(cfg, seg.fs, bands),
        })
    }

    fn spectrum(&self, ch: usize, seg: usize) -> &[Complex64] {
        let base = (ch * self.n_segs + seg) * self.n_bins;
        &self.spectra[base..base + self.n_bins]
    }
}

/// Band-averaged PLV and CoH matrices for one (sample, reference) pair.
#[derive(Debug, Clone)]
pub struct PairMats {
    pub plv: Vec<f64>,
    pub coh: Vec<f64>,
    pub degenerate_pairs: usize,
}

/// Compute both band-averaged matrices between two precomputed trials.
pub fn pair_sync(a: &TrialSync, b: &TrialSync) -> Result<PairMats> {
    if a.channels != b.channels
        || a.samples != b.samples
        || a.n_bins != b.n_bins
        || a.n_segs != b.n_segs
        || a.phasors.len() != b.phasors.len()
    {
        return Err(GrnError::Shape {
            op: "pair_sync",
            details: "trials prepared with different shapes or configs".into(),
        });
    }
    let c = a.channels;
    let t = a.samples;
    let n_bands = a.phasors.len();

    let mut plv = vec![0.0; c * c];
    for band in 0..n_bands {
        let za = &a.phasors[band];
        let zb = &b.phasors[band];
        for i in 0..c {
            let zi = &za[i * t..(i + 1) * t];
            for j in 0..c {
                let zj = &zb[j * t..(j + 1) * t];
                let mut acc = Complex64::new(0.0, 0.0);
                for (p, q) in zi.iter().zip(zj.iter()) {
                    acc += p * q.conj();
                }
                plv[i * c + j] += acc.norm() / t as f64;
            }
        }
    }
    for v in &mut plv {
        *v /= n_bands as f64;
    }

    let mask_bins: Vec<usize> = a
        .mask
        .iter()
        .enumerate()
        .filter_map(|(k, &m)| if m { Some(k) } else { None })
        .collect();
    let mut coh = vec![0.0; c * c];
    let mut degenerate_pairs = 0;
    for i in 0..c {
        for j in 0..c {
            if a.ch_power[i] == 0.0 || b.ch_power[j] == 0.0 {
                degenerate_pairs += 1;
                continue;
            }
            let mut sum = 0.0;
            for &k in &mask_bins {
                let mut sxy = Complex64::new(0.0, 0.0);
                let mut sxx = 0.0;
                let mut syy = 0.0;
                for s in 0..a.n_segs {
                    let xa = a.spectrum(i, s)[k];
                    let yb = b.spectrum(j, s)[k];
                    sxy += xa * yb.conj();
                    sxx += xa.norm_sqr();
                    syy += yb.norm_sqr();
                }
                let den = sxx * syy;
                if den > 0.0 {
                    sum += sxy.norm_sqr() / den;
                }
            }
            coh[i * c + j] = sum / mask_bins.len() as f64;
        }
    }
    Ok(PairMats {
        plv,
        coh,
        degenerate_pairs,
    })
}

/// Memoizing synchrony store over one dataset: per-trial phasors/spectra and
/// per-pair matrices are computed at most once, then shared. Reference draws
/// stay fresh per epoch; this only caches the deterministic pair values they
/// resolve to.
pub struct SyncCache<'a> {
    dataset: &'a [EegSegment],
    bands: Vec<BandDef>,
    welch: WelchConfig,
    trials: RwLock<Vec<Option<Arc<TrialSync>>>>,
    pairs: RwLock<HashMap<(u32, u32), Arc<PairMats>>>,
}

impl<'a> SyncCache<'a> {
    pub fn new(dataset: &'a [EegSegment], bands: &[BandDef], welch: WelchConfig) -> Self {
        Self {
            dataset,
            bands: bands.to_vec(),
            welch,
            trials: RwLock::new(vec![None; dataset.len()]),
            pairs: RwLock::new(HashMap::new()),
        }
    }

    pub fn dataset(&self) -> &'a [EegSegment] {
        self.dataset
    }

    fn trial(&self, idx: usize) -> Result<Arc<TrialSync>> {
        if let Some(t) = &self.trials.read().unwrap()[idx] {
            return Ok(Arc::clone(t));
        }
        let computed = Arc::new(TrialSync::new(&self.dataset[idx], &self.bands, &self.welch)?);
        let mut guard = self.trials.write().unwrap();
        if guard[idx].is_none() {
            guard[idx] = Some(computed);
        }
        Ok(Arc::clone(guard[idx].as_ref().unwrap()))
    }

    pub fn pair(&self, sample_idx: usize, ref_idx: usize) -> Result<Arc<PairMats>> {
        let key = (sample_idx as u32, ref_idx as u32);
        if let Some(p) = self.pairs.read().unwrap().get(&key) {
            return Ok(Arc::clone(p));
        }
        let a = self.trial(sample_idx)?;
        let b = self.trial(ref_idx)?;
        let mats = Arc::new(pair_sync(&a, &b)?);
        let mut guard = self.pairs.write().unwrap();
        Ok(Arc::clone(guard.entry(key).or_insert(mats)))
    }

    /// Assemble the resonance tensor of `sample_idx` against `ref_indices`.
    /// Rejects a reference equal to the sample trial, and any reference whose
    /// subject is in `forbidden_subjects` (the fold's held-out subjects).
    pub fn tensor(
        &self,
        sample_idx: usize,
        ref_indices: &[usize],
        forbidden_subjects: &[u32],
    ) -> Result<ResonanceTensor> {
        if ref_indices.is_empty() {
            return Err(GrnError::Invalid(
                "resonance tensor needs at least 1 reference".into(),
            ));
        }
        let sample = &self.dataset[sample_idx];
        for &r in ref_indices {
            if r == sample_idx {
                return Err(GrnError::Leakage(format!(
                    "trial {} used as its own reference",
                    sample.trial_id
                )));
            }
            let rs = self.dataset[r].subject_id;
            if forbidden_subjects.contains(&rs) {
                return Err(GrnError::Leakage(format!(
                    "reference trial {} belongs to held-out subject {}",
                    self.dataset[r].trial_id, rs
                )));
            }
        }
        let c = sample.channels;
        let mut values = vec![0.0; ref_indices.len() * c * c * 2];
        let mut reference_subject_ids = Vec::with_capacity(ref_indices.len());
        for (k, &r) in ref_indices.iter().enumerate() {
            let mats = self.pair(sample_idx, r)?;
            for i in 0..c {
                for j in 0..c {
                    values[((k * c + i) * c + j) * 2] = mats.plv[i * c + j];
                    values[((k * c + i) * c + j) * 2 + 1] = mats.coh[i * c + j];
                }
            }
            reference_subject_ids.push(self.dataset[r].subject_id);
        }
        Ok(ResonanceTensor {
            values,
            k_r: ref_indices.len(),
            channels: c,
            reference_subject_ids,
        })
    }
}
