//! Signal-derived control features: chroma, melody salience, chord labels,
//! onsets, and resampling onto the latent frame grid.

use serde::{Deserialize, Serialize};

use crate::audio::{Stft, HOP, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::synth::{midi_to_hz, ChordLabel, MELODY_BINS, MELODY_MIDI_LOW, NUM_CHORDS};

pub const CHROMA_WINDOW: usize = 1024;
pub const CHROMA_HOP: usize = HOP;
const CHROMA_MIN_HZ: f64 = 110.0;
const CHROMA_MAX_HZ: f64 = 3000.0;

pub const SALIENCE_WINDOW: usize = 2048;
pub const SALIENCE_HARMONICS: usize = 4;
pub const SALIENCE_DECAY: f64 = 0.8;
pub const DEFAULT_MELODY_THRESHOLD: f64 = 0.5;

pub const CHORD_THRESHOLD: f64 = 0.3;
pub const CHORD_SMOOTHING: usize = 5;

pub const ONSET_WINDOW: usize = 512;
pub const ONSET_HOP: usize = 80;
pub const ONSET_MIN_SEPARATION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chromagram {
    pub frames: Vec<[f64; 12]>,
    pub window: usize,
    pub hop: usize,
}

impl Chromagram {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `T x 53` melody scores in `[0, 1]`, bin `b` is MIDI `43 + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMatrix {
    pub frames: Vec<[f64; MELODY_BINS]>,
}

/// Pitch class (0 = C) of a frequency, rounded to the nearest semitone.
fn pitch_class(hz: f64) -> usize {
    let midi = 69.0 + 12.0 * (hz / 440.0).log2();
    (midi.round() as i64).rem_euclid(12) as usize
}

/// Magnitude STFT folded onto 12 equal-tempered pitch classes.
pub fn chroma(x: &[f32]) -> Chromagram {
    let stft = Stft::new(CHROMA_WINDOW, CHROMA_HOP);
    let bin_hz = stft.bin_hz();
    let bins: Vec<(usize, usize)> = (1..stft.num_bins())
        .filter_map(|k| {
            let f = k as f64 * bin_hz;
            (CHROMA_MIN_HZ..=CHROMA_MAX_HZ).contains(&f).then(|| (k, pitch_class(f)))
        })
        .collect();
    let frames = stft
        .magnitudes(x)
        .into_iter()
        .map(|mag| {
            let mut c = [0.0; 12];
            for &(k, pc) in &bins {
                c[pc] += mag[k] * mag[k];
            }
            c
        })
        .collect();
    Chromagram {
        frames,
        window: CHROMA_WINDOW,
        hop: CHROMA_HOP,
    }
}

/// Peak magnitude within half a semitone of `hz`.
fn peak_near(mag: &[f64], bin_hz: f64, hz: f64) -> f64 {
    let lo = (hz * 2f64.powf(-1.0 / 24.0) / bin_hz).ceil() as usize;
    let hi = (hz * 2f64.powf(1.0 / 24.0) / bin_hz).floor() as usize;
    let nearest = (hz / bin_hz).round() as usize;
    let (lo, hi) = if lo > hi { (nearest, nearest) } else { (lo, hi) };
    if lo >= mag.len() {
        return 0.0;
    }
    mag[lo..=hi.min(mag.len() - 1)].iter().copied().fold(0.0, f64::max)
}

/// Harmonic-sum salience over the 53 semitones from G2, normalized per
/// frame by the frame maximum (all-zero frames stay zero).
pub fn melody_saliency(x: &[f32]) -> SaliencyMatrix {
    let stft = Stft::new(SALIENCE_WINDOW, HOP);
    let bin_hz = stft.bin_hz();
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let frames = stft
        .magnitudes(x)
        .into_iter()
        .map(|mag| {
            let mut s = [0.0; MELODY_BINS];
            for (b, v) in s.iter_mut().enumerate() {
                let f0 = midi_to_hz((MELODY_MIDI_LOW as usize + b) as f64);
                let mut w = 1.0;
                for h in 1..=SALIENCE_HARMONICS {
                    let f = f0 * h as f64;
                    if f < nyquist {
                        *v += w * peak_near(&mag, bin_hz, f);
                    }
                    w *= SALIENCE_DECAY;
                }
            }
            let mx = s.iter().copied().fold(0.0, f64::max);
            if mx > 0.0 {
                for v in s.iter_mut() {
                    *v /= mx;
                }
            }
            s
        })
        .collect();
    SaliencyMatrix { frames }
}

/// Zero sub-threshold scores, then one-hot the maximal survivor per frame
/// (lowest bin wins ties). Returns the active bin per frame.
pub fn binarize_melody_rows<const N: usize>(rows: &[[f64; N]], threshold: f64) -> Result<Vec<Option<usize>>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("melody threshold {threshold} outside (0, 1)")));
    }
    Ok(rows
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (i, &v) in row.iter().enumerate() {
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect())
}

/// Binary `T x 53` matrix form of [`binarize_melody_rows`].
pub fn binarize_melody(s: &SaliencyMatrix, threshold: f64) -> Result<Vec<[u8; MELODY_BINS]>> {
    Ok(binarize_melody_rows(&s.frames, threshold)?
        .into_iter()
        .map(|active| {
            let mut row = [0u8; MELODY_BINS];
            if let Some(i) = active {
                row[i] = 1;
            }
            row
        })
        .collect())
}

fn chord_templates() -> Vec<(ChordLabel, [f64; 12])> {
    (1..NUM_CHORDS as u8)
        .map(|l| {
            let label = ChordLabel(l);
            let mut t = [0.0; 12];
            for pc in label.pitch_classes().expect("triad") {
                t[pc as usize] = 1.0 / 3f64.sqrt();
            }
            (label, t)
        })
        .collect()
}

/// Frame-wise label before smoothing: best cosine match against the 24
/// triad templates, or no-chord.
pub fn frame_chord(frame: &[f64; 12], templates: &[(ChordLabel, [f64; 12])]) -> ChordLabel {
    let norm = frame.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return ChordLabel::NONE;
    }
    let mut best = (ChordLabel::NONE, f64::NEG_INFINITY);
    for (label, t) in templates {
        let score = frame.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / norm;
        if score > best.1 {
            best = (*label, score);
        }
    }
    if best.1 < CHORD_THRESHOLD {
        ChordLabel::NONE
    } else {
        best.0
    }
}

/// Majority vote over a centered window; the center label wins ties.
fn mode_filter(labels: &[ChordLabel], width: usize) -> Vec<ChordLabel> {
    let half = width / 2;
    (0..labels.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(labels.len());
            let mut counts = [0usize; NUM_CHORDS];
            for l in &labels[lo..hi] {
                counts[l.0 as usize] += 1;
            }
            let center = labels[i];
            let mut best = center;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[best.0 as usize] {
                    best = ChordLabel(l as u8);
                }
            }
            best
        })
        .collect()
}

pub fn chord_labels(c: &Chromagram) -> Vec<ChordLabel> {
    let templates = chord_templates();
    let raw: Vec<ChordLabel> = c.frames.iter().map(|f| frame_chord(f, &templates)).collect();
    mode_filter(&raw, CHORD_SMOOTHING)
}

/// Spectral-flux onset times in seconds, strictly increasing.
pub fn detect_onsets(x: &[f32]) -> Vec<f64> {
    let stft = Stft::new(ONSET_WINDOW, ONSET_HOP);
    let mags: Vec<Vec<f64>> = stft
        .magnitudes(x)
        .into_iter()
        .map(|m| m.into_iter().map(|v| (1.0 + 100.0 * v).ln()).collect())
        .collect();
    if mags.len() < 3 {
        return Vec::new();
    }
    let mut flux = vec![0.0; mags.len()];
    for t in 1..mags.len() {
        flux[t] = mags[t]
            .iter()
            .zip(&mags[t - 1])
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    let peak = flux.iter().copied().fold(0.0, f64::max);
    if peak <= 1e-9 {
        return Vec::new();
    }
    let frame_sec = ONSET_HOP as f64 / SAMPLE_RATE as f64;
    let mean_half = 8;
    let local_half = 3;
    let delta = 0.1 * peak;
    let min_sep = (ONSET_MIN_SEPARATION / frame_sec).round() as usize;
    let mut onsets: Vec<(usize, f64)> = Vec::new();
    for t in 1..flux.len() {
        let lo = t.saturating_sub(mean_half);
        let hi = (t + mean_half + 1).min(flux.len());
        let mean = flux[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        if flux[t] <= mean + delta {
            continue;
        }
        let llo = t.saturating_sub(local_half);
        let lhi = (t + local_half + 1).min(flux.len());
        if flux[llo..lhi].iter().any(|&v| v > flux[t]) {
            continue;
        }
        match onsets.last_mut() {
            Some((pt, pv)) if t - *pt < min_sep => {
                if flux[t] > *pv {
                    *pt = t;
                    *pv = flux[t];
                }
            }
            _ => onsets.push((t, flux[t])),
        }
    }
    let duration = x.len() as f64 / SAMPLE_RATE as f64;
    let mut out: Vec<f64> = onsets
        .into_iter()
        .map(|(t, _)| (t * ONSET_HOP + ONSET_HOP / 2) as f64 / SAMPLE_RATE as f64)
        .filter(|&s| s < duration)
        .collect();
    out.dedup_by(|a, b| *a <= *b);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMode {
    Nearest,
    Linear,
}

/// Source coordinate of target frame `i`'s center.
fn source_position(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

/// Categorical resampling: each target frame takes the source frame whose
/// center is closest.
pub fn resample_nearest<T: Clone>(seq: &[T], target_len: usize) -> Result<Vec<T>> {
    if seq.is_empty() || target_len == 0 {
        return Err(Error::invalid("resample of empty sequence"));
    }
    if seq.len() == target_len {
        return Ok(seq.to_vec());
    }
    Ok((0..target_len)
        .map(|i| {
            let p = source_position(i, seq.len(), target_len);
            let j = (p + 0.5).floor().clamp(0.0, (seq.len() - 1) as f64) as usize;
            seq[j].clone()
        })
        .collect())
}

/// Componentwise linear interpolation between source frame centers,
/// clamped at the ends.
pub fn resample_linear(rows: &[Vec<f64>], target_len: usize) -> Result<Vec<Vec<f64>>> {
    if rows.is_empty() || target_len == 0 {
        return Err(Error::invalid("resample of empty sequence"));
    }
    if rows.len() == target_len {
        return Ok(rows.to_vec());
    }
    let last = rows.len() - 1;
    Ok((0..target_len)
        .map(|i| {
            let p = source_position(i, rows.len(), target_len).clamp(0.0, last as f64);
            let j = p.floor() as usize;
            let k = (j + 1).min(last);
            let w = p - j as f64;
            rows[j]
                .iter()
                .zip(&rows[k])
                .map(|(a, b)| a * (1.0 - w) + b * w)
                .collect()
        })
        .collect())
}

/// Dispatch on mode for real-valued rows.
pub fn resample_features(rows: &[Vec<f64>], target_len: usize, mode: ResampleMode) -> Result<Vec<Vec<f64>>> {
    match mode {
        ResampleMode::Nearest => resample_nearest(rows, target_len),
        ResampleMode::Linear => resample_linear(rows, target_len),
    }
}
