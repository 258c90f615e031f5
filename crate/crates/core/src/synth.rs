//! Seeded synthetic music clips with exact ground-truth annotations.
//!
//! A [`ClipSpec`] fully describes a clip: chord progression, monophonic
//! melody, drum pattern and a categorical style tag. [`generate_clip`]
//! renders harmony, melody and drum stems whose sum is the mix, and emits
//! frame-level annotations on the latent frame grid.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{self, FRAME_RATE, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Lowest and highest MIDI notes representable on the 53-bin melody grid.
pub const MELODY_MIDI_LOW: u8 = 43;
pub const MELODY_BINS: usize = 53;
pub const MELODY_MIDI_HIGH: u8 = MELODY_MIDI_LOW + MELODY_BINS as u8 - 1;

pub const NUM_CHORDS: usize = 25;
pub const NO_CHORD: u8 = 0;
pub const NUM_STYLES: usize = 8;

pub const DEFAULT_CLIP_SECONDS: f64 = 5.0;

const PITCH_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

/// Chord vocabulary: 0 is no-chord, 1..=12 major triads on C..B,
/// 13..=24 minor triads on C..B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(transparent)]
pub struct ChordLabel(pub u8);

impl ChordLabel {
    pub const NONE: ChordLabel = ChordLabel(NO_CHORD);

    pub fn triad(root: u8, minor: bool) -> Self {
        ChordLabel(1 + root % 12 + if minor { 12 } else { 0 })
    }

    pub fn is_none(self) -> bool {
        self.0 == NO_CHORD
    }

    /// Root pitch class and minor flag, `None` for no-chord.
    pub fn parts(self) -> Option<(u8, bool)> {
        match self.0 {
            0 => None,
            l @ 1..=12 => Some((l - 1, false)),
            l => Some((l - 13, true)),
        }
    }

    pub fn pitch_classes(self) -> Option<[u8; 3]> {
        self.parts().map(|(root, minor)| {
            let third = if minor { 3 } else { 4 };
            [root, (root + third) % 12, (root + 7) % 12]
        })
    }

    pub fn name(self) -> String {
        match self.parts() {
            None => "N".to_string(),
            Some((root, minor)) => format!(
                "{}:{}",
                PITCH_NAMES[root as usize],
                if minor { "min" } else { "maj" }
            ),
        }
    }
}

pub fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub midi: u8,
    pub onset_beat: f64,
    pub duration_beats: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrumKind {
    Kick,
    Snare,
    Hat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrumHit {
    pub beat: f64,
    pub velocity: f64,
    pub kind: DrumKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub seed: u64,
    pub duration: f64,
    pub tempo: f64,
    /// Consecutive (chord, length in beats) segments from beat 0.
    pub progression: Vec<(ChordLabel, f64)>,
    pub melody: Vec<Note>,
    pub drums: Vec<DrumHit>,
    pub style_tag: u8,
}

impl ClipSpec {
    pub fn silent(seed: u64, duration: f64) -> Self {
        Self {
            seed,
            duration,
            tempo: 120.0,
            progression: Vec::new(),
            melody: Vec::new(),
            drums: Vec::new(),
            style_tag: 0,
        }
    }

    pub fn beat_seconds(&self) -> f64 {
        60.0 / self.tempo
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tempo > 0.0 && self.tempo.is_finite()) {
            return Err(Error::invalid(format!("tempo must be positive, got {}", self.tempo)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid(format!("duration must be positive, got {}", self.duration)));
        }
        if self.style_tag as usize >= NUM_STYLES {
            return Err(Error::invalid(format!("style tag {} out of range", self.style_tag)));
        }
        let beat = self.beat_seconds();
        for n in &self.melody {
            if !(MELODY_MIDI_LOW..=MELODY_MIDI_HIGH).contains(&n.midi) {
                return Err(Error::invalid(format!(
                    "melody note {} outside MIDI {MELODY_MIDI_LOW}..={MELODY_MIDI_HIGH}",
                    n.midi
                )));
            }
            if n.onset_beat < 0.0 || n.onset_beat * beat >= self.duration || n.duration_beats <= 0.0 {
                return Err(Error::invalid(format!("melody note timing out of range: {n:?}")));
            }
        }
        for h in &self.drums {
            if h.beat < 0.0 || h.beat * beat >= self.duration {
                return Err(Error::invalid(format!("drum onset out of range: {h:?}")));
            }
        }
        for &(c, beats) in &self.progression {
            if c.0 as usize >= NUM_CHORDS || beats <= 0.0 {
                return Err(Error::invalid(format!("bad progression entry ({}, {beats})", c.0)));
            }
        }
        Ok(())
    }

    /// Chord sounding at time `sec`.
    pub fn chord_at(&self, sec: f64) -> ChordLabel {
        let beat = sec / self.beat_seconds();
        let mut start = 0.0;
        for &(c, len) in &self.progression {
            if beat >= start && beat < start + len {
                return c;
            }
            start += len;
        }
        ChordLabel::NONE
    }

    pub fn note_at(&self, sec: f64) -> Option<u8> {
        let beat = sec / self.beat_seconds();
        self.melody
            .iter()
            .rev()
            .find(|n| beat >= n.onset_beat && beat < n.onset_beat + n.duration_beats)
            .map(|n| n.midi)
    }
}

/// Per-style timbre and arrangement ranges.
#[derive(Debug, Clone, Copy)]
pub struct StyleProfile {
    pub tempo_range: (f64, f64),
    /// Partial amplitudes for harmony tones (fundamental first).
    pub harmony_partials: &'static [f64],
    pub melody_partials: &'static [f64],
    pub hat_eighths: bool,
    pub harmony_gain: f64,
}

pub const STYLES: [StyleProfile; NUM_STYLES] = [
    StyleProfile { tempo_range: (80.0, 100.0), harmony_partials: &[1.0], melody_partials: &[1.0, 0.5, 0.3, 0.2], hat_eighths: false, harmony_gain: 1.0 },
    StyleProfile { tempo_range: (90.0, 110.0), harmony_partials: &[1.0, 0.4], melody_partials: &[1.0, 0.6, 0.4, 0.25], hat_eighths: true, harmony_gain: 0.9 },
    StyleProfile { tempo_range: (100.0, 120.0), harmony_partials: &[1.0, 0.25], melody_partials: &[1.0, 0.35, 0.15, 0.1], hat_eighths: false, harmony_gain: 1.1 },
    StyleProfile { tempo_range: (110.0, 130.0), harmony_partials: &[1.0, 0.5, 0.2], melody_partials: &[1.0, 0.5, 0.5, 0.3], hat_eighths: true, harmony_gain: 0.8 },
    StyleProfile { tempo_range: (85.0, 105.0), harmony_partials: &[1.0, 0.3], melody_partials: &[1.0, 0.2, 0.1, 0.05], hat_eighths: false, harmony_gain: 1.0 },
    StyleProfile { tempo_range: (115.0, 140.0), harmony_partials: &[1.0], melody_partials: &[1.0, 0.7, 0.5, 0.35], hat_eighths: true, harmony_gain: 0.85 },
    StyleProfile { tempo_range: (95.0, 115.0), harmony_partials: &[1.0, 0.6, 0.3], melody_partials: &[1.0, 0.4, 0.2, 0.15], hat_eighths: true, harmony_gain: 0.9 },
    StyleProfile { tempo_range: (70.0, 90.0), harmony_partials: &[1.0, 0.15], melody_partials: &[1.0, 0.55, 0.25, 0.12], hat_eighths: false, harmony_gain: 1.15 },
];

/// Waveform stems; the mix is their sample-wise sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Stems {
    pub harmony: Vec<f32>,
    pub melody: Vec<f32>,
    pub drums: Vec<f32>,
}

impl Stems {
    pub fn mix(&self) -> Vec<f32> {
        self.harmony
            .iter()
            .zip(&self.melody)
            .zip(&self.drums)
            .map(|((&h, &m), &d)| h + m + d)
            .collect()
    }

    /// Mix without the drum stem.
    pub fn drumless(&self) -> Vec<f32> {
        self.harmony.iter().zip(&self.melody).map(|(&h, &m)| h + m).collect()
    }
}

/// Frame-level ground truth on the latent grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub frame_rate: f64,
    pub num_frames: usize,
    pub chords: Vec<ChordLabel>,
    /// MIDI note per frame, `None` for rest.
    pub melody: Vec<Option<u8>>,
    pub drum_onsets: Vec<f64>,
    pub style_tag: u8,
}

impl Annotations {
    pub fn from_spec(spec: &ClipSpec) -> Self {
        let num_frames = (spec.duration * FRAME_RATE).round() as usize;
        let center = |t: usize| (t as f64 + 0.5) / FRAME_RATE;
        let beat = spec.beat_seconds();
        let mut drum_onsets: Vec<f64> = spec.drums.iter().map(|h| h.beat * beat).collect();
        drum_onsets.sort_by(f64::total_cmp);
        drum_onsets.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        Self {
            frame_rate: FRAME_RATE,
            num_frames,
            chords: (0..num_frames).map(|t| spec.chord_at(center(t))).collect(),
            melody: (0..num_frames).map(|t| spec.note_at(center(t))).collect(),
            drum_onsets,
            style_tag: spec.style_tag,
        }
    }

    /// Melody notes as 0-based bins of the 53-bin grid.
    pub fn melody_bins(&self) -> Vec<Option<usize>> {
        self.melody
            .iter()
            .map(|n| n.map(|m| (m - MELODY_MIDI_LOW) as usize))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub mix: Vec<f32>,
    pub stems: Stems,
    pub annotations: Annotations,
}

const HARMONY_TONE_GAIN: f64 = 0.035;
const MELODY_GAIN: f64 = 0.16;
const DRUM_GAIN: f64 = 0.22;
const PEAK_LIMIT: f64 = 0.99;

fn envelope(t: f64, dur: f64, attack: f64, release: f64) -> f64 {
    if t < 0.0 || t >= dur {
        return 0.0;
    }
    let a = (t / attack).min(1.0);
    let r = ((dur - t) / release).min(1.0);
    a.min(r)
}

fn add_tone(buf: &mut [f64], start: f64, dur: f64, f0: f64, partials: &[f64], gain: f64, attack: f64, release: f64) {
    let fs = SAMPLE_RATE as f64;
    let s0 = (start * fs).floor().max(0.0) as usize;
    let s1 = (((start + dur) * fs).ceil() as usize).min(buf.len());
    let nyquist_guard = 0.45 * fs;
    for (i, sample) in buf.iter_mut().enumerate().take(s1).skip(s0) {
        let t = i as f64 / fs;
        let env = envelope(t - start, dur, attack, release);
        if env == 0.0 {
            continue;
        }
        let mut v = 0.0;
        for (k, &amp) in partials.iter().enumerate() {
            let f = f0 * (k + 1) as f64;
            if f >= nyquist_guard {
                break;
            }
            v += amp * (2.0 * PI * f * t).sin();
        }
        *sample += gain * env * v;
    }
}

/// One-pole filters shaping a white-noise burst per drum kind.
fn add_drum(buf: &mut [f64], start: f64, hit: &DrumHit, rng: &mut ChaCha8Rng) {
    let fs = SAMPLE_RATE as f64;
    // (decay seconds, low-pass coefficient, optional high-pass coefficient)
    let (decay, lp, hp) = match hit.kind {
        DrumKind::Kick => (0.09, 0.08, None),
        DrumKind::Snare => (0.07, 0.5, Some(0.85)),
        DrumKind::Hat => (0.03, 1.0, Some(0.3)),
    };
    let s0 = (start * fs).round() as usize;
    let len = (decay * 5.0 * fs) as usize;
    let (mut low, mut prev_low, mut high) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..len {
        let noise: f64 = rng.gen_range(-1.0..1.0);
        low += lp * (noise - low);
        let shaped = match hp {
            Some(a) => {
                high = a * (high + low - prev_low);
                high
            }
            None => low / lp.sqrt(),
        };
        prev_low = low;
        let i = s0 + k;
        if i >= buf.len() {
            continue;
        }
        let env = (-(k as f64) / fs / decay).exp();
        buf[i] += DRUM_GAIN * hit.velocity * env * shaped;
    }
}

/// Render a clip. Deterministic in `spec` (drum noise is seeded by
/// `spec.seed`).
pub fn generate_clip(spec: &ClipSpec) -> Result<Clip> {
    spec.validate()?;
    let n = (spec.duration * SAMPLE_RATE as f64).round() as usize;
    let beat = spec.beat_seconds();
    let style = &STYLES[spec.style_tag as usize];

    let mut harmony = vec![0.0f64; n];
    let mut start_beat = 0.0;
    for &(chord, len) in &spec.progression {
        if let Some((root, minor)) = chord.parts() {
            // Close voicing from C3..B3 upward, doubled an octave higher.
            let base = 48 + root as i32;
            let third = if minor { 3 } else { 4 };
            for octave in [0, 12] {
                for iv in [0, third, 7] {
                    let midi = base + iv + octave;
                    add_tone(
                        &mut harmony,
                        start_beat * beat,
                        len * beat,
                        midi_to_hz(midi as f64),
                        style.harmony_partials,
                        HARMONY_TONE_GAIN * style.harmony_gain,
                        0.01,
                        0.03,
                    );
                }
            }
        }
        start_beat += len;
    }

    let mut melody = vec![0.0f64; n];
    for note in &spec.melody {
        add_tone(
            &mut melody,
            note.onset_beat * beat,
            note.duration_beats * beat,
            midi_to_hz(note.midi as f64),
            style.melody_partials,
            MELODY_GAIN,
            0.01,
            0.04,
        );
    }

    let mut drums = vec![0.0f64; n];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_d7u64);
    for hit in &spec.drums {
        add_drum(&mut drums, hit.beat * beat, hit, &mut rng);
    }

    let peak = (0..n)
        .map(|i| (harmony[i] + melody[i] + drums[i]).abs())
        .fold(0.0f64, f64::max);
    let gain = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| (x * gain) as f32).collect::<Vec<f32>>();
    let stems = Stems {
        harmony: to_f32(harmony),
        melody: to_f32(melody),
        drums: to_f32(drums),
    };
    let mix = stems.mix();
    Ok(Clip {
        mix,
        stems,
        annotations: Annotations::from_spec(spec),
    })
}

/// Seeded sampler of musically plausible clip specs.
///
/// Clip `i` of a corpus with seed `s` uses per-clip seed
/// `splitmix(s, i)`. Per clip: uniform style; tempo uniform in the style's
/// range; chords of 2 or 4 beats drawn uniformly from the 24 triads;
/// melody notes of 0.5/1/2 beats in MIDI 57..=81, mostly chord tones,
/// with ~15% rests; a kick/snare backbeat plus optional eighth-note hats.
pub fn sample_spec(corpus_seed: u64, index: u64, duration: f64) -> ClipSpec {
    let seed = splitmix(corpus_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style_tag = rng.gen_range(0..NUM_STYLES) as u8;
    let style = &STYLES[style_tag as usize];
    let tempo = rng.gen_range(style.tempo_range.0..style.tempo_range.1);
    let total_beats = duration * tempo / 60.0;

    let mut progression = Vec::new();
    let mut b = 0.0;
    while b < total_beats {
        let len = if rng.gen_bool(0.5) { 2.0 } else { 4.0 };
        let chord = ChordLabel(rng.gen_range(1..NUM_CHORDS as u8));
        progression.push((chord, len));
        b += len;
    }

    let mut melody = Vec::new();
    let mut b = 0.0;
    let mut seg_start = 0.0;
    let mut seg = 0;
    while b < total_beats - 0.25 {
        while seg + 1 < progression.len() && b >= seg_start + progression[seg].1 {
            seg_start += progression[seg].1;
            seg += 1;
        }
        let len: f64 = *[0.5, 1.0, 1.0, 2.0].get(rng.gen_range(0..4)).unwrap_or(&1.0);
        if rng.gen_bool(0.85) {
            let pcs = progression[seg].0.pitch_classes().unwrap_or([0, 4, 7]);
            let pc = if rng.gen_bool(0.8) {
                pcs[rng.gen_range(0..3)]
            } else {
                rng.gen_range(0..12u8)
            };
            // Place the pitch class in 57..=81.
            let lo = 57u8;
            let base = lo + (pc + 12 - lo % 12) % 12;
            let midi = if rng.gen_bool(0.5) && base + 12 <= 81 { base + 12 } else { base };
            melody.push(Note {
                midi,
                onset_beat: b,
                duration_beats: len.min(total_beats - b),
            });
        }
        b += len;
    }

    let mut drums = Vec::new();
    let mut beat_i = 0.0;
    while beat_i < total_beats {
        let in_bar = (beat_i as usize) % 4;
        let kind = if in_bar % 2 == 0 { DrumKind::Kick } else { DrumKind::Snare };
        drums.push(DrumHit {
            beat: beat_i,
            velocity: rng.gen_range(0.7..1.0),
            kind,
        });
        if style.hat_eighths && beat_i + 0.5 < total_beats {
            drums.push(DrumHit {
                beat: beat_i + 0.5,
                velocity: rng.gen_range(0.4..0.7),
                kind: DrumKind::Hat,
            });
        }
        beat_i += 1.0;
    }

    ClipSpec {
        seed,
        duration,
        tempo,
        progression,
        melody,
        drums,
        style_tag,
    }
}

fn splitmix(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemPaths {
    pub harmony: PathBuf,
    pub melody: PathBuf,
    pub drums: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mix_path: PathBuf,
    pub stem_paths: StemPaths,
    pub annotation_path: PathBuf,
    pub style_tag: u8,
    pub seed: u64,
    pub spec: ClipSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub spec: ClipSpec,
    pub annotations: Annotations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub digest: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Render `n` sampled clips into `out_dir`: 4 WAVs and one annotation JSON
/// per clip, plus `manifest.jsonl`.
pub fn build_corpus(n: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be positive"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let spec = sample_spec(seed, i as u64, DEFAULT_CLIP_SECONDS);
        let clip = generate_clip(&spec)?;
        let id = format!("clip_{i:05}");
        let path = |suffix: &str| PathBuf::from(format!("{id}_{suffix}"));
        let rec = ManifestRecord {
            mix_path: path("mix.wav"),
            stem_paths: StemPaths {
                harmony: path("harmony.wav"),
                melody: path("melody.wav"),
                drums: path("drums.wav"),
            },
            annotation_path: path("ann.json"),
            style_tag: spec.style_tag,
            seed: spec.seed,
            id,
            spec: spec.clone(),
        };
        audio::write_wav(&out_dir.join(&rec.mix_path), &clip.mix)?;
        audio::write_wav(&out_dir.join(&rec.stem_paths.harmony), &clip.stems.harmony)?;
        audio::write_wav(&out_dir.join(&rec.stem_paths.melody), &clip.stems.melody)?;
        audio::write_wav(&out_dir.join(&rec.stem_paths.drums), &clip.stems.drums)?;
        let ann = AnnotationFile {
            spec,
            annotations: clip.annotations,
        };
        let ann_path = out_dir.join(&rec.annotation_path);
        std::fs::write(&ann_path, serde_json::to_vec(&ann)?).map_err(|e| Error::io(&ann_path, e))?;
        records.push(rec);
    }
    let mut body = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut body, r)?;
        body.push(b'\n');
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&body).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(Manifest {
        records,
        digest: hex_digest(&body),
    })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Read `manifest.jsonl` from a corpus directory.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let body = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let records = body
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(serde_json::from_slice)
        .collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
    Ok(Manifest {
        records,
        digest: hex_digest(&body),
    })
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&body)?)
}
