//! Local control signals for the vector-field model: temporal blurring,
//! the drum band-pass filter, in/out-painting masks, structured dropout and
//! channel-wise assembly.
//!
//! Data preparation produces [`ConditionInputs`]: raw, pre-projection
//! controls where an absent control is `None`. The learned embedding table
//! and projections live in the model parameters; [`build_condition_set`]
//! applies them outside a tape and the model applies the same maps on its
//! tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::SAMPLE_RATE;
use crate::autodiff::{Params, Real, Tensor};
use crate::codec::{reconstruct_first_stream, rvq_encode, Codec};
use crate::error::{Error, Result};
use crate::synth::{Annotations, ChordLabel, MELODY_BINS, NUM_CHORDS};

pub const D_CRD: usize = 16;
pub const D_MLD: usize = 16;
pub const D_AUD: usize = 1;
pub const D_DRM: usize = 2;
pub const BLUR_WINDOW_AUDIO: usize = 5;
pub const BLUR_WINDOW_DRUMS: usize = 3;
pub const BPF_LOW_HZ: f64 = 200.0;
pub const BPF_HIGH_HZ: f64 = 800.0;
pub const BPF_ORDER: usize = 4;
pub const IOP_FRACTION_MIN: f64 = 0.4;
pub const IOP_FRACTION_MAX: f64 = 0.9;

/// Parameter names of the learned condition maps.
pub const CHORD_TABLE: &str = "cond.chord_table";
pub const MELODY_PROJ: &str = "cond.melody_proj";
pub const AUDIO_PROJ: &str = "cond.audio_proj";
pub const DRUMS_PROJ: &str = "cond.drums_proj";

/// Width of the assembled model input.
pub fn input_width(n_enc: usize) -> usize {
    n_enc + D_CRD + D_MLD + D_AUD + D_DRM + n_enc
}

/// Replace each non-overlapping window of rows by its mean (a trailing
/// partial window by the mean of its own rows).
pub fn temporal_blur<F: Real>(x: &Tensor<F>, window: usize) -> Result<Tensor<F>> {
    if window == 0 {
        return Err(Error::invalid("blur window must be at least 1"));
    }
    let (t, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for start in (0..t).step_by(window) {
        let end = (start + window).min(t);
        let n = F::from_usize(end - start).expect("window length");
        for c in 0..d {
            let first = x.at(start, c);
            // A constant window is left as is, so blurring is exactly idempotent.
            let mean = if (start..end).all(|r| x.at(r, c) == first) {
                first
            } else {
                (start..end).map(|r| x.at(r, c)).sum::<F>() / n
            };
            for r in start..end {
                out.data_mut()[r * d + c] = mean;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

/// Butterworth band-pass as cascaded second-order sections, designed by
/// the bilinear transform with prewarped band edges.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPass {
    sections: Vec<Biquad>,
    gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct C64 {
    re: f64,
    im: f64,
}

impl C64 {
    fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
    fn scale(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }
    fn div(self, o: Self) -> Self {
        let d = o.re * o.re + o.im * o.im;
        Self::new((self.re * o.re + self.im * o.im) / d, (self.im * o.re - self.re * o.im) / d)
    }
    fn sqrt(self) -> Self {
        let r = (self.re * self.re + self.im * self.im).sqrt();
        let re = ((r + self.re) / 2.0).max(0.0).sqrt();
        let im = ((r - self.re) / 2.0).max(0.0).sqrt().copysign(self.im);
        Self::new(re, im)
    }
    fn abs(self) -> f64 {
        (self.re * self.re + self.im * self.im).sqrt()
    }
}

impl BandPass {
    /// `order` is the low-pass prototype order; the band-pass has
    /// `2 * order` poles.
    pub fn design(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Self> {
        if order == 0 || !(0.0 < low_hz && low_hz < high_hz && high_hz < fs / 2.0) {
            return Err(Error::invalid(format!("bad band-pass design {order} / {low_hz}..{high_hz} Hz")));
        }
        let k = 2.0 * fs;
        let w1 = k * (std::f64::consts::PI * low_hz / fs).tan();
        let w2 = k * (std::f64::consts::PI * high_hz / fs).tan();
        let w0sq = w1 * w2;
        let bw = w2 - w1;
        let mut sections = Vec::with_capacity(order);
        for i in 0..order {
            let theta = std::f64::consts::PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
            let p = C64::new(theta.cos(), theta.sin()).scale(bw);
            let disc = p.mul(p).sub(C64::new(4.0 * w0sq, 0.0)).sqrt();
            for s in [p.add(disc).scale(0.5), p.sub(disc).scale(0.5)] {
                // Prototype poles come in conjugate pairs; keep the upper
                // half-plane pole of each band-pass pair and add its conjugate.
                if s.im < 0.0 {
                    continue;
                }
                let z = C64::new(k, 0.0).add(s).div(C64::new(k, 0.0).sub(s));
                sections.push(Biquad {
                    b: [1.0, 0.0, -1.0],
                    a: [-2.0 * z.re, z.re * z.re + z.im * z.im],
                });
            }
        }
        let mut bp = BandPass { sections, gain: 1.0 };
        let center = 2.0 * ((w0sq.sqrt() / k).atan()) * fs / (2.0 * std::f64::consts::PI);
        bp.gain = 1.0 / bp.response(center, fs);
        Ok(bp)
    }

    /// Magnitude response of one forward pass at `hz`.
    pub fn response(&self, hz: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * hz / fs;
        let z1 = C64::new(w.cos(), -w.sin());
        let z2 = z1.mul(z1);
        let mut h = C64::new(self.gain, 0.0);
        for s in &self.sections {
            let num = C64::new(s.b[0], 0.0).add(z1.scale(s.b[1])).add(z2.scale(s.b[2]));
            let den = C64::new(1.0, 0.0).add(z1.scale(s.a[0])).add(z2.scale(s.a[1]));
            h = h.mul(num.div(den));
        }
        h.abs()
    }

    fn run(&self, x: &mut [f64]) {
        for s in &self.sections {
            let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
            for v in x.iter_mut() {
                let y = s.b[0] * *v + s.b[1] * x1 + s.b[2] * x2 - s.a[0] * y1 - s.a[1] * y2;
                x2 = x1;
                x1 = *v;
                y2 = y1;
                y1 = y;
                *v = y;
            }
        }
        x.iter_mut().for_each(|v| *v *= self.gain);
    }

    /// Zero-phase forward-backward filtering.
    pub fn filtfilt(&self, x: &[f32]) -> Vec<f32> {
        let mut buf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.run(&mut buf);
        buf.reverse();
        self.run(&mut buf);
        buf.reverse();
        buf.into_iter().map(|v| v as f32).collect()
    }
}

/// The drum-condition pre-filter.
pub fn drum_bandpass() -> BandPass {
    BandPass::design(BPF_ORDER, BPF_LOW_HZ, BPF_HIGH_HZ, SAMPLE_RATE as f64).expect("valid constants")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaintMode {
    Inpaint,
    Outpaint,
}

/// Zero a contiguous run of `round(fraction * T)` latent frames (ties to
/// even). Inpainting masks an interior run at a random offset; outpainting
/// masks a prefix or a suffix with equal probability. Returns the masked
/// latent and the masked range.
pub fn inpaint_condition<R: Rng>(
    z: &Tensor<f64>,
    mode: PaintMode,
    fraction: f64,
    rng: &mut R,
) -> Result<(Tensor<f64>, std::ops::Range<usize>)> {
    if !(IOP_FRACTION_MIN..=IOP_FRACTION_MAX).contains(&fraction) {
        return Err(Error::invalid(format!(
            "mask fraction {fraction} outside [{IOP_FRACTION_MIN}, {IOP_FRACTION_MAX}]"
        )));
    }
    let t = z.rows();
    let m = ((fraction * t as f64).round_ties_even() as usize).min(t);
    let start = match mode {
        PaintMode::Inpaint if t >= m + 2 => rng.gen_range(1..=t - m - 1),
        PaintMode::Inpaint => rng.gen_range(0..=t - m),
        PaintMode::Outpaint => {
            if rng.gen_bool(0.5) {
                0
            } else {
                t - m
            }
        }
    };
    let mut out = z.clone();
    let d = z.cols();
    out.data_mut()[start * d..(start + m) * d].iter_mut().for_each(|v| *v = 0.0);
    Ok((out, start..start + m))
}

/// Raw controls before the learned maps. `None` means absent or dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInputs {
    pub frames: usize,
    pub chords: Option<Vec<ChordLabel>>,
    /// Active melody bin per frame.
    pub melody: Option<Vec<Option<usize>>>,
    /// Blurred first-stream latent of the (optionally drumless) mix.
    pub audio: Option<Tensor<f64>>,
    /// Blurred first-stream latent of the band-passed drum stem.
    pub drums: Option<Tensor<f64>>,
    /// Partially masked latent.
    pub iop: Option<Tensor<f64>>,
    pub style: Option<u8>,
}

impl ConditionInputs {
    pub fn empty(frames: usize) -> Self {
        Self {
            frames,
            chords: None,
            melody: None,
            audio: None,
            drums: None,
            iop: None,
            style: None,
        }
    }

    /// Reject controls whose frame grid differs from `frames`.
    pub fn validate(&self, n_enc: usize) -> Result<()> {
        let t = self.frames;
        let check = |name: &str, len: usize| {
            if len != t {
                Err(Error::shape("condition", format!("{name} has {len} frames, expected T = {t}")))
            } else {
                Ok(())
            }
        };
        if let Some(c) = &self.chords {
            check("chords", c.len())?;
            if let Some(bad) = c.iter().find(|l| l.0 as usize >= NUM_CHORDS) {
                return Err(Error::invalid(format!("chord label {} out of range", bad.0)));
            }
        }
        if let Some(m) = &self.melody {
            check("melody", m.len())?;
            if m.iter().flatten().any(|&b| b >= MELODY_BINS) {
                return Err(Error::invalid("melody bin out of range"));
            }
        }
        for (name, x) in [("audio", &self.audio), ("drums", &self.drums), ("iop", &self.iop)] {
            if let Some(x) = x {
                check(name, x.rows())?;
                if x.cols() != n_enc {
                    return Err(Error::shape("condition", format!("{name} width {} != {n_enc}", x.cols())));
                }
            }
        }
        Ok(())
    }

    /// All local controls removed, style kept.
    pub fn without_local(&self) -> Self {
        Self { style: self.style, ..Self::empty(self.frames) }
    }

    pub fn without_style(&self) -> Self {
        Self { style: None, ..self.clone() }
    }

    pub fn has_local(&self) -> bool {
        self.chords.is_some() || self.melody.is_some() || self.audio.is_some() || self.drums.is_some() || self.iop.is_some()
    }
}

/// Which source feeds the general audio control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioSource {
    Mix,
    Drumless,
}

/// Stems and annotations of one clip, as needed for condition building.
pub struct ClipSources<'a> {
    pub mix: &'a [f32],
    pub drumless: &'a [f32],
    pub drums: &'a [f32],
    pub annotations: &'a Annotations,
}

/// First-stream reconstruction of `x`'s latent, blurred.
pub fn blurred_first_stream(codec: &Codec, x: &[f32], window: usize) -> Result<Tensor<f64>> {
    let z = codec.encode(x)?;
    let q = rvq_encode(&z, &codec.codebooks)?;
    temporal_blur(&reconstruct_first_stream(&q, &codec.codebooks), window)
}

/// Every control derivable from a clip (chords and melody from ground
/// truth, audio and drums from the codec), plus the style tag. The
/// in/out-painting control is left absent; see [`inpaint_condition`].
pub fn full_inputs(src: &ClipSources, codec: &Codec, audio_source: AudioSource) -> Result<ConditionInputs> {
    let ann = src.annotations;
    let frames = ann.num_frames;
    let audio_wave = match audio_source {
        AudioSource::Mix => src.mix,
        AudioSource::Drumless => src.drumless,
    };
    let inputs = ConditionInputs {
        frames,
        chords: Some(ann.chords.clone()),
        melody: Some(ann.melody_bins()),
        audio: Some(blurred_first_stream(codec, audio_wave, BLUR_WINDOW_AUDIO)?),
        drums: Some(blurred_first_stream(codec, &drum_bandpass().filtfilt(src.drums), BLUR_WINDOW_DRUMS)?),
        iop: None,
        style: Some(ann.style_tag),
    };
    inputs.validate(codec.n_enc)?;
    Ok(inputs)
}

/// Structured condition dropout probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub p_all: f64,
    pub p_each: f64,
    pub p_iop: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self { p_all: 0.2, p_each: 0.5, p_iop: 0.7 }
    }
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_all", self.p_all), ("p_each", self.p_each), ("p_iop", self.p_iop)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Which controls a dropout draw removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropDraw {
    pub all: bool,
    pub chords: bool,
    pub melody: bool,
    pub audio: bool,
    pub drums: bool,
    pub iop: bool,
    pub style: bool,
}

/// Draw which controls to drop. Six uniforms are consumed per call
/// regardless of outcome. The style tag is dropped exactly when the
/// all-conditions branch fires.
pub fn draw_dropout<R: Rng>(policy: &DropoutPolicy, rng: &mut R) -> DropDraw {
    let u: [f64; 6] = std::array::from_fn(|_| rng.gen());
    let all = u[0] < policy.p_all;
    DropDraw {
        all,
        chords: all || u[1] < policy.p_each,
        melody: all || u[2] < policy.p_each,
        audio: all || u[3] < policy.p_each,
        drums: all || u[4] < policy.p_each,
        iop: all || u[5] < policy.p_iop,
        style: all,
    }
}

pub fn apply_drop(cs: &ConditionInputs, d: &DropDraw) -> ConditionInputs {
    fn keep<T: Clone>(x: &Option<T>, drop: bool) -> Option<T> {
        if drop {
            None
        } else {
            x.clone()
        }
    }
    ConditionInputs {
        frames: cs.frames,
        chords: keep(&cs.chords, d.chords),
        melody: keep(&cs.melody, d.melody),
        audio: keep(&cs.audio, d.audio),
        drums: keep(&cs.drums, d.drums),
        iop: keep(&cs.iop, d.iop),
        style: keep(&cs.style, d.style),
    }
}

pub fn apply_condition_dropout<R: Rng>(
    cs: &ConditionInputs,
    policy: &DropoutPolicy,
    rng: &mut R,
) -> Result<(ConditionInputs, DropDraw)> {
    policy.validate()?;
    let d = draw_dropout(policy, rng);
    Ok((apply_drop(cs, &d), d))
}

/// Presence flags of a materialized condition set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Presence {
    pub chords: bool,
    pub melody: bool,
    pub audio: bool,
    pub drums: bool,
    pub iop: bool,
}

/// Projected controls, absent ones all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet<F> {
    pub c_crd: Tensor<F>,
    pub c_mld: Tensor<F>,
    pub c_aud: Tensor<F>,
    pub c_drm: Tensor<F>,
    pub c_iop: Tensor<F>,
    pub style: Option<u8>,
    pub present: Presence,
}

/// One-hot `T x 53` melody matrix.
pub fn melody_matrix<F: Real>(melody: &[Option<usize>]) -> Tensor<F> {
    let mut m = Tensor::zeros(&[melody.len(), MELODY_BINS]);
    for (t, b) in melody.iter().enumerate() {
        if let Some(b) = b {
            m.data_mut()[t * MELODY_BINS + b] = F::one();
        }
    }
    m
}

fn param<'a, F: Real>(params: &'a Params<F>, name: &str) -> Result<&'a Tensor<F>> {
    params
        .get(name)
        .ok_or_else(|| Error::MissingPrerequisite(format!("parameter {name}")))
}

/// Apply the learned tables and projections to raw controls.
pub fn build_condition_set<F: Real>(cs: &ConditionInputs, params: &Params<F>, n_enc: usize) -> Result<ConditionSet<F>> {
    cs.validate(n_enc)?;
    let t = cs.frames;
    let c_crd = match &cs.chords {
        Some(labels) => {
            let table = param(params, CHORD_TABLE)?;
            let mut out = Tensor::zeros(&[t, D_CRD]);
            for (r, l) in labels.iter().enumerate() {
                out.data_mut()[r * D_CRD..(r + 1) * D_CRD].copy_from_slice(table.row(l.0 as usize));
            }
            out
        }
        None => Tensor::zeros(&[t, D_CRD]),
    };
    let c_mld = match &cs.melody {
        Some(m) => melody_matrix::<F>(m).matmul(param(params, MELODY_PROJ)?)?,
        None => Tensor::zeros(&[t, D_MLD]),
    };
    let c_aud = match &cs.audio {
        Some(a) => a.cast::<F>().matmul(param(params, AUDIO_PROJ)?)?,
        None => Tensor::zeros(&[t, D_AUD]),
    };
    let c_drm = match &cs.drums {
        Some(a) => a.cast::<F>().matmul(param(params, DRUMS_PROJ)?)?,
        None => Tensor::zeros(&[t, D_DRM]),
    };
    let c_iop = match &cs.iop {
        Some(a) => a.cast::<F>(),
        None => Tensor::zeros(&[t, n_enc]),
    };
    Ok(ConditionSet {
        c_crd,
        c_mld,
        c_aud,
        c_drm,
        c_iop,
        style: cs.style,
        present: Presence {
            chords: cs.chords.is_some(),
            melody: cs.melody.is_some(),
            audio: cs.audio.is_some(),
            drums: cs.drums.is_some(),
            iop: cs.iop.is_some(),
        },
    })
}

/// `[z_t | c_crd | c_mld | c_aud | c_drm | c_iop]` along channels.
pub fn assemble_input<F: Real>(z_t: &Tensor<F>, cs: &ConditionSet<F>) -> Result<Tensor<F>> {
    let parts = [z_t, &cs.c_crd, &cs.c_mld, &cs.c_aud, &cs.c_drm, &cs.c_iop];
    let t = z_t.rows();
    if let Some(p) = parts.iter().find(|p| p.rows() != t) {
        return Err(Error::shape("assemble_input", format!("{} frames vs z_t {t}", p.rows())));
    }
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(t * width);
    for r in 0..t {
        for p in &parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_vec(&[t, width], out)
}
