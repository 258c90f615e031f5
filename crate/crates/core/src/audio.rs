//! Shared audio constants, WAV I/O and a short-time Fourier transform.

use std::path::Path;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 8000;
/// Latent / feature frames per second.
pub const FRAME_RATE: f64 = 25.0;
/// Samples per latent frame.
pub const HOP: usize = 320;

/// Number of latent-grid frames for a waveform of `len` samples.
pub fn num_frames(len: usize) -> usize {
    len.div_ceil(HOP)
}

/// Write 16-bit PCM mono.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(v)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format {
            what: "wav",
            detail: format!(
                "{}: expected mono {} Hz, got {} ch {} Hz",
                path.display(),
                SAMPLE_RATE,
                spec.channels,
                spec.sample_rate
            ),
        });
    }
    match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale).map_err(Error::from))
                .collect()
        }
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map_err(Error::from)).collect(),
    }
}

/// Hann-windowed STFT with frames centered at `t * hop + hop / 2`.
pub struct Stft {
    win: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(win: usize, hop: usize) -> Self {
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(win);
        Self {
            win,
            hop,
            window,
            fft,
        }
    }

    pub fn win(&self) -> usize {
        self.win
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn num_bins(&self) -> usize {
        self.win / 2 + 1
    }

    pub fn bin_hz(&self) -> f64 {
        SAMPLE_RATE as f64 / self.win as f64
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Magnitude spectra, one row of `win / 2 + 1` bins per frame.
    pub fn magnitudes(&self, x: &[f32]) -> Vec<Vec<f64>> {
        let frames = self.num_frames(x.len());
        let mut buf = vec![Complex::new(0.0, 0.0); self.win];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let center = (t * self.hop + self.hop / 2) as isize;
            let start = center - (self.win / 2) as isize;
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let v = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize] as f64
                } else {
                    0.0
                };
                *b = Complex::new(v * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.push(buf[..self.num_bins()].iter().map(|c| c.norm()).collect());
        }
        out
    }
}
