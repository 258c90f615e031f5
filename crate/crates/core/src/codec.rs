//! Fixed toy audio codec: semitone filterbank, seeded random projection to a
//! low-dimensional latent, residual vector quantization, and an approximate
//! sinusoidal decoder.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::{Stft, FRAME_RATE, HOP, SAMPLE_RATE};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::synth::midi_to_hz;

/// Continuous latent, `T x N_enc`.
pub type LatentSeq = Tensor<f64>;

pub const N_BANDS: usize = 64;
/// MIDI note at the center of band 0.
pub const BAND_MIDI_LOW: f64 = 43.0;
pub const ENCODER_WINDOW: usize = 2048;
pub const DEFAULT_N_ENC: usize = 16;
pub const DEFAULT_CODEBOOKS: usize = 4;
pub const DEFAULT_CODEBOOK_SIZE: usize = 64;
pub const KMEANS_ITERS: usize = 20;
/// Energy floor inside `log(1 + E / floor)`.
const LOG_FLOOR: f64 = 1.0;
const STD_FLOOR: f64 = 1e-6;

const CODEC_MAGIC: &[u8; 4] = b"TFCD";
const CODEC_VERSION: u32 = 1;

/// Number of latent frames for a waveform of `len` samples.
pub fn latent_frames(len: usize) -> usize {
    ((len as f64 / SAMPLE_RATE as f64) * FRAME_RATE).round() as usize
}

fn band_hz(b: usize) -> f64 {
    midi_to_hz(BAND_MIDI_LOW + b as f64)
}

/// Triangular weights on the semitone axis, one row per band.
fn band_weights(stft: &Stft) -> Vec<Vec<(usize, f64)>> {
    let bin_hz = stft.bin_hz();
    (0..N_BANDS)
        .map(|b| {
            let center = BAND_MIDI_LOW + b as f64;
            (1..stft.num_bins())
                .filter_map(|k| {
                    let m = 69.0 + 12.0 * (k as f64 * bin_hz / 440.0).log2();
                    let w = 1.0 - (m - center).abs();
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

/// Log-compressed semitone band energies, `T x 64`.
pub fn filterbank(x: &[f32]) -> Result<Vec<[f64; N_BANDS]>> {
    if x.is_empty() {
        return Err(Error::invalid("cannot encode an empty waveform"));
    }
    let t = latent_frames(x.len()).max(1);
    let stft = Stft::new(ENCODER_WINDOW, HOP);
    let weights = band_weights(&stft);
    let mags = stft.magnitudes(x);
    Ok((0..t)
        .map(|i| {
            let mut row = [0.0; N_BANDS];
            if let Some(mag) = mags.get(i) {
                for (r, ws) in row.iter_mut().zip(&weights) {
                    let e: f64 = ws.iter().map(|&(k, w)| w * mag[k] * mag[k]).sum();
                    *r = (1.0 + e / LOG_FLOOR).ln();
                }
            }
            row
        })
        .collect())
}

/// Seeded `n_enc x 64` projection with orthonormal rows.
fn random_projection(n_enc: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(N_BANDS, n_enc, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let mut p = vec![0.0; n_enc * N_BANDS];
    for r in 0..n_enc {
        for c in 0..N_BANDS {
            p[r * N_BANDS + c] = q[(c, r)];
        }
    }
    p
}

/// K ordered codebooks of N centroids each.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqCodebooks {
    pub dim: usize,
    pub size: usize,
    /// `books[k]` is `size x dim`, row-major.
    pub books: Vec<Vec<f64>>,
}

impl RvqCodebooks {
    pub fn num_books(&self) -> usize {
        self.books.len()
    }

    pub fn centroid(&self, book: usize, idx: usize) -> &[f64] {
        &self.books[book][idx * self.dim..(idx + 1) * self.dim]
    }
}

/// Token streams, `T x K` indices into their codebooks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStreams {
    pub frames: usize,
    pub books: usize,
    pub data: Vec<u16>,
}

impl TokenStreams {
    pub fn get(&self, t: usize, k: usize) -> usize {
        self.data[t * self.books + k] as usize
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance; lowest index wins ties.
pub fn nearest(book: &[f64], dim: usize, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in book.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Lloyd iterations from a seeded k-means++ start.
fn kmeans(points: &[f64], dim: usize, n: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = points.len() / dim;
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(n * dim);
    centroids.extend_from_slice(pt(rng.gen_range(0..m)));
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(pt(i), &centroids[..dim])).collect();
    for _ in 1..n {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.gen_range(0..m)
        };
        let c = pt(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pt(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    let mut assign = vec![0usize; m];
    for _ in 0..iters {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(&centroids, dim, pt(i));
        }
        let mut sums = vec![0.0; n * dim];
        let mut counts = vec![0usize; n];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(pt(i)) {
                *s += v;
            }
        }
        for c in 0..n {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    centroids
}

/// Fit `k` codebooks of `n` centroids on `frames` (`M x dim`, row-major),
/// each on the residual left by the previous ones.
pub fn rvq_fit(frames: &[f64], dim: usize, k: usize, n: usize, seed: u64) -> Result<RvqCodebooks> {
    if dim == 0 || frames.len() % dim != 0 {
        return Err(Error::shape("rvq_fit", format!("{} values not a multiple of dim {dim}", frames.len())));
    }
    let m = frames.len() / dim;
    if m < n {
        return Err(Error::invalid(format!("rvq_fit needs at least {n} frames, got {m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = frames.to_vec();
    let mut books = Vec::with_capacity(k);
    for _ in 0..k {
        let book = kmeans(&residual, dim, n, KMEANS_ITERS, &mut rng);
        for r in residual.chunks_exact_mut(dim) {
            let idx = nearest(&book, dim, r);
            for (v, c) in r.iter_mut().zip(&book[idx * dim..(idx + 1) * dim]) {
                *v -= c;
            }
        }
        books.push(book);
    }
    Ok(RvqCodebooks { dim, size: n, books })
}

/// Greedy residual quantization, one nearest centroid per stage.
pub fn rvq_encode(z: &LatentSeq, cb: &RvqCodebooks) -> Result<TokenStreams> {
    if z.cols() != cb.dim {
        return Err(Error::shape("rvq_encode", format!("latent width {} vs codebook dim {}", z.cols(), cb.dim)));
    }
    let k = cb.num_books();
    let mut data = Vec::with_capacity(z.rows() * k);
    for t in 0..z.rows() {
        let mut r = z.row(t).to_vec();
        for b in 0..k {
            let idx = nearest(&cb.books[b], cb.dim, &r);
            for (v, c) in r.iter_mut().zip(cb.centroid(b, idx)) {
                *v -= c;
            }
            data.push(idx as u16);
        }
    }
    Ok(TokenStreams { frames: z.rows(), books: k, data })
}

/// Sum of the centroids of the first `stages` streams.
pub fn rvq_reconstruct(q: &TokenStreams, cb: &RvqCodebooks, stages: usize) -> LatentSeq {
    let mut out = vec![0.0; q.frames * cb.dim];
    for t in 0..q.frames {
        let row = &mut out[t * cb.dim..(t + 1) * cb.dim];
        for b in 0..stages.min(q.books) {
            for (v, c) in row.iter_mut().zip(cb.centroid(b, q.get(t, b))) {
                *v += c;
            }
        }
    }
    Tensor::from_vec(&[q.frames, cb.dim], out).expect("non-empty token streams")
}

/// Row `t` is the first codebook's centroid at `q[t, 0]`.
pub fn reconstruct_first_stream(q: &TokenStreams, cb: &RvqCodebooks) -> LatentSeq {
    rvq_reconstruct(q, cb, 1)
}

/// Encoder statistics, projection and codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub n_enc: usize,
    /// Corpus mean of the filterbank features, subtracted before projection.
    pub band_mean: Vec<f64>,
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
    /// `n_enc x 64`, orthonormal rows.
    pub projection: Vec<f64>,
    /// `64 x n_enc` map from centered projections back to band features.
    pub reconstruction: Vec<f64>,
    pub codebooks: RvqCodebooks,
}

#[derive(Debug, Clone, Copy)]
pub struct CodecConfig {
    pub n_enc: usize,
    pub codebooks: usize,
    pub codebook_size: usize,
    /// Cap on frames sampled for k-means.
    pub max_fit_frames: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            n_enc: DEFAULT_N_ENC,
            codebooks: DEFAULT_CODEBOOKS,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            max_fit_frames: 32768,
            seed: 0,
        }
    }
}

impl Codec {
    /// Fit standardization statistics and RVQ codebooks on training clips.
    pub fn fit(clips: &[Vec<f32>], cfg: &CodecConfig) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("codec fit needs at least one clip"));
        }
        let feats: Vec<Vec<[f64; N_BANDS]>> = clips.iter().map(|c| filterbank(c)).collect::<Result<_>>()?;
        let total: usize = feats.iter().map(Vec::len).sum();
        let mut band_mean = vec![0.0; N_BANDS];
        for row in feats.iter().flatten() {
            for (m, v) in band_mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        band_mean.iter_mut().for_each(|m| *m /= total as f64);

        let mut codec = Codec {
            n_enc: cfg.n_enc,
            band_mean,
            latent_mean: vec![0.0; cfg.n_enc],
            latent_std: vec![1.0; cfg.n_enc],
            projection: random_projection(cfg.n_enc, cfg.seed),
            reconstruction: Vec::new(),
            codebooks: RvqCodebooks { dim: cfg.n_enc, size: cfg.codebook_size, books: Vec::new() },
        };
        codec.reconstruction = codec.fit_reconstruction(&feats);
        let raw: Vec<Vec<f64>> = feats.iter().flatten().map(|f| codec.project(f)).collect();
        let mut mean = vec![0.0; cfg.n_enc];
        for r in &raw {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total as f64);
        let mut var = vec![0.0; cfg.n_enc];
        for r in &raw {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        codec.latent_std = var.iter().map(|s| (s / total as f64).sqrt().max(STD_FLOOR)).collect();
        codec.latent_mean = mean;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0de);
        let stride = total.div_ceil(cfg.max_fit_frames.max(1)).max(1);
        let offset = rng.gen_range(0..stride);
        let mut sample = Vec::new();
        for r in raw.iter().skip(offset).step_by(stride) {
            sample.extend(codec.standardize(r));
        }
        codec.codebooks = rvq_fit(&sample, cfg.n_enc, cfg.codebooks, cfg.codebook_size, cfg.seed)?;
        Ok(codec)
    }

    /// Minimum-Mahalanobis-norm inverse `C P^T (P C P^T)^-1` under the
    /// corpus feature covariance `C`.
    fn fit_reconstruction(&self, feats: &[Vec<[f64; N_BANDS]>]) -> Vec<f64> {
        let p = DMatrix::from_row_slice(self.n_enc, N_BANDS, &self.projection);
        let mut c = DMatrix::<f64>::zeros(N_BANDS, N_BANDS);
        let mut count = 0usize;
        for f in feats.iter().flatten() {
            let d = DVector::from_iterator(N_BANDS, f.iter().zip(&self.band_mean).map(|(v, m)| v - m));
            c += &d * d.transpose();
            count += 1;
        }
        c /= count.max(1) as f64;
        let pc = &p * &c;
        let gram = &pc * p.transpose();
        // Falls back to the plain pseudo-inverse (P has orthonormal rows)
        // when the corpus is too small to pin down C.
        let d = match gram.try_inverse() {
            Some(inv) => pc.transpose() * inv,
            None => p.transpose(),
        };
        d.transpose().as_slice().to_vec()
    }

    fn project(&self, f: &[f64; N_BANDS]) -> Vec<f64> {
        self.projection
            .chunks_exact(N_BANDS)
            .map(|row| row.iter().zip(f).zip(&self.band_mean).map(|((p, v), m)| p * (v - m)).sum())
            .collect()
    }

    fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.latent_mean)
            .zip(&self.latent_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Deterministic latent, `round(duration * f_r) x n_enc`.
    pub fn encode(&self, x: &[f32]) -> Result<LatentSeq> {
        let feats = filterbank(x)?;
        let t = feats.len();
        let data = feats.iter().flat_map(|f| self.standardize(&self.project(f))).collect();
        Tensor::from_vec(&[t, self.n_enc], data)
    }

    /// Filterbank features implied by a latent (generalized inverse of the
    /// projection plus the stored band mean).
    pub fn decode_features(&self, z: &LatentSeq) -> Result<Vec<[f64; N_BANDS]>> {
        if z.cols() != self.n_enc {
            return Err(Error::shape("decode", format!("latent width {} vs {}", z.cols(), self.n_enc)));
        }
        Ok((0..z.rows())
            .map(|t| {
                let raw: Vec<f64> = z
                    .row(t)
                    .iter()
                    .zip(&self.latent_mean)
                    .zip(&self.latent_std)
                    .map(|((v, m), s)| v * s + m)
                    .collect();
                let mut f = [0.0; N_BANDS];
                for (b, fb) in f.iter_mut().enumerate() {
                    *fb = self.band_mean[b]
                        + raw.iter().enumerate().map(|(r, v)| v * self.reconstruction[b * self.n_enc + r]).sum::<f64>();
                }
                f
            })
            .collect())
    }

    /// Sinusoidal resynthesis at the band centers with fixed random phases.
    /// `len` is the output length in samples.
    pub fn decode(&self, z: &LatentSeq, len: usize) -> Result<Vec<f32>> {
        let feats = self.decode_features(z)?;
        let n = ENCODER_WINDOW as f64;
        // A sinusoid of amplitude A inside one band carries roughly
        // A^2 * 3 n^2 / 32 of half-spectrum Hann energy.
        let amp: Vec<[f64; N_BANDS]> = feats
            .iter()
            .map(|f| {
                let mut a = [0.0; N_BANDS];
                for (ab, v) in a.iter_mut().zip(f) {
                    let e = (v.exp() - 1.0).max(0.0) * LOG_FLOOR;
                    *ab = (32.0 * e / (3.0 * n * n)).sqrt();
                }
                a
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0x0de_c0de);
        let phases: Vec<f64> = (0..N_BANDS).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let mut out = vec![0.0f32; len];
        if amp.is_empty() {
            return Ok(out);
        }
        let last = amp.len() - 1;
        for (i, o) in out.iter_mut().enumerate() {
            let pos = ((i as f64 - HOP as f64 / 2.0) / HOP as f64).clamp(0.0, last as f64);
            let j = pos.floor() as usize;
            let k = (j + 1).min(last);
            let w = pos - j as f64;
            let t = i as f64 / SAMPLE_RATE as f64;
            let mut v = 0.0;
            for b in 0..N_BANDS {
                let f = band_hz(b);
                if f >= nyquist {
                    break;
                }
                let a = amp[j][b] * (1.0 - w) + amp[k][b] * w;
                v += a * (std::f64::consts::TAU * f * t + phases[b]).sin();
            }
            *o = v as f32;
        }
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let cb = &self.codebooks;
        w.write_all(CODEC_MAGIC)?;
        for v in [CODEC_VERSION, SAMPLE_RATE] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(FRAME_RATE as f32).to_le_bytes())?;
        for v in [self.n_enc, cb.num_books(), cb.size, N_BANDS] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let arrays = [&self.band_mean, &self.latent_mean, &self.latent_std, &self.projection, &self.reconstruction];
        for v in arrays.into_iter().flatten().chain(cb.books.iter().flatten()) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "codec", detail };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != CODEC_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut u32s = [0u32; 2];
        for v in u32s.iter_mut() {
            *v = read_u32(r).map_err(|e| bad(e.to_string()))?;
        }
        if u32s != [CODEC_VERSION, SAMPLE_RATE] {
            return Err(bad(format!("unsupported version/sample rate {u32s:?}")));
        }
        let fr = read_f32s(r, 1).map_err(|e| bad(e.to_string()))?[0];
        if (fr as f64 - FRAME_RATE).abs() > 1e-6 {
            return Err(bad(format!("frame rate {fr} != {FRAME_RATE}")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u32(r).map_err(|e| bad(e.to_string()))? as usize;
        }
        let [n_enc, k, n, bands] = dims;
        if bands != N_BANDS || n_enc == 0 || n == 0 {
            return Err(bad(format!("bad dimensions {dims:?}")));
        }
        let mut read = |len: usize| read_f32s(r, len).map_err(|e| bad(e.to_string()));
        let band_mean = read(N_BANDS)?;
        let latent_mean = read(n_enc)?;
        let latent_std = read(n_enc)?;
        let projection = read(n_enc * N_BANDS)?;
        let reconstruction = read(N_BANDS * n_enc)?;
        let books = (0..k).map(|_| read(n * n_enc)).collect::<Result<Vec<_>>>()?;
        Ok(Codec {
            n_enc,
            band_mean,
            latent_mean,
            latent_std,
            projection,
            reconstruction,
            codebooks: RvqCodebooks { dim: n_enc, size: n, books },
        })
    }

    /// Round all stored values through `f32`, as a save/load cycle does.
    pub fn quantized(&self) -> Self {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        Self::read_from(&mut buf.as_slice()).expect("own encoding")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
