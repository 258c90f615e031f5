//! Objective adherence and quality metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::audio::{Stft, HOP, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::{self, binarize_melody_rows, melody_saliency, resample_nearest};
use crate::synth::ChordLabel;

pub const ONSET_TOLERANCE: f64 = 0.05;
/// Slack on the onset tolerance so that decimal boundary cases such as
/// `|1.05 - 1.0|` count as within 50 ms.
const TOL_SLACK: f64 = 1e-9;
pub const EMBEDDING_DIM: usize = 28;
const PSD_TOLERANCE: f64 = 1e-8;

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean per-frame chroma cosine; frames where either side is silent are
/// skipped.
pub fn chroma_cosine(reference: &[f32], generated: &[f32]) -> Result<f64> {
    let n = reference.len().min(generated.len());
    if n == 0 {
        return Err(Error::UndefinedMetric("chroma cosine of empty audio".into()));
    }
    let a = features::chroma(&reference[..n]);
    let b = features::chroma(&generated[..n]);
    let sims: Vec<f64> = a.frames.iter().zip(&b.frames).filter_map(|(x, y)| cosine(x, y)).collect();
    if sims.is_empty() {
        return Err(Error::UndefinedMetric("chroma cosine: every frame silent".into()));
    }
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Estimated melody bin per frame of `generated`, on a grid of `frames`.
pub fn estimate_melody(generated: &[f32], frames: usize, threshold: f64) -> Result<Vec<Option<usize>>> {
    let est = binarize_melody_rows(&melody_saliency(generated).frames, threshold)?;
    if est.is_empty() {
        return Ok(vec![None; frames]);
    }
    resample_nearest(&est, frames)
}

/// Fraction of voiced reference frames whose estimated note matches
/// exactly on the 53-bin grid.
pub fn melody_accuracy(reference: &[Option<usize>], generated: &[f32], threshold: f64) -> Result<f64> {
    let voiced = reference.iter().filter(|r| r.is_some()).count();
    if voiced == 0 {
        return Err(Error::UndefinedMetric("melody accuracy: no voiced reference frames".into()));
    }
    let est = estimate_melody(generated, reference.len(), threshold)?;
    let hits = reference.iter().zip(&est).filter(|(r, e)| r.is_some() && r == e).count();
    Ok(hits as f64 / voiced as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Whether a reference/estimate pair may be matched.
pub fn onset_admissible(r: f64, e: f64, tol: f64) -> bool {
    (r - e).abs() <= tol + TOL_SLACK
}

/// Size of a maximum bipartite matching (augmenting paths).
fn max_matching(adj: &[Vec<usize>], right: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                    owner[v] = Some(u);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; right];
    (0..adj.len())
        .filter(|&u| augment(u, adj, &mut vec![false; right], &mut owner))
        .count()
}

/// Precision, recall and F1 under a maximum one-to-one matching within
/// `tol` seconds. Two empty lists score 1.
pub fn onset_f1(reference: &[f64], estimated: &[f64], tol: f64) -> OnsetScores {
    if reference.is_empty() && estimated.is_empty() {
        return OnsetScores { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    let adj: Vec<Vec<usize>> = reference
        .iter()
        .map(|&r| {
            (0..estimated.len())
                .filter(|&j| onset_admissible(r, estimated[j], tol))
                .collect()
        })
        .collect();
    let m = max_matching(&adj, estimated.len()) as f64;
    let precision = if estimated.is_empty() { 0.0 } else { m / estimated.len() as f64 };
    let recall = if reference.is_empty() { 0.0 } else { m / reference.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    OnsetScores { precision, recall, f1 }
}

/// Frame-level IOU over chord frames: agreeing non-empty frames divided by
/// frames where either side has a chord. `generated` is resampled onto the
/// reference grid.
pub fn chord_iou(reference: &[ChordLabel], generated: &[ChordLabel]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("chord IOU of empty reference".into()));
    }
    let gen = if generated.is_empty() {
        vec![ChordLabel::NONE; reference.len()]
    } else {
        resample_nearest(generated, reference.len())?
    };
    let mut inter = 0usize;
    let mut union = 0usize;
    for (r, g) in reference.iter().zip(&gen) {
        if !r.is_none() || !g.is_none() {
            union += 1;
            if r == g {
                inter += 1;
            }
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Chord labels estimated from audio on a grid of `frames`.
pub fn estimate_chords(x: &[f32], frames: usize) -> Result<Vec<ChordLabel>> {
    let labels = features::chord_labels(&features::chroma(x));
    if labels.is_empty() {
        return Ok(vec![ChordLabel::NONE; frames]);
    }
    resample_nearest(&labels, frames)
}

/// 28-dim clip embedding: per-frame normalized chroma mean and std,
/// spectral centroid / rolloff / flux means (normalized by Nyquist or
/// frame energy), and clip log-RMS.
pub fn clip_embedding(x: &[f32]) -> Vec<f64> {
    let mut out = Vec::with_capacity(EMBEDDING_DIM);
    let chroma: Vec<[f64; 12]> = features::chroma(x)
        .frames
        .into_iter()
        .map(|f| {
            let s: f64 = f.iter().sum();
            if s > 0.0 {
                f.map(|v| v / s)
            } else {
                f
            }
        })
        .collect();
    let n = chroma.len().max(1) as f64;
    let mean: Vec<f64> = (0..12).map(|p| chroma.iter().map(|f| f[p]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..12)
        .map(|p| (chroma.iter().map(|f| (f[p] - mean[p]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    out.extend(&mean);
    out.extend(&std);

    let stft = Stft::new(1024, HOP);
    let mags = stft.magnitudes(x);
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let (mut centroid, mut rolloff, mut flux) = (0.0, 0.0, 0.0);
    let mut prev: Option<&Vec<f64>> = None;
    for m in &mags {
        let total: f64 = m.iter().sum();
        if total > 0.0 {
            centroid += m.iter().enumerate().map(|(k, v)| k as f64 * stft.bin_hz() * v).sum::<f64>() / total / nyquist;
            let mut acc = 0.0;
            let k85 = m
                .iter()
                .position(|v| {
                    acc += v;
                    acc >= 0.85 * total
                })
                .unwrap_or(m.len() - 1);
            rolloff += k85 as f64 * stft.bin_hz() / nyquist;
        }
        if let Some(p) = prev {
            let norm = total.max(1e-12);
            flux += m.iter().zip(p).map(|(a, b)| (a - b).max(0.0)).sum::<f64>() / norm;
        }
        prev = Some(m);
    }
    let nf = mags.len().max(1) as f64;
    out.push(centroid / nf);
    out.push(rolloff / nf);
    out.push(flux / nf);
    let rms = (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len().max(1) as f64).sqrt();
    out.push((rms + 1e-8).ln());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance, accumulated in input order.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid("Gaussian statistics need at least two samples"));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::shape("gaussian_stats", "embeddings of differing length"));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (s[i] - mean[i]) * (s[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= n - 1.0);
        Ok(Self { mean, cov })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        (&m + m.transpose()) * 0.5
    }
}

/// Eigenvalues of a symmetric matrix, negatives within tolerance clamped.
fn checked_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::invalid(format!("{what} is not positive semidefinite: eigenvalue {v:e}")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = checked_eigen(m, what)?;
    let s = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", format!("dims {} vs {}", a.dim(), b.dim())));
    }
    let sa = a.cov_matrix();
    let sb = b.cov_matrix();
    let root_a = psd_sqrt(sa.clone(), "covariance a")?;
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = checked_eigen(inner, "cross term")?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((dmu + sa.trace() + sb.trace() - 2.0 * tr_cross).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_clip, ClipSpec, Note, MELODY_MIDI_LOW};

    fn gauss1(mu: f64, var: f64) -> GaussianStats {
        GaussianStats { mean: vec![mu], cov: vec![var] }
    }

    fn tone_clip(midi: u8) -> (Vec<f32>, Vec<Option<usize>>) {
        let mut spec = ClipSpec::silent(0, 2.0);
        spec.melody.push(Note { midi, onset_beat: 0.0, duration_beats: 4.0 });
        let clip = generate_clip(&spec).unwrap();
        (clip.mix, clip.annotations.melody_bins())
    }

    #[test]
    fn onset_boundaries() {
        assert_eq!(onset_f1(&[1.0], &[1.04], 0.05).f1, 1.0);
        assert_eq!(onset_f1(&[1.0], &[1.06], 0.05).f1, 0.0);
        let s = onset_f1(&[1.0, 1.08], &[1.04], 0.05);
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(onset_f1(&[], &[], 0.05).f1, 1.0);
        assert_eq!(onset_f1(&[0.5, 1.0], &[0.5, 1.0], 0.05).f1, 1.0);
    }

    #[test]
    fn chord_iou_hand_cases() {
        let c = ChordLabel::triad(0, false);
        let g = ChordLabel::triad(7, false);
        let n = ChordLabel::NONE;
        assert!((chord_iou(&[c, c, n, n], &[c, g, g, n]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(chord_iou(&[c, g], &[c, g]).unwrap(), 1.0);
        assert_eq!(chord_iou(&[c, c], &[g, g]).unwrap(), 0.0);
        assert_eq!(chord_iou(&[n, n], &[n, n]).unwrap(), 1.0);
    }

    #[test]
    fn chord_iou_is_symmetric() {
        let a: Vec<ChordLabel> = [0, 1, 1, 5, 0, 7].iter().map(|&l| ChordLabel(l)).collect();
        let b: Vec<ChordLabel> = [1, 1, 0, 5, 7, 7].iter().map(|&l| ChordLabel(l)).collect();
        assert_eq!(chord_iou(&a, &b).unwrap(), chord_iou(&b, &a).unwrap());
    }

    #[test]
    fn frechet_closed_forms() {
        assert!((frechet_distance(&gauss1(0.0, 1.0), &gauss1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!((frechet_distance(&gauss1(0.0, 1.0), &gauss1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
        let s = GaussianStats { mean: vec![0.3, -1.0], cov: vec![2.0, 0.5, 0.5, 1.0] };
        assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-9);
        let bad = GaussianStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, -1.0] };
        let err = frechet_distance(&bad, &s).unwrap_err().to_string();
        assert!(err.contains("eigenvalue"), "{err}");
    }

    #[test]
    fn chroma_cosine_cases() {
        let (c, _) = tone_clip(60);
        let (fs, _) = tone_clip(66);
        assert!((chroma_cosine(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(chroma_cosine(&c, &fs).unwrap() < 0.1);
        assert_eq!(chroma_cosine(&c, &fs).unwrap(), chroma_cosine(&fs, &c).unwrap());
        assert!(chroma_cosine(&[0.0; 800], &[0.0; 800]).is_err());
    }

    #[test]
    fn melody_accuracy_cases() {
        let (x, bins) = tone_clip(64);
        assert!(melody_accuracy(&bins, &x, 0.5).unwrap() >= 0.9);
        assert_eq!(melody_accuracy(&bins, &vec![0.0; x.len()], 0.5).unwrap(), 0.0);
        let (up, _) = tone_clip(65);
        assert!(melody_accuracy(&bins, &up, 0.5).unwrap() <= 0.1);
        assert!(melody_accuracy(&[None, None], &x, 0.5).is_err());
        assert_eq!(bins[10], Some((64 - MELODY_MIDI_LOW) as usize));
    }

    #[test]
    fn embedding_is_finite_and_sized() {
        let (x, _) = tone_clip(70);
        let e = clip_embedding(&x);
        assert_eq!(e.len(), EMBEDDING_DIM);
        assert!(e.iter().all(|v| v.is_finite()));
        assert_eq!(e, clip_embedding(&x));
    }
}
