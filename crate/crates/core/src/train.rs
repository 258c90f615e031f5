//! Conditional flow matching: interpolation, loss, optimizer and the
//! training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::autodiff::{Params, Real, Tape, Tensor, Var};
use crate::codec::Codec;
use crate::conditioning::{
    apply_condition_dropout, full_inputs, inpaint_condition, AudioSource, ClipSources, ConditionInputs, DropoutPolicy,
    PaintMode, IOP_FRACTION_MAX, IOP_FRACTION_MIN,
};
use crate::error::{Error, Result};
use crate::model::{forward_tape, ModelConfig};
use crate::synth::{read_annotations, ManifestRecord};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    Uniform,
    OnePlusT,
}

impl LossWeighting {
    pub fn weight(self, t: f64) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::OnePlusT => 1.0 + t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub sigma_min: f64,
    pub weighting: LossWeighting,
    pub dropout: DropoutPolicy,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Train on random windows of this many frames; `None` uses whole clips.
    pub crop_frames: Option<usize>,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 20_000,
            peak_lr: 1e-4,
            warmup_steps: 500,
            clip_norm: 0.2,
            sigma_min: DEFAULT_SIGMA_MIN,
            weighting: LossWeighting::OnePlusT,
            dropout: DropoutPolicy::default(),
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            crop_frames: None,
            log_every: 50,
            checkpoint_every: 1000,
            max_skip_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::invalid("batch_size and steps must be positive"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::invalid("warmup_steps exceeds steps"));
        }
        if !(self.peak_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("peak_lr and clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::invalid("sigma_min must be in [0, 1)"));
        }
        if self.crop_frames == Some(0) || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("crop_frames, log_every and checkpoint_every must be positive"));
        }
        self.dropout.validate()
    }
}

fn check_shapes<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = (1 - (1 - sigma_min) t) z0 + t z1`.
pub fn interpolate<F: Real>(z0: &Tensor<F>, z1: &Tensor<F>, t: f64, sigma_min: f64) -> Result<Tensor<F>> {
    check_shapes("interpolate", z0, z1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    let a = F::lit(1.0 - (1.0 - sigma_min) * t);
    let b = F::lit(t);
    let data = z0.data().iter().zip(z1.data()).map(|(&x0, &x1)| a * x0 + b * x1).collect();
    Tensor::from_vec(z0.shape(), data)
}

/// Regression target `u = z1 - (1 - sigma_min) z0`.
pub fn target_velocity<F: Real>(z0: &Tensor<F>, z1: &Tensor<F>, sigma_min: f64) -> Result<Tensor<F>> {
    check_shapes("target_velocity", z0, z1)?;
    let a = F::lit(1.0 - sigma_min);
    let data = z0.data().iter().zip(z1.data()).map(|(&x0, &x1)| x1 - a * x0).collect();
    Tensor::from_vec(z0.shape(), data)
}

/// One element of a training batch.
#[derive(Debug, Clone)]
pub struct FlowSample<F> {
    pub v_pred: Tensor<F>,
    pub z0: Tensor<F>,
    pub z1: Tensor<F>,
    pub t: f64,
}

/// Batch loss: per-sample MSE against the target, weighted by `w(t)` and
/// averaged over the batch.
pub fn cfm_loss<F: Real>(batch: &[FlowSample<F>], mode: LossWeighting, sigma_min: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for s in batch {
        check_shapes("cfm_loss", &s.v_pred, &s.z0)?;
        let u = target_velocity(&s.z0, &s.z1, sigma_min)?;
        let se: f64 = s
            .v_pred
            .data()
            .iter()
            .zip(u.data())
            .map(|(&p, &q)| {
                let d = p.to_f64().unwrap_or(f64::NAN) - q.to_f64().unwrap_or(f64::NAN);
                d * d
            })
            .sum();
        total += mode.weight(s.t) * se / u.numel() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Learning rate at `step` (0-based): linear warmup to the peak, then
/// linear decay reaching zero at `steps`.
pub fn learning_rate(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else if cfg.steps == cfg.warmup_steps {
        cfg.peak_lr
    } else {
        let left = cfg.steps.saturating_sub(step) as f64;
        cfg.peak_lr * left / (cfg.steps - cfg.warmup_steps) as f64
    }
}

pub fn global_norm<F: Real>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &Params<F>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params<F>, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam", format!("{} grads for {} params", grads.len(), params.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (ob1, ob2) = (F::lit(1.0 - self.beta1), F::lit(1.0 - self.beta2));
        let step = F::lit(lr / c1);
        let inv_c2 = F::lit(1.0 / c2);
        let eps = F::lit(self.eps);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            check_shapes("adam", p, &grads[i])?;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[k] = b1 * m[k] + ob1 * g;
                v[k] = b2 * v[k] + ob2 * g * g;
                *w = *w - step * m[k] / ((v[k] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// A clip prepared for training: its clean latent and every control.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub z1: Tensor<f64>,
    pub inputs: ConditionInputs,
}

/// Encode corpus clips and derive their controls.
pub fn prepare_examples(
    dir: &Path,
    records: &[ManifestRecord],
    codec: &Codec,
    audio_source: AudioSource,
) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| {
            let harmony = audio::read_wav(&dir.join(&r.stem_paths.harmony))?;
            let melody = audio::read_wav(&dir.join(&r.stem_paths.melody))?;
            let drums = audio::read_wav(&dir.join(&r.stem_paths.drums))?;
            let mix = audio::read_wav(&dir.join(&r.mix_path))?;
            let ann = read_annotations(&dir.join(&r.annotation_path))?.annotations;
            let drumless: Vec<f32> = harmony.iter().zip(&melody).map(|(&h, &m)| h + m).collect();
            example_from_audio(&mix, &drumless, &drums, &ann, codec, audio_source)
        })
        .collect()
}

pub fn example_from_audio(
    mix: &[f32],
    drumless: &[f32],
    drums: &[f32],
    ann: &crate::synth::Annotations,
    codec: &Codec,
    audio_source: AudioSource,
) -> Result<TrainExample> {
    let z1 = codec.encode(mix)?;
    let inputs = full_inputs(
        &ClipSources {
            mix,
            drumless,
            drums,
            annotations: ann,
        },
        codec,
        audio_source,
    )?;
    if z1.rows() != inputs.frames {
        return Err(Error::shape(
            "prepare_examples",
            format!("latent has {} frames, annotations {}", z1.rows(), inputs.frames),
        ));
    }
    Ok(TrainExample { z1, inputs })
}

fn crop_rows(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let d = x.cols();
    Tensor::from_vec(&[len, d], x.data()[start * d..(start + len) * d].to_vec()).expect("in range")
}

/// Frames `start..start + len` of an example.
pub fn crop_example(ex: &TrainExample, start: usize, len: usize) -> Result<TrainExample> {
    let t = ex.inputs.frames;
    if len == 0 || start + len > t {
        return Err(Error::invalid(format!("crop {start}+{len} outside {t} frames")));
    }
    let cs = &ex.inputs;
    let rows = |x: &Option<Tensor<f64>>| x.as_ref().map(|x| crop_rows(x, start, len));
    Ok(TrainExample {
        z1: crop_rows(&ex.z1, start, len),
        inputs: ConditionInputs {
            frames: len,
            chords: cs.chords.as_ref().map(|c| c[start..start + len].to_vec()),
            melody: cs.melody.as_ref().map(|m| m[start..start + len].to_vec()),
            audio: rows(&cs.audio),
            drums: rows(&cs.drums),
            iop: rows(&cs.iop),
            style: cs.style,
        },
    })
}

/// Draw one training element: optional crop, condition dropout, and a
/// masked-latent control when in/out-painting survives dropout.
pub fn draw_element<R: Rng>(ex: &TrainExample, cfg: &TrainConfig, rng: &mut R) -> Result<TrainExample> {
    let t = ex.inputs.frames;
    let ex = match cfg.crop_frames {
        Some(len) if len < t => crop_example(ex, rng.gen_range(0..=t - len), len)?,
        _ => ex.clone(),
    };
    let mut with_iop = ex.inputs.clone();
    let mode = if rng.gen_bool(0.5) { PaintMode::Inpaint } else { PaintMode::Outpaint };
    let fraction = rng.gen_range(IOP_FRACTION_MIN..=IOP_FRACTION_MAX);
    with_iop.iop = Some(inpaint_condition(&ex.z1, mode, fraction, rng)?.0);
    let (inputs, _) = apply_condition_dropout(&with_iop, &cfg.dropout, rng)?;
    Ok(TrainExample { z1: ex.z1, inputs })
}

pub fn standard_normal<F: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::from_vec(shape, data).expect("positive extents")
}

/// Weighted flow-matching loss of one element recorded on `tape`.
pub fn element_loss_tape<F: Real>(
    tape: &mut Tape<F>,
    bound: &crate::autodiff::BoundParams,
    model: &ModelConfig,
    el: &TrainExample,
    z0: &Tensor<F>,
    t: f64,
    cfg: &TrainConfig,
) -> Result<Var> {
    let z1: Tensor<F> = el.z1.cast();
    let zt = tape.constant(interpolate(z0, &z1, t, cfg.sigma_min)?);
    let u = tape.constant(target_velocity(z0, &z1, cfg.sigma_min)?);
    let v = forward_tape(tape, bound, model, zt, t, &el.inputs)?;
    let d = tape.sub(v, u)?;
    let sq = tape.mul(d, d)?;
    let mse = tape.mean(sq);
    Ok(tape.scale(mse, F::lit(cfg.weighting.weight(t))))
}

/// Loss and summed gradients of one batch, accumulated in element order.
pub fn batch_gradients<F: Real>(
    params: &Params<F>,
    model: &ModelConfig,
    batch: &[(TrainExample, Tensor<F>, f64)],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor<F>>)> {
    let mut grads: Vec<Tensor<F>> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let inv_b = F::lit(1.0 / batch.len() as f64);
    let mut loss = 0.0;
    for (el, z0, t) in batch {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let l = element_loss_tape(&mut tape, &bound, model, el, z0, *t, cfg)?;
        loss += tape.value(l).item().to_f64().unwrap_or(f64::NAN);
        let mut g = tape.backward(l)?;
        for (acc, &v) in grads.iter_mut().zip(bound.vars()) {
            if let Some(gv) = g.take(v) {
                acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, &b)| *a = *a + b * inv_b);
            }
        }
    }
    Ok((loss / batch.len() as f64, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub skipped: usize,
}

pub const LOG_HEADER: &str = "step,loss,lr,grad_norm,skipped";

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub params: Params<F>,
    /// Loss of every step; `NaN` for skipped steps.
    pub losses: Vec<f64>,
    pub log: Vec<LogRow>,
    pub skipped: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Where the loop writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("ckpt_{step:06}.bin"))
    }
}

/// Run the optimization. Every step is appended to the CSV log; every
/// `log_every` steps (and the last) go to `progress` and `TrainOutcome::log`.
/// Deterministic for a given seed: batches, dropout,
/// `t` and `z0` all come from one seeded stream, and gradients are reduced
/// in element order.
pub fn train_loop<F: Real>(
    examples: &[TrainExample],
    model: &ModelConfig,
    init: Params<F>,
    cfg: &TrainConfig,
    seed: u64,
    output: Option<&TrainOutput>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    model.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut log_file = match output {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.log_path();
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init;
    let mut adam = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let max_skipped = (cfg.max_skip_fraction * cfg.steps as f64).floor() as usize;
    let mut outcome = TrainOutcome {
        params: Params::new(),
        losses: Vec::with_capacity(cfg.steps),
        log: Vec::new(),
        skipped: 0,
        checkpoints: Vec::new(),
    };
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ex = &examples[rng.gen_range(0..examples.len())];
            let el = draw_element(ex, cfg, &mut rng)?;
            let t: f64 = rng.gen();
            let z0 = standard_normal::<F, _>(el.z1.shape(), &mut rng);
            batch.push((el, z0, t));
        }
        let lr = learning_rate(step, cfg);
        let result = match batch_gradients(&params, model, &batch, cfg) {
            Ok(r) => Some(r),
            Err(Error::NonFinite(_)) => None,
            Err(e) => return Err(e),
        };
        let (loss, grad_norm) = match result {
            Some((loss, mut grads)) if loss.is_finite() && grads.iter().all(Tensor::is_finite) => {
                let norm = clip_global_norm(&mut grads, cfg.clip_norm);
                adam.step(&mut params, &grads, lr)?;
                (loss, norm)
            }
            _ => {
                outcome.skipped += 1;
                if outcome.skipped > max_skipped {
                    return Err(Error::NonFinite(format!(
                        "{} of {} steps skipped for non-finite loss, limit {}",
                        outcome.skipped, cfg.steps, max_skipped
                    )));
                }
                (f64::NAN, f64::NAN)
            }
        };
        outcome.losses.push(loss);
        let row = LogRow {
            step,
            loss,
            lr,
            grad_norm,
            skipped: outcome.skipped,
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{},{},{},{},{}", row.step, row.loss, row.lr, row.grad_norm, row.skipped)
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            outcome.log.push(row);
            progress(&row);
        }
        if let Some(o) = output {
            if (step + 1) % cfg.checkpoint_every == 0 {
                let path = o.checkpoint_path(step + 1);
                params.save(&path)?;
                outcome.checkpoints.push(path);
            }
        }
    }
    outcome.params = params;
    Ok(outcome)
}

/// Trailing moving average with window `w` (first value at index `w - 1`).
pub fn smoothed(values: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || values.len() < w {
        return Vec::new();
    }
    values.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).collect()
}
