//! Flat `key = value` run configuration.
//!
//! Every key has a default; unknown or duplicated keys are rejected. The
//! digest covers every resolved value, so two runs with equal digests are
//! the same experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::CodecConfig;
use crate::conditioning::{AudioSource, DropoutPolicy, PaintMode};
use crate::error::{Error, Result};
use crate::model::{Conditioning, CrossAttention, ModelConfig};
use crate::ode::{GuidanceWeights, SolverConfig};
use crate::synth::{hex_digest, NUM_STYLES};
use crate::train::{LossWeighting, TrainConfig};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed: model init, batches, codec fit, generation noise"),
    ("corpus.dir", "runs/corpus", "corpus directory"),
    ("corpus.clips", "2000", "clips to synthesize"),
    ("corpus.seed", "0", "corpus sampling seed"),
    ("corpus.holdout", "64", "trailing clips excluded from training and used for evaluation"),
    ("codec.path", "runs/codec.bin", "codec file"),
    ("codec.n_enc", "16", "latent width"),
    ("codec.codebooks", "4", "RVQ stages K"),
    ("codec.codebook_size", "64", "entries per codebook N"),
    ("codec.fit_clips", "200", "training clips used to fit the codec"),
    ("model.layers", "4", "transformer blocks (even)"),
    ("model.heads", "4", "attention heads"),
    ("model.dim", "128", "model width"),
    ("model.ffn_dim", "512", "feed-forward width"),
    ("model.conv_pos_kernel", "15", "depthwise positional convolution kernel"),
    ("model.cross_attention", "every", "style cross-attention placement: every | alternate | off"),
    ("model.conditioning", "concat", "local control injection: concat | cross_attention"),
    ("train.out", "runs/train", "checkpoint and log directory"),
    ("train.batch_size", "16", "clips per step"),
    ("train.steps", "20000", "optimizer steps"),
    ("train.peak_lr", "1e-4", "learning rate after warmup"),
    ("train.warmup_steps", "500", "linear warmup steps"),
    ("train.clip_norm", "0.2", "global gradient norm bound"),
    ("train.sigma_min", "1e-5", "flow path width at t = 1"),
    ("train.loss_weighting", "one_plus_t", "uniform | one_plus_t"),
    ("train.crop_frames", "0", "random training window in frames, 0 = whole clip"),
    ("train.log_every", "50", "log interval in steps"),
    ("train.checkpoint_every", "1000", "checkpoint interval in steps"),
    ("train.max_skip_fraction", "0.01", "abort when more steps than this are skipped"),
    ("train.audio_source", "mix", "audio control source: mix | drumless"),
    ("dropout.p_all", "0.2", "probability of dropping every condition"),
    ("dropout.p_each", "0.5", "per-control drop probability"),
    ("dropout.p_iop", "0.7", "in/out-painting control drop probability"),
    ("solver.rtol", "1e-5", "relative tolerance"),
    ("solver.atol", "1e-5", "absolute tolerance"),
    ("solver.max_steps", "1000", "attempted step bound"),
    ("guidance.text", "0.5", "weight of the style-only field"),
    ("guidance.local", "0", "weight of the local-only field"),
    ("guidance.both", "1.5", "weight of the fully conditioned field"),
    ("generate.checkpoint", "", "parameters to sample from, empty = <train.out>/final.bin"),
    ("generate.out", "runs/generate", "output directory"),
    ("generate.samples", "1", "samples, seeds seed..seed+samples"),
    ("generate.frames", "125", "latent frames T"),
    ("generate.style", "none", "style tag 0..7 or none"),
    ("generate.chords", "", "annotation JSON or per-frame label array"),
    ("generate.melody", "", "annotation JSON or per-frame bin array (null = rest)"),
    ("generate.audio", "", "WAV for the audio control"),
    ("generate.drums", "", "WAV for the drum control"),
    ("generate.iop", "", "WAV for the in/out-painting control"),
    ("generate.iop_mode", "inpaint", "inpaint | outpaint"),
    ("generate.iop_fraction", "0.5", "masked fraction in [0.4, 0.9]"),
    ("evaluate.generated", "runs/generate", "directory of generated <clip id>.wav files"),
    ("evaluate.out", "runs/report.json", "report path"),
    ("ablate.out", "runs/ablate", "ablation output directory"),
    ("ablate.eval_clips", "16", "held-out clips generated per arm"),
    ("melody.threshold", "0.5", "saliency binarization threshold"),
];

pub fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect(),
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Format {
        what: "config",
        detail: format!("{key} = {value:?}: {why}"),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "config",
                detail: format!("line {}: expected key = value", n + 1),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Format {
                    what: "config",
                    detail: format!("line {}: duplicate key {k}", n + 1),
                });
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Set one key, validating both the key and its value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(Error::Format {
                what: "config",
                detail: format!("unknown key {key}"),
            });
        }
        let old = self.values.insert(key.to_string(), value.to_string());
        if let Err(e) = self.check(key) {
            if let Some(old) = old {
                self.values.insert(key.to_string(), old);
            }
            return Err(e);
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key has a value")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| bad(key, v, e))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    /// `None` when the key is empty.
    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn check(&self, key: &str) -> Result<()> {
        let v = self.raw(key);
        let positive = |x: usize| if x == 0 { Err(bad(key, v, "must be positive")) } else { Ok(()) };
        match key {
            "seed" | "corpus.seed" => self.get::<u64>(key).map(drop),
            "corpus.holdout" | "train.crop_frames" => self.get::<usize>(key).map(drop),
            "corpus.clips" | "codec.n_enc" | "codec.codebooks" | "codec.codebook_size" | "codec.fit_clips"
            | "model.layers" | "model.heads" | "model.dim" | "model.ffn_dim" | "model.conv_pos_kernel"
            | "train.batch_size" | "train.steps" | "train.log_every" | "train.checkpoint_every"
            | "solver.max_steps" | "generate.samples" | "generate.frames" | "ablate.eval_clips" => {
                positive(self.get::<usize>(key)?)
            }
            "train.warmup_steps" => self.get::<usize>(key).map(drop),
            "model.cross_attention" => self.cross_attention().map(drop),
            "model.conditioning" => self.conditioning().map(drop),
            "train.loss_weighting" => self.loss_weighting().map(drop),
            "train.audio_source" => self.audio_source().map(drop),
            "generate.iop_mode" => self.paint_mode().map(drop),
            "generate.style" => self.style().map(drop),
            k if k.ends_with(".dir")
                || k.ends_with(".out")
                || k.ends_with(".path")
                || k.starts_with("generate.")
                || k == "evaluate.generated" =>
            {
                Ok(())
            }
            _ => {
                let x: f64 = self.get(key)?;
                if x.is_finite() {
                    Ok(())
                } else {
                    Err(bad(key, v, "must be finite"))
                }
            }
        }
    }

    /// Canonical `key=value` lines over every key, in key order.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn digest(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }

    /// A commented file listing every key at its current value.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|(k, _, doc)| format!("# {doc}\n{k} = {}\n", self.raw(k)))
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    fn cross_attention(&self) -> Result<CrossAttention> {
        match self.raw("model.cross_attention") {
            "every" => Ok(CrossAttention::Every),
            "alternate" => Ok(CrossAttention::Alternate),
            "off" => Ok(CrossAttention::Off),
            v => Err(bad("model.cross_attention", v, "expected every | alternate | off")),
        }
    }

    fn conditioning(&self) -> Result<Conditioning> {
        match self.raw("model.conditioning") {
            "concat" => Ok(Conditioning::Concat),
            "cross_attention" => Ok(Conditioning::CrossAttention),
            v => Err(bad("model.conditioning", v, "expected concat | cross_attention")),
        }
    }

    fn loss_weighting(&self) -> Result<LossWeighting> {
        match self.raw("train.loss_weighting") {
            "uniform" => Ok(LossWeighting::Uniform),
            "one_plus_t" => Ok(LossWeighting::OnePlusT),
            v => Err(bad("train.loss_weighting", v, "expected uniform | one_plus_t")),
        }
    }

    pub fn audio_source(&self) -> Result<AudioSource> {
        match self.raw("train.audio_source") {
            "mix" => Ok(AudioSource::Mix),
            "drumless" => Ok(AudioSource::Drumless),
            v => Err(bad("train.audio_source", v, "expected mix | drumless")),
        }
    }

    pub fn paint_mode(&self) -> Result<PaintMode> {
        match self.raw("generate.iop_mode") {
            "inpaint" => Ok(PaintMode::Inpaint),
            "outpaint" => Ok(PaintMode::Outpaint),
            v => Err(bad("generate.iop_mode", v, "expected inpaint | outpaint")),
        }
    }

    pub fn style(&self) -> Result<Option<u8>> {
        let v = self.raw("generate.style");
        if v == "none" {
            return Ok(None);
        }
        match v.parse::<u8>() {
            Ok(s) if (s as usize) < NUM_STYLES => Ok(Some(s)),
            _ => Err(bad("generate.style", v, format!("expected none or 0..{}", NUM_STYLES - 1))),
        }
    }

    pub fn codec_config(&self) -> Result<CodecConfig> {
        Ok(CodecConfig {
            n_enc: self.get("codec.n_enc")?,
            codebooks: self.get("codec.codebooks")?,
            codebook_size: self.get("codec.codebook_size")?,
            seed: self.seed()?,
            ..CodecConfig::default()
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = ModelConfig {
            layers: self.get("model.layers")?,
            heads: self.get("model.heads")?,
            model_dim: self.get("model.dim")?,
            ffn_dim: self.get("model.ffn_dim")?,
            conv_pos_kernel: self.get("model.conv_pos_kernel")?,
            n_enc: self.get("codec.n_enc")?,
            cross_attention: self.cross_attention()?,
            conditioning: self.conditioning()?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let crop: usize = self.get("train.crop_frames")?;
        let steps: usize = self.get("train.steps")?;
        let warmup: usize = self.get("train.warmup_steps")?;
        let t = TrainConfig {
            batch_size: self.get("train.batch_size")?,
            steps,
            peak_lr: self.get("train.peak_lr")?,
            // Short runs keep the schedule shape: warmup is capped at the run length.
            warmup_steps: warmup.min(steps),
            clip_norm: self.get("train.clip_norm")?,
            sigma_min: self.get("train.sigma_min")?,
            weighting: self.loss_weighting()?,
            dropout: DropoutPolicy {
                p_all: self.get("dropout.p_all")?,
                p_each: self.get("dropout.p_each")?,
                p_iop: self.get("dropout.p_iop")?,
            },
            crop_frames: (crop > 0).then_some(crop),
            log_every: self.get("train.log_every")?,
            checkpoint_every: self.get("train.checkpoint_every")?,
            max_skip_fraction: self.get("train.max_skip_fraction")?,
            ..TrainConfig::default()
        };
        t.validate()?;
        Ok(t)
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let s = SolverConfig {
            rtol: self.get("solver.rtol")?,
            atol: self.get("solver.atol")?,
            max_steps: self.get("solver.max_steps")?,
            ..SolverConfig::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn guidance(&self) -> Result<GuidanceWeights> {
        Ok(GuidanceWeights {
            text: self.get("guidance.text")?,
            local: self.get("guidance.local")?,
            both: self.get("guidance.both")?,
        })
    }

    pub fn melody_threshold(&self) -> Result<f64> {
        let t: f64 = self.get("melody.threshold")?;
        if t > 0.0 && t < 1.0 {
            Ok(t)
        } else {
            Err(bad("melody.threshold", self.raw("melody.threshold"), "must be in (0, 1)"))
        }
    }
}
