//! Transformer vector field `v(z_t, t | conditions)`.
//!
//! Local controls are concatenated to the latent along channels (or, in the
//! ablation arm, pooled into extra cross-attention memory tokens). Self
//! attention uses symmetric ALiBi biases; a depthwise convolution supplies
//! positional information; down/up block pairs are joined by
//! concatenation followed by a linear projection; every block may
//! cross-attend to two learned tokens per style tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, BoundParams, Params, Real, Tape, Tensor, Var};
use crate::conditioning::{
    input_width, melody_matrix, ConditionInputs, AUDIO_PROJ, CHORD_TABLE, DRUMS_PROJ, D_AUD, D_CRD, D_DRM, D_MLD,
    MELODY_PROJ,
};
use crate::error::{Error, Result};
use crate::synth::{MELODY_BINS, NUM_CHORDS, NUM_STYLES};

pub const STYLE_TOKENS: usize = 2;
pub const TIME_EMBED_DIM: usize = 64;
/// Memory tokens the local controls are pooled into in the cross-attention
/// conditioning arm.
pub const POOLED_CONTROL_TOKENS: usize = 32;

/// Which blocks cross-attend to the style tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossAttention {
    Every,
    Alternate,
    Off,
}

/// How local controls reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Concat,
    CrossAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub conv_pos_kernel: usize,
    pub n_enc: usize,
    pub cross_attention: CrossAttention,
    pub conditioning: Conditioning,
}

impl ModelConfig {
    pub fn toy(n_enc: usize) -> Self {
        Self {
            layers: 4,
            heads: 4,
            model_dim: 128,
            ffn_dim: 512,
            conv_pos_kernel: 15,
            n_enc,
            cross_attention: CrossAttention::Every,
            conditioning: Conditioning::Concat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers % 2 != 0 {
            return Err(Error::invalid(format!("layers must be even and positive, got {}", self.layers)));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.conv_pos_kernel % 2 == 0 {
            return Err(Error::invalid("conv_pos_kernel must be odd"));
        }
        if self.n_enc == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid("zero-sized model dimension"));
        }
        Ok(())
    }

    pub fn alibi_slopes(&self) -> Vec<f64> {
        alibi_slopes(self.heads)
    }

    fn block_cross_attends(&self, block: usize) -> bool {
        match self.cross_attention {
            CrossAttention::Every => true,
            CrossAttention::Alternate => block % 2 == 0,
            CrossAttention::Off => false,
        }
    }

    fn uses_memory(&self, block: usize) -> bool {
        self.block_cross_attends(block) || self.conditioning == Conditioning::CrossAttention
    }

    fn model_input_width(&self) -> usize {
        match self.conditioning {
            Conditioning::Concat => input_width(self.n_enc),
            Conditioning::CrossAttention => self.n_enc,
        }
    }
}

/// `m_h = 2^(-8h/H)` for `h = 1..=H`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads).map(|h| 2f64.powf(-8.0 * h as f64 / heads as f64)).collect()
}

/// `bias[h][i][j] = -m_h |i - j|`, one `T x T` matrix per head.
pub fn alibi_bias(t: usize, slopes: &[f64]) -> Vec<Tensor<f64>> {
    slopes
        .iter()
        .map(|&m| {
            let data = (0..t * t)
                .map(|k| -m * ((k / t) as f64 - (k % t) as f64).abs())
                .collect();
            Tensor::from_vec(&[t.max(1), t.max(1)], data).expect("square bias")
        })
        .collect()
}

/// `x + depthwise_conv(x, w)` with same padding.
pub fn conv_positional<F: Real>(tape: &mut Tape<F>, x: Var, w: Var) -> Result<Var> {
    let c = tape.conv1d_depthwise(x, w)?;
    tape.add(x, c)
}

/// Sinusoidal features of `1000 t`, `[1, TIME_EMBED_DIM]`.
pub fn time_features<F: Real>(t: f64) -> Tensor<F> {
    let half = TIME_EMBED_DIM / 2;
    let s = 1000.0 * t;
    let mut v = Vec::with_capacity(TIME_EMBED_DIM);
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        v.push(F::lit((s * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        v.push(F::lit((s * freq).cos()));
    }
    Tensor::from_vec(&[1, TIME_EMBED_DIM], v).expect("fixed size")
}

fn block_names(i: usize) -> BlockNames {
    let p = |s: &str| format!("block{i}.{s}");
    BlockNames {
        wq: p("attn.wq"),
        wk: p("attn.wk"),
        wv: p("attn.wv"),
        wo: p("attn.wo"),
        bq: p("attn.bq"),
        bk: p("attn.bk"),
        bv: p("attn.bv"),
        bo: p("attn.bo"),
        xq: p("cross.wq"),
        xk: p("cross.wk"),
        xv: p("cross.wv"),
        xo: p("cross.wo"),
        f1: p("ffn.w1"),
        fb1: p("ffn.b1"),
        f2: p("ffn.w2"),
        fb2: p("ffn.b2"),
    }
}

struct BlockNames {
    wq: String,
    wk: String,
    wv: String,
    wo: String,
    bq: String,
    bk: String,
    bv: String,
    bo: String,
    xq: String,
    xk: String,
    xv: String,
    xo: String,
    f1: String,
    fb1: String,
    f2: String,
    fb2: String,
}

/// Seeded initialization of every parameter, including the condition
/// tables and projections.
pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<Params<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    let mut normal = |shape: &[usize], std: f64| -> Tensor<F> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| F::lit(dist.sample(&mut rng))).collect();
        Tensor::from_vec(shape, data).expect("positive extents")
    };
    let d = cfg.model_dim;
    let resid = 1.0 / (2.0 * cfg.layers as f64).sqrt();
    let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    p.insert(CHORD_TABLE, normal(&[NUM_CHORDS, D_CRD], 1.0));
    p.insert(MELODY_PROJ, normal(&[MELODY_BINS, D_MLD], 1.0));
    p.insert(AUDIO_PROJ, normal(&[cfg.n_enc, D_AUD], lin(cfg.n_enc)));
    p.insert(DRUMS_PROJ, normal(&[cfg.n_enc, D_DRM], lin(cfg.n_enc)));

    let w_in = cfg.model_input_width();
    p.insert("in.w", normal(&[w_in, d], lin(w_in)));
    p.insert("in.b", Tensor::zeros(&[1, d]));
    p.insert("pos.w", normal(&[cfg.conv_pos_kernel, d], 0.02));
    p.insert("time.w1", normal(&[TIME_EMBED_DIM, d], lin(TIME_EMBED_DIM)));
    p.insert("time.b1", Tensor::zeros(&[1, d]));
    p.insert("time.w2", normal(&[d, d], lin(d)));
    p.insert("time.b2", Tensor::zeros(&[1, d]));
    p.insert("style.tokens", normal(&[NUM_STYLES * STYLE_TOKENS, d], 1.0));
    if cfg.conditioning == Conditioning::CrossAttention {
        let w = D_CRD + D_MLD + D_AUD + D_DRM + cfg.n_enc;
        p.insert("mem.w", normal(&[w, d], lin(w)));
    }
    for i in 0..cfg.layers {
        let n = block_names(i);
        for name in [&n.wq, &n.wk, &n.wv] {
            p.insert(name.as_str(), normal(&[d, d], lin(d)));
        }
        p.insert(n.wo.as_str(), normal(&[d, d], lin(d) * resid));
        for name in [&n.bq, &n.bk, &n.bv, &n.bo] {
            p.insert(name.as_str(), Tensor::zeros(&[1, d]));
        }
        if cfg.uses_memory(i) {
            for name in [&n.xq, &n.xk, &n.xv] {
                p.insert(name.as_str(), normal(&[d, d], lin(d)));
            }
            p.insert(n.xo.as_str(), normal(&[d, d], lin(d) * resid));
        }
        p.insert(n.f1.as_str(), normal(&[d, cfg.ffn_dim], lin(d)));
        p.insert(n.fb1.as_str(), Tensor::zeros(&[1, cfg.ffn_dim]));
        p.insert(n.f2.as_str(), normal(&[cfg.ffn_dim, d], lin(cfg.ffn_dim) * resid));
        p.insert(n.fb2.as_str(), Tensor::zeros(&[1, d]));
    }
    for j in 0..cfg.layers / 2 {
        p.insert(format!("skip{j}.w"), normal(&[2 * d, d], lin(2 * d)));
        p.insert(format!("skip{j}.b"), Tensor::zeros(&[1, d]));
    }
    p.insert("out.w", normal(&[d, cfg.n_enc], lin(d) * 0.1));
    p.insert("out.b", Tensor::zeros(&[1, cfg.n_enc]));
    Ok(p)
}

fn linear<F: Real>(tape: &mut Tape<F>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Multi-head attention of `q` (`T x D`) over `k`, `v` (`M x D`), with an
/// optional per-head additive bias.
fn attention<F: Real>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<&[Var]>,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, h * dh, dh, Axis::Cols)?;
        let kh = tape.slice(k, h * dh, dh, Axis::Cols)?;
        let vh = tape.slice(v, h * dh, dh, Axis::Cols)?;
        let s = tape.matmul_t(qh, kh)?;
        let mut s = tape.scale(s, scale);
        if let Some(b) = bias {
            s = tape.add(s, b[h])?;
        }
        let p = tape.softmax(s)?;
        outs.push(tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, Axis::Cols)
    }
}

/// Projected local controls on the tape, `[c_crd | c_mld | c_aud | c_drm | c_iop]`.
fn control_vars<F: Real>(tape: &mut Tape<F>, p: &BoundParams, cs: &ConditionInputs, n_enc: usize) -> Result<Vec<Var>> {
    let t = cs.frames;
    let crd = match &cs.chords {
        Some(l) => {
            let idx: Vec<usize> = l.iter().map(|c| c.0 as usize).collect();
            tape.gather(p.var(CHORD_TABLE), &idx)?
        }
        None => tape.constant(Tensor::zeros(&[t, D_CRD])),
    };
    let mld = match &cs.melody {
        Some(m) => {
            let oh = tape.constant(melody_matrix(m));
            tape.matmul(oh, p.var(MELODY_PROJ))?
        }
        None => tape.constant(Tensor::zeros(&[t, D_MLD])),
    };
    let mut proj = |x: &Option<Tensor<f64>>, name: &str, width: usize| -> Result<Var> {
        match x {
            Some(x) => {
                let c = tape.constant(x.cast());
                tape.matmul(c, p.var(name))
            }
            None => Ok(tape.constant(Tensor::zeros(&[t, width]))),
        }
    };
    let aud = proj(&cs.audio, AUDIO_PROJ, D_AUD)?;
    let drm = proj(&cs.drums, DRUMS_PROJ, D_DRM)?;
    let iop = match &cs.iop {
        Some(x) => tape.constant(x.cast()),
        None => tape.constant(Tensor::zeros(&[t, n_enc])),
    };
    Ok(vec![crd, mld, aud, drm, iop])
}

/// Record the full forward pass; returns `v` of shape `T x n_enc`.
pub fn forward_tape<F: Real>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    z_t: Var,
    t: f64,
    cs: &ConditionInputs,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
    }
    let frames = tape.value(z_t).rows();
    if tape.value(z_t).cols() != cfg.n_enc || frames != cs.frames {
        return Err(Error::shape(
            "forward",
            format!("z_t {:?} vs T = {}, n_enc = {}", tape.value(z_t).shape(), cs.frames, cfg.n_enc),
        ));
    }
    cs.validate(cfg.n_enc)?;
    let d = cfg.model_dim;

    let controls = control_vars(tape, p, cs, cfg.n_enc)?;
    let (x_in, pooled) = match cfg.conditioning {
        Conditioning::Concat => {
            let mut parts = vec![z_t];
            parts.extend(&controls);
            (tape.concat(&parts, Axis::Cols)?, None)
        }
        Conditioning::CrossAttention => {
            let c = tape.concat(&controls, Axis::Cols)?;
            let window = frames.div_ceil(POOLED_CONTROL_TOKENS);
            let pooled = tape.block_mean(c, window)?;
            (z_t, Some(tape.matmul(pooled, p.var("mem.w"))?))
        }
    };
    let mut x = linear(tape, x_in, p.var("in.w"), Some(p.var("in.b")))?;
    x = conv_positional(tape, x, p.var("pos.w"))?;

    let tf = tape.constant(time_features(t));
    let h = linear(tape, tf, p.var("time.w1"), Some(p.var("time.b1")))?;
    let h = tape.gelu(h);
    let temb = linear(tape, h, p.var("time.w2"), Some(p.var("time.b2")))?;
    x = tape.add(x, temb)?;

    let style = match cs.style {
        Some(s) if (s as usize) < NUM_STYLES => {
            let idx: Vec<usize> = (0..STYLE_TOKENS).map(|k| s as usize * STYLE_TOKENS + k).collect();
            tape.gather(p.var("style.tokens"), &idx)?
        }
        Some(s) => return Err(Error::invalid(format!("style tag {s} out of range"))),
        None => tape.constant(Tensor::zeros(&[STYLE_TOKENS, d])),
    };
    let memory = match pooled {
        Some(pm) => tape.concat(&[style, pm], Axis::Rows)?,
        None => style,
    };

    let bias: Vec<Var> = alibi_bias(frames, &cfg.alibi_slopes())
        .into_iter()
        .map(|b| tape.constant(b.cast()))
        .collect();

    let half = cfg.layers / 2;
    let mut stored = Vec::with_capacity(half);
    for i in 0..cfg.layers {
        if i >= half {
            let j = i - half;
            let mirror = stored[half - 1 - j];
            let cat = tape.concat(&[x, mirror], Axis::Cols)?;
            x = linear(tape, cat, p.var(&format!("skip{j}.w")), Some(p.var(&format!("skip{j}.b"))))?;
        }
        x = block(tape, p, cfg, i, x, memory, &bias)?;
        if i < half {
            stored.push(x);
        }
    }
    let x = tape.layer_norm(x)?;
    let v = linear(tape, x, p.var("out.w"), Some(p.var("out.b")))?;
    if !tape.value(v).is_finite() {
        return Err(Error::NonFinite("vector field output".into()));
    }
    Ok(v)
}

fn block<F: Real>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    i: usize,
    x: Var,
    memory: Var,
    bias: &[Var],
) -> Result<Var> {
    let n = block_names(i);
    let h = tape.layer_norm(x)?;
    let q = linear(tape, h, p.var(&n.wq), Some(p.var(&n.bq)))?;
    let k = linear(tape, h, p.var(&n.wk), Some(p.var(&n.bk)))?;
    let v = linear(tape, h, p.var(&n.wv), Some(p.var(&n.bv)))?;
    let a = attention(tape, q, k, v, cfg.heads, Some(bias))?;
    let a = linear(tape, a, p.var(&n.wo), Some(p.var(&n.bo)))?;
    let mut x = tape.add(x, a)?;

    if cfg.uses_memory(i) {
        let h = tape.layer_norm(x)?;
        let q = tape.matmul(h, p.var(&n.xq))?;
        let k = tape.matmul(memory, p.var(&n.xk))?;
        let v = tape.matmul(memory, p.var(&n.xv))?;
        let a = attention(tape, q, k, v, cfg.heads, None)?;
        let a = tape.matmul(a, p.var(&n.xo))?;
        x = tape.add(x, a)?;
    }

    let h = tape.layer_norm(x)?;
    let f = linear(tape, h, p.var(&n.f1), Some(p.var(&n.fb1)))?;
    let f = tape.gelu(f);
    let f = linear(tape, f, p.var(&n.f2), Some(p.var(&n.fb2)))?;
    tape.add(x, f)
}

/// Untracked forward pass.
pub fn forward<F: Real>(
    params: &Params<F>,
    cfg: &ModelConfig,
    z_t: &Tensor<F>,
    t: f64,
    cs: &ConditionInputs,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let z = tape.constant(z_t.clone());
    let v = forward_tape(&mut tape, &bound, cfg, z, t, cs)?;
    Ok(tape.value(v).clone())
}
