//! Dormand–Prince 4(5) integration and guided sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::HOP;
use crate::autodiff::{Params, Real, Tensor};
use crate::codec::Codec;
use crate::conditioning::ConditionInputs;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig};
use crate::train::standard_normal;

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (the propagated solution).
const B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Embedded fourth-order weights.
const B_HAT: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    /// First trial step; `None` tries the whole interval.
    pub initial_step: Option<f64>,
    /// Bound on attempted (accepted plus rejected) steps.
    pub max_steps: usize,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-5,
            initial_step: None,
            max_steps: 1000,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 5.0,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerance(tol: f64) -> Self {
        Self { rtol: tol, atol: tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be positive"));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) {
                return Err(Error::invalid("initial step must be positive"));
            }
        }
        if !(self.safety > 0.0 && self.min_factor > 0.0 && self.min_factor <= 1.0 && self.max_factor >= 1.0) {
            return Err(Error::invalid("invalid step-size controller settings"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub evaluations: usize,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub state: Vec<f64>,
    pub stats: SolveStats,
}

fn axpy_stages(y: &[f64], h: f64, weights: &[f64], k: &[Vec<f64>]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (w, ki) in weights.iter().zip(k) {
        if *w != 0.0 {
            let s = h * w;
            out.iter_mut().zip(ki).for_each(|(o, &v)| *o += s * v);
        }
    }
    out
}

fn finite_or_fail(v: Vec<f64>, steps: usize, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Solver {
            steps,
            t,
            reason: "non-finite stage derivative".into(),
            state: y.to_vec(),
        })
    }
}

/// One Dormand–Prince step from `(t, y)` with size `h`, given `k1 = f(t, y)`.
/// Returns the stage derivatives; `k[6]` is `f` at the fifth-order result.
fn stages<Fn>(f: &mut Fn, t: f64, y: &[f64], h: f64, k1: Vec<f64>, steps: usize, stats: &mut SolveStats) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    Fn: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let mut k = Vec::with_capacity(7);
    k.push(k1);
    for s in 1..7 {
        let ys = axpy_stages(y, h, &A[s][..s], &k);
        // c = 1 stages land exactly on t + h, so a clipped final step hits t1.
        let ts = if C[s] == 1.0 { t + h } else { t + C[s] * h };
        stats.evaluations += 1;
        let ks = finite_or_fail(f(ts, &ys)?, steps, t, y)?;
        if s == 6 {
            k.push(ks);
            return Ok((ys, k));
        }
        k.push(ks);
    }
    unreachable!()
}

/// Adaptive integration of `dy/dt = f(t, y)` from `t0` to `t1`.
///
/// Steps are accepted when the RMS of `err_i / (atol + rtol max(|y_i|, |y_new_i|))`
/// is at most 1; step sizes follow `safety * norm^(-1/5)` clamped to the
/// configured factors. `f` is only evaluated inside `[t0, t1]`.
pub fn dopri5_solve<Fn>(mut f: Fn, y0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Solution>
where
    Fn: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if !(t1 > t0) {
        return Err(Error::invalid(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    let span = t1 - t0;
    let mut stats = SolveStats::default();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut h = cfg.initial_step.unwrap_or(span).min(span);
    stats.evaluations += 1;
    let mut k1 = finite_or_fail(f(t, &y)?, 0, t, &y)?;
    let n = y.len().max(1) as f64;
    loop {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(Error::Solver {
                steps: stats.accepted + stats.rejected,
                t,
                reason: format!("max_steps {} exceeded (last h = {h:e})", cfg.max_steps),
                state: y,
            });
        }
        // A shortfall at rounding level would otherwise cost an extra
        // sliver step.
        let last = t1 - (t + h) <= 8.0 * f64::EPSILON * span.max(t1.abs());
        if last {
            h = t1 - t;
        }
        let (y_new, k) = stages(&mut f, t, &y, h, k1.clone(), stats.accepted + stats.rejected, &mut stats)?;
        let mut acc = 0.0;
        for i in 0..y.len() {
            let err: f64 = h * (0..7).map(|s| (B[s] - B_HAT[s]) * k[s][i]).sum::<f64>();
            let scale = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
            acc += (err / scale).powi(2);
        }
        let norm = (acc / n).sqrt();
        if !norm.is_finite() {
            return Err(Error::Solver {
                steps: stats.accepted + stats.rejected,
                t,
                reason: "non-finite error estimate".into(),
                state: y,
            });
        }
        let factor = if norm == 0.0 {
            cfg.max_factor
        } else {
            (cfg.safety * norm.powf(-0.2)).clamp(cfg.min_factor, cfg.max_factor)
        };
        if norm <= 1.0 {
            stats.accepted += 1;
            y = y_new;
            if last {
                return Ok(Solution { state: y, stats });
            }
            t += h;
            k1 = k.into_iter().nth(6).expect("seven stages");
            h *= factor;
        } else {
            stats.rejected += 1;
            h *= factor.min(1.0);
            if t + h == t {
                return Err(Error::Solver {
                    steps: stats.accepted + stats.rejected,
                    t,
                    reason: "step size underflow".into(),
                    state: y,
                });
            }
        }
    }
}

/// `n` equal fifth-order Dormand–Prince steps without error control.
pub fn dopri5_fixed<Fn>(mut f: Fn, y0: &[f64], t0: f64, t1: f64, n: usize) -> Result<Solution>
where
    Fn: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if n == 0 || !(t1 > t0) {
        return Err(Error::invalid("need n > 0 and t1 > t0"));
    }
    let mut stats = SolveStats::default();
    let mut y = y0.to_vec();
    let h = (t1 - t0) / n as f64;
    stats.evaluations += 1;
    let mut k1 = finite_or_fail(f(t0, &y)?, 0, t0, &y)?;
    for i in 0..n {
        let t = t0 + i as f64 * h;
        let h_i = if i + 1 == n { t1 - t } else { h };
        let (y_new, k) = stages(&mut f, t, &y, h_i, k1, i, &mut stats)?;
        y = y_new;
        k1 = k.into_iter().nth(6).expect("seven stages");
        stats.accepted += 1;
    }
    Ok(Solution { state: y, stats })
}

/// Classifier-free guidance weights for the style-only, local-only and
/// combined condition subsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceWeights {
    pub text: f64,
    pub local: f64,
    pub both: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self { text: 0.5, local: 0.0, both: 1.5 }
    }
}

impl GuidanceWeights {
    pub const CONDITIONAL: Self = Self { text: 0.0, local: 0.0, both: 1.0 };
    pub const UNCONDITIONAL: Self = Self { text: 0.0, local: 0.0, both: 0.0 };

    pub fn unconditional_coefficient(&self) -> f64 {
        1.0 - self.text - self.local - self.both
    }

    pub fn validate(&self) -> Result<()> {
        if [self.text, self.local, self.both].iter().all(|a| a.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("guidance weights must be finite"))
        }
    }

    /// Condition subsets with nonzero coefficients, in the fixed order
    /// unconditional, style only, local only, both.
    pub fn terms(&self, cs: &ConditionInputs) -> Vec<(f64, ConditionInputs)> {
        let candidates = [
            (self.unconditional_coefficient(), ConditionInputs::empty(cs.frames)),
            (self.text, cs.without_local()),
            (self.local, cs.without_style()),
            (self.both, cs.clone()),
        ];
        candidates.into_iter().filter(|(a, _)| *a != 0.0).collect()
    }
}

/// Model evaluations one guided field call costs.
pub fn evaluations_per_field(w: &GuidanceWeights) -> usize {
    w.terms(&ConditionInputs::empty(1)).len()
}

/// `sum_k alpha_k v(z, t | subset_k)` over the nonzero terms.
pub fn guided_field<F: Real>(
    params: &Params<F>,
    model: &ModelConfig,
    z: &Tensor<f64>,
    t: f64,
    cs: &ConditionInputs,
    w: &GuidanceWeights,
) -> Result<Tensor<f64>> {
    w.validate()?;
    let zf: Tensor<F> = z.cast();
    let mut out = Tensor::<f64>::zeros(z.shape());
    for (alpha, subset) in w.terms(cs) {
        let v = forward(params, model, &zf, t, &subset)?;
        for (o, &x) in out.data_mut().iter_mut().zip(v.data()) {
            *o += alpha * x.to_f64().unwrap_or(f64::NAN);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub latent: Tensor<f64>,
    pub waveform: Vec<f32>,
    pub stats: SolveStats,
    /// Model evaluations, `stats.evaluations` times the guided terms.
    pub model_evaluations: usize,
}

/// Initial noise for a seed.
pub fn prior_sample(frames: usize, n_enc: usize, seed: u64) -> Tensor<f64> {
    standard_normal(&[frames, n_enc], &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Integrate the guided field from `z0 ~ N(0, I)` (drawn from `seed`) to
/// `t = 1`; the latent is decoded when a codec is supplied.
pub fn generate<F: Real>(
    params: &Params<F>,
    model: &ModelConfig,
    cs: &ConditionInputs,
    seed: u64,
    w: &GuidanceWeights,
    solver: &SolverConfig,
    codec: Option<&Codec>,
) -> Result<Generation> {
    cs.validate(model.n_enc)?;
    let (frames, n_enc) = (cs.frames, model.n_enc);
    let z0 = prior_sample(frames, n_enc, seed);
    let field = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let z = Tensor::from_vec(&[frames, n_enc], y.to_vec())?;
        Ok(guided_field(params, model, &z, t, cs, w)?.into_data())
    };
    let sol = dopri5_solve(field, z0.data(), 0.0, 1.0, solver)?;
    let latent = Tensor::from_vec(&[frames, n_enc], sol.state)?;
    let waveform = match codec {
        Some(c) => c.decode(&latent, frames * HOP)?,
        None => Vec::new(),
    };
    Ok(Generation {
        latent,
        waveform,
        model_evaluations: sol.stats.evaluations * evaluations_per_field(w),
        stats: sol.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Conditioning, CrossAttention};
    use crate::synth::ChordLabel;

    #[test]
    fn tableau_consistency() {
        for s in 0..7 {
            let row: f64 = A[s].iter().sum();
            assert!((row - C[s]).abs() < 1e-14, "row {s}");
        }
        assert!((B.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((B_HAT.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn constant_and_polynomial_fields() {
        let cfg = SolverConfig::default();
        let sol = dopri5_solve(|_, _| Ok(vec![3.0, -1.5]), &[1.0, 2.0], 0.0, 1.0, &cfg).unwrap();
        assert_eq!(sol.stats.accepted, 1);
        assert!((sol.state[0] - 4.0).abs() < 1e-15 && (sol.state[1] - 0.5).abs() < 1e-15);
        let sol = dopri5_solve(|t, _| Ok(vec![2.0 * t]), &[0.0], 0.0, 1.0, &cfg).unwrap();
        assert!((sol.state[0] - 1.0).abs() < 1e-15);
        // -0.7 + 2.3 rounds below 1.6; still one step.
        let cubic = dopri5_solve(|t, _| Ok(vec![3.0 * t * t]), &[0.0], -0.7, 1.6, &SolverConfig::default()).unwrap();
        assert_eq!((cubic.stats.accepted, cubic.stats.rejected), (1, 0));
        assert!((cubic.state[0] - (1.6f64.powi(3) + 0.7f64.powi(3))).abs() < 1e-14);
        assert_eq!(sol.stats.accepted, 1);
    }

    #[test]
    fn exponential_and_bounds() {
        let mut seen = Vec::new();
        let sol = dopri5_solve(
            |t, y| {
                seen.push(t);
                Ok(vec![y[0]])
            },
            &[1.0],
            0.0,
            1.0,
            &SolverConfig::with_tolerance(1e-6),
        )
        .unwrap();
        assert!((sol.state[0] - std::f64::consts::E).abs() < 1e-6);
        assert!(seen.iter().all(|&t| (0.0..=1.0).contains(&t)));
        assert_eq!(sol.stats.evaluations, seen.len());
    }

    #[test]
    fn failures() {
        let cfg = SolverConfig { max_steps: 3, ..SolverConfig::with_tolerance(1e-12) };
        let err = dopri5_solve(|_, y| Ok(vec![50.0 * y[0].cos()]), &[0.0], 0.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::Solver { steps: 3, ref state, .. } if state.len() == 1));
        let err = dopri5_solve(|t, _| Ok(vec![if t > 0.5 { f64::NAN } else { 1.0 }]), &[0.0], 0.0, 1.0, &SolverConfig::default());
        assert!(matches!(err, Err(Error::Solver { .. })));
        assert!(dopri5_solve(|_, _| Ok(vec![0.0]), &[0.0], 0.0, 1.0, &SolverConfig { rtol: 0.0, ..SolverConfig::default() }).is_err());
    }

    #[test]
    fn guidance_terms() {
        let cs = ConditionInputs { style: Some(2), chords: Some(vec![ChordLabel(1); 3]), ..ConditionInputs::empty(3) };
        assert_eq!(GuidanceWeights::default().unconditional_coefficient(), -1.0);
        let terms = GuidanceWeights::default().terms(&cs);
        assert_eq!(terms.len(), 3);
        assert!(terms[1].1.chords.is_none() && terms[1].1.style == Some(2));
        assert_eq!(evaluations_per_field(&GuidanceWeights::CONDITIONAL), 1);
        assert_eq!(evaluations_per_field(&GuidanceWeights::UNCONDITIONAL), 1);
        assert_eq!(evaluations_per_field(&GuidanceWeights { text: 0.3, local: 0.2, both: 0.1 }), 4);
    }

    #[test]
    fn generation_is_deterministic() {
        let model = ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            conv_pos_kernel: 3,
            n_enc: 3,
            cross_attention: CrossAttention::Every,
            conditioning: Conditioning::Concat,
        };
        let p = init_params::<f32>(&model, 0).unwrap();
        let cs = ConditionInputs { style: Some(1), ..ConditionInputs::empty(5) };
        let w = GuidanceWeights::default();
        let a = generate(&p, &model, &cs, 7, &w, &SolverConfig::default(), None).unwrap();
        let b = generate(&p, &model, &cs, 7, &w, &SolverConfig::default(), None).unwrap();
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.model_evaluations, 3 * a.stats.evaluations);
    }
}
