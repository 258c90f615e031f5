//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. The trend criteria train real toy models, so the
//! full run takes tens of minutes on a single core.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use tempoflow_cli::commands::{self, load_model, Flags, COMPARISON, FINAL_CHECKPOINT};
use tempoflow_cli::RunConfig;
use tempoflow_core::autodiff::{grad_check, Axis, Params, Tape, Tensor, Var};
use tempoflow_core::codec::{rvq_encode, rvq_reconstruct, Codec, CodecConfig};
use tempoflow_core::conditioning::{draw_dropout, temporal_blur, ConditionInputs, DropoutPolicy};
use tempoflow_core::metrics::{
    chord_iou, estimate_chords, frechet_distance, melody_accuracy, onset_f1, GaussianStats,
};
use tempoflow_core::model::{forward, init_params, ModelConfig};
use tempoflow_core::ode::{
    dopri5_fixed, dopri5_solve, generate, guided_field, prior_sample, GuidanceWeights, SolverConfig,
};
use tempoflow_core::synth::{generate_clip, read_annotations, sample_spec, ChordLabel, DEFAULT_CLIP_SECONDS};
use tempoflow_core::train::{
    cfm_loss, element_loss_tape, interpolate, smoothed, target_velocity, FlowSample, LossWeighting, TrainConfig,
    TrainExample,
};
use tempoflow_core::Result;

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const SEEDS: u64 = 10;
/// Denominator floor for sampled parameter coordinates of the full model.
const MODEL_GRAD_FLOOR: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar that depends on every coordinate of `y`.
fn contract(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = tape.constant(rand_tensor(rng, tape.value(y).shape()));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape<f64>, Var, &Tensor<f64>) -> Result<Var>>);

fn operator_cases() -> Vec<OpCase> {
    vec![
        ("matmul.lhs", vec![3, 4], Box::new(|t, x, o| { let b = t.constant(o.clone()); t.matmul(x, b) })),
        ("matmul.rhs", vec![4, 5], Box::new(|t, x, o| { let a = t.constant(o.clone().reshape(&[5, 4]).unwrap()); t.matmul(a, x) })),
        ("matmul_t.lhs", vec![3, 4], Box::new(|t, x, o| { let b = t.constant(o.clone().reshape(&[5, 4]).unwrap()); t.matmul_t(x, b) })),
        ("matmul_t.rhs", vec![5, 4], Box::new(|t, x, o| { let a = t.constant(o.clone().reshape(&[5, 4]).unwrap()); t.matmul_t(a, x) })),
        ("add", vec![4, 5], Box::new(|t, x, o| { let b = t.constant(o.clone()); t.add(x, b) })),
        ("add.broadcast", vec![1, 5], Box::new(|t, x, o| { let a = t.constant(o.clone()); t.add(a, x) })),
        ("sub", vec![4, 5], Box::new(|t, x, o| { let b = t.constant(o.clone()); t.sub(b, x) })),
        ("mul", vec![4, 5], Box::new(|t, x, o| { let b = t.constant(o.clone()); t.mul(x, b) })),
        ("mul.broadcast", vec![1, 5], Box::new(|t, x, o| { let a = t.constant(o.clone()); t.mul(a, x) })),
        ("mul.self", vec![4, 5], Box::new(|t, x, _| t.mul(x, x))),
        ("scale", vec![4, 5], Box::new(|t, x, _| Ok(t.scale(x, -1.7)))),
        ("concat.rows", vec![2, 5], Box::new(|t, x, o| { let b = t.constant(o.clone()); t.concat(&[b, x, x], Axis::Rows) })),
        ("concat.cols", vec![4, 2], Box::new(|t, x, o| { let b = t.constant(o.clone()); t.concat(&[x, b, x], Axis::Cols) })),
        ("slice.rows", vec![6, 3], Box::new(|t, x, _| t.slice(x, 2, 3, Axis::Rows))),
        ("slice.cols", vec![3, 6], Box::new(|t, x, _| t.slice(x, 1, 4, Axis::Cols))),
        ("softmax", vec![4, 6], Box::new(|t, x, _| t.softmax(x))),
        ("layer_norm", vec![4, 6], Box::new(|t, x, _| t.layer_norm(x))),
        ("conv1d_depthwise.x", vec![9, 3], Box::new(|t, x, o| { let w = t.constant(o.clone().reshape(&[5, 4]).unwrap()); let x4 = t.concat(&[x, x], Axis::Cols)?; let x4 = t.slice(x4, 0, 4, Axis::Cols)?; t.conv1d_depthwise(x4, w) })),
        ("conv1d_depthwise.w", vec![5, 4], Box::new(|t, w, o| { let x = t.constant(o.clone()); t.conv1d_depthwise(x, w) })),
        ("gather", vec![6, 3], Box::new(|t, x, _| t.gather(x, &[0, 5, 5, 2, 0, 1]))),
        ("mean_rows", vec![5, 4], Box::new(|t, x, _| t.mean_rows(x))),
        ("block_mean", vec![11, 3], Box::new(|t, x, _| t.block_mean(x, 4))),
        ("gelu", vec![4, 5], Box::new(|t, x, _| Ok(t.gelu(x)))),
        ("sum", vec![4, 5], Box::new(|t, x, _| { let s = t.sum(x); t.mul(s, s) })),
        ("mean", vec![4, 5], Box::new(|t, x, _| { let m = t.mean(x); t.mul(m, m) })),
    ]
}

fn c1_autodiff() -> Outcome {
    let mut worst = (0.0f64, "");
    for (name, shape, op) in operator_cases() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &shape);
            // Companion operand; its shape depends on the case, so draw a
            // generous buffer and let the case reshape it.
            let other_shape: Vec<usize> = match name {
                "matmul.lhs" => vec![4, 5],
                "conv1d_depthwise.w" => vec![9, 4],
                "add.broadcast" | "mul.broadcast" => vec![4, 5],
                "concat.rows" => vec![3, 5],
                "concat.cols" => vec![4, 3],
                _ => vec![4, 5],
            };
            let other = rand_tensor(&mut rng, &other_shape);
            let wseed = rng.gen::<u64>();
            let e = grad_check(
                |t, v| {
                    let y = op(t, v, &other)?;
                    contract(t, y, &mut ChaCha8Rng::seed_from_u64(wseed))
                },
                &x,
                GRAD_EPS,
            )
            .unwrap_or(f64::NAN);
            if !(e <= worst.0) {
                worst = (e, name);
            }
        }
    }
    let ops_ok = worst.0 < GRAD_TOL;

    // Full toy model: weighted flow-matching loss with every control
    // present, checked against the input latent and sampled parameters.
    let model = ModelConfig::toy(16);
    let mut model_worst = 0.0f64;
    for seed in 0..SEEDS {
        let params = init_params::<f64>(&model, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let t_frames = 6;
        let mut cs = ConditionInputs::empty(t_frames);
        cs.chords = Some((0..t_frames).map(|_| ChordLabel(rng.gen_range(0..25))).collect());
        cs.melody = Some((0..t_frames).map(|_| rng.gen_bool(0.7).then(|| rng.gen_range(0..53))).collect());
        cs.audio = Some(rand_tensor(&mut rng, &[t_frames, 16]));
        cs.drums = Some(rand_tensor(&mut rng, &[t_frames, 16]));
        cs.iop = Some(rand_tensor(&mut rng, &[t_frames, 16]));
        cs.style = Some(rng.gen_range(0..8));
        let el = TrainExample { z1: rand_tensor(&mut rng, &[t_frames, 16]), inputs: cs };
        let z0 = rand_tensor(&mut rng, &[t_frames, 16]);
        let t = rng.gen_range(0.05..0.95);
        let cfg = TrainConfig::default();

        let loss_at = |p: &Params<f64>, tape: &mut Tape<f64>, trainable: bool| {
            let b = p.bind(tape, trainable);
            let l = element_loss_tape(tape, &b, &model, &el, &z0, t, &cfg).unwrap();
            (b, l)
        };
        // Parameter gradients on 16 sampled coordinates.
        let mut tape = Tape::new();
        let (bound, l) = loss_at(&params, &mut tape, true);
        let grads = tape.backward(l).unwrap();
        for _ in 0..16 {
            let pi = rng.gen_range(0..params.len());
            let ci = rng.gen_range(0..params.values()[pi].numel());
            let analytic = grads.get(bound.vars()[pi]).map_or(0.0, |g| g.data()[ci]);
            let probe = |delta: f64| {
                let mut p = params.clone();
                p.values_mut()[pi].data_mut()[ci] += delta;
                let mut tape = Tape::new();
                let (_, l) = loss_at(&p, &mut tape, false);
                tape.value(l).item()
            };
            let numeric = (probe(GRAD_EPS) - probe(-GRAD_EPS)) / (2.0 * GRAD_EPS);
            // Key biases have an exactly zero gradient (softmax is shift
            // invariant), where central differences return pure roundoff.
            let denom = (analytic.abs() + numeric.abs()).max(MODEL_GRAD_FLOOR);
            model_worst = model_worst.max((analytic - numeric).abs() / denom);
        }
        // Gradient with respect to the network input z_t, every coordinate.
        let u = target_velocity(&z0, &el.z1, cfg.sigma_min).unwrap();
        let zt = interpolate(&z0, &el.z1, t, cfg.sigma_min).unwrap();
        let e = grad_check(
            |tape, zv| {
                let b = params.bind(tape, false);
                let v = tempoflow_core::model::forward_tape(tape, &b, &model, zv, t, &el.inputs)?;
                let uv = tape.constant(u.clone());
                let d = tape.sub(v, uv)?;
                let sq = tape.mul(d, d)?;
                Ok(tape.mean(sq))
            },
            &zt,
            GRAD_EPS,
        )
        .unwrap_or(f64::NAN);
        model_worst = if e.is_nan() { f64::NAN } else { model_worst.max(e) };
    }
    let model_ok = model_worst < GRAD_TOL;
    outcome(
        ops_ok && model_ok,
        format!(
            "{} operator cases x {SEEDS} seeds, worst rel err {:.2e} ({}); toy model loss worst {:.2e} (parameter denominators floored at {MODEL_GRAD_FLOOR:e}); tol {GRAD_TOL:e}",
            operator_cases().len(),
            worst.0,
            worst.1,
            model_worst
        ),
    )
}

fn c2_ode() -> Outcome {
    let tol = SolverConfig::with_tolerance(1e-6);
    let e_err = (dopri5_solve(|_, y| Ok(vec![y[0]]), &[1.0], 0.0, 1.0, &tol).unwrap().state[0] - std::f64::consts::E).abs();

    // A single Dormand-Prince step integrates polynomial fields of degree
    // <= 4 exactly; the adaptive solver also accepts its first step for
    // degree <= 3, where the embedded error estimate vanishes.
    let mut poly_worst = 0.0f64;
    let mut single_step = true;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for degree in 0..=4usize {
        for _ in 0..5 {
            let c: Vec<f64> = (0..=degree).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y0 = rng.gen_range(-1.0..1.0);
            let (t0, t1) = (rng.gen_range(-1.0..0.0), rng.gen_range(0.5..2.0));
            let f = |t: f64, _: &[f64]| Ok(vec![c.iter().enumerate().map(|(k, ck)| ck * t.powi(k as i32)).sum()]);
            let antideriv = |t: f64| c.iter().enumerate().map(|(k, ck)| ck * t.powi(k as i32 + 1) / (k + 1) as f64).sum::<f64>();
            let exact = y0 + antideriv(t1) - antideriv(t0);
            let one = dopri5_fixed(f, &[y0], t0, t1, 1).unwrap();
            poly_worst = poly_worst.max((one.state[0] - exact).abs() / exact.abs().max(1.0));
            if degree <= 3 {
                let sol = dopri5_solve(f, &[y0], t0, t1, &SolverConfig::default()).unwrap();
                poly_worst = poly_worst.max((sol.state[0] - exact).abs() / exact.abs().max(1.0));
                single_step &= sol.stats.accepted == 1 && sol.stats.rejected == 0;
            }
        }
    }

    let ns = [2usize, 4, 8, 16];
    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| (dopri5_fixed(|_, y| Ok(vec![y[0]]), &[1.0], 0.0, 1.0, n).unwrap().state[0] - std::f64::consts::E).abs())
        .collect();
    let xs: Vec<f64> = ns.iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let order = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();

    let loose = (dopri5_solve(|_, y| Ok(vec![y[0]]), &[1.0], 0.0, 1.0, &SolverConfig::with_tolerance(1e-4)).unwrap().state[0]
        - std::f64::consts::E)
        .abs();
    let tight = (dopri5_solve(|_, y| Ok(vec![y[0]]), &[1.0], 0.0, 1.0, &SolverConfig::with_tolerance(1e-8)).unwrap().state[0]
        - std::f64::consts::E)
        .abs();

    let pass = e_err < 1e-6 && poly_worst < 1e-13 && single_step && order >= 4.5 && tight < loose;
    outcome(
        pass,
        format!(
            "|z(1)-e| = {e_err:.2e} (< 1e-6); degree<=4 polynomials in one step max rel err {poly_worst:.1e} (adaptive single accepted step for degree<=3: {single_step}); fixed-step order {order:.2} (>= 4.5); tol 1e-4 -> 1e-8 error {loose:.1e} -> {tight:.1e}"
        ),
    )
}

fn c3_cfm() -> Outcome {
    let sigma = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0 = rand_tensor(&mut rng, &[7, 16]);
    let z1 = rand_tensor(&mut rng, &[7, 16]);
    let at0 = interpolate(&z0, &z1, 0.0, sigma).unwrap() == z0;
    let end = interpolate(&z0, &z1, 1.0, sigma).unwrap();
    let at1 = end.data().iter().zip(z1.data()).zip(z0.data()).all(|((e, a), b)| (e - (a + sigma * b)).abs() <= 1e-15);
    let u = target_velocity(&z0, &z1, sigma).unwrap();
    let zero = cfm_loss(&[FlowSample { v_pred: u.clone(), z0: z0.clone(), z1: z1.clone(), t: 0.4 }], LossWeighting::OnePlusT, sigma).unwrap();
    let off = u.map(|v| v - 0.3);
    let loss = |t| cfm_loss(&[FlowSample { v_pred: off.clone(), z0: z0.clone(), z1: z1.clone(), t }], LossWeighting::OnePlusT, sigma).unwrap();
    let ratio = loss(1.0) / loss(0.0);

    // Scalar-by-scalar oracle on a random batch.
    let batch: Vec<FlowSample<f64>> = (0..4)
        .map(|_| FlowSample {
            v_pred: rand_tensor(&mut rng, &[5, 3]),
            z0: rand_tensor(&mut rng, &[5, 3]),
            z1: rand_tensor(&mut rng, &[5, 3]),
            t: rng.gen(),
        })
        .collect();
    let mut oracle = 0.0;
    for s in &batch {
        let mut acc = 0.0;
        for i in 0..15 {
            let target = s.z1.data()[i] - (1.0 - sigma) * s.z0.data()[i];
            acc += (s.v_pred.data()[i] - target).powi(2);
        }
        oracle += (1.0 + s.t) * acc / 15.0;
    }
    oracle /= 4.0;
    let got = cfm_loss(&batch, LossWeighting::OnePlusT, sigma).unwrap();
    let pass = at0 && at1 && zero == 0.0 && (ratio - 2.0).abs() < 1e-12 && (got - oracle).abs() < 1e-12;
    outcome(
        pass,
        format!("interpolate t=0 exact: {at0}, t=1 = z1 + sigma z0: {at1}; loss at target {zero}; one_plus_t ratio {ratio:.15}; oracle diff {:.1e}", (got - oracle).abs()),
    )
}

fn blur_oracle(x: &Tensor<f64>, w: usize) -> Vec<f64> {
    let (t, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; t * d];
    for r in 0..t {
        let lo = (r / w) * w;
        let hi = (lo + w).min(t);
        for c in 0..d {
            out[r * d + c] = (lo..hi).map(|k| x.at(k, c)).sum::<f64>() / (hi - lo) as f64;
        }
    }
    out
}

fn c4_conditioning() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut idempotent = true;
    let mut non_divisible = 0;
    for _ in 0..100 {
        let t = rng.gen_range(1..60);
        let w = rng.gen_range(1..12);
        non_divisible += (t % w != 0) as usize;
        let x = rand_tensor(&mut rng, &[t, 3]);
        let b = temporal_blur(&x, w).unwrap();
        for (g, o) in b.data().iter().zip(blur_oracle(&x, w)) {
            worst = worst.max((g - o).abs());
        }
        idempotent &= temporal_blur(&b, w).unwrap() == b;
    }
    let policy = DropoutPolicy::default();
    let n = 10_000;
    let mut counts = [0usize; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..n {
        let d = draw_dropout(&policy, &mut rng);
        counts[0] += d.all as usize;
        counts[1] += d.chords as usize;
        counts[2] += d.iop as usize;
        counts[3] += d.style as usize;
    }
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let expected = [0.2, 0.2 + 0.8 * 0.5, 0.2 + 0.8 * 0.7, 0.2];
    let rate_ok = rates.iter().zip(expected).all(|(r, e)| (r - e).abs() <= 0.02);
    outcome(
        worst < 1e-12 && idempotent && rate_ok,
        format!(
            "blur vs oracle max err {worst:.1e} over 100 cases ({non_divisible} non-divisible), idempotent: {idempotent}; dropout rates all/chords/iop/style {:.4}/{:.4}/{:.4}/{:.4} vs {:?} (+-0.02)",
            rates[0], rates[1], rates[2], rates[3], expected
        ),
    )
}

/// Largest matching by enumerating every assignment of estimates to
/// references (or to nothing).
fn brute_matches(r: &[f64], e: &[f64], tol: f64) -> usize {
    fn go(i: usize, r: &[f64], e: &[f64], used: &mut Vec<bool>, tol: f64) -> usize {
        if i == e.len() {
            return 0;
        }
        let mut best = go(i + 1, r, e, used, tol);
        for j in 0..r.len() {
            if !used[j] && (r[j] - e[i]).abs() <= tol + 1e-9 {
                used[j] = true;
                best = best.max(1 + go(i + 1, r, e, used, tol));
                used[j] = false;
            }
        }
        best
    }
    go(0, r, e, &mut vec![false; r.len()], tol)
}

fn c5_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for case in 0..200 {
        let nr = rng.gen_range(0..=6);
        let ne = rng.gen_range(0..=6);
        let mut r: Vec<f64> = (0..nr).map(|_| (rng.gen_range(0..40) as f64) * 0.01).collect();
        // Every fourth case places estimates exactly on the tolerance edge.
        let mut e: Vec<f64> = (0..ne)
            .map(|k| {
                if case % 4 == 0 && nr > 0 {
                    r[k % nr] + if rng.gen_bool(0.5) { 0.05 } else { -0.05 }
                } else {
                    (rng.gen_range(0..40) as f64) * 0.01
                }
            })
            .collect();
        r.sort_by(f64::total_cmp);
        e.sort_by(f64::total_cmp);
        let m = brute_matches(&r, &e, 0.05) as f64;
        let (p, rc) = (
            if e.is_empty() { if r.is_empty() { 1.0 } else { 0.0 } } else { m / e.len() as f64 },
            if r.is_empty() { if e.is_empty() { 1.0 } else { 0.0 } } else { m / r.len() as f64 },
        );
        let f1 = if r.is_empty() && e.is_empty() { 1.0 } else if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        let got = onset_f1(&r, &e, 0.05);
        if (got.f1 - f1).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    let c = ChordLabel::triad(0, false);
    let g = ChordLabel::triad(7, false);
    let n = ChordLabel::NONE;
    let iou_same = chord_iou(&[c, g, c], &[c, g, c]).unwrap();
    let iou_disjoint = chord_iou(&[c, c, g], &[g, g, c]).unwrap();
    let iou_third = chord_iou(&[c, c, n, n], &[c, g, g, n]).unwrap();
    let stats = |mu: f64, var: f64| GaussianStats { mean: vec![mu], cov: vec![var] };
    let f_a = frechet_distance(&stats(0.0, 1.0), &stats(1.0, 1.0)).unwrap();
    let f_b = frechet_distance(&stats(0.0, 1.0), &stats(0.0, 4.0)).unwrap();
    let f_c = frechet_distance(&stats(0.3, 2.0), &stats(0.3, 2.0)).unwrap();
    let pass = mismatches == 0
        && iou_same == 1.0
        && iou_disjoint == 0.0
        && iou_third == 1.0 / 3.0
        && (f_a - 1.0).abs() < 1e-9
        && (f_b - 1.0).abs() < 1e-9
        && f_c.abs() < 1e-9;
    outcome(
        pass,
        format!("onset_f1 vs exhaustive oracle: {mismatches}/200 mismatches; chord IOU {iou_same}/{iou_disjoint}/{iou_third:.6}; Frechet 1-D {f_a:.12}/{f_b:.12}/{f_c:.1e}"),
    )
}

fn c6_rvq() -> Outcome {
    let clip = |i: u64| generate_clip(&sample_spec(0, i, DEFAULT_CLIP_SECONDS)).unwrap().mix;
    let fit: Vec<Vec<f32>> = (0..100).map(clip).collect();
    let codec = Codec::fit(&fit, &CodecConfig::default()).unwrap();
    let k = codec.codebooks.num_books();
    let mut energy = vec![0.0; k + 1];
    let mut frames = 0usize;
    let mut every_clip = true;
    for i in 100..140 {
        let z = codec.encode(&clip(i)).unwrap();
        let q = rvq_encode(&z, &codec.codebooks).unwrap();
        let mse = |stages| {
            let r = rvq_reconstruct(&q, &codec.codebooks, stages);
            z.data().iter().zip(r.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        for (s, e) in energy.iter_mut().enumerate() {
            *e += mse(s);
        }
        frames += z.rows();
        every_clip &= mse(k) < mse(1);
    }
    let energy: Vec<f64> = energy.iter().map(|e| e / frames as f64).collect();
    let monotone = energy.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        monotone && every_clip,
        format!(
            "mean residual energy by stage {:?} non-increasing: {monotone}; full-K MSE < first-stream MSE on all 40 held-out clips: {every_clip}",
            energy.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>()
        ),
    )
}

struct Trend {
    chord: (f64, f64),
    melody: (f64, f64),
    smoothed_decreasing: bool,
    smoothed_detail: String,
    detail: String,
}

fn cfg_with(dir: &Path, pairs: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set("corpus.dir", &dir.join("corpus").to_string_lossy()).unwrap();
    cfg.set("codec.path", &dir.join("codec.bin").to_string_lossy()).unwrap();
    for (k, v) in pairs {
        cfg.set(k, v).unwrap();
    }
    cfg
}

/// Toy protocol shared by the chord and melody criteria: one model trained
/// with the standard condition dropout, one with every condition always
/// dropped; same seed, corpus, codec and schedule.
fn trend_run(dir: &Path) -> Trend {
    let clock = Instant::now();
    let base = [
        ("corpus.clips", "2000"),
        ("corpus.holdout", "64"),
        ("train.steps", "1000"),
        ("train.crop_frames", "48"),
        ("solver.rtol", "1e-3"),
        ("solver.atol", "1e-3"),
    ];
    let cfg = cfg_with(dir, &base);
    commands::synth(&cfg, Flags::default()).unwrap();
    commands::fit_codec(&cfg, Flags::default()).unwrap();

    let mut cond_cfg = cfg.clone();
    cond_cfg.set("train.out", &dir.join("cond").to_string_lossy()).unwrap();
    commands::train_model(&cond_cfg).unwrap();
    let mut uncond_cfg = cfg.clone();
    uncond_cfg.set("train.out", &dir.join("uncond").to_string_lossy()).unwrap();
    uncond_cfg.set("dropout.p_all", "1").unwrap();
    commands::train_model(&uncond_cfg).unwrap();
    let train_secs = clock.elapsed().as_secs_f64();

    let log = std::fs::read_to_string(dir.join("cond").join("train_log.csv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).take(500).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    // The window-100 curve read every 50 steps; per-step upticks of the
    // running mean are minibatch noise and only reported.
    let sm = smoothed(&losses, 100);
    let curve: Vec<f64> = sm.iter().step_by(50).copied().collect();
    let smoothed_decreasing = curve.len() == 9 && curve.windows(2).all(|w| w[1] < w[0]);
    let upticks = sm.windows(2).filter(|w| w[1] >= w[0]).count();

    let codec = Codec::load(&cfg.path("codec.path")).unwrap();
    let (cond, model) = load_model(&dir.join("cond").join(FINAL_CHECKPOINT)).unwrap();
    let (uncond, umodel) = load_model(&dir.join("uncond").join(FINAL_CHECKPOINT)).unwrap();
    let corpus = commands::load_corpus(&cfg).unwrap();
    let solver = cfg.solver_config().unwrap();
    let w = GuidanceWeights::default();
    let (mut ci, mut cu, mut mi, mut mu) = (0.0, 0.0, 0.0, 0.0);
    let mut nfe = 0;
    for (i, r) in corpus.holdout.iter().enumerate() {
        let ann = read_annotations(&corpus.dir.join(&r.annotation_path)).unwrap().annotations;
        let t = ann.num_frames;
        let seed = i as u64;
        let chords = ConditionInputs { chords: Some(ann.chords.clone()), style: Some(ann.style_tag), ..ConditionInputs::empty(t) };
        let melody = ConditionInputs { melody: Some(ann.melody_bins()), style: Some(ann.style_tag), ..ConditionInputs::empty(t) };
        let gc = generate(&cond, &model, &chords, seed, &w, &solver, Some(&codec)).unwrap();
        let gm = generate(&cond, &model, &melody, seed, &w, &solver, Some(&codec)).unwrap();
        let gu = generate(&uncond, &umodel, &ConditionInputs::empty(t), seed, &GuidanceWeights::UNCONDITIONAL, &solver, Some(&codec)).unwrap();
        nfe += gc.model_evaluations + gm.model_evaluations + gu.model_evaluations;
        ci += chord_iou(&ann.chords, &estimate_chords(&gc.waveform, t).unwrap()).unwrap();
        cu += chord_iou(&ann.chords, &estimate_chords(&gu.waveform, t).unwrap()).unwrap();
        let bins = ann.melody_bins();
        mi += melody_accuracy(&bins, &gm.waveform, 0.5).unwrap();
        mu += melody_accuracy(&bins, &gu.waveform, 0.5).unwrap();
    }
    let n = corpus.holdout.len() as f64;
    Trend {
        chord: (ci / n, cu / n),
        melody: (mi / n, mu / n),
        smoothed_decreasing,
        smoothed_detail: format!(
            "window-100 mean at steps 99..499 every 50: {:?}; per-step running-mean upticks {upticks}/{}",
            curve.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            sm.len().saturating_sub(1)
        ),
        detail: format!(
            "{} generations per arm, {nfe} model evaluations; training {train_secs:.0}s, total {:.0}s",
            corpus.holdout.len(),
            clock.elapsed().as_secs_f64()
        ),
    }
}

fn c9_cfg_degeneracy(dir: &Path) -> Outcome {
    let (params, model) = load_model(&dir.join("cond").join(FINAL_CHECKPOINT)).unwrap();
    let corpus = commands::load_corpus(&cfg_with(dir, &[("corpus.holdout", "64")])).unwrap();
    let ann = read_annotations(&corpus.dir.join(&corpus.holdout[0].annotation_path)).unwrap().annotations;
    let t = ann.num_frames;
    let cs = ConditionInputs {
        chords: Some(ann.chords.clone()),
        melody: Some(ann.melody_bins()),
        style: Some(ann.style_tag),
        ..ConditionInputs::empty(t)
    };
    let solver = SolverConfig::default();
    let z0 = prior_sample(t, model.n_enc, 42);
    let solve = |field: &dyn Fn(f64, &Tensor<f64>) -> Tensor<f64>| {
        dopri5_solve(
            |s, y| Ok(field(s, &Tensor::from_vec(&[t, model.n_enc], y.to_vec())?).into_data()),
            z0.data(),
            0.0,
            1.0,
            &solver,
        )
        .unwrap()
        .state
    };
    let (p, m) = (&params, &model);
    let direct = |c: ConditionInputs| move |s: f64, z: &Tensor<f64>| forward(p, m, &z.cast::<f32>(), s, &c).unwrap().cast::<f64>();
    let guided = |w: GuidanceWeights| {
        let cs = cs.clone();
        move |s: f64, z: &Tensor<f64>| guided_field(p, m, z, s, &cs, &w).unwrap()
    };
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let both = max_diff(&solve(&guided(GuidanceWeights::CONDITIONAL)), &solve(&direct(cs.clone())));
    let none = max_diff(&solve(&guided(GuidanceWeights::UNCONDITIONAL)), &solve(&direct(ConditionInputs::empty(t))));
    outcome(
        both < 1e-10 && none < 1e-10,
        format!("alpha_both=1 vs direct conditional solve max |dz| {both:.1e}; all alpha=0 vs unconditional {none:.1e} (< 1e-10)"),
    )
}

fn c10_ablation(dir: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_tempoflow");
    let small = dir.join("ablate_corpus");
    let cfg_path = dir.join("ablate.cfg");
    std::fs::write(
        &cfg_path,
        format!(
            "corpus.dir = {}\ncorpus.clips = 200\ncorpus.holdout = 16\ncodec.path = {}\ncodec.fit_clips = 100\n\
             train.steps = 100\ntrain.crop_frames = 48\nsolver.rtol = 1e-3\nsolver.atol = 1e-3\nablate.eval_clips = 8\n",
            small.display(),
            dir.join("ablate_codec.bin").display()
        ),
    )
    .unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(bin).arg("--config").arg(&cfg_path).args(args).output().unwrap();
        (out.status.success(), String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string())
    };
    let ok_prep = run(&["synth"]).0 && run(&["fit-codec"]).0;
    let a_dir = dir.join("ablate_a");
    let b_dir = dir.join("ablate_b");
    let (ok_a, err_a) = run(&["ablate", "loss-weighting", "--out", a_dir.to_str().unwrap()]);
    let (ok_b, _) = run(&["ablate", "loss-weighting", "--out", b_dir.to_str().unwrap()]);
    if !(ok_prep && ok_a && ok_b) {
        return outcome(false, format!("ablate did not complete: {err_a}"));
    }
    let read = |d: &Path| -> Value { serde_json::from_slice(&std::fs::read(d.join(COMPARISON)).unwrap()).unwrap() };
    let (a, b) = (read(&a_dir), read(&b_dir));
    let digests = |v: &Value| -> Vec<String> {
        v["arms"].as_array().unwrap().iter().map(|x| x["checkpoint_digest"].as_str().unwrap().to_string()).collect()
    };
    let fd = |v: &Value| -> Vec<Option<f64>> { v["table"].as_array().unwrap().iter().map(|x| x["frechet_distance"].as_f64()).collect() };
    let same = digests(&a) == digests(&b) && a["table"] == b["table"];
    let reported = fd(&a).iter().all(Option::is_some) && a["table"].as_array().unwrap().len() == 2;
    let f = fd(&a);
    outcome(
        same && reported,
        format!(
            "two ablate runs identical (checkpoints and table): {same}; Frechet uniform {:.4} vs one_plus_t {:.4} (direction recorded, not asserted)",
            f[0].unwrap_or(f64::NAN),
            f.get(1).copied().flatten().unwrap_or(f64::NAN)
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; a name filter that excludes this
    // target skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let mut failed = 0;
    let mut report = |id: &str, name: &str, o: Outcome| {
        println!("[{}] {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.pass) as usize;
    };
    report("C1", "autodiff gradient checks", c1_autodiff());
    report("C2", "dopri5 solver", c2_ode());
    report("C3", "flow-matching algebra", c3_cfm());
    report("C4", "conditioning blur and dropout", c4_conditioning());
    report("C5", "metrics", c5_metrics());
    report("C6", "residual vector quantization", c6_rvq());
    let trend = trend_run(work.path());
    report(
        "C7",
        "chord conditioning trend",
        outcome(
            trend.chord.0 >= trend.chord.1 + 0.15,
            format!("chord IOU conditioned {:.3} vs unconditional {:.3} (need +0.15); {}", trend.chord.0, trend.chord.1, trend.detail),
        ),
    );
    report(
        "C8",
        "melody conditioning trend",
        outcome(
            trend.melody.0 >= trend.melody.1 + 0.10,
            format!("melody accuracy conditioned {:.3} vs unconditional {:.3} (need +0.10)", trend.melody.0, trend.melody.1),
        ),
    );
    report(
        "C8b",
        "smoothed training loss",
        outcome(trend.smoothed_decreasing, format!("strictly decreasing over the first 500 steps (seed 0): {}", trend.smoothed_detail)),
    );
    report("C9", "guidance degeneracy", c9_cfg_degeneracy(work.path()));
    report("C10", "loss-weighting ablation harness", c10_ablation(work.path()));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
