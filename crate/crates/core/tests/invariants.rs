use proptest::prelude::*;

use tempoflow_core::autodiff::Tensor;
use tempoflow_core::conditioning::{temporal_blur, ConditionInputs};
use tempoflow_core::metrics::{chord_iou, frechet_distance, GaussianStats};
use tempoflow_core::model::{init_params, ModelConfig};
use tempoflow_core::ode::{guided_field, GuidanceWeights};
use tempoflow_core::synth::ChordLabel;
use tempoflow_core::train::{cfm_loss, interpolate, FlowSample, LossWeighting};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::from_vec(&[rows, cols], v).unwrap())
}

fn pair(rows: usize, cols: usize) -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (tensor(rows, cols), tensor(rows, cols))
}

fn sample() -> impl Strategy<Value = FlowSample<f64>> {
    (tensor(4, 3), tensor(4, 3), tensor(4, 3), 0.0f64..1.0).prop_map(|(v_pred, z0, z1, t)| FlowSample { v_pred, z0, z1, t })
}

fn chords(n: usize) -> impl Strategy<Value = Vec<ChordLabel>> {
    prop::collection::vec((0u8..25).prop_map(ChordLabel), n)
}

proptest! {
    #[test]
    fn interpolation_is_affine_in_t((z0, z1) in pair(5, 4), a in 0.0f64..1.0, b in 0.0f64..1.0, lam in 0.0f64..1.0) {
        let s = 1e-5;
        let mid = interpolate(&z0, &z1, lam * a + (1.0 - lam) * b, s).unwrap();
        let za = interpolate(&z0, &z1, a, s).unwrap();
        let zb = interpolate(&z0, &z1, b, s).unwrap();
        for ((m, x), y) in mid.data().iter().zip(za.data()).zip(zb.data()) {
            prop_assert!((m - (lam * x + (1.0 - lam) * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_ignores_batch_order(batch in prop::collection::vec(sample(), 1..6), rot in 0usize..6) {
        let mut shuffled = batch.clone();
        shuffled.rotate_left(rot % batch.len());
        shuffled.reverse();
        for mode in [LossWeighting::Uniform, LossWeighting::OnePlusT] {
            let a = cfm_loss(&batch, mode, 1e-5).unwrap();
            let b = cfm_loss(&shuffled, mode, 1e-5).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn uniform_loss_is_plain_mse(batch in prop::collection::vec(sample(), 1..5)) {
        let s = 1e-5;
        let n = batch.len() as f64 * 12.0;
        let mse: f64 = batch
            .iter()
            .flat_map(|b| (0..12).map(move |i| b.v_pred.data()[i] - (b.z1.data()[i] - (1.0 - s) * b.z0.data()[i])))
            .map(|d| d * d)
            .sum::<f64>()
            / n;
        prop_assert!((cfm_loss(&batch, LossWeighting::Uniform, s).unwrap() - mse).abs() < 1e-12 * mse.max(1.0));
    }

    #[test]
    fn chord_iou_is_symmetric_and_bounded((a, b) in (1usize..40).prop_flat_map(|n| (chords(n), chords(n)))) {
        let ab = chord_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, chord_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(chord_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn frechet_is_symmetric(m1 in prop::collection::vec(-2.0f64..2.0, 3), m2 in prop::collection::vec(-2.0f64..2.0, 3),
                            l1 in prop::collection::vec(-1.0f64..1.0, 9), l2 in prop::collection::vec(-1.0f64..1.0, 9)) {
        // L L^T + I keeps both covariances positive definite.
        let spd = |l: &[f64]| {
            let mut c = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    c[i * 3 + j] = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
                }
            }
            c
        };
        let a = GaussianStats { mean: m1, cov: spd(&l1) };
        let b = GaussianStats { mean: m2, cov: spd(&l2) };
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() < 1e-8 * ab.abs().max(1.0));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn blur_is_idempotent(x in (1usize..50).prop_flat_map(|t| tensor(t, 3)), w in 1usize..10) {
        let once = temporal_blur(&x, w).unwrap();
        prop_assert_eq!(temporal_blur(&once, w).unwrap(), once);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn guided_field_is_affine_in_weights(a in prop::array::uniform3(-2.0f64..2.0), b in prop::array::uniform3(-2.0f64..2.0),
                                         lam in 0.0f64..1.0, seed in 0u64..1000) {
        let model = ModelConfig { layers: 2, heads: 2, model_dim: 16, ffn_dim: 32, ..ModelConfig::toy(4) };
        let params = init_params::<f64>(&model, seed).unwrap();
        let frames = 6;
        let cs = ConditionInputs {
            chords: Some((0..frames).map(|i| ChordLabel((i * 5 % 25) as u8)).collect()),
            style: Some(3),
            ..ConditionInputs::empty(frames)
        };
        let z = Tensor::from_vec(&[frames, 4], (0..frames * 4).map(|i| ((i as f64) * 0.37).sin()).collect()).unwrap();
        let w = |x: [f64; 3]| GuidanceWeights { text: x[0], local: x[1], both: x[2] };
        let mix: Vec<f64> = (0..3).map(|i| lam * a[i] + (1.0 - lam) * b[i]).collect();
        let f = |x: [f64; 3]| guided_field(&params, &model, &z, 0.3, &cs, &w(x)).unwrap();
        let fm = f([mix[0], mix[1], mix[2]]);
        let (fa, fb) = (f(a), f(b));
        for ((m, x), y) in fm.data().iter().zip(fa.data()).zip(fb.data()) {
            prop_assert!((m - (lam * x + (1.0 - lam) * y)).abs() < 1e-9);
        }
    }
}
