use candle_core::{DType, Device, Tensor};
use hiergen_core::{tensorize_box, BoxSpec};
use hiergen_models::boxgen::{mixture_log_pdf, sample_categorical, MixtureParams, RHO_LIMIT};
use hiergen_models::imagegen::gate_with;
use hiergen_models::shapegen::{InstanceBatch, ShapeGenConfig, ShapeGenerator};
use hiergen_models::text::{TextEncoder, TextEncoderConfig};
use hiergen_models::ParamStore;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn raw_mixture(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, 6 * k)
}

/// Bivariate normal density written out from the textbook formula.
fn normal_pdf(u: f64, v: f64, m: [f64; 2], s: [f64; 2], r: f64) -> f64 {
    let dx = (u - m[0]) / s[0];
    let dy = (v - m[1]) / s[1];
    let om = 1.0 - r * r;
    (-(dx * dx + dy * dy - 2.0 * r * dx * dy) / (2.0 * om)).exp()
        / (2.0 * std::f64::consts::PI * s[0] * s[1] * om.sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoded_mixture_is_valid(k in 1usize..6, raw in raw_mixture(5)) {
        let p = MixtureParams::from_raw(&raw[..6 * k]).unwrap();
        p.validate().unwrap();
        prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.scales.iter().flatten().all(|s| *s > 0.0));
        prop_assert!(p.corr.iter().all(|r| r.abs() <= RHO_LIMIT));
    }

    #[test]
    fn log_pdf_matches_textbook_sum(raw in raw_mixture(3), u in -2.0f64..2.0, v in -2.0f64..2.0) {
        let p = MixtureParams::from_raw(&raw).unwrap();
        let direct: f64 = (0..3)
            .map(|j| p.weights[j] * normal_pdf(u, v, p.means[j], p.scales[j], p.corr[j]))
            .sum();
        let lp = p.log_pdf(u, v);
        if direct > 1e-250 {
            prop_assert!((lp - direct.ln()).abs() < 1e-8 * (1.0 + lp.abs()), "{lp} vs {}", direct.ln());
        }
    }

    #[test]
    fn batched_log_pdf_matches_scalar(raw in raw_mixture(2), u in -1.0f64..2.0, v in -1.0f64..2.0) {
        let p = MixtureParams::from_raw(&raw).unwrap();
        let t = Tensor::from_vec(raw.clone(), (1, 12), &Device::Cpu).unwrap();
        let ut = Tensor::new(&[u], &Device::Cpu).unwrap();
        let vt = Tensor::new(&[v], &Device::Cpu).unwrap();
        let lp = mixture_log_pdf(&t, &ut, &vt).unwrap().to_vec1::<f64>().unwrap()[0];
        prop_assert!((lp - p.log_pdf(u, v)).abs() < 1e-9 * (1.0 + lp.abs()));
    }

    #[test]
    fn categorical_never_picks_zero_mass(probs in prop::collection::vec(0.0f64..1.0, 1..8), seed in 0u64..1000) {
        prop_assume!(probs.iter().any(|p| *p > 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let i = sample_categorical(&probs, &mut rng);
            prop_assert!(probs[i] > 0.0);
        }
    }

    #[test]
    fn gate_is_bounded_by_input(vals in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 2 * 2), proj in prop::collection::vec(-5.0f64..5.0, 2 * 3)) {
        let a = Tensor::from_vec(vals.clone(), (2, 3, 2, 2), &Device::Cpu).unwrap();
        let p = Tensor::from_vec(proj, (2, 3), &Device::Cpu).unwrap();
        let g = gate_with(&a, &p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in vals.iter().zip(&g) {
            prop_assert!(y.abs() <= x.abs() + 1e-15);
            prop_assert!(x * y >= 0.0);
        }
    }
}

fn small_shape_config() -> ShapeGenConfig {
    ShapeGenConfig {
        num_classes: 3,
        grid: 16,
        core_res: 4,
        mask_res: 8,
        channels: 4,
        hidden: 4,
        noise_dim: 2,
        ..ShapeGenConfig::default()
    }
}

fn arb_box() -> impl Strategy<Value = BoxSpec> {
    (0.0f64..0.9, 0.0f64..0.9, 0.05f64..1.0, 0.05f64..1.0, 0usize..3)
        .prop_map(|(x, y, w, h, l)| BoxSpec::new(x, y, w.min(1.0 - x), h.min(1.0 - y), l))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_masks_are_exactly_zero_outside_boxes(boxes in prop::collection::vec(arb_box(), 1..4), seed in 0u64..100) {
        let mut ps = ParamStore::new(seed, DType::F32);
        let g = ShapeGenerator::new(&mut ps, "g", small_shape_config()).unwrap();
        let tensors: Vec<Vec<f32>> = boxes.iter().map(|b| tensorize_box(b, 16, 16, 3).unwrap().to_f32()).collect();
        let batch = InstanceBatch::from_scenes(&[tensors], 3, 16, DType::F32).unwrap();
        let z = Tensor::randn(0f32, 1.0, (1, boxes.len(), 2), &Device::Cpu).unwrap();
        let m = g.generate_masks(&batch, &z).unwrap().squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        for (b, mask) in boxes.iter().zip(&m) {
            let occ = tensorize_box(b, 16, 16, 3).unwrap().occupancy();
            for (v, o) in mask.iter().flatten().zip(&occ) {
                if *o == 0 {
                    prop_assert_eq!(*v, 0.0);
                } else {
                    prop_assert!((0.0..=1.0).contains(v));
                }
            }
        }
    }

    #[test]
    fn text_encoding_ignores_batch_companions(a in prop::collection::vec(1usize..20, 1..6), b in prop::collection::vec(1usize..20, 1..9)) {
        let mut ps = ParamStore::new(3, DType::F64);
        let enc = TextEncoder::new(&mut ps, "t", TextEncoderConfig { vocab_size: 20, embed_dim: 8, hidden: 8, dim: 6 }).unwrap();
        let alone = enc.encode_ids(&[a.clone()]).unwrap().to_vec2::<f64>().unwrap();
        let paired = enc.encode_ids(&[b, a]).unwrap().to_vec2::<f64>().unwrap();
        for (x, y) in alone[0].iter().zip(&paired[1]) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
