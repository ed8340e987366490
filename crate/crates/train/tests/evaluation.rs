mod common;

use common::{corpus, tiny_config};
use hiergen_core::{BoxSpec, LayoutSequence};
use hiergen_train::data::SceneSet;
use hiergen_train::eval::{
    classifier_score, count_category_tv, evaluate_box, evaluate_extractor, evaluate_shape, layout_nll,
    mask_iou, EvalOptions,
};
use hiergen_train::stages::{BoxStage, ExtractorStage, ShapeStage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_probs(n: usize, c: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

#[test]
fn single_split_score_matches_direct_kl() {
    let p = random_probs(20, 6, 4);
    let mut marginal = [0.0; 6];
    for row in &p {
        for (m, v) in marginal.iter_mut().zip(row) {
            *m += v / 20.0;
        }
    }
    let mut kl = 0.0;
    for row in &p {
        for k in 0..6 {
            kl += row[k] * (row[k].ln() - marginal[k].ln()) / 20.0;
        }
    }
    let (score, std) = classifier_score(&p, 1, 0).unwrap();
    assert!((score - kl.exp()).abs() < 1e-12, "{score} vs {}", kl.exp());
    assert_eq!(std, 0.0);
}

proptest! {
    #[test]
    fn score_is_order_invariant_and_bounded(seed in 0u64..500, n in 10usize..60, split_seed in 0u64..5) {
        let p = random_probs(n, 5, seed);
        let mut shuffled = p.clone();
        shuffled.reverse();
        shuffled.rotate_left(n / 3);
        let a = classifier_score(&p, 10, split_seed).unwrap();
        let b = classifier_score(&shuffled, 10, split_seed).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.0 >= 1.0 - 1e-12 && a.0 <= 5.0 + 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(0.0f32..1.0, 16), b in prop::collection::vec(0.0f32..1.0, 16)) {
        let x = mask_iou(&a, &b, 0.5).unwrap();
        prop_assert_eq!(x, mask_iou(&b, &a, 0.5).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
    }
}

#[test]
fn half_overlapping_rectangles_have_iou_one_third() {
    // two 4×2 rectangles on a 4×4 grid offset by half their width
    let mut a = vec![0.0f32; 16];
    let mut b = vec![0.0f32; 16];
    for i in 0..4 {
        for j in 0..2 {
            a[i * 4 + j] = 1.0;
            b[i * 4 + j + 1] = 1.0;
        }
    }
    let iou = mask_iou(&a, &b, 0.5).unwrap();
    // counting: intersection 4 cells, union 12 cells
    assert!((iou - 4.0 / 12.0).abs() < 1e-12);
}

fn layout(labels: &[usize]) -> LayoutSequence {
    let names = (0..3).map(|i| format!("c{i}")).collect();
    LayoutSequence::new(names, labels.iter().map(|&l| BoxSpec::new(0.1, 0.1, 0.2, 0.2, l)).collect())
}

#[test]
fn tv_matches_hand_histogram() {
    let sampled = vec![layout(&[0]), layout(&[0, 1]), layout(&[1, 1])];
    let reference = vec![layout(&[0]), layout(&[2]), layout(&[0, 2])];
    // counts: sampled {1: 1/3, 2: 2/3}, reference {1: 2/3, 2: 1/3}
    // categories: sampled {0: 2/5, 1: 3/5}, reference {0: 2/4, 2: 2/4}
    let (tc, tk) = count_category_tv(&sampled, &reference).unwrap();
    assert!((tc - 1.0 / 3.0).abs() < 1e-12);
    let expected = 0.5 * ((0.4f64 - 0.5).abs() + 0.6 + 0.5);
    assert!((tk - expected).abs() < 1e-12);
}

fn stage_for(data: &SceneSet, c: &hiergen_train::Config, vocab: &hiergen_core::text::Vocabulary) -> BoxStage {
    let mut text = c.text.clone();
    text.vocab_size = vocab.len();
    BoxStage::new(2, text, c.box_stage.model.clone(), vocab.clone(), data.class_names.clone()).unwrap()
}

#[test]
fn layout_nll_is_per_object_and_size_invariant() {
    let c = tiny_config();
    let data = corpus(&c);
    let stage = stage_for(&data.train, &c, &data.vocab);
    let two = data.train.subset(&[0, 1]);
    let nll = layout_nll(&stage, &two).unwrap();

    // hand summation over the per-step terms
    let captions: Vec<&str> = two.scenes.iter().map(|s| s.caption.as_str()).collect();
    let s = stage.encode(&captions).unwrap();
    let steps = stage.generator.step_nll(&s, &two.layouts(&[0, 1])).unwrap();
    let class = steps.class.to_vec2::<f32>().unwrap();
    let coord = steps.coord.to_vec2::<f32>().unwrap();
    let mut total = 0.0f64;
    let mut objects = 0;
    for (i, len) in steps.lengths.iter().enumerate() {
        for j in 0..=*len {
            total += class[i][j] as f64;
        }
        for j in 0..*len {
            total += coord[i][j] as f64;
        }
        objects += len;
    }
    assert!((nll - total / objects as f64).abs() < 1e-4 * (1.0 + nll.abs()));

    let doubled = data.train.subset(&[0, 1, 0, 1]);
    assert!((layout_nll(&stage, &doubled).unwrap() - nll).abs() < 1e-5 * (1.0 + nll.abs()));
}

#[test]
fn stage_reports_are_finite_and_counted() {
    let c = tiny_config();
    let data = corpus(&c);
    let opts = EvalOptions {
        samples: 20,
        crop_size: c.extractor.crop_size,
        ..EvalOptions::default()
    };
    let stage = stage_for(&data.train, &c, &data.vocab);
    let r = evaluate_box(&stage, &data.val, &opts).unwrap();
    for key in ["layout_nll_per_object", "tv_count", "tv_category", "termination_rate", "count_correlation"] {
        assert!(r.metrics[key].value.is_finite() && r.metrics[key].count > 0, "{key}");
    }
    assert_eq!(r.metrics["tv_count"].count, 20);

    let shape = ShapeStage::new(1, c.shape_stage.model.clone(), c.shape_stage.disc.clone()).unwrap();
    let r = evaluate_shape(&shape, &data.val, &opts).unwrap();
    assert_eq!(r.metrics["max_outside_box"].value, 0.0);
    let iou = r.metrics["mask_iou"].value;
    assert!((0.0..=1.0).contains(&iou));

    let fx = ExtractorStage::new(1, c.extractor.model.clone()).unwrap();
    let r = evaluate_extractor(&fx, &data.val, &opts).unwrap();
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["stage"], "extractor");
    assert!(json["meteor"].is_null());
    assert!(r.metrics["classifier_score"].value >= 1.0);
}
