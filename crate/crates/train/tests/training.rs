mod common;

use std::collections::BTreeMap;

use candle_core::Tensor;
use common::{corpus, tiny_config};
use hiergen_train::checkpoint::load_checkpoint;
use hiergen_train::run::{checkpoint_path, train_stage, TrainOptions};
use hiergen_train::schedule::{lr_at, OptimizerSpec};
use hiergen_train::stages::{BoxStage, ExtractorStage, ImageStage, Progress, ShapeStage};
use hiergen_train::trainer::{
    embed_scenes, object_crops, BoxTrainer, EpochLog, ExtractorTrainer, ImageTrainer, ShapeTrainer,
};
use hiergen_train::{Config, StageId, TrainError};
use proptest::prelude::*;

fn box_stage(c: &Config, vocab: &hiergen_core::text::Vocabulary, classes: Vec<String>) -> BoxStage {
    let mut text = c.text.clone();
    text.vocab_size = vocab.len();
    BoxStage::new(5, text, c.box_stage.model.clone(), vocab.clone(), classes).unwrap()
}

fn snapshot(ps: &hiergen_models::ParamStore) -> BTreeMap<String, Vec<f32>> {
    ps.snapshot()
        .unwrap()
        .into_iter()
        .map(|(k, t)| (k, t.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect()
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

#[test]
fn one_epoch_of_eight_scenes_in_fours_takes_two_steps_each() {
    let c = tiny_config();
    let data = corpus(&c);
    assert_eq!(data.train.len(), 8);
    let fx = ExtractorStage::new(1, c.extractor.model.clone()).unwrap();

    let shape = ShapeStage::new(2, c.shape_stage.model.clone(), c.shape_stage.disc.clone()).unwrap();
    let mut st = ShapeTrainer::new(shape, &c.shape_stage, 0, Progress::fresh("d".into())).unwrap();
    let log = st.run_epoch(&data.train, &fx).unwrap();
    assert_eq!((log.d_steps, log.g_steps), (2, 2));

    let text = box_stage(&c, &data.vocab, data.train.class_names.clone());
    let s = embed_scenes(&text, &data.train).unwrap();
    let image = ImageStage::new(3, c.image_stage.model.clone(), c.image_stage.disc.clone()).unwrap();
    let mut it = ImageTrainer::new(image, &c.image_stage, 0.5, 0, Progress::fresh("d".into())).unwrap();
    let log = it.run_epoch(&data.train, &s, &fx, None).unwrap();
    assert_eq!((log.d_steps, log.g_steps), (2, 2));
    assert_eq!(log.epoch, 1);
}

fn first_image_epoch(c: &Config) -> EpochLog {
    let data = corpus(c);
    let fx = ExtractorStage::new(1, c.extractor.model.clone()).unwrap();
    let text = box_stage(c, &data.vocab, data.train.class_names.clone());
    let s = embed_scenes(&text, &data.train).unwrap();
    let image = ImageStage::new(3, c.image_stage.model.clone(), c.image_stage.disc.clone()).unwrap();
    let mut it = ImageTrainer::new(image, &c.image_stage, 0.5, 9, Progress::fresh("d".into())).unwrap();
    it.run_epoch(&data.train, &s, &fx, None).unwrap()
}

#[test]
fn fixed_seed_gives_identical_first_epoch() {
    let c = tiny_config();
    assert_eq!(first_image_epoch(&c), first_image_epoch(&c));
}

#[test]
fn box_loss_decreases_over_five_epochs() {
    let mut c = Config::desk_small();
    c.data.train_count = 200;
    c.data.val_count = 8;
    let data = corpus(&c);
    let stage = box_stage(&c, &data.vocab, data.train.class_names.clone());
    let mut t = BoxTrainer::new(stage, &c.box_stage, 0, Progress::fresh("d".into())).unwrap();
    let losses: Vec<f64> = (0..5).map(|_| t.run_epoch(&data.train).unwrap().losses["nll"]).collect();
    assert!(losses[4] < losses[0], "{losses:?}");
}

#[test]
fn save_load_forward_is_bit_exact() {
    let c = tiny_config();
    let data = corpus(&c);
    let dir = tempfile::tempdir().unwrap();
    let text = box_stage(&c, &data.vocab, data.train.class_names.clone());
    let path = dir.path().join("box.ckpt");
    text.save(&path, &Progress::fresh("d".into())).unwrap();
    let (back, _) = BoxStage::load(&path).unwrap();
    let s1 = embed_scenes(&text, &data.train).unwrap();
    let s2 = embed_scenes(&back, &data.train).unwrap();
    assert_eq!(flat(&s1), flat(&s2));
    let layouts = data.train.layouts(&[0, 1, 2]);
    let a = text.generator.step_nll(&s1.narrow(0, 0, 3).unwrap(), &layouts).unwrap();
    let b = back.generator.step_nll(&s2.narrow(0, 0, 3).unwrap(), &layouts).unwrap();
    assert_eq!(flat(&a.coord), flat(&b.coord));

    let image = ImageStage::new(3, c.image_stage.model.clone(), c.image_stage.disc.clone()).unwrap();
    let path = dir.path().join("image.ckpt");
    image.save(&path, &Progress::fresh("d".into())).unwrap();
    let (back, _) = ImageStage::load(&path).unwrap();
    let m = data.train.label_maps(&[0, 1], hiergen_train::stages::DTYPE).unwrap();
    let z = Tensor::ones((2, c.image_stage.model.noise_dim), hiergen_train::stages::DTYPE, &candle_core::Device::Cpu).unwrap();
    let s = s1.narrow(0, 0, 2).unwrap();
    assert_eq!(
        flat(&image.generator.generate(&m, &s, &z).unwrap()),
        flat(&back.generator.generate(&m, &s, &z).unwrap())
    );
}

#[test]
fn checkpoint_of_other_class_count_is_refused() {
    let c = tiny_config();
    let data = corpus(&c);
    let dir = tempfile::tempdir().unwrap();
    train_stage(&c, &data, dir.path(), StageId::Box, &TrainOptions { epochs: Some(1), ..Default::default() }).unwrap();
    let mut other = c.clone();
    other.data.shapeworld.num_classes = 5;
    other.resolve();
    let digest = other.stage_digest(StageId::Box, data.vocab.len());
    let path = checkpoint_path(dir.path(), StageId::Box);
    assert!(matches!(
        load_checkpoint(&path, Some(&digest), false),
        Err(TrainError::DigestMismatch { .. })
    ));
    let other_data = corpus(&other);
    let err = train_stage(
        &other,
        &other_data,
        dir.path(),
        StageId::Box,
        &TrainOptions { resume: true, epochs: Some(2), ..Default::default() },
    );
    assert!(matches!(err, Err(TrainError::DigestMismatch { .. })));
}

fn resume_matches(stage: StageId) {
    let c = tiny_config();
    let data = corpus(&c);
    let straight = tempfile::tempdir().unwrap();
    let broken = tempfile::tempdir().unwrap();
    for dir in [straight.path(), broken.path()] {
        if stage != StageId::Extractor && stage != StageId::Box {
            train_stage(&c, &data, dir, StageId::Extractor, &TrainOptions { epochs: Some(1), ..Default::default() }).unwrap();
        }
        if stage == StageId::Image {
            train_stage(&c, &data, dir, StageId::Box, &TrainOptions { epochs: Some(1), ..Default::default() }).unwrap();
        }
    }
    let full = train_stage(&c, &data, straight.path(), stage, &TrainOptions { epochs: Some(3), ..Default::default() }).unwrap();
    train_stage(&c, &data, broken.path(), stage, &TrainOptions { epochs: Some(1), ..Default::default() }).unwrap();
    let rest = train_stage(
        &c,
        &data,
        broken.path(),
        stage,
        &TrainOptions { resume: true, epochs: Some(3), ..Default::default() },
    )
    .unwrap();
    assert_eq!(rest.len(), 2);
    for (a, b) in full[1..].iter().zip(&rest) {
        assert_eq!(a.epoch, b.epoch);
        for (k, v) in &a.losses {
            assert!((v - b.losses[k]).abs() <= 1e-6, "{stage} {k}: {v} vs {}", b.losses[k]);
        }
    }
}

#[test]
fn resumed_box_training_matches_unbroken_run() {
    resume_matches(StageId::Box);
}

#[test]
fn resumed_shape_training_matches_unbroken_run() {
    resume_matches(StageId::Shape);
}

#[test]
fn resumed_image_training_matches_unbroken_run() {
    resume_matches(StageId::Image);
}

#[test]
fn resumed_extractor_training_matches_unbroken_run() {
    resume_matches(StageId::Extractor);
}

#[test]
fn frozen_upstream_parameters_do_not_change() {
    let c = tiny_config();
    let data = corpus(&c);
    let fx = ExtractorStage::new(1, c.extractor.model.clone()).unwrap();
    let text = box_stage(&c, &data.vocab, data.train.class_names.clone());
    let fx_before = snapshot(&fx.ps);
    let text_before = snapshot(&text.ps);

    let shape = ShapeStage::new(2, c.shape_stage.model.clone(), c.shape_stage.disc.clone()).unwrap();
    let shape_before = snapshot(&shape.ps);
    let mut st = ShapeTrainer::new(shape, &c.shape_stage, 0, Progress::fresh("d".into())).unwrap();
    st.run_epoch(&data.train, &fx).unwrap();
    assert_ne!(snapshot(&st.stage.ps), shape_before);

    let mut image_cfg = c.image_stage.clone();
    image_cfg.layouts = hiergen_train::config::LayoutSource::Predicted;
    let shape_trained = snapshot(&st.stage.ps);
    let s = embed_scenes(&text, &data.train).unwrap();
    let image = ImageStage::new(3, c.image_stage.model.clone(), c.image_stage.disc.clone()).unwrap();
    let mut it = ImageTrainer::new(image, &image_cfg, 0.5, 0, Progress::fresh("d".into())).unwrap();
    it.run_epoch(&data.train, &s, &fx, Some(&st.stage)).unwrap();

    assert_eq!(snapshot(&fx.ps), fx_before);
    assert_eq!(snapshot(&text.ps), text_before);
    assert_eq!(snapshot(&st.stage.ps), shape_trained);
}

#[test]
fn extractor_learns_crop_classes() {
    let mut c = tiny_config();
    c.data.train_count = 64;
    let data = corpus(&c);
    let (crops, labels) = object_crops(&data.train, c.extractor.crop_size).unwrap();
    assert_eq!(crops.dims()[0], labels.len());
    let fx = ExtractorStage::new(1, c.extractor.model.clone()).unwrap();
    let mut t = ExtractorTrainer::new(fx, &c.extractor, 0, Progress::fresh("d".into())).unwrap();
    let first = t.run_epoch(&crops, &labels).unwrap().losses["xent"];
    let mut last = first;
    for _ in 0..4 {
        last = t.run_epoch(&crops, &labels).unwrap().losses["xent"];
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn optimizer_defaults() {
    let c = Config::full_scale();
    assert_eq!((c.box_stage.optimizer.lr, c.box_stage.optimizer.beta1), (0.001, 0.9));
    assert_eq!((c.shape_stage.optimizer.lr, c.shape_stage.optimizer.beta1), (0.0002, 0.5));
    assert_eq!((c.image_stage.optimizer.lr, c.image_stage.optimizer.beta1), (0.0002, 0.5));
}

proptest! {
    #[test]
    fn learning_rate_never_increases(epoch in 1usize..300) {
        for spec in [
            OptimizerSpec::box_default(),
            OptimizerSpec::shape_default(),
            OptimizerSpec::image_default(),
            OptimizerSpec::extractor_default(),
        ] {
            prop_assert!(lr_at(&spec, epoch + 1) <= lr_at(&spec, epoch));
            prop_assert!(lr_at(&spec, epoch) >= 0.0);
        }
    }
}
