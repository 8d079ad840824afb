use std::sync::Arc;
use std::time::Instant;

use polsar_mcnn::autodiff::{checkpoint_bytes, AdamState};
use polsar_mcnn::models::{classify_map, evaluate, predict_set, train, Model, ModelConfig, TrainOptions, Variant};
use polsar_mcnn::polsar::{
    coherency_matrix, extract_patches, pauli_vector, sample_split, to_amplitude_phase, ChannelCube, CubeForm, PatchSet,
    SplitPolicy,
};
use polsar_mcnn::synth::{generate, SynthSpec};

fn scene(seed: u64, size: usize) -> (Arc<ChannelCube>, PatchSet) {
    let spec = SynthSpec { height: size, width: size, block: size / 4, ..SynthSpec::three_class(seed) };
    let (s, labels) = generate(&spec).unwrap();
    let t = coherency_matrix(&pauli_vector(&s).unwrap(), 3).unwrap();
    let cube = Arc::new(to_amplitude_phase(&t));
    let patches = extract_patches(Arc::clone(&cube), &labels, 14).unwrap();
    (cube, patches)
}

fn small(variant: Variant) -> ModelConfig {
    ModelConfig { widths: [8, 12, 12], fc_width: 32, growth: 4, multiplier: 2, ..ModelConfig::emisar(variant, 3) }
}

fn opts(epochs: usize, seed: u64) -> TrainOptions {
    TrainOptions { lr: 1e-3, epochs, batch_size: 32, seed, eval_subsample: 0, eval_batch: 128 }
}

#[test]
fn separable_scene_is_learned_within_ten_epochs() {
    let (_, patches) = scene(3, 64);
    let (tr, _) = sample_split(&patches, 100, 1, SplitPolicy::Strict).unwrap();
    let mut model: Model = Model::new(small(Variant::Mcnn), 1).unwrap();
    model.fit_input_stats(&tr).unwrap();
    let mut adam = AdamState::new(1e-3);
    let start = Instant::now();
    let log = train(&mut model, &mut adam, &tr, None, &opts(10, 2), |_| {}).unwrap();
    eprintln!("10 epochs on {} samples: {:?}", tr.len(), start.elapsed());
    assert_eq!(log.len(), 10);
    let (cm, _) = evaluate(&model, &tr, 128).unwrap();
    let oa = cm.aa_oa().unwrap().1;
    assert!(oa >= 0.99, "train OA {oa}");
}

#[test]
fn training_is_deterministic() {
    let (_, patches) = scene(4, 32);
    let (tr, test) = sample_split(&patches, 20, 1, SplitPolicy::CapAtAvailable).unwrap();
    let run = || {
        let mut model: Model = Model::new(small(Variant::Dmcnn), 7).unwrap();
        model.fit_input_stats(&tr).unwrap();
        let mut adam = AdamState::new(1e-3);
        let log =
            train(&mut model, &mut adam, &tr, Some(&test), &TrainOptions { eval_subsample: 50, ..opts(2, 9) }, |_| {}).unwrap();
        (log, checkpoint_bytes(&model.store, Some(&adam)))
    };
    let (la, ca) = run();
    let (lb, cb) = run();
    assert_eq!(la, lb);
    assert!(ca == cb, "checkpoints differ");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (_, patches) = scene(5, 32);
    let (tr, _) = sample_split(&patches, 10, 1, SplitPolicy::CapAtAvailable).unwrap();
    let mut model: Model = Model::new(small(Variant::M4), 3).unwrap();
    model.fit_input_stats(&tr).unwrap();
    let before: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.clone()).collect();
    let mut adam = AdamState::new(0.0);
    train(&mut model, &mut adam, &tr, None, &TrainOptions { lr: 0.0, ..opts(2, 1) }, |_| {}).unwrap();
    let after: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn zero_epochs_matches_fresh_model() {
    let (_, patches) = scene(6, 32);
    let (tr, test) = sample_split(&patches, 10, 1, SplitPolicy::CapAtAvailable).unwrap();
    let mut trained: Model = Model::new(small(Variant::Mcnn), 5).unwrap();
    trained.fit_input_stats(&tr).unwrap();
    let mut fresh = trained.clone();
    fresh.fit_input_stats(&tr).unwrap();
    let mut adam = AdamState::new(1e-3);
    assert!(train(&mut trained, &mut adam, &tr, None, &opts(0, 1), |_| {}).unwrap().is_empty());
    let idx: Vec<usize> = (0..test.len()).step_by(7).collect();
    assert_eq!(predict_set(&trained, &test, &idx, 64).unwrap(), predict_set(&fresh, &test, &idx, 64).unwrap());
}

#[test]
fn map_predictions_equal_evaluation() {
    let (cube, patches) = scene(8, 24);
    let (tr, _) = sample_split(&patches, 10, 1, SplitPolicy::CapAtAvailable).unwrap();
    let mut model: Model = Model::new(small(Variant::Mcnn), 5).unwrap();
    model.fit_input_stats(&tr).unwrap();
    let mut adam = AdamState::new(1e-3);
    train(&mut model, &mut adam, &tr, None, &opts(1, 1), |_| {}).unwrap();
    let (labels, probs) = classify_map(&model, &cube, 50).unwrap();
    assert_eq!(labels.len(), 24 * 24);
    assert_eq!(probs.len(), 24 * 24 * 3);
    let (_, preds) = evaluate(&model, &patches, 37).unwrap();
    for (s, p) in patches.samples.iter().zip(&preds) {
        assert_eq!(labels[s.row * 24 + s.col] as usize, *p);
    }
    let idx: Vec<usize> = (0..patches.len()).collect();
    let detailed = predict_set(&model, &patches, &idx, 13).unwrap();
    for (s, d) in patches.samples.iter().zip(&detailed) {
        let px = s.row * 24 + s.col;
        let from_map: Vec<f32> = probs[px * 3..px * 3 + 3].to_vec();
        let from_eval: Vec<f32> = d.probs.iter().map(|&v| v as f32).collect();
        assert_eq!(from_map, from_eval);
    }
}

#[test]
fn constant_cube_gives_constant_map() {
    let cube =
        ChannelCube { height: 10, width: 12, channels: 9, form: CubeForm::AmpPhase, data: vec![0.5; 9 * 120], stats: None };
    let model: Model = Model::new(small(Variant::Dmcnn), 2).unwrap();
    let (labels, _) = classify_map(&model, &cube, 32).unwrap();
    assert!(labels.iter().all(|&l| l == labels[0]));
}

#[test]
fn form_mismatch_is_rejected_before_training() {
    let (_, patches) = scene(2, 24);
    let mut model: Model = Model::new(small(Variant::CnnV1), 1).unwrap();
    let mut adam = AdamState::new(1e-3);
    let err = train(&mut model, &mut adam, &patches, None, &opts(1, 1), |_| {}).unwrap_err();
    assert!(err.to_string().contains("real_imag"), "{err}");
}
