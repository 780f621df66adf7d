use boxmask_core::data::synthetic::{generate_dataset, DatasetSpec, Difficulty};
use boxmask_core::eval::{evaluate, ModelPredictor, Predictor};
use boxmask_core::model::ModelDims;
use boxmask_core::pipeline::{train, Checkpoint, PipelineConfig};

fn small_config(iterations: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.work_resolution = [24, 24];
    cfg.model = ModelDims {
        feature_dim: 8,
        hidden_dim: 8,
        stem_width: 4,
        backbone_widths: [6, 8],
        decoder_widths: [8, 6, 4],
        ..ModelDims::default()
    };
    cfg.train.iterations = iterations;
    cfg.train.checkpoint_every = 0;
    cfg
}

fn data(n: usize, seed: u64) -> Vec<boxmask_core::pipeline::VideoSample> {
    generate_dataset(&DatasetSpec {
        num_sequences: n,
        num_frames: 12,
        height: 48,
        width: 48,
        difficulty: Difficulty::Easy,
        seed,
    })
    .unwrap()
}

fn mean_loss(log: &[boxmask_core::pipeline::train::LogRecord]) -> f64 {
    log.iter().map(|r| r.loss).sum::<f64>() / log.len() as f64
}

#[test]
fn loss_halves_on_a_small_training_set() {
    let train_set = data(10, 21);
    let cfg = small_config(400);
    let outcome = train(&train_set, &cfg, None, None, &mut |_| {}).unwrap();
    let first = mean_loss(&outcome.log[..20]);
    let last = mean_loss(&outcome.log[outcome.log.len() - 50..]);
    assert!(last <= 0.5 * first, "loss went from {first} to {last}");
    assert!(outcome.log.iter().all(|r| r.loss.is_finite() && r.lambda > 0.0));
}

#[test]
fn saved_checkpoint_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = data(3, 4);
    let cfg = small_config(30);
    let outcome = train(&train_set, &cfg, None, Some(dir.path()), &mut |_| {}).unwrap();
    let ck = Checkpoint::load(outcome.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(ck.iteration, 30);
    assert_eq!(ck.config, cfg);

    let val = data(2, 99);
    let loaded = ModelPredictor::from_checkpoint(&ck).unwrap();
    let direct = ModelPredictor::new(ck.model().unwrap(), outcome.params.clone(), cfg.clone()).unwrap();
    let frames: Vec<usize> = (0..12).collect();
    for s in &val {
        assert_eq!(loaded.predict(s, &frames).unwrap(), direct.predict(s, &frames).unwrap());
    }
    let a = evaluate(&val, &loaded, "a", &cfg, 1, None).unwrap();
    let b = evaluate(&val, &direct, "b", &cfg, 2, None).unwrap();
    assert_eq!(a.dataset_j, b.dataset_j);
}

#[test]
fn training_resumes_from_given_weights() {
    let train_set = data(2, 8);
    let cfg = small_config(5);
    let first = train(&train_set, &cfg, None, None, &mut |_| {}).unwrap();
    let resumed = train(&train_set, &cfg, Some(first.params.clone()), None, &mut |_| {}).unwrap();
    let fresh = train(&train_set, &cfg, None, None, &mut |_| {}).unwrap();
    assert_eq!(first.log, fresh.log);
    assert_ne!(resumed.log[0].loss, first.log[0].loss);
}
