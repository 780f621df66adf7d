use super::ablation::NUM_FRAMES;
use super::*;
use crate::data::io::{read_mask_png, write_dataset, BOXES_FILE};
use crate::data::synthetic::{generate_dataset, DatasetSpec, Difficulty};
use crate::model::ModelDims;
use proptest::prelude::*;
use serde_json::json;

fn mask(h: usize, w: usize, on: &[usize]) -> Tensor {
    let mut m = Tensor::zeros(&[h, w, 1]);
    for &i in on {
        m.data_mut()[i] = 1.0;
    }
    m
}

fn data(n: usize, frames: usize, difficulty: Difficulty) -> Vec<VideoSample> {
    generate_dataset(&DatasetSpec { num_sequences: n, num_frames: frames, height: 40, width: 40, difficulty, seed: 3 })
        .unwrap()
}

fn tiny_predictor() -> ModelPredictor {
    let mut cfg = PipelineConfig::default();
    cfg.work_resolution = [16, 16];
    cfg.interval = 2;
    cfg.model = ModelDims {
        feature_dim: 6,
        hidden_dim: 6,
        stem_width: 4,
        backbone_widths: [3, 4],
        decoder_widths: [4, 4, 3],
        ..ModelDims::default()
    };
    let model = Model::new(cfg.model.clone()).unwrap();
    let params = model.init_params(11);
    ModelPredictor::new(model, params, cfg).unwrap()
}

#[test]
fn jaccard_examples() {
    let a = mask(2, 2, &[0, 1]);
    assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
    assert_eq!(jaccard(&a, &mask(2, 2, &[2, 3])).unwrap(), 0.0);
    assert_eq!(jaccard(&mask(2, 2, &[0, 1]), &Tensor::ones(&[2, 2, 1])).unwrap(), 0.5);
    assert_eq!(jaccard(&mask(2, 2, &[]), &mask(2, 2, &[])).unwrap(), 1.0);
    assert!(jaccard(&a, &mask(2, 3, &[])).is_err());
}

proptest! {
    #[test]
    fn jaccard_symmetric_and_exact(a in prop::collection::vec(any::<bool>(), 12), b in prop::collection::vec(any::<bool>(), 12)) {
        let to = |v: &[bool]| Tensor::new(&[3, 4, 1], v.iter().map(|&x| x as u8 as f64).collect()).unwrap();
        let (ta, tb) = (to(&a), to(&b));
        let j = jaccard(&ta, &tb).unwrap();
        prop_assert_eq!(j, jaccard(&tb, &ta).unwrap());
        prop_assert!((0.0..=1.0).contains(&j));
        if a.iter().any(|&x| x) || b.iter().any(|&x| x) {
            prop_assert_eq!(j == 1.0, a == b);
        }
    }
}

#[test]
fn reference_predictors() {
    let ds = data(3, 4, Difficulty::Easy);
    let cfg = PipelineConfig::default();
    let oracle = evaluate(&ds, baselines().get(ORACLE).unwrap(), ORACLE, &cfg, 1, None).unwrap();
    assert_eq!(oracle.dataset_j, 1.0);
    let empty = evaluate(&ds, baselines().get(EMPTY).unwrap(), EMPTY, &cfg, 1, None).unwrap();
    assert_eq!(empty.dataset_j, 0.0);

    let boxed = evaluate(&ds, baselines().get(BOX_BASELINE).unwrap(), BOX_BASELINE, &cfg, 2, None).unwrap();
    let mut per_seq = Vec::new();
    for s in &ds {
        let gt = s.gt_masks.as_ref().unwrap();
        let mut total = 0.0;
        for (b, g) in s.boxes.iter().zip(gt) {
            let (mut inter, mut union) = (0.0, 0.0);
            for i in 0..40i64 {
                for j in 0..40i64 {
                    let inside = b.contains(i, j);
                    let fg = g.data()[(i * 40 + j) as usize] > 0.5;
                    inter += (inside && fg) as u8 as f64;
                    union += (inside || fg) as u8 as f64;
                }
            }
            total += inter / union;
        }
        per_seq.push(total / gt.len() as f64);
    }
    let expected = per_seq.iter().sum::<f64>() / per_seq.len() as f64;
    assert!((boxed.dataset_j - expected).abs() < 1e-12);
    assert!(boxed.dataset_j > 0.3 && boxed.dataset_j < 1.0);
}

#[test]
fn dataset_mean_is_sequence_weighted() {
    let mut ds = data(2, 2, Difficulty::Easy);
    ds.extend(data(1, 6, Difficulty::Easy).into_iter().map(|mut s| {
        s.id = "seq_long".into();
        s
    }));
    let r = evaluate(&ds, baselines().get(BOX_BASELINE).unwrap(), BOX_BASELINE, &PipelineConfig::default(), 1, None)
        .unwrap();
    let ids: Vec<&str> = r.sequences.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["seq_00000", "seq_00001", "seq_long"]);
    assert_eq!(r.sequences[2].frames, 6);
    let mean = r.sequences.iter().map(|s| s.mean_j).sum::<f64>() / 3.0;
    assert_eq!(r.dataset_j, mean);
}

#[test]
fn missing_ground_truth_is_an_error() {
    let mut ds = data(1, 2, Difficulty::Easy);
    ds[0].gt_masks = None;
    let err = evaluate(&ds, baselines().get(BOX_BASELINE).unwrap(), BOX_BASELINE, &PipelineConfig::default(), 1, None);
    assert!(matches!(err, Err(Error::Data(_))));
}

#[test]
fn model_evaluation_is_deterministic() {
    let ds = data(2, 4, Difficulty::Hard);
    let p = tiny_predictor();
    let a = evaluate(&ds, &p, "model", &p.config, 1, None).unwrap();
    let b = evaluate(&ds, &p, "model", &p.config, 2, None).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.dataset_j));
}

#[test]
fn ablating_frames_matches_direct_evaluation() {
    let ds = data(2, 5, Difficulty::Hard);
    let p = tiny_predictor();
    let table = ablate(&ds, &p, NUM_FRAMES, Some(&[json!(1), json!(3)]), 1).unwrap();
    let mut cfg = p.config.clone();
    cfg.num_frames = 1;
    let direct = evaluate(&ds, &p.with_config(cfg.clone()).unwrap(), "model", &cfg, 1, None).unwrap();
    let cells = &table.ablation.as_ref().unwrap().cells;
    assert_eq!(cells.len(), 2);
    assert_eq!(cells[0].dataset_j, direct.dataset_j);
    assert_eq!(cells[0].sequences, direct.sequences);
    assert_eq!(cells[1].dataset_j, table.dataset_j);
}

#[test]
fn ablation_rejects_unknown_axes_and_bad_values() {
    let ds = data(1, 2, Difficulty::Easy);
    let p = tiny_predictor();
    assert!(matches!(ablate(&ds, &p, "learning_rate", None, 1), Err(Error::Unknown { .. })));
    assert!(ablate(&ds, &p, NUM_FRAMES, Some(&[json!("three")]), 1).is_err());
    assert!(ablate(&ds, &p, "variant", Some(&[json!("nope")]), 1).is_err());
}

#[test]
fn axis_defaults() {
    let vals = |name: &str| axes().get(name).unwrap().default_values();
    assert_eq!(vals("num_frames"), [1, 3, 5, 7, 9, 11].map(|v| json!(v)));
    assert_eq!(vals("sd_iters"), [5, 10, 15, 20].map(|v| json!(v)));
    assert_eq!(vals("crop_scale"), [2.0, 3.0, 4.0, 5.0].map(|v| json!(v)));
    assert_eq!(vals("interval"), [1, 5, 10, 15].map(|v| json!(v)));
    assert_eq!(vals("variant").len(), 4);
}

#[test]
fn selected_frames_enumeration() {
    for n in [0, 1, 4, 5, 6, 37, 999, 1000, 1001, 1500] {
        for (k, max) in [(5, 200), (1, 10), (3, 7), (7, 1)] {
            let policy = ExportPolicy { stride: k, max_frames: max };
            let expected: Vec<usize> = (0..n).filter(|i| i % k == 0 && *i < max * k).collect();
            let got = selected_frames(n, &policy);
            assert_eq!(got, expected, "n={n} k={k} max={max}");
            assert!(got.len() <= max);
        }
    }
    assert_eq!(selected_frames(2000, &ExportPolicy::default()).len(), 200);
    assert!(ExportPolicy { stride: 0, max_frames: 3 }.validate().is_err());
    assert!(ExportPolicy { stride: 2, max_frames: 0 }.validate().is_err());
}

#[test]
fn export_stride_one_writes_every_frame() {
    let ds = data(1, 6, Difficulty::Easy);
    let out = tempfile::tempdir().unwrap();
    let policy = ExportPolicy { stride: 1, max_frames: 200 };
    let m = export_samples(&ds, baselines().get(ORACLE).unwrap(), policy, out.path(), 1).unwrap();
    assert_eq!(m.sequences[0].frames, (0..6).collect::<Vec<_>>());
    let masks = out.path().join("seq_00000").join(crate::data::io::MASKS_DIR);
    assert_eq!(std::fs::read_dir(&masks).unwrap().count(), 6);
    let back = read_mask_png(&masks.join("00003.png")).unwrap();
    assert_eq!(back, ds[0].gt_masks.as_ref().unwrap()[3]);
    let on_disk: ExportManifest =
        serde_json::from_str(&std::fs::read_to_string(out.path().join(export::MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, m);
}

#[test]
fn export_reports_failures_per_sequence() {
    let ds = data(3, 7, Difficulty::Easy);
    let src = tempfile::tempdir().unwrap();
    write_dataset(src.path(), &ds).unwrap();
    std::fs::write(src.path().join("seq_00001").join(BOXES_FILE), "{\"frame\": 0, \"box\": [1, 1, 3, 3]}\n").unwrap();
    let out = tempfile::tempdir().unwrap();
    let policy = ExportPolicy { stride: 3, max_frames: 200 };
    let m = export_pseudo_labels(src.path(), baselines().get(BOX_BASELINE).unwrap(), policy, out.path(), 1).unwrap();
    assert_eq!(m.sequences.len(), 3);
    assert_eq!(m.failures().count(), 1);
    assert!(m.sequences[1].error.is_some());
    for i in [0, 2] {
        assert_eq!(m.sequences[i].frames, [0, 3, 6]);
        assert!(m.sequences[i].error.is_none());
    }
}

#[test]
fn comparison_dump_writes_strips() {
    let ds = data(1, 2, Difficulty::Easy);
    let dir = tempfile::tempdir().unwrap();
    evaluate(&ds, baselines().get(BOX_BASELINE).unwrap(), BOX_BASELINE, &PipelineConfig::default(), 1, Some(dir.path()))
        .unwrap();
    let strip = crate::data::io::read_rgb_png(&dir.path().join("seq_00000").join("00001.png")).unwrap();
    assert_eq!(strip.shape(), [40, 120, 3]);
}
