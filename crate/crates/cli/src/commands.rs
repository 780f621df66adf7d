use std::path::Path;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use boxmask_core::data::io::{frame_file, read_dataset, write_dataset, write_mask_png, MASKS_DIR};
use boxmask_core::data::synthetic::{generate_dataset, DatasetSpec, Difficulty};
use boxmask_core::eval::{
    ablate, baselines, evaluate, export_pseudo_labels, EvalReport, ExportPolicy, ModelPredictor, Predictor,
};
use boxmask_core::model::Model;
use boxmask_core::pipeline::train::LogRecord;
use boxmask_core::pipeline::{infer_video, parallel_map, train, variants, Checkpoint, PipelineConfig};
use boxmask_core::verify::{self, SuiteReport};
use serde_json::{json, Value};

use crate::config::{prepare_out_dir, prepare_out_file, require_dir, RunConfig};
use crate::{
    AblateArgs, CheckArgs, Cli, Command, EvalArgs, ExportArgs, GenDataArgs, InferArgs, InferOverrides, TrainArgs,
};

struct Globals {
    seed: Option<u64>,
    workers: Option<usize>,
}

impl Globals {
    fn workers(&self) -> usize {
        self.workers.unwrap_or(1)
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let g = Globals { seed: cli.seed, workers: cli.workers.map(|w| w as usize) };
    match cli.command {
        Command::GenData(a) => gen_data(&g, a),
        Command::Train(a) => train_cmd(&g, a),
        Command::Infer(a) => infer(&g, a),
        Command::Eval(a) => eval(&g, a),
        Command::Ablate(a) => ablate_cmd(&g, a),
        Command::ExportLabels(a) => export(&g, a),
        Command::Check(a) => check(&g, a),
    }
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialize"));
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    report.write_json(path).with_context(|| format!("writing report {}", path.display()))
}

fn gen_data(g: &Globals, a: GenDataArgs) -> Result<ExitCode> {
    prepare_out_dir(&a.out)?;
    let spec = DatasetSpec {
        num_sequences: a.num_seq,
        difficulty: if a.hard_distractors { Difficulty::Hard } else { Difficulty::Easy },
        height: a.height,
        width: a.width,
        num_frames: a.frames,
        seed: g.seed.unwrap_or(0),
    };
    let samples = generate_dataset(&spec)?;
    write_dataset(&a.out, &samples).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    print_json(&json!({ "out": a.out, "sequences": samples.len(), "spec": spec }));
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(g: &Globals, a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.pipeline.train.seed = seed;
    }
    if let Some(n) = a.iterations {
        cfg.pipeline.train.iterations = n;
    }
    cfg.pipeline.validate()?;
    let data = a
        .data
        .clone()
        .or(cfg.data.train.clone())
        .ok_or_else(|| anyhow!("no training data: pass --data or set data.train in the config"))?;
    require_dir(&data, "training data")?;
    if let Some(val) = &cfg.data.val {
        require_dir(val, "validation data")?;
    }
    if let Some(init) = &a.init {
        require_dir(init, "initial checkpoint")?;
    }
    prepare_out_dir(&a.out)?;

    let init = match &a.init {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ck.config.model != cfg.pipeline.model {
                bail!("initial checkpoint {} has different model dimensions", p.display());
            }
            Some(ck.params)
        }
        None => None,
    };
    let dataset = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
    std::fs::write(a.out.join("run_config.toml"), toml::to_string(&cfg)?)?;
    let total = cfg.pipeline.train.iterations;
    let mut on_log = |r: &LogRecord| {
        if (r.iter + 1) % 100 == 0 || r.iter + 1 == total {
            eprintln!("iter {:>6}/{total}  loss {:.4}  λ {:.4}  lr {:.2e}", r.iter + 1, r.loss, r.lambda, r.lr);
        }
    };
    let outcome = train(&dataset, &cfg.pipeline, init, Some(&a.out), &mut on_log)?;
    let tail = outcome.log.len().saturating_sub(100);
    let recent = &outcome.log[tail..];
    let recent_loss = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len().max(1) as f64;
    let mut summary = json!({
        "iterations": outcome.log.len(),
        "mean_loss_last_100": recent_loss,
        "checkpoint": outcome.checkpoint,
    });
    if let Some(val) = &cfg.data.val {
        let predictor = ModelPredictor::new(Model::new(cfg.pipeline.model.clone())?, outcome.params, cfg.pipeline.clone())?;
        let val_data = read_dataset(val)?;
        let report = evaluate(&val_data, &predictor, "model", &cfg.pipeline, g.workers.or(cfg.workers).unwrap_or(1), None)?;
        write_report(&a.out.join("val_report.json"), &report)?;
        summary["val_j"] = json!(report.dataset_j);
    }
    print_json(&summary);
    Ok(ExitCode::SUCCESS)
}

fn apply_overrides(cfg: &mut PipelineConfig, o: &InferOverrides) -> Result<()> {
    if let Some(v) = &o.variant {
        variants().get(v)?;
        cfg.variant = v.clone();
    }
    if let Some(v) = o.num_frames {
        cfg.num_frames = v;
    }
    if let Some(v) = o.interval {
        cfg.interval = v;
    }
    if let Some(v) = o.sd_iters {
        cfg.sd_iters_infer = v;
    }
    if let Some(v) = o.crop_scale {
        cfg.crop_scale_infer = v;
    }
    cfg.validate()?;
    Ok(())
}

fn load_predictor(path: &Path, overrides: &InferOverrides) -> Result<ModelPredictor> {
    require_dir(path, "checkpoint")?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let base = ModelPredictor::from_checkpoint(&ck)?;
    let mut cfg = base.config.clone();
    apply_overrides(&mut cfg, overrides)?;
    Ok(base.with_config(cfg)?)
}

fn infer(g: &Globals, a: InferArgs) -> Result<ExitCode> {
    require_dir(&a.data, "data")?;
    let predictor = load_predictor(&a.ckpt, &a.overrides)?;
    prepare_out_dir(&a.out)?;
    let dataset = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let variant = variants().get(&predictor.config.variant)?;
    let results = parallel_map(dataset.len(), g.workers(), |i| -> Result<Value> {
        let sample = &dataset[i];
        let pred = infer_video(&predictor.model, &predictor.params, sample, &predictor.config, variant, 1)?;
        let dir = a.out.join(&sample.id).join(MASKS_DIR);
        prepare_out_dir(&dir)?;
        for (f, m) in pred.frames.iter().zip(&pred.masks) {
            write_mask_png(&dir.join(frame_file(*f)), m)?;
        }
        let objectives: Vec<Option<f64>> = pred.traces.iter().map(|(t, _)| t.final_objective()).collect();
        Ok(json!({ "id": sample.id, "frames": pred.frames.len(), "final_objectives": objectives }))
    });
    let sequences = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = json!({ "config": predictor.config, "sequences": sequences });
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print_json(&json!({ "out": a.out, "sequences": sequences.len() }));
    Ok(ExitCode::SUCCESS)
}

fn eval(g: &Globals, a: EvalArgs) -> Result<ExitCode> {
    require_dir(&a.data, "data")?;
    prepare_out_file(&a.report)?;
    if let Some(d) = &a.dump {
        prepare_out_dir(d)?;
    }
    let dataset = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let report = match (&a.baseline, &a.ckpt) {
        (Some(name), _) => {
            let predictor: &dyn Predictor = baselines().get(name)?;
            evaluate(&dataset, predictor, name, &PipelineConfig::default(), g.workers(), a.dump.as_deref())?
        }
        (None, Some(ckpt)) => {
            let predictor = load_predictor(ckpt, &a.overrides)?;
            evaluate(&dataset, &predictor, "model", &predictor.config, g.workers(), a.dump.as_deref())?
        }
        (None, None) => bail!("pass --ckpt or --baseline"),
    };
    write_report(&a.report, &report)?;
    print_json(&json!({ "predictor": report.predictor, "dataset_j": report.dataset_j, "report": a.report }));
    Ok(ExitCode::SUCCESS)
}

fn parse_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

fn ablate_cmd(g: &Globals, a: AblateArgs) -> Result<ExitCode> {
    require_dir(&a.data, "data")?;
    boxmask_core::eval::axes().get(&a.axis)?;
    prepare_out_file(&a.report)?;
    let predictor = load_predictor(&a.ckpt, &InferOverrides::default())?;
    let dataset = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let values: Option<Vec<Value>> = a.values.as_ref().map(|v| v.iter().map(|s| parse_value(s.trim())).collect());
    let report = ablate(&dataset, &predictor, &a.axis, values.as_deref(), g.workers())?;
    write_report(&a.report, &report)?;
    let cells: Vec<Value> = report
        .ablation
        .iter()
        .flat_map(|t| &t.cells)
        .map(|c| json!({ "value": c.value, "dataset_j": c.dataset_j }))
        .collect();
    print_json(&json!({ "axis": a.axis, "cells": cells, "report": a.report }));
    Ok(ExitCode::SUCCESS)
}

fn export(g: &Globals, a: ExportArgs) -> Result<ExitCode> {
    require_dir(&a.data, "data")?;
    let policy = ExportPolicy { stride: a.stride, max_frames: a.max_frames };
    policy.validate()?;
    let predictor = load_predictor(&a.ckpt, &InferOverrides::default())?;
    prepare_out_dir(&a.out)?;
    let manifest = export_pseudo_labels(&a.data, &predictor, policy, &a.out, g.workers())?;
    let failed: Vec<&str> = manifest.failures().map(|s| s.id.as_str()).collect();
    let written: usize = manifest.sequences.iter().map(|s| s.frames.len()).sum();
    print_json(&json!({ "out": a.out, "sequences": manifest.sequences.len(), "masks": written, "failed": failed }));
    if !failed.is_empty() {
        bail!("{} of {} sequences failed; see the manifest", failed.len(), manifest.sequences.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn check(g: &Globals, a: CheckArgs) -> Result<ExitCode> {
    if let Some(r) = &a.report {
        prepare_out_file(r)?;
    }
    let all = !(a.grad || a.oracle || a.invariance);
    let seed = g.seed.unwrap_or(0);
    let mut suites: Vec<SuiteReport> = Vec::new();
    let mut run = |suite: boxmask_core::Result<SuiteReport>| -> Result<()> {
        let suite = suite?;
        eprintln!("{} {}", if suite.passed() { "PASS" } else { "FAIL" }, suite.summary());
        suites.push(suite);
        Ok(())
    };
    if all || a.grad {
        run(verify::op_gradient_suite(&[seed, seed + 1, seed + 2], 1e-6))?;
        run(verify::solver_gradient_suite(a.cases, 15, 1e-5, 1e-4, seed))?;
        run(verify::pipeline_gradient_suite(1e-5, 1e-4, seed))?;
    }
    if all || a.oracle {
        run(verify::oracle_suite(a.cases, a.sd_iters, 1e-6, seed))?;
    }
    if all || a.invariance {
        run(verify::monotonicity_suite(a.cases, 15, seed))?;
        run(verify::invariance_suite(a.cases, seed))?;
    }
    let failed: Vec<&str> = suites.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
    let report = json!({ "passed": failed.is_empty(), "suites": suites });
    if let Some(path) = &a.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    print_json(&json!({
        "passed": failed.is_empty(),
        "suites": suites.iter().map(|s| json!({ "name": s.name, "passed": s.passed(), "failures": s.failures(), "worst": s.worst() })).collect::<Vec<_>>(),
    }));
    if !failed.is_empty() {
        bail!("failing suites: {}", failed.join(", "));
    }
    Ok(ExitCode::SUCCESS)
}
