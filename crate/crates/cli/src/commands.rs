use std::io::Write;
use std::path::{Path, PathBuf};

use potd_core::eval::{evaluate, read_detections, write_detections, write_report, ApMethod};
use potd_core::experiment::{run_experiment, write_rows, write_summary, ExperimentSpec};
use potd_core::formats::{
    read_checkpoint, read_scenes, read_world, write_checkpoint, write_scenes, write_world, Checkpoint, SceneSetInfo,
};
use potd_core::gradcheck::{run_suite, SuiteConfig, CHECKS};
use potd_core::labelling::Labeller;
use potd_core::model::DetectorModel;
use potd_core::pipeline::{
    class_balanced_scenes, detect, ground_truth_of, lstd_finetune, test_scenes, train_source, wstd_train, RunReport,
};
use potd_core::synthworld::{make_world, sample_scenes, AnnotationMode, Domain, Scene, World};

use crate::context::{open, Context, Failure};
use crate::Stage;

fn load_world(ctx: &Context, path: Option<&Path>) -> Result<World, Failure> {
    match path {
        Some(p) => read_world(open(p)?).map_err(|e| Failure::in_file(p, e)),
        None => Ok(make_world(&ctx.world_config()?)?),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    read_checkpoint(open(path)?).map_err(|e| Failure::in_file(path, e))
}

pub fn world(ctx: &mut Context) -> Result<(), Failure> {
    let world = make_world(&ctx.world_config()?)?;
    let cfg = ctx.stage_config()?;
    ctx.write("world.txt", |w| Ok(write_world(w, &world)?))?;
    let seed = cfg.seed;
    let sets: [(&str, &str, Vec<Scene>); 4] = [
        (
            "source_train.scenes",
            "source.train",
            sample_scenes(&world, Domain::Source, AnnotationMode::Full, seed, "source.train", cfg.source_scenes),
        ),
        (
            "target_shots.scenes",
            "target.shots",
            class_balanced_scenes(&world, Domain::Target, AnnotationMode::Full, cfg.shots_per_class, seed, "target.shots"),
        ),
        (
            "target_weak.scenes",
            "target.weak",
            class_balanced_scenes(&world, Domain::Target, AnnotationMode::Weak, cfg.weak_scenes_per_class, seed, "target.weak"),
        ),
        ("target_test.scenes", "target.test", test_scenes(&world, Domain::Target, &cfg)),
    ];
    for (file, label, scenes) in sets {
        let info = SceneSetInfo {
            seed,
            label: label.to_string(),
        };
        ctx.write(file, |w| Ok(write_scenes(w, &info, &scenes)?))?;
    }
    println!("world seed {} written to {}", world.config().seed, ctx.out_dir.display());
    Ok(())
}

/// Report JSON without the wall-clock, so that it is reproducible; the
/// manifest carries the timing.
fn report_json(r: &RunReport) -> Result<String, Failure> {
    let mut v = serde_json::to_value(r).map_err(|e| Failure::new(1, e.to_string()))?;
    if let Some(o) = v.as_object_mut() {
        o.remove("wall_clock_secs");
    }
    serde_json::to_string_pretty(&v).map_err(|e| Failure::new(1, e.to_string()))
}

fn write_stage_outputs(ctx: &mut Context, stage: &str, model: DetectorModel, report: &RunReport) -> Result<(), Failure> {
    let ck = Checkpoint {
        model,
        seed: ctx.seed,
        config: ctx.doc.clone(),
    };
    ctx.write(&format!("{stage}.ckpt"), |w| Ok(write_checkpoint(w, &ck)?))?;
    ctx.write(&format!("{stage}_losses.csv"), |w| {
        let terms: Vec<&String> = report.loss_curves.keys().collect();
        let epochs = report.loss_curves.values().map(Vec::len).max().unwrap_or(0);
        write!(w, "epoch")?;
        for t in &terms {
            write!(w, ",{t}")?;
        }
        writeln!(w)?;
        for e in 0..epochs {
            write!(w, "{e}")?;
            for t in &terms {
                write!(w, ",{}", report.loss_curves[*t][e])?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    let json = report_json(report)?;
    ctx.write(&format!("{stage}_report.json"), |w| Ok(writeln!(w, "{json}")?))?;
    println!("{stage}: mAP {:.4}", report.map);
    if !report.per_classifier_map.is_empty() {
        let per: Vec<String> = report.per_classifier_map.iter().map(|m| format!("{m:.4}")).collect();
        println!("{stage}: per-classifier mAP {}", per.join(" "));
    }
    Ok(())
}

pub fn train(
    ctx: &mut Context,
    stage: Stage,
    init: Option<PathBuf>,
    world_path: Option<PathBuf>,
    labeller: Option<Labeller>,
    epochs: Option<usize>,
) -> Result<(), Failure> {
    let mut cfg = ctx.stage_config()?;
    if let Some(l) = labeller {
        cfg.labeller = l;
        ctx.doc.set("labeller", l);
    }
    let world = load_world(ctx, world_path.as_deref())?;
    let input = |what: &str| -> Result<Checkpoint, Failure> {
        let p = init
            .as_deref()
            .ok_or_else(|| Failure::new(Failure::MISSING_INPUT, format!("this stage needs --init <{what} checkpoint>")))?;
        load_checkpoint(p)
    };
    let (name, (model, report)) = match stage {
        Stage::Source => {
            if let Some(e) = epochs {
                cfg.source_epochs = e;
                ctx.doc.set("source_epochs", e);
            }
            ("source", train_source(&world, &cfg)?)
        }
        Stage::Lstd => {
            if let Some(e) = epochs {
                cfg.lstd_epochs = e;
                ctx.doc.set("lstd_epochs", e);
            }
            let src = input("source")?;
            ("lstd", lstd_finetune(&src.model, &world, &cfg)?)
        }
        Stage::Wstd => {
            if let Some(e) = epochs {
                cfg.wstd_epochs = e;
                ctx.doc.set("wstd_epochs", e);
            }
            let warm = input("warm-up")?;
            ("wstd", wstd_train(&warm.model, &world, &cfg)?)
        }
    };
    write_stage_outputs(ctx, name, model, &report)
}

pub fn eval(
    ctx: &mut Context,
    scenes_path: PathBuf,
    detections: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    classifier: Option<usize>,
    ap_method: Option<ApMethod>,
) -> Result<(), Failure> {
    let mut cfg = ctx.stage_config()?.eval;
    if let Some(m) = ap_method {
        cfg.ap_method = m;
        ctx.doc.set("ap_method", m);
    }
    let (_, scenes) = read_scenes(open(&scenes_path)?).map_err(|e| Failure::in_file(&scenes_path, e))?;
    let classes = scenes.first().map(|s| s.image_label.len()).unwrap_or(0);
    let dets = match (&detections, &checkpoint) {
        (Some(p), _) => read_detections(open(p)?).map_err(|e| Failure::in_file(p, e))?,
        (None, Some(p)) => {
            let ck = load_checkpoint(p)?;
            let head = match classifier {
                None => ck.model.detection_head(),
                Some(i) => ck.model.rol_heads.get(i.wrapping_sub(1)).ok_or_else(|| {
                    Failure::config(format!("--classifier {i}: model has {} refinement classifiers", ck.model.rol_heads.len()))
                })?,
            };
            if head.num_classes() != classes + 1 {
                return Err(Failure::config(format!(
                    "checkpoint detects {} classes but the scenes have {classes}",
                    head.num_classes() - 1
                )));
            }
            let dets = detect(&ck.model, head, &scenes)?;
            ctx.write("detections.csv", |w| Ok(write_detections(w, &dets)?))?;
            dets
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    let report = evaluate(&dets, &ground_truth_of(&scenes), classes, &cfg)?;
    ctx.write("eval.csv", |w| Ok(write_report(w, &report)?))?;
    println!("mAP {:.6}", report.map);
    Ok(())
}

pub fn experiment(ctx: &mut Context, name: &str, seeds: Option<String>, shots: Option<String>) -> Result<(), Failure> {
    let mut doc = ctx.doc.clone();
    doc.set("experiment", name);
    match seeds {
        Some(s) => doc.set("seeds", s),
        None if doc.get_str("seeds").is_none() => doc.set("seeds", ctx.seed),
        None => {}
    }
    if let Some(s) = shots {
        doc.set("shots", s);
    }
    // The master seed is replaced per run by the seed list.
    let mut spec_doc = potd_core::kvtext::KvDoc::default();
    for k in doc.keys().filter(|k| *k != "seed") {
        spec_doc.set(k, doc.get_str(k).unwrap_or_default());
    }
    let spec = ExperimentSpec::from_kv(&spec_doc)?;
    spec.validate()?;
    ctx.doc = doc;
    ctx.seeds = spec.seeds.clone();
    let out = run_experiment(&spec)?;
    ctx.write(&format!("{name}.csv"), |w| Ok(write_rows(&out.rows, w)?))?;
    let summary = out.summary();
    ctx.write(&format!("{name}_summary.csv"), |w| Ok(write_summary(&summary, w)?))?;
    for c in &summary {
        println!("{:<18} mAP {:.4} +/- {:.4} ({} seeds)", c.cell, c.mean_map, c.sd_map, c.seeds);
    }
    Ok(())
}

pub fn gradcheck(
    ctx: &mut Context,
    tolerance: Option<f64>,
    only: Option<String>,
    instances: Option<usize>,
) -> Result<(), Failure> {
    let defaults = SuiteConfig::default();
    let cfg = SuiteConfig {
        instances: instances.unwrap_or(defaults.instances),
        tolerance: tolerance.unwrap_or(defaults.tolerance),
        seed: ctx.seed,
        only,
        ..defaults
    };
    if !(cfg.tolerance >= 0.0) {
        return Err(Failure::config("--tolerance must be nonnegative"));
    }
    let results = run_suite(&cfg).map_err(|e| match e {
        potd_core::Error::InvalidConfig { .. } => Failure::config(format!("{e}; checks: {}", CHECKS.join(", "))),
        other => other.into(),
    })?;
    ctx.write("gradcheck.csv", |w| {
        writeln!(w, "check,instances,max_relative_error,worst_instance,passed")?;
        for r in &results {
            writeln!(w, "{},{},{:e},{},{}", r.name, r.instances, r.max_relative_error, r.worst_instance, r.passed)?;
        }
        Ok(())
    })?;
    for r in &results {
        println!(
            "{} {:<16} max relative error {:.3e} (tolerance {:.1e})",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.max_relative_error,
            cfg.tolerance
        );
    }
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failing.is_empty() {
        ctx.deferred = Some(Failure::new(Failure::GRADCHECK, format!("gradient check failed for {}", failing.join(", "))));
    }
    Ok(())
}
