//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Trend criteria use the default world and 20 seeds.

mod common;

use std::time::{Duration, Instant};

use common::*;
use potd_core::eval::{average_precision, evaluate, ApMethod, EvalConfig};
use potd_core::experiment::{run_experiment, write_rows, ExperimentOutcome, ExperimentSpec, EXPERIMENTS};
use potd_core::geometry::{iou, nms, ScoredBoxSet};
use potd_core::gradcheck::{run_suite, SuiteConfig};
use potd_core::labelling::Labeller;
use rand::Rng;

const SEEDS: std::ops::Range<u64> = 0..20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn criterion(id: u32, name: &str, budget: Option<u64>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = f();
    let took = t.elapsed();
    let pass = out.pass && budget.is_none_or(|b| took <= Duration::from_secs(b));
    let budget = budget.map_or("no budget".to_string(), |b| format!("budget {b}s"));
    println!(
        "{} [{id}] {name}: {} ({:.1}s, {budget})",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64(),
    );
    pass
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn wins(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x > y).count()
}

fn run(name: &str, shots: &[usize]) -> ExperimentOutcome {
    let mut spec = ExperimentSpec::new(name, SEEDS.collect()).unwrap();
    spec.shots = shots.to_vec();
    run_experiment(&spec).unwrap()
}

fn gradients() -> Outcome {
    let results = run_suite(&SuiteConfig::default()).unwrap();
    let worst = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    Outcome {
        pass: failing.is_empty() && results.iter().all(|r| r.instances >= 100) && worst <= 1e-6,
        detail: format!(
            "{} checks x {} instances, max relative error {worst:.2e} (tol 1e-6), failing {failing:?}",
            results.len(),
            results[0].instances
        ),
    }
}

fn geometry() -> Outcome {
    let mut r = rng(11);
    let mut nms_bad = 0;
    for _ in 0..1000 {
        let n = r.random_range(0..=8);
        let boxes: Vec<_> = (0..n).map(|_| random_box(&mut r)).collect();
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64 / 4.0).collect();
        let t = r.random_range(0.0..=1.0);
        let keep = r.random_range(1..10);
        let set = ScoredBoxSet::new(boxes.clone(), scores.clone()).unwrap();
        nms_bad += (nms(&set, t, keep) != oracle_nms(&boxes, &scores, t, keep)) as usize;
    }
    let mut iou_bad = 0;
    for _ in 0..100_000 {
        let (a, b) = (random_box(&mut r), random_box(&mut r));
        let v = iou(&a, &b);
        iou_bad += (v != iou(&b, &a) || !(0.0..=1.0).contains(&v) || iou(&a, &a) != 1.0) as usize;
    }
    Outcome {
        pass: nms_bad == 0 && iou_bad == 0,
        detail: format!("NMS mismatches {nms_bad}/1000, IoU violations {iou_bad}/100000"),
    }
}

fn labelling() -> Outcome {
    let mut r = rng(12);
    let (mut mismatches, mut violations) = (0, 0);
    for _ in 0..1000 {
        let inst = random_labelling_instance(&mut r);
        violations += labelling_violations(&inst).len();
        for lab in [Labeller::Rol, Labeller::Oicr] {
            let got = potd_core::labelling::label_with(lab, &inst.scores, &inst.boxes, &inst.label, &inst.cfg).unwrap();
            mismatches += (*got.values() != reference_labels(&inst, lab)) as usize;
        }
    }
    Outcome {
        pass: mismatches == 0 && violations == 0,
        detail: format!("reference mismatches {mismatches}/2000, invariant violations {violations} over 1000 instances"),
    }
}

fn evaluation() -> Outcome {
    let ap = average_precision(&[true, false, true], 2, &EvalConfig::default()).unwrap();
    let expected = (6.0 + 5.0 * 2.0 / 3.0) / 11.0;
    let mut r = rng(13);
    let mut bad = 0;
    for _ in 0..100 {
        let inst = random_eval_instance(&mut r);
        for m in [ApMethod::Voc07_11point, ApMethod::AllPoints] {
            let cfg = EvalConfig { ap_method: m, ..EvalConfig::default() };
            let (per_class, map) = oracle_evaluate(&inst, cfg.iou_threshold, m);
            let ok = match evaluate(&inst.dets, &inst.gt, inst.classes, &cfg) {
                Ok(rep) => {
                    map.is_some_and(|v| (v - rep.map).abs() < 1e-12)
                        && rep.per_class.iter().zip(&per_class).all(|(a, b)| match (a, b) {
                            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                            (None, None) => true,
                            _ => false,
                        })
                }
                Err(_) => map.is_none(),
            };
            bad += !ok as usize;
        }
    }
    Outcome {
        pass: (ap - expected).abs() <= 1e-9 && bad == 0,
        detail: format!("fixture AP {ap:.10} (expected {expected:.10}), oracle mismatches {bad}/200"),
    }
}

fn table3() -> Outcome {
    let out = run("table3", &[1]);
    let ft = out.cell_maps("ft.1shot");
    let sdk = out.cell_maps("ft_sdk.1shot");
    let full = out.cell_maps("ft_sdk_bd.1shot");
    let (a, b, c) = (mean(&ft), mean(&sdk), mean(&full));
    let w = wins(&full, &ft);
    Outcome {
        pass: a <= b && b <= c && c - a >= 0.02 && w * 5 >= ft.len() * 4,
        detail: format!("FT {a:.4} <= FT+SDK {b:.4} <= FT+SDK+BD {c:.4}, gain {:+.4} (>= 0.02), wins {w}/{}", c - a, ft.len()),
    }
}

fn table5() -> Outcome {
    let out = run("table5", &[1, 30]);
    let gain = |s: usize| mean(&out.cell_maps(&format!("wstd.{s}shot"))) - mean(&out.cell_maps(&format!("lstd.{s}shot")));
    let (g1, g30) = (gain(1), gain(30));
    Outcome {
        pass: g1 >= 0.05 && g30 < g1,
        detail: format!(
            "1-shot LSTD {:.4} -> WSTD {:.4} (gain {g1:+.4}, >= 0.05); 30-shot gain {g30:+.4} < 1-shot gain",
            mean(&out.cell_maps("lstd.1shot")),
            mean(&out.cell_maps("wstd.1shot"))
        ),
    }
}

fn table6() -> Outcome {
    let out = run("table6", &[1]);
    let rol: Vec<f64> = (1..=3).map(|i| mean(&out.cell_maps(&format!("rol.cls{i}")))).collect();
    let oicr: Vec<f64> = (1..=3).map(|i| mean(&out.cell_maps(&format!("oicr.cls{i}")))).collect();
    let w = wins(&out.cell_maps("rol.cls3"), &out.cell_maps("oicr.cls3"));
    let n = SEEDS.count();
    Outcome {
        pass: rol[2] >= oicr[2] && w * 5 >= n * 4 && rol[0] <= rol[1] && rol[1] <= rol[2],
        detail: format!(
            "ROL {:.6}/{:.6}/{:.6}, OICR {:.6}/{:.6}/{:.6}, ROL wins at classifier 3 on {w}/{n} seeds",
            rol[0], rol[1], rol[2], oicr[0], oicr[1], oicr[2]
        ),
    }
}

fn determinism() -> Outcome {
    let csv = |name: &str| {
        let spec = ExperimentSpec::new(name, vec![0]).unwrap();
        let mut buf = Vec::new();
        write_rows(&run_experiment(&spec).unwrap().rows, &mut buf).unwrap();
        buf
    };
    let differing: Vec<&str> = EXPERIMENTS.into_iter().filter(|n| csv(n) != csv(n)).collect();
    Outcome {
        pass: differing.is_empty(),
        detail: format!("{} experiments run twice with seed 0, differing CSVs {differing:?}", EXPERIMENTS.len()),
    }
}

fn main() {
    let results = [
        criterion(1, "gradient suite", Some(30), gradients),
        criterion(2, "geometry oracle", Some(10), geometry),
        criterion(3, "labelling oracle", Some(10), labelling),
        criterion(4, "evaluation fixture and oracle", Some(5), evaluation),
        criterion(5, "low-shot regularizer ablation, 1-shot, 20 seeds", Some(300), table3),
        criterion(6, "weak-supervision gain, 20 seeds", Some(600), table5),
        criterion(7, "recurrent labelling vs baseline, 20 seeds", Some(600), table6),
        criterion(8, "experiment CSV determinism", None, determinism),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
