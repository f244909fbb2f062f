//! Central-difference verification of every analytic gradient in the crate.
//!
//! Each check draws random instances, evaluates the loss value by the most
//! direct route available (for the model paths: the full grid forward pass
//! rather than the pooled shortcut the trainer uses) and compares against the
//! analytic gradient with [`grad_check`].

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::labelling::{PseudoLabelMatrix, RolConfig};
use crate::losses::{
    bd_loss, bd_mask, column_softmax, hard_cross_entropy, image_level_loss, rol_classifier_loss,
    sdk_loss, FeatureGrid, ImageLabel, LogitMatrix, LossWeights, ScoreMatrix,
};
use crate::model::{
    forward_grid, init_backbone, roi_pool_all, score_proposals, Backbone, DetectorModel, Head,
    HeadRole, ModelStage,
};
use crate::numerics::grad_check;
use crate::pipeline::{
    lstd_scene_step, proposal_labels, wstd_pseudo_labels, wstd_scene_loss, EncodedScene,
    LstdScene, StageConfig, WstdScene,
};
use crate::rng::{self, Stream};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Names of the checks, in run order.
pub const CHECKS: [&str; 8] = [
    "bd",
    "sdk",
    "sdk_weighted",
    "main",
    "image_level",
    "rol",
    "lstd_end_to_end",
    "wstd_end_to_end",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub instances: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    /// Restrict to one check by name.
    pub only: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 100,
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
            seed: 0,
            only: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub worst_instance: usize,
    pub passed: bool,
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckResult>> {
    if cfg.instances == 0 {
        return Err(Error::config("instances", "must be at least 1"));
    }
    let names: Vec<&str> = match &cfg.only {
        None => CHECKS.to_vec(),
        Some(n) => match CHECKS.iter().find(|c| **c == n.as_str()) {
            Some(c) => vec![*c],
            None => {
                return Err(Error::config(
                    "only",
                    format!("unknown check `{n}`; known: {}", CHECKS.join(", ")),
                ))
            }
        },
    };
    names
        .into_iter()
        .map(|name| {
            let mut worst = (0.0_f64, 0_usize);
            for i in 0..cfg.instances {
                let mut r = rng::stream(cfg.seed, name, i as u64);
                let err = run_instance(name, &mut r, cfg.step)?;
                if err > worst.0 {
                    worst = (err, i);
                }
            }
            Ok(CheckResult {
                name: name.to_string(),
                instances: cfg.instances,
                max_relative_error: worst.0,
                worst_instance: worst.1,
                passed: worst.0 <= cfg.tolerance,
            })
        })
        .collect()
}

fn run_instance(name: &str, r: &mut Stream, step: f64) -> Result<f64> {
    match name {
        "bd" => check_bd(r, step),
        "sdk" => check_sdk(r, step, false),
        "sdk_weighted" => check_sdk(r, step, true),
        "main" => check_main(r, step),
        "image_level" => check_image_level(r, step),
        "rol" => check_rol(r, step),
        "lstd_end_to_end" => check_lstd(r, step),
        "wstd_end_to_end" => check_wstd(r, step),
        other => unreachable!("unregistered check {other}"),
    }
}

fn normal(r: &mut Stream, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(r);
    scale * z
}

fn random_matrix(r: &mut Stream, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(r, scale))
}

fn random_box(r: &mut Stream) -> BBox {
    let w = r.random_range(0.15..0.9);
    let h = r.random_range(0.15..0.9);
    let x = r.random_range(0.0..1.0 - w);
    let y = r.random_range(0.0..1.0 - h);
    BBox::new(x, y, x + w, y + h).expect("valid by construction")
}

fn random_scores(r: &mut Stream, rows: usize, cols: usize) -> ScoreMatrix {
    ScoreMatrix::new(column_softmax(&random_matrix(r, rows, cols, 2.0))).expect("softmax columns")
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn unflat(v: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), v.to_vec()).expect("length matches")
}

fn report(f: impl Fn(&[f64]) -> f64, grad: &[f64], point: &[f64], step: f64) -> Result<f64> {
    Ok(grad_check(f, grad, point, step, f64::INFINITY)?.max_relative_error)
}

fn check_bd(r: &mut Stream, step: f64) -> Result<f64> {
    let (h, w, d) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..4));
    let grid = Array3::from_shape_fn((h, w, d), |_| normal(r, 1.0));
    let boxes: Vec<BBox> = (0..r.random_range(0..3)).map(|_| random_box(r)).collect();
    let mask = bd_mask(h, w, &boxes);
    let (_, g) = bd_loss(&FeatureGrid::new(grid.clone())?, &mask)?;
    let f = |x: &[f64]| {
        let g = Array3::from_shape_vec((h, w, d), x.to_vec()).expect("shape");
        bd_loss(&FeatureGrid::new(g).expect("finite"), &mask).expect("dims").0
    };
    let point: Vec<f64> = grid.iter().copied().collect();
    report(f, &g.iter().copied().collect::<Vec<_>>(), &point, step)
}

fn check_sdk(r: &mut Stream, step: f64, weighted: bool) -> Result<f64> {
    let (c, k) = (r.random_range(2..6), r.random_range(1..6));
    let teacher = random_scores(r, c, k);
    let z = random_matrix(r, c, k, 2.0);
    let (_, g) = sdk_loss(&teacher, &LogitMatrix::new(z.clone())?, weighted)?;
    let f = |x: &[f64]| {
        let z = LogitMatrix::new(unflat(x, c, k)).expect("finite");
        sdk_loss(&teacher, &z, weighted).expect("shapes").0
    };
    report(f, &flat(&g), &flat(&z), step)
}

fn check_main(r: &mut Stream, step: f64) -> Result<f64> {
    let (c, k) = (r.random_range(2..6), r.random_range(1..6));
    let labels: Vec<usize> = (0..k).map(|_| r.random_range(0..c)).collect();
    let z = random_matrix(r, c, k, 2.0);
    let (_, g) = hard_cross_entropy(&LogitMatrix::new(z.clone())?, &labels)?;
    let f = |x: &[f64]| {
        hard_cross_entropy(&LogitMatrix::new(unflat(x, c, k)).expect("finite"), &labels)
            .expect("shapes")
            .0
    };
    report(f, &flat(&g), &flat(&z), step)
}

fn random_image_label(r: &mut Stream, classes: usize) -> ImageLabel {
    ImageLabel::new((0..classes).map(|_| r.random_bool(0.5)).collect())
}

fn check_image_level(r: &mut Stream, step: f64) -> Result<f64> {
    let (c, k) = (r.random_range(1..5), r.random_range(1..6));
    let y = random_image_label(r, c);
    let z = random_matrix(r, c + 1, k, 1.0);
    let (_, g) = image_level_loss(&LogitMatrix::new(z.clone())?, &y)?;
    let f = |x: &[f64]| {
        image_level_loss(&LogitMatrix::new(unflat(x, c + 1, k)).expect("finite"), &y)
            .expect("shapes")
            .0
    };
    report(f, &flat(&g), &flat(&z), step)
}

fn random_pseudo(r: &mut Stream, rows: usize, k: usize) -> PseudoLabelMatrix {
    let mut m = Array2::zeros((rows, k));
    for col in 0..k {
        if r.random_bool(0.7) {
            m[[r.random_range(0..rows), col]] = r.random_range(0.05..1.0);
        }
    }
    PseudoLabelMatrix::new(m).expect("one nonzero per column")
}

fn check_rol(r: &mut Stream, step: f64) -> Result<f64> {
    let (c, k) = (r.random_range(1..5), r.random_range(1..6));
    let pseudo = random_pseudo(r, c + 1, k);
    let z = random_matrix(r, c + 1, k, 2.0);
    let (_, g) = rol_classifier_loss(&LogitMatrix::new(z.clone())?, &pseudo)?;
    let f = |x: &[f64]| {
        rol_classifier_loss(&LogitMatrix::new(unflat(x, c + 1, k)).expect("finite"), &pseudo)
            .expect("shapes")
            .0
    };
    report(f, &flat(&g), &flat(&z), step)
}

/// All parameter blocks flattened in `blocks()` order.
fn flatten_model(m: &DetectorModel) -> Vec<f64> {
    m.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
}

fn unflatten_into(m: &mut DetectorModel, x: &[f64]) {
    let mut at = 0;
    for (_, b) in m.blocks_mut() {
        for v in b.iter_mut() {
            *v = x[at];
            at += 1;
        }
    }
}

struct TinyProblem {
    raw: Array3<f64>,
    proposals: Vec<BBox>,
    gt: Vec<(usize, BBox)>,
    source_classes: usize,
    target_classes: usize,
}

fn tiny_problem(r: &mut Stream, d0: usize) -> TinyProblem {
    let (h, w) = (r.random_range(2..4), r.random_range(2..4));
    let target_classes = r.random_range(1..4);
    let gt: Vec<(usize, BBox)> = (0..r.random_range(1..3))
        .map(|_| (r.random_range(0..target_classes), random_box(r)))
        .collect();
    let mut proposals: Vec<BBox> = gt.iter().map(|(_, b)| *b).collect();
    for _ in 0..r.random_range(1..4) {
        proposals.push(random_box(r));
    }
    TinyProblem {
        raw: Array3::from_shape_fn((h, w, d0), |_| normal(r, 1.0)),
        proposals,
        gt,
        source_classes: r.random_range(1..4),
        target_classes,
    }
}

fn tiny_model(r: &mut Stream, p: &TinyProblem, d0: usize, stage: ModelStage, rol: usize) -> DetectorModel {
    DetectorModel {
        stage,
        backbone: init_backbone(d0, 0.5, r),
        main_head: Head::random(p.target_classes + 1, d0, HeadRole::Main, 0.7, r),
        sdk_head: Some(Head::random(p.source_classes + 1, d0, HeadRole::SdkBranch, 0.7, r)),
        rol_heads: (0..rol)
            .map(|i| Head::random(p.target_classes + 1, d0, HeadRole::Rol(i), 0.7, r))
            .collect(),
    }
}

/// Logits of `head` on the proposals, through the explicit grid forward pass.
fn direct_logits(backbone: &Backbone, head: &Head, raw: &Array3<f64>, proposals: &[BBox]) -> LogitMatrix {
    let grid = forward_grid(backbone, raw).expect("dims");
    let pooled = roi_pool_all(&grid, proposals);
    score_proposals(head, &pooled).expect("dims").0
}

fn check_lstd(r: &mut Stream, step: f64) -> Result<f64> {
    let d0 = r.random_range(2..4);
    let p = tiny_problem(r, d0);
    let model = tiny_model(r, &p, d0, ModelStage::Warmup, 0);
    let (h, w, _) = p.raw.dim();
    let cfg = StageConfig {
        weights: LossWeights {
            lambda_main: r.random_range(0.1..2.0),
            lambda_bd: r.random_range(0.1..2.0),
            lambda_sdk: r.random_range(0.1..2.0),
            ..LossWeights::default()
        },
        ..StageConfig::default()
    };
    let item = LstdScene {
        scene: EncodedScene::new(&p.raw, &p.proposals)?,
        labels: proposal_labels(&p.proposals, &p.gt, p.target_classes),
        mask: bd_mask(h, w, &p.gt.iter().map(|(_, b)| *b).collect::<Vec<_>>()),
        teacher: random_scores(r, p.source_classes + 1, p.proposals.len()),
    };
    let mut grads = model.zero_grads();
    lstd_scene_step(&model, &item, &cfg, &mut grads)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();

    let wts = cfg.weights;
    let f = |x: &[f64]| {
        let mut m = model.clone();
        unflatten_into(&mut m, x);
        let z = direct_logits(&m.backbone, &m.main_head, &p.raw, &p.proposals);
        let main = hard_cross_entropy(&z, &item.labels).expect("shapes").0;
        let zs = direct_logits(&m.backbone, m.sdk_head.as_ref().expect("sdk"), &p.raw, &p.proposals);
        let sdk = sdk_loss(&item.teacher, &zs, false).expect("shapes").0;
        let grid = forward_grid(&m.backbone, &p.raw).expect("dims");
        let bd = bd_loss(&grid, &item.mask).expect("dims").0 / (h * w) as f64;
        wts.lambda_main * main + wts.lambda_sdk * sdk + wts.lambda_bd * bd
    };
    report(f, &analytic, &flatten_model(&model), step)
}

fn check_wstd(r: &mut Stream, step: f64) -> Result<f64> {
    let d0 = r.random_range(2..4);
    let p = tiny_problem(r, d0);
    let rol = r.random_range(2..4);
    let model = tiny_model(r, &p, d0, ModelStage::Target, rol);
    let cfg = StageConfig {
        weights: LossWeights {
            lambda_wstd_sdk: r.random_range(0.1..2.0),
            lambda_wstd_rol: r.random_range(0.1..2.0),
            ..LossWeights::default()
        },
        sdk_weighted: r.random_bool(0.5),
        rol: RolConfig {
            num_classifiers: rol,
            ..RolConfig::default()
        },
        ..StageConfig::default()
    };
    let item = WstdScene {
        scene: EncodedScene::new(&p.raw, &p.proposals)?,
        image_label: ImageLabel::from_classes(p.target_classes, p.gt.iter().map(|(c, _)| *c)),
        warm_sdk: random_scores(r, p.source_classes + 1, p.proposals.len()),
    };
    // Pseudo labels are fixed at the base point: they are detached targets.
    let pseudo = wstd_pseudo_labels(&model, &item, &cfg)?;
    let mut grads = model.zero_grads();
    wstd_scene_loss(&model, &item, &cfg, &pseudo, &mut grads)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();

    let wts = cfg.weights;
    let f = |x: &[f64]| {
        let mut m = model.clone();
        unflatten_into(&mut m, x);
        let zs = direct_logits(&m.backbone, m.sdk_head.as_ref().expect("sdk"), &p.raw, &p.proposals);
        let sdk = sdk_loss(&item.warm_sdk, &zs, cfg.sdk_weighted).expect("shapes").0;
        let mut rol_sum = 0.0;
        for (i, head) in m.rol_heads.iter().enumerate() {
            let z = direct_logits(&m.backbone, head, &p.raw, &p.proposals);
            rol_sum += match i {
                0 => image_level_loss(&z, &item.image_label).expect("shapes").0,
                _ => rol_classifier_loss(&z, &pseudo[i - 1]).expect("shapes").0,
            };
        }
        wts.lambda_wstd_sdk * sdk + wts.lambda_wstd_rol * rol_sum
    };
    report(f, &analytic, &flatten_model(&model), step)
}
