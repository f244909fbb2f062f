//! Source pretraining, low-shot fine-tuning and weakly supervised transfer.
//!
//! Each stage owns its model, optimizer state and random streams; all
//! randomness derives from `StageConfig::seed`, so a stage is a pure function
//! of its inputs.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, Detection, EvalConfig, EvalReport};
use crate::geometry::{iou, nms, BBox, ScoredBoxSet};
use crate::kvtext::KvDoc;
use crate::labelling::{label_with, Labeller, PseudoLabelMatrix, RolConfig};
use crate::losses::{
    bd_loss, bd_mask, column_softmax, hard_cross_entropy, image_level_loss, lstd_total,
    rol_classifier_loss, rol_total, sdk_loss, wstd_total, BackgroundMask, FeatureGrid, ImageLabel,
    LogitMatrix, LossWeights, ScoreMatrix,
};
use crate::model::{
    adam_step, forward_grid, init_backbone, roi_pool_all, AdamState, Backbone, DetectorModel, Head,
    HeadRole, ModelStage, OptimizerConfig,
};
use crate::rng;
use crate::synthworld::{render_grid, AnnotationMode, Domain, Scene, World};

/// IoU above which a proposal takes a ground-truth class in the supervised
/// main loss.
pub const PROPOSAL_POSITIVE_IOU: f64 = 0.5;
/// NMS overlap used when turning per-class proposal scores into detections.
pub const DETECTION_NMS_IOU: f64 = 0.3;
/// NMS overlap used when the warm-up detector filters proposals for WSTD.
pub const WSTD_PROPOSAL_NMS_IOU: f64 = 0.75;

const HEAD_INIT_SCALE: f64 = 0.01;
const BACKBONE_INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Fully annotated target scenes per class for low-shot fine-tuning.
    pub shots_per_class: usize,
    /// Weakly annotated target scenes per class for WSTD.
    pub weak_scenes_per_class: usize,
    pub source_scenes: usize,
    pub test_scenes: usize,
    pub source_epochs: usize,
    pub lstd_epochs: usize,
    pub wstd_epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub rol: RolConfig,
    pub enable_bd: bool,
    pub enable_sdk: bool,
    /// Weighted SDK in WSTD; LSTD always uses the unweighted form.
    pub sdk_weighted: bool,
    /// SDK term in WSTD; off reproduces the "without SDK" ablation.
    pub wstd_sdk: bool,
    pub labeller: Labeller,
    pub freeze_backbone_wstd: bool,
    /// Proposals per weak scene kept by the warm-up detector.
    pub wstd_proposals: usize,
    pub source_optimizer: OptimizerConfig,
    pub lstd_optimizer: OptimizerConfig,
    pub wstd_optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            shots_per_class: 1,
            weak_scenes_per_class: 50,
            source_scenes: 200,
            test_scenes: 500,
            source_epochs: 30,
            lstd_epochs: 300,
            wstd_epochs: 40,
            batch_size: 1,
            weights: LossWeights::default(),
            rol: RolConfig::default(),
            enable_bd: true,
            enable_sdk: true,
            sdk_weighted: false,
            wstd_sdk: true,
            labeller: Labeller::Rol,
            freeze_backbone_wstd: false,
            wstd_proposals: 32,
            source_optimizer: OptimizerConfig {
                learning_rate: 5e-3,
                ..OptimizerConfig::default()
            },
            lstd_optimizer: OptimizerConfig {
                learning_rate: 5e-3,
                ..OptimizerConfig::default()
            },
            wstd_optimizer: OptimizerConfig {
                learning_rate: 2e-3,
                ..OptimizerConfig::default()
            },
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.rol.validate()?;
        self.eval.validate()?;
        self.source_optimizer.validate()?;
        self.lstd_optimizer.validate()?;
        self.wstd_optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.wstd_proposals == 0 {
            return Err(Error::config("wstd_proposals", "must be at least 1"));
        }
        if self.test_scenes == 0 {
            return Err(Error::config("test_scenes", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::default();
        d.set("shots_per_class", self.shots_per_class);
        d.set("weak_scenes_per_class", self.weak_scenes_per_class);
        d.set("source_scenes", self.source_scenes);
        d.set("test_scenes", self.test_scenes);
        d.set("source_epochs", self.source_epochs);
        d.set("lstd_epochs", self.lstd_epochs);
        d.set("wstd_epochs", self.wstd_epochs);
        d.set("batch_size", self.batch_size);
        d.set("lambda_main", self.weights.lambda_main);
        d.set("lambda_bd", self.weights.lambda_bd);
        d.set("lambda_sdk", self.weights.lambda_sdk);
        d.set("lambda_wstd_sdk", self.weights.lambda_wstd_sdk);
        d.set("lambda_wstd_rol", self.weights.lambda_wstd_rol);
        d.set("phi_obj", self.rol.phi_obj);
        d.set("phi_bg", self.rol.phi_bg);
        d.set("num_classifiers", self.rol.num_classifiers);
        d.set("enable_bd", self.enable_bd);
        d.set("enable_sdk", self.enable_sdk);
        d.set("sdk_weighted", self.sdk_weighted);
        d.set("wstd_sdk", self.wstd_sdk);
        d.set("labeller", self.labeller);
        d.set("freeze_backbone_wstd", self.freeze_backbone_wstd);
        d.set("wstd_proposals", self.wstd_proposals);
        for (prefix, o) in [
            ("source", &self.source_optimizer),
            ("lstd", &self.lstd_optimizer),
            ("wstd", &self.wstd_optimizer),
        ] {
            d.set(format!("{prefix}_lr"), o.learning_rate);
            d.set(format!("{prefix}_beta1"), o.beta1);
            d.set(format!("{prefix}_beta2"), o.beta2);
            d.set(format!("{prefix}_weight_decay"), o.weight_decay);
            d.set(format!("{prefix}_lr_decay"), o.lr_decay_factor);
        }
        d.set("iou_threshold", self.eval.iou_threshold);
        d.set("ap_method", self.eval.ap_method);
        d.set("seed", self.seed);
        d
    }

    /// Applies every recognized key present in `doc`.
    pub fn apply_kv(&mut self, doc: &KvDoc) -> Result<()> {
        doc.apply("shots_per_class", &mut self.shots_per_class)?;
        doc.apply("weak_scenes_per_class", &mut self.weak_scenes_per_class)?;
        doc.apply("source_scenes", &mut self.source_scenes)?;
        doc.apply("test_scenes", &mut self.test_scenes)?;
        doc.apply("source_epochs", &mut self.source_epochs)?;
        doc.apply("lstd_epochs", &mut self.lstd_epochs)?;
        doc.apply("wstd_epochs", &mut self.wstd_epochs)?;
        doc.apply("batch_size", &mut self.batch_size)?;
        doc.apply("lambda_main", &mut self.weights.lambda_main)?;
        doc.apply("lambda_bd", &mut self.weights.lambda_bd)?;
        doc.apply("lambda_sdk", &mut self.weights.lambda_sdk)?;
        doc.apply("lambda_wstd_sdk", &mut self.weights.lambda_wstd_sdk)?;
        doc.apply("lambda_wstd_rol", &mut self.weights.lambda_wstd_rol)?;
        doc.apply("phi_obj", &mut self.rol.phi_obj)?;
        doc.apply("phi_bg", &mut self.rol.phi_bg)?;
        doc.apply("num_classifiers", &mut self.rol.num_classifiers)?;
        doc.apply("enable_bd", &mut self.enable_bd)?;
        doc.apply("enable_sdk", &mut self.enable_sdk)?;
        doc.apply("sdk_weighted", &mut self.sdk_weighted)?;
        doc.apply("wstd_sdk", &mut self.wstd_sdk)?;
        doc.apply("labeller", &mut self.labeller)?;
        doc.apply("freeze_backbone_wstd", &mut self.freeze_backbone_wstd)?;
        doc.apply("wstd_proposals", &mut self.wstd_proposals)?;
        for (prefix, o) in [
            ("source", &mut self.source_optimizer),
            ("lstd", &mut self.lstd_optimizer),
            ("wstd", &mut self.wstd_optimizer),
        ] {
            doc.apply(&format!("{prefix}_lr"), &mut o.learning_rate)?;
            doc.apply(&format!("{prefix}_beta1"), &mut o.beta1)?;
            doc.apply(&format!("{prefix}_beta2"), &mut o.beta2)?;
            doc.apply(&format!("{prefix}_weight_decay"), &mut o.weight_decay)?;
            doc.apply(&format!("{prefix}_lr_decay"), &mut o.lr_decay_factor)?;
        }
        doc.apply("iou_threshold", &mut self.eval.iou_threshold)?;
        doc.apply("ap_method", &mut self.eval.ap_method)?;
        doc.apply("seed", &mut self.seed)?;
        Ok(())
    }
}

/// Outcome of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: String,
    /// Mean loss per epoch, keyed by loss term.
    pub loss_curves: BTreeMap<String, Vec<f64>>,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    /// mAP of every refinement classifier, in order (WSTD only).
    pub per_classifier_map: Vec<f64>,
    /// Per-class AP of every refinement classifier, in order (WSTD only).
    pub per_classifier_ap: Vec<Vec<Option<f64>>>,
    pub config: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

/// A scene with its pooling and masking precomputed against the raw grid.
#[derive(Debug, Clone)]
pub struct EncodedScene {
    pub raw_grid: Array3<f64>,
    /// `D0 x K` mean raw vector under each proposal.
    pub pooled_raw: Array2<f64>,
    /// `HW x D0` raw cells, row-major over the grid.
    pub cells: Array2<f64>,
    pub proposals: Vec<BBox>,
}

impl EncodedScene {
    pub fn new(raw_grid: &Array3<f64>, proposals: &[BBox]) -> Result<Self> {
        let (h, w, d0) = raw_grid.dim();
        let grid = FeatureGrid::new(raw_grid.clone())?;
        let pooled_raw = roi_pool_all(&grid, proposals);
        let cells = raw_grid
            .to_shape((h * w, d0))
            .expect("grid is contiguous")
            .to_owned();
        Ok(EncodedScene {
            raw_grid: raw_grid.clone(),
            pooled_raw,
            cells,
            proposals: proposals.to_vec(),
        })
    }

    pub fn select(&self, keep: &[usize]) -> EncodedScene {
        let mut pooled_raw = Array2::zeros((self.pooled_raw.nrows(), keep.len()));
        for (n, &k) in keep.iter().enumerate() {
            pooled_raw.column_mut(n).assign(&self.pooled_raw.column(k));
        }
        EncodedScene {
            raw_grid: self.raw_grid.clone(),
            pooled_raw,
            cells: self.cells.clone(),
            proposals: keep.iter().map(|&k| self.proposals[k]).collect(),
        }
    }

    /// `D x K` pooled features. Pooling is linear, so this equals pooling
    /// the backbone output grid.
    pub fn features(&self, backbone: &Backbone) -> Array2<f64> {
        backbone.map.dot(&self.pooled_raw)
    }
}

/// Chains a feature gradient back into the backbone gradient.
fn backbone_backward(scene: &EncodedScene, dfeatures: &Array2<f64>, grad: &mut Array2<f64>) {
    grad.scaled_add(1.0, &dfeatures.dot(&scene.pooled_raw.t()));
}

/// Background-depression loss of the backbone features on `scene`, with its
/// gradient accumulated into `grad` (scaled by `weight`).
fn bd_term(
    backbone: &Backbone,
    scene: &EncodedScene,
    mask: &BackgroundMask,
    weight: f64,
    grad: &mut Array2<f64>,
) -> Result<f64> {
    let grid = forward_grid(backbone, &scene.raw_grid)?;
    let (loss, dgrid) = bd_loss(&grid, mask)?;
    if weight != 0.0 {
        let (h, w, d) = dgrid.dim();
        let dcells = dgrid.to_shape((h * w, d)).expect("contiguous").to_owned();
        grad.scaled_add(weight, &dcells.t().dot(&scene.cells));
    }
    Ok(loss)
}

/// Ground-truth class of each proposal for the supervised loss: the class of
/// the best-overlapping box if its IoU exceeds [`PROPOSAL_POSITIVE_IOU`],
/// else background (`num_classes`).
pub fn proposal_labels(proposals: &[BBox], gt: &[(usize, BBox)], num_classes: usize) -> Vec<usize> {
    proposals
        .iter()
        .map(|p| {
            let mut best = (num_classes, PROPOSAL_POSITIVE_IOU);
            for (c, b) in gt {
                let v = iou(p, b);
                if v > best.1 {
                    best = (*c, v);
                }
            }
            best.0
        })
        .collect()
}

/// Scene with a guaranteed instance of `required` (when given).
pub fn sample_scene_with(
    world: &World,
    domain: Domain,
    mode: AnnotationMode,
    required: Option<usize>,
    stream: &mut rng::Stream,
) -> Scene {
    let mut scene = crate::synthworld::sample_scene(world, domain, mode, stream);
    if let Some(c) = required {
        if scene.gt[0].0 != c {
            scene.gt[0].0 = c;
            scene.raw_grid = render_grid(world, domain, &scene.gt, stream);
            scene.image_label = ImageLabel::from_classes(
                world.num_classes(domain),
                scene.gt.iter().map(|(k, _)| *k),
            );
        }
    }
    scene
}

/// `per_class` scenes for each class, scene `n` of class `c` drawn from
/// stream `(seed, label, c * per_class + n)`.
pub fn class_balanced_scenes(
    world: &World,
    domain: Domain,
    mode: AnnotationMode,
    per_class: usize,
    seed: u64,
    label: &str,
) -> Vec<Scene> {
    let classes = world.num_classes(domain);
    let mut out = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for n in 0..per_class {
            let mut s = rng::stream(seed, label, (c * per_class + n) as u64);
            out.push(sample_scene_with(world, domain, mode, Some(c), &mut s));
        }
    }
    out
}

pub fn test_scenes(world: &World, domain: Domain, cfg: &StageConfig) -> Vec<Scene> {
    crate::synthworld::sample_scenes(
        world,
        domain,
        AnnotationMode::Full,
        cfg.seed,
        &format!("{domain}.test"),
        cfg.test_scenes,
    )
}

/// Runs `epochs` passes over `n_items` in shuffled minibatches. `step`
/// accumulates gradients for one item into the buffer and returns its named
/// loss terms. Returns the per-epoch mean of each term.
fn train_loop<F>(
    model: &mut DetectorModel,
    trainable: &[bool],
    opt: &OptimizerConfig,
    epochs: usize,
    n_items: usize,
    batch_size: usize,
    order_seed: (u64, &str),
    mut step: F,
) -> Result<BTreeMap<String, Vec<f64>>>
where
    F: FnMut(&DetectorModel, usize, &mut [Array2<f64>]) -> Result<Vec<(&'static str, f64)>>,
{
    let mut curves: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if n_items == 0 || epochs == 0 {
        return Ok(curves);
    }
    let mut state = AdamState::for_params(model.blocks().into_iter().map(|(_, b)| b));
    let batches_per_epoch = n_items.div_ceil(batch_size);
    let total = epochs * batches_per_epoch;
    let mut step_no = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut rng::stream(order_seed.0, order_seed.1, epoch as u64));
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        for batch in order.chunks(batch_size) {
            let mut grads = model.zero_grads();
            for &item in batch {
                for (name, v) in step(model, item, &mut grads)? {
                    *sums.entry(name).or_default() += v;
                }
            }
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f64;
                grads.iter_mut().for_each(|g| *g *= inv);
            }
            let lr = opt.rate_at(step_no, total);
            let mut blocks = model.blocks_mut();
            adam_step(&mut blocks, &grads, trainable, &mut state, opt, lr)?;
            step_no += 1;
        }
        for (name, total) in sums {
            curves
                .entry(name.to_string())
                .or_default()
                .push(total / n_items as f64);
        }
    }
    Ok(curves)
}

fn trainable_except(model: &DetectorModel, frozen: &[&str]) -> Vec<bool> {
    model
        .blocks()
        .iter()
        .map(|(n, _)| !frozen.contains(&n.as_str()))
        .collect()
}

/// Freshly initialized source detector.
pub fn init_source_model(world: &World, seed: u64) -> DetectorModel {
    let d0 = world.config().raw_dim;
    let mut r = rng::stream(seed, "init.source", 0);
    let backbone = init_backbone(d0, BACKBONE_INIT_SCALE, &mut r);
    let main_head = Head::random(
        world.config().num_source_classes + 1,
        d0,
        HeadRole::Main,
        HEAD_INIT_SCALE,
        &mut r,
    );
    DetectorModel {
        stage: ModelStage::Source,
        backbone,
        main_head,
        sdk_head: None,
        rol_heads: Vec::new(),
    }
}

fn supervised_step(
    model: &DetectorModel,
    scene: &EncodedScene,
    labels: &[usize],
    grads: &mut [Array2<f64>],
) -> Result<f64> {
    let feats = scene.features(&model.backbone);
    let z = LogitMatrix::new(model.main_head.logits(&feats))?;
    let (loss, dz) = hard_cross_entropy(&z, labels)?;
    let (gb, rest) = grads.split_at_mut(1);
    let df = model.main_head.backward(&feats, &dz, &mut rest[0]);
    backbone_backward(scene, &df, &mut gb[0]);
    Ok(loss)
}

/// Fully supervised training on source-domain scenes.
pub fn train_source(world: &World, cfg: &StageConfig) -> Result<(DetectorModel, RunReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let c_s = world.config().num_source_classes;
    let scenes = crate::synthworld::sample_scenes(
        world,
        Domain::Source,
        AnnotationMode::Full,
        cfg.seed,
        "source.train",
        cfg.source_scenes,
    );
    let encoded = scenes
        .iter()
        .map(|s| EncodedScene::new(&s.raw_grid, &s.proposals))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<usize>> = scenes
        .iter()
        .map(|s| proposal_labels(&s.proposals, &s.gt, c_s))
        .collect();
    let mut model = init_source_model(world, cfg.seed);
    let trainable = trainable_except(&model, &[]);
    let curves = train_loop(
        &mut model,
        &trainable,
        &cfg.source_optimizer,
        cfg.source_epochs,
        encoded.len(),
        cfg.batch_size,
        (cfg.seed, "order.source"),
        |m, i, g| Ok(vec![("main", supervised_step(m, &encoded[i], &labels[i], g)?)]),
    )?;
    let test = test_scenes(world, Domain::Source, cfg);
    let report = evaluate_model(&model, model.detection_head(), &test, c_s, &cfg.eval)?;
    Ok((
        model,
        RunReport {
            stage: "source".into(),
            loss_curves: curves,
            per_class_ap: report.per_class,
            map: report.map,
            per_classifier_map: Vec::new(),
            per_classifier_ap: Vec::new(),
            config: cfg.to_kv().to_text(),
            seed: cfg.seed,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Fraction of proposals of `scenes` whose argmax class under the main head
/// equals their supervised label.
pub fn proposal_accuracy(model: &DetectorModel, scenes: &[Scene], num_classes: usize) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for s in scenes {
        let enc = EncodedScene::new(&s.raw_grid, &s.proposals)?;
        let z = model.main_head.logits(&enc.features(&model.backbone));
        let labels = proposal_labels(&s.proposals, &s.gt, num_classes);
        for (k, &l) in labels.iter().enumerate() {
            let col = z.column(k);
            let arg = (0..col.len())
                .fold(0, |best, c| if col[c] > col[best] { c } else { best });
            hit += usize::from(arg == l);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// One fully annotated target scene with everything LSTD needs precomputed:
/// proposal labels, the background mask and the frozen source model's
/// probabilities.
pub struct LstdScene {
    pub scene: EncodedScene,
    pub labels: Vec<usize>,
    pub mask: BackgroundMask,
    pub teacher: ScoreMatrix,
}

/// LSTD loss terms of `model` on one scene, with gradients accumulated into
/// `grads` (laid out like `model.blocks()`). BD is averaged over grid cells.
pub fn lstd_scene_step(
    model: &DetectorModel,
    item: &LstdScene,
    cfg: &StageConfig,
    grads: &mut [Array2<f64>],
) -> Result<Vec<(&'static str, f64)>> {
    let wts = cfg.weights;
    let scene = &item.scene;
    let feats = scene.features(&model.backbone);
    let mut dfeat = Array2::zeros(feats.raw_dim());
    let mut terms = Vec::with_capacity(4);

    let z = LogitMatrix::new(model.main_head.logits(&feats))?;
    let (main, dz) = hard_cross_entropy(&z, &item.labels)?;
    dfeat += &model.main_head.backward(&feats, &(dz * wts.lambda_main), &mut grads[1]);
    terms.push(("main", main));

    let mut sdk = 0.0;
    if cfg.enable_sdk {
        let head = model.sdk_head.as_ref().ok_or(Error::MissingHead("SDK branch"))?;
        let zs = LogitMatrix::new(head.logits(&feats))?;
        let (l, dz) = sdk_loss(&item.teacher, &zs, false)?;
        dfeat += &head.backward(&feats, &(dz * wts.lambda_sdk), &mut grads[2]);
        sdk = l;
        terms.push(("sdk", l));
    }
    backbone_backward(scene, &dfeat, &mut grads[0]);

    let mut bd = 0.0;
    if cfg.enable_bd {
        let (h, w, _) = scene.raw_grid.dim();
        let cell_norm = 1.0 / (h * w) as f64;
        bd = bd_term(&model.backbone, scene, &item.mask, wts.lambda_bd * cell_norm, &mut grads[0])?
            * cell_norm;
        terms.push(("bd", bd));
    }
    terms.push(("total", lstd_total(main, bd, sdk, &wts)));
    Ok(terms)
}

/// Low-shot fine-tuning of a source detector into the warm-up detector.
pub fn lstd_finetune(
    source: &DetectorModel,
    world: &World,
    cfg: &StageConfig,
) -> Result<(DetectorModel, RunReport)> {
    cfg.validate()?;
    if source.stage != ModelStage::Source {
        return Err(Error::MissingHead("source-class main"));
    }
    let started = Instant::now();
    let c_t = world.config().num_target_classes;
    let d = source.backbone.out_dim();
    let scenes = class_balanced_scenes(
        world,
        Domain::Target,
        AnnotationMode::Full,
        cfg.shots_per_class,
        cfg.seed,
        "target.shots",
    );
    let encoded = scenes
        .iter()
        .map(|s| EncodedScene::new(&s.raw_grid, &s.proposals))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<usize>> = scenes
        .iter()
        .map(|s| proposal_labels(&s.proposals, &s.gt, c_t))
        .collect();
    let (h, w) = (world.config().grid_height, world.config().grid_width);
    let masks: Vec<BackgroundMask> = scenes.iter().map(|s| bd_mask(h, w, &s.gt_boxes())).collect();
    let teacher: Vec<ScoreMatrix> = encoded
        .iter()
        .map(|e| {
            let f = e.features(&source.backbone);
            ScoreMatrix::new(column_softmax(&source.main_head.logits(&f)))
        })
        .collect::<Result<_>>()?;

    let mut r = rng::stream(cfg.seed, "init.lstd", 0);
    let mut model = DetectorModel {
        stage: ModelStage::Warmup,
        backbone: source.backbone.clone(),
        main_head: Head::random(c_t + 1, d, HeadRole::Main, HEAD_INIT_SCALE, &mut r),
        // The SDK branch is a new layer on the warm-up detector; it learns the
        // source posteriors from scratch, which is what pulls the backbone.
        sdk_head: Some(Head::random(
            source.main_head.num_classes(),
            d,
            HeadRole::SdkBranch,
            HEAD_INIT_SCALE,
            &mut r,
        )),
        rol_heads: Vec::new(),
    };
    let items: Vec<LstdScene> = encoded
        .into_iter()
        .zip(labels)
        .zip(masks)
        .zip(teacher)
        .map(|(((scene, labels), mask), teacher)| LstdScene {
            scene,
            labels,
            mask,
            teacher,
        })
        .collect();
    let trainable = trainable_except(&model, &[]);
    let curves = train_loop(
        &mut model,
        &trainable,
        &cfg.lstd_optimizer,
        cfg.lstd_epochs,
        items.len(),
        cfg.batch_size,
        (cfg.seed, "order.lstd"),
        |m, i, g| lstd_scene_step(m, &items[i], cfg, g),
    )?;
    let test = test_scenes(world, Domain::Target, cfg);
    let report = evaluate_model(&model, model.detection_head(), &test, c_t, &cfg.eval)?;
    Ok((
        model,
        RunReport {
            stage: "lstd".into(),
            loss_curves: curves,
            per_class_ap: report.per_class,
            map: report.map,
            per_classifier_map: Vec::new(),
            per_classifier_ap: Vec::new(),
            config: cfg.to_kv().to_text(),
            seed: cfg.seed,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Proposals of `scene` the frozen warm-up detector hands to WSTD: ranked by
/// its objectness `1 - p(background)`, NMS at 0.75, at most `keep`.
pub fn warmup_proposals(warmup: &DetectorModel, scene: &EncodedScene, keep: usize) -> Result<Vec<usize>> {
    let feats = scene.features(&warmup.backbone);
    let p = column_softmax(&warmup.main_head.logits(&feats));
    let bg = p.nrows() - 1;
    let objectness: Vec<f64> = (0..p.ncols()).map(|k| 1.0 - p[[bg, k]]).collect();
    let set = ScoredBoxSet::new(scene.proposals.clone(), objectness)?;
    let mut kept = nms(&set, WSTD_PROPOSAL_NMS_IOU, keep);
    kept.sort_unstable();
    Ok(kept)
}

/// Target detector initialized from the warm-up detector, with every
/// refinement classifier starting from the warm-up main head.
pub fn target_from_warmup(warmup: &DetectorModel, num_classifiers: usize) -> Result<DetectorModel> {
    let sdk = warmup.sdk_head.clone().ok_or(Error::MissingHead("SDK branch"))?;
    Ok(DetectorModel {
        stage: ModelStage::Target,
        backbone: warmup.backbone.clone(),
        main_head: warmup.main_head.clone(),
        sdk_head: Some(sdk),
        rol_heads: (0..num_classifiers)
            .map(|i| Head {
                weights: warmup.main_head.weights.clone(),
                role: HeadRole::Rol(i),
            })
            .collect(),
    })
}

/// One weakly annotated scene restricted to the warm-up's proposals, with the
/// warm-up's SDK probabilities on them.
pub struct WstdScene {
    pub scene: EncodedScene,
    pub image_label: ImageLabel,
    pub warm_sdk: ScoreMatrix,
}

/// Pseudo labels for classifiers `2..=R`, each mined from the probabilities
/// of its predecessor. They are plain values: no gradient flows through them.
pub fn wstd_pseudo_labels(
    model: &DetectorModel,
    item: &WstdScene,
    cfg: &StageConfig,
) -> Result<Vec<PseudoLabelMatrix>> {
    let feats = item.scene.features(&model.backbone);
    let n = model.rol_heads.len();
    model.rol_heads[..n.saturating_sub(1)]
        .iter()
        .map(|head| {
            let prev = LogitMatrix::new(head.logits(&feats))?.probabilities();
            label_with(cfg.labeller, &prev, &item.scene.proposals, &item.image_label, &cfg.rol)
        })
        .collect()
}

/// WSTD loss terms of `model` on one scene given the pseudo labels of
/// classifiers `2..=R`, with gradients accumulated into `grads` (laid out
/// like `model.blocks()`).
pub fn wstd_scene_loss(
    model: &DetectorModel,
    item: &WstdScene,
    cfg: &StageConfig,
    pseudo: &[PseudoLabelMatrix],
    grads: &mut [Array2<f64>],
) -> Result<Vec<(&'static str, f64)>> {
    if pseudo.len() + 1 != model.rol_heads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pseudo-label matrices for {} classifiers",
            pseudo.len(),
            model.rol_heads.len()
        )));
    }
    let wts = cfg.weights;
    let scene = &item.scene;
    let feats = scene.features(&model.backbone);
    let mut dfeat = Array2::zeros(feats.raw_dim());
    let mut terms = Vec::new();
    let sdk_index = model.block_index("sdk").ok_or(Error::MissingHead("SDK branch"))?;
    let rol_base = sdk_index + 1;

    let mut sdk_value = 0.0;
    if cfg.wstd_sdk {
        let head = model.sdk_head.as_ref().ok_or(Error::MissingHead("SDK branch"))?;
        let z = LogitMatrix::new(head.logits(&feats))?;
        let (l, dz) = sdk_loss(&item.warm_sdk, &z, cfg.sdk_weighted)?;
        dfeat += &head.backward(&feats, &(dz * wts.lambda_wstd_sdk), &mut grads[sdk_index]);
        sdk_value = l;
        terms.push(("sdk", l));
    }

    let mut rol_losses = Vec::with_capacity(model.rol_heads.len());
    for (i, head) in model.rol_heads.iter().enumerate() {
        let z = LogitMatrix::new(head.logits(&feats))?;
        let (l, dz) = match i {
            0 => image_level_loss(&z, &item.image_label)?,
            _ => rol_classifier_loss(&z, &pseudo[i - 1])?,
        };
        dfeat += &head.backward(&feats, &(dz * wts.lambda_wstd_rol), &mut grads[rol_base + i]);
        rol_losses.push(l);
    }
    backbone_backward(scene, &dfeat, &mut grads[0]);
    let rol = rol_total(&rol_losses);
    terms.push(("rol", rol));
    for (i, l) in rol_losses.iter().enumerate() {
        terms.push((ROL_TERM_NAMES[i.min(ROL_TERM_NAMES.len() - 1)], *l));
    }
    terms.push(("total", wstd_total(sdk_value, rol, &wts)));
    Ok(terms)
}

pub fn wstd_scene_step(
    model: &DetectorModel,
    item: &WstdScene,
    cfg: &StageConfig,
    grads: &mut [Array2<f64>],
) -> Result<Vec<(&'static str, f64)>> {
    let pseudo = wstd_pseudo_labels(model, item, cfg)?;
    wstd_scene_loss(model, item, cfg, &pseudo, grads)
}

const ROL_TERM_NAMES: [&str; 8] = [
    "rol.1", "rol.2", "rol.3", "rol.4", "rol.5", "rol.6", "rol.7", "rol.8+",
];

/// Weakly supervised transfer from the frozen warm-up detector.
pub fn wstd_train(
    warmup: &DetectorModel,
    world: &World,
    cfg: &StageConfig,
) -> Result<(DetectorModel, RunReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let c_t = world.config().num_target_classes;
    let mut model = target_from_warmup(warmup, cfg.rol.num_classifiers)?;
    let scenes = class_balanced_scenes(
        world,
        Domain::Target,
        AnnotationMode::Weak,
        cfg.weak_scenes_per_class,
        cfg.seed,
        "target.weak",
    );
    let items = scenes
        .iter()
        .map(|s| {
            let view = s.weak_view();
            let full = EncodedScene::new(view.raw_grid, view.proposals)?;
            let keep = warmup_proposals(warmup, &full, cfg.wstd_proposals)?;
            let scene = full.select(&keep);
            let f = scene.features(&warmup.backbone);
            let head = warmup.sdk_head.as_ref().ok_or(Error::MissingHead("SDK branch"))?;
            let warm_sdk = ScoreMatrix::new(column_softmax(&head.logits(&f)))?;
            Ok(WstdScene {
                scene,
                image_label: view.image_label.clone(),
                warm_sdk,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut frozen = vec!["main"];
    if cfg.freeze_backbone_wstd {
        frozen.push("backbone");
    }
    let trainable = trainable_except(&model, &frozen);
    let curves = train_loop(
        &mut model,
        &trainable,
        &cfg.wstd_optimizer,
        cfg.wstd_epochs,
        items.len(),
        cfg.batch_size,
        (cfg.seed, "order.wstd"),
        |m, i, g| wstd_scene_step(m, &items[i], cfg, g),
    )?;
    let test = test_scenes(world, Domain::Target, cfg);
    let per_classifier = model
        .rol_heads
        .iter()
        .map(|h| evaluate_model(&model, h, &test, c_t, &cfg.eval))
        .collect::<Result<Vec<_>>>()?;
    let last = per_classifier.last().cloned().expect("at least two classifiers");
    Ok((
        model,
        RunReport {
            stage: "wstd".into(),
            loss_curves: curves,
            per_class_ap: last.per_class,
            map: last.map,
            per_classifier_map: per_classifier.iter().map(|r| r.map).collect(),
            per_classifier_ap: per_classifier.iter().map(|r| r.per_class.clone()).collect(),
            config: cfg.to_kv().to_text(),
            seed: cfg.seed,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Detections of `head` on `scenes`: per-class proposal probabilities after
/// per-class NMS. Scene ids are positions in `scenes`.
pub fn detect(model: &DetectorModel, head: &Head, scenes: &[Scene]) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (sid, s) in scenes.iter().enumerate() {
        let enc = EncodedScene::new(&s.raw_grid, &s.proposals)?;
        let p = column_softmax(&head.logits(&enc.features(&model.backbone)));
        for c in 0..p.nrows() - 1 {
            let scores: Vec<f64> = p.row(c).to_vec();
            let set = ScoredBoxSet::new(s.proposals.clone(), scores)?;
            for k in nms(&set, DETECTION_NMS_IOU, s.proposals.len()) {
                out.push(Detection {
                    scene_id: sid,
                    class: c,
                    bbox: s.proposals[k],
                    score: p[[c, k]],
                });
            }
        }
    }
    Ok(out)
}

pub fn ground_truth_of(scenes: &[Scene]) -> BTreeMap<usize, Vec<(usize, BBox)>> {
    scenes.iter().enumerate().map(|(i, s)| (i, s.gt.clone())).collect()
}

pub fn evaluate_model(
    model: &DetectorModel,
    head: &Head,
    scenes: &[Scene],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let dets = detect(model, head, scenes)?;
    evaluate(&dets, &ground_truth_of(scenes), num_classes, cfg)
}
