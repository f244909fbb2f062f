//! Linear detector stand-in and its optimizer.
//!
//! The backbone maps every grid cell through the same `D x D0` matrix. ROI
//! pooling averages the cells whose centers fall inside a proposal, and each
//! head is an affine classifier over pooled features. Everything is linear up
//! to the softmax, so all gradients are closed-form.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{cell_center, column_softmax, FeatureGrid, LogitMatrix, ScoreMatrix};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    /// `D x D0`.
    pub map: Array2<f64>,
}

impl Backbone {
    pub fn identity(dim: usize) -> Self {
        Backbone {
            map: Array2::eye(dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.map.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.map.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadRole {
    Main,
    SdkBranch,
    Rol(usize),
}

impl HeadRole {
    pub fn block_name(&self) -> String {
        match self {
            HeadRole::Main => "main".into(),
            HeadRole::SdkBranch => "sdk".into(),
            HeadRole::Rol(i) => format!("rol.{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `(C+1) x (D+1)`; the last column is the bias.
    pub weights: Array2<f64>,
    pub role: HeadRole,
}

impl Head {
    pub fn zeros(num_classes_with_bg: usize, feature_dim: usize, role: HeadRole) -> Self {
        Head {
            weights: Array2::zeros((num_classes_with_bg, feature_dim + 1)),
            role,
        }
    }

    pub fn random(
        num_classes_with_bg: usize,
        feature_dim: usize,
        role: HeadRole,
        scale: f64,
        rng: &mut Stream,
    ) -> Self {
        let normal = Normal::new(0.0, scale).expect("scale is finite");
        let mut weights =
            Array2::from_shape_fn((num_classes_with_bg, feature_dim + 1), |_| normal.sample(rng));
        weights.column_mut(feature_dim).fill(0.0);
        Head { weights, role }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols() - 1
    }

    /// Logits for `D x K` features.
    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        let d = self.feature_dim();
        let mut z = self.weights.slice(s![.., ..d]).dot(features);
        let bias = self.weights.column(d);
        for mut col in z.columns_mut() {
            col += &bias;
        }
        z
    }

    /// Accumulates the weight gradient into `grad` and returns the gradient
    /// with respect to the features.
    pub fn backward(
        &self,
        features: &Array2<f64>,
        dlogits: &Array2<f64>,
        grad: &mut Array2<f64>,
    ) -> Array2<f64> {
        let d = self.feature_dim();
        grad.slice_mut(s![.., ..d]).scaled_add(1.0, &dlogits.dot(&features.t()));
        let mut bias = grad.column_mut(d);
        bias += &dlogits.sum_axis(Axis(1));
        self.weights.slice(s![.., ..d]).t().dot(dlogits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelStage {
    Source,
    Warmup,
    Target,
}

impl std::fmt::Display for ModelStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelStage::Source => "source",
            ModelStage::Warmup => "warmup",
            ModelStage::Target => "target",
        })
    }
}

impl std::str::FromStr for ModelStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(ModelStage::Source),
            "warmup" => Ok(ModelStage::Warmup),
            "target" => Ok(ModelStage::Target),
            other => Err(Error::config("stage", format!("unknown model stage `{other}`"))),
        }
    }
}

/// Source, warm-up or target detector.
///
/// The main head covers source classes for a source model and target classes
/// otherwise; the SDK branch always covers source classes.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub stage: ModelStage,
    pub backbone: Backbone,
    pub main_head: Head,
    pub sdk_head: Option<Head>,
    pub rol_heads: Vec<Head>,
}

impl DetectorModel {
    pub fn validate(&self) -> Result<()> {
        let d = self.backbone.out_dim();
        let heads = std::iter::once(&self.main_head)
            .chain(&self.sdk_head)
            .chain(&self.rol_heads);
        for h in heads {
            if h.feature_dim() != d {
                return Err(Error::ShapeMismatch(format!(
                    "head `{}` expects {} features, backbone produces {d}",
                    h.role.block_name(),
                    h.feature_dim()
                )));
            }
        }
        if let Some(r) = self.rol_heads.first() {
            if self.rol_heads.iter().any(|h| h.num_classes() != r.num_classes()) {
                return Err(Error::ShapeMismatch("refinement heads disagree on classes".into()));
            }
        }
        let finite = self
            .blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFiniteGradient("model parameters".into()));
        }
        Ok(())
    }

    /// The head that predicts source classes: the main head of a source
    /// model, the SDK branch of any later model.
    pub fn source_head(&self) -> Result<&Head> {
        match self.stage {
            ModelStage::Source => Ok(&self.main_head),
            _ => self.sdk_head.as_ref().ok_or(Error::MissingHead("SDK branch")),
        }
    }

    /// Head used for detection: the last refinement classifier when present.
    pub fn detection_head(&self) -> &Head {
        self.rol_heads.last().unwrap_or(&self.main_head)
    }

    /// Parameter blocks in a fixed order: backbone, main, sdk, rol.*.
    pub fn blocks(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("backbone".to_string(), &self.backbone.map),
            ("main".to_string(), &self.main_head.weights),
        ];
        if let Some(h) = &self.sdk_head {
            out.push(("sdk".into(), &h.weights));
        }
        for h in &self.rol_heads {
            out.push((h.role.block_name(), &h.weights));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("backbone".to_string(), &mut self.backbone.map),
            ("main".to_string(), &mut self.main_head.weights),
        ];
        if let Some(h) = &mut self.sdk_head {
            out.push(("sdk".into(), &mut h.weights));
        }
        for h in &mut self.rol_heads {
            out.push((h.role.block_name(), &mut h.weights));
        }
        out
    }

    /// Zero gradients shaped like [`Self::blocks`].
    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.blocks()
            .into_iter()
            .map(|(_, b)| Array2::zeros(b.raw_dim()))
            .collect()
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks().iter().position(|(n, _)| n == name)
    }
}

/// Applies the backbone to every cell of an `H x W x D0` grid.
pub fn forward_grid(backbone: &Backbone, raw_grid: &Array3<f64>) -> Result<FeatureGrid> {
    let (h, w, d0) = raw_grid.dim();
    if d0 != backbone.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "grid has {d0} channels, backbone expects {}",
            backbone.in_dim()
        )));
    }
    let cells = raw_grid
        .to_shape((h * w, d0))
        .expect("grid is contiguous")
        .to_owned();
    let out = cells.dot(&backbone.map.t());
    FeatureGrid::new(
        out.into_shape_with_order((h, w, backbone.out_dim()))
            .expect("shape preserved"),
    )
}

/// Grid cells pooled by `bbox`: those whose centers lie inside it, or the
/// cell whose center is nearest the box center when none does.
pub fn pooled_cells(height: usize, width: usize, bbox: &BBox) -> Vec<(usize, usize)> {
    let mut inside = Vec::new();
    for i in 0..height {
        for j in 0..width {
            let (x, y) = cell_center(i, j, height, width);
            if bbox.contains_point(x, y) {
                inside.push((i, j));
            }
        }
    }
    if inside.is_empty() {
        let (cx, cy) = bbox.center();
        let mut best = ((0, 0), f64::INFINITY);
        for i in 0..height {
            for j in 0..width {
                let (x, y) = cell_center(i, j, height, width);
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                if d2 < best.1 {
                    best = ((i, j), d2);
                }
            }
        }
        inside.push(best.0);
    }
    inside
}

/// Mean of the pooled cell vectors.
pub fn roi_pool(grid: &FeatureGrid, bbox: &BBox) -> Array1<f64> {
    let (h, w, d) = grid.dim();
    let cells = pooled_cells(h, w, bbox);
    let mut out = Array1::zeros(d);
    for &(i, j) in &cells {
        out += &grid.values().slice(s![i, j, ..]);
    }
    out / cells.len() as f64
}

/// `D x K` matrix of pooled features, one column per box.
pub fn roi_pool_all(grid: &FeatureGrid, boxes: &[BBox]) -> Array2<f64> {
    let d = grid.dim().2;
    let mut out = Array2::zeros((d, boxes.len()));
    for (k, b) in boxes.iter().enumerate() {
        out.column_mut(k).assign(&roi_pool(grid, b));
    }
    out
}

/// Logits and column-softmax probabilities for `D x K` pooled features.
pub fn score_proposals(head: &Head, pooled: &Array2<f64>) -> Result<(LogitMatrix, ScoreMatrix)> {
    if pooled.nrows() != head.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} rows, head expects {}",
            pooled.nrows(),
            head.feature_dim()
        )));
    }
    let z = head.logits(pooled);
    let p = column_softmax(&z);
    Ok((LogitMatrix::new(z)?, ScoreMatrix::new(p)?))
}

/// Source-class probabilities of a frozen teacher on `proposals`.
pub fn extract_sdk(
    teacher: &DetectorModel,
    raw_grid: &Array3<f64>,
    proposals: &[BBox],
) -> Result<ScoreMatrix> {
    let head = teacher.source_head()?;
    let grid = forward_grid(&teacher.backbone, raw_grid)?;
    let pooled = roi_pool_all(&grid, proposals);
    Ok(score_proposals(head, &pooled)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total`: one decay by `lr_decay_factor`
    /// once two thirds of the steps have run.
    pub fn rate_at(&self, step: usize, total: usize) -> f64 {
        if 3 * step >= 2 * total {
            self.learning_rate * self.lr_decay_factor
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let first: Vec<Array2<f64>> = params
            .into_iter()
            .map(|p| Array2::zeros(p.raw_dim()))
            .collect();
        AdamState {
            step: 0,
            second: first.clone(),
            first,
        }
    }
}

/// One bias-corrected Adam update at rate `lr`, with weight decay added to
/// the gradient. Blocks whose `trainable` flag is false keep their values
/// and moments. Non-finite gradients abort before any parameter changes.
pub fn adam_step(
    params: &mut [(String, &mut Array2<f64>)],
    grads: &[Array2<f64>],
    trainable: &[bool],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first.len()
        || params.len() != trainable.len()
    {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter blocks, {} gradients, {} moment blocks, {} flags",
            params.len(),
            grads.len(),
            state.first.len(),
            trainable.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.dim() != g.dim() {
            return Err(Error::ShapeMismatch(format!(
                "block `{name}` is {:?}, gradient is {:?}",
                p.dim(),
                g.dim()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (b, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        if !trainable[b] {
            continue;
        }
        let m = &mut state.first[b];
        let v = &mut state.second[b];
        ndarray::Zip::from(&mut **p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                let g = g + cfg.weight_decay * *p;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + cfg.epsilon);
            });
    }
    Ok(())
}

/// Small random perturbation of the identity, used to initialize the
/// backbone of a fresh source model.
pub fn init_backbone(dim: usize, scale: f64, rng: &mut Stream) -> Backbone {
    let mut map = Array2::eye(dim);
    for v in map.iter_mut() {
        *v += rng.random_range(-scale..=scale);
    }
    Backbone { map }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn forward_grid_examples() {
        let raw = Array3::from_shape_fn((2, 3, 4), |(i, j, c)| (i * 12 + j * 4 + c) as f64);
        let id = forward_grid(&Backbone::identity(4), &raw).unwrap();
        assert_eq!(id.values(), &raw);
        let zero = Backbone {
            map: Array2::zeros((5, 4)),
        };
        assert!(forward_grid(&zero, &raw).unwrap().values().iter().all(|&v| v == 0.0));
        let one = forward_grid(
            &Backbone {
                map: array![[2.0]],
            },
            &Array3::from_elem((1, 1, 1), 3.0),
        )
        .unwrap();
        assert_eq!(one.values()[[0, 0, 0]], 6.0);
        assert!(forward_grid(&Backbone::identity(3), &raw).is_err());
    }

    #[test]
    fn roi_pool_examples() {
        let v = array![0.5, -1.0, 2.0];
        let uniform = FeatureGrid::new(Array3::from_shape_fn((4, 4, 3), |(_, _, c)| v[c])).unwrap();
        for b in [
            BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            BBox::new(0.3, 0.1, 0.4, 0.2).unwrap(),
        ] {
            assert_eq!(roi_pool(&uniform, &b), v);
        }

        // 2x2 grid; box covering the two top cells (centers y = 0.25).
        let g = FeatureGrid::new(Array3::from_shape_fn((2, 2, 1), |(i, j, _)| (2 * i + j) as f64))
            .unwrap();
        let top = BBox::new(0.0, 0.0, 1.0, 0.5).unwrap();
        assert_eq!(roi_pool(&g, &top), array![0.5]);

        // Tiny box near the bottom-right cell center.
        let tiny = BBox::new(0.9, 0.9, 0.95, 0.95).unwrap();
        assert_eq!(roi_pool(&g, &tiny), array![3.0]);
    }

    #[test]
    fn score_proposals_examples() {
        let head = Head::zeros(4, 3, HeadRole::Main);
        let f = Array2::from_elem((3, 5), 0.7);
        let (_, p) = score_proposals(&head, &f).unwrap();
        assert!(p.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let (z, p) = score_proposals(&head, &Array2::zeros((3, 0))).unwrap();
        assert_eq!((z.num_proposals(), p.num_proposals()), (0, 0));

        let mut aligned = Head::zeros(3, 2, HeadRole::Main);
        aligned.weights.row_mut(1).assign(&array![40.0, 0.0, 0.0]);
        let (_, p) = score_proposals(&aligned, &array![[1.0], [0.0]]).unwrap();
        assert!(p.get(1, 0) > 1.0 - 1e-15);

        assert!(score_proposals(&head, &Array2::zeros((2, 1))).is_err());
    }

    fn scalar_step(param: f64, grad: f64, cfg: &OptimizerConfig, state: &mut AdamState) -> f64 {
        let mut p = array![[param]];
        let g = vec![array![[grad]]];
        let mut blocks = vec![("w".to_string(), &mut p)];
        adam_step(&mut blocks, &g, &[true], state, cfg, cfg.learning_rate).unwrap();
        p[[0, 0]]
    }

    #[test]
    fn adam_examples() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut st = AdamState::for_params([&array![[0.0]]]);
        assert_eq!(scalar_step(1.5, 0.0, &cfg, &mut st), 1.5);
        assert_eq!(st.step, 1);

        let mut st = AdamState::for_params([&array![[0.0]]]);
        let after = scalar_step(1.0, 1.0, &cfg, &mut st);
        let expected = 1.0 - 2e-4 / (1.0 + 1e-8);
        assert!((after - expected).abs() < 1e-15);

        let mut a = AdamState::for_params([&array![[0.0]]]);
        let mut b = a.clone();
        assert_eq!(scalar_step(0.3, -0.2, &cfg, &mut a), scalar_step(0.3, -0.2, &cfg, &mut b));
        assert_eq!(a, b);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let cfg = OptimizerConfig::default();
        let mut p = array![[1.0, 2.0]];
        let mut q = array![[1.0]];
        let g = vec![array![[0.1, 0.2]], array![[f64::NAN]]];
        let mut st = AdamState::for_params([&p, &q]);
        let mut blocks = vec![("a".to_string(), &mut p), ("b".to_string(), &mut q)];
        let err = adam_step(&mut blocks, &g, &[true, true], &mut st, &cfg, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!(p, array![[1.0, 2.0]]);
    }

    #[test]
    fn frozen_blocks_do_not_move() {
        let cfg = OptimizerConfig::default();
        let mut p = array![[1.0]];
        let mut st = AdamState::for_params([&p]);
        let mut blocks = vec![("a".to_string(), &mut p)];
        adam_step(&mut blocks, &[array![[3.0]]], &[false], &mut st, &cfg, 1e-2).unwrap();
        assert_eq!(p, array![[1.0]]);
    }

    #[test]
    fn rate_schedule() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.rate_at(0, 30), 2e-4);
        assert_eq!(cfg.rate_at(19, 30), 2e-4);
        assert!((cfg.rate_at(20, 30) - 2e-5).abs() < 1e-20);
    }

    #[test]
    fn extract_sdk_zero_teacher_is_uniform() {
        let mut r = rng::stream(1, "t", 0);
        let teacher = DetectorModel {
            stage: ModelStage::Source,
            backbone: init_backbone(4, 0.1, &mut r),
            main_head: Head::zeros(3, 4, HeadRole::Main),
            sdk_head: None,
            rol_heads: vec![],
        };
        let raw = Array3::from_elem((2, 2, 4), 0.3);
        let boxes = [BBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), BBox::new(0.2, 0.2, 1.0, 1.0).unwrap()];
        let q = extract_sdk(&teacher, &raw, &boxes).unwrap();
        assert!(q.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let warm = DetectorModel {
            stage: ModelStage::Warmup,
            ..teacher
        };
        assert!(matches!(extract_sdk(&warm, &raw, &boxes), Err(Error::MissingHead(_))));
    }
}
