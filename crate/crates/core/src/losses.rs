//! Loss functions with closed-form gradients.
//!
//! Every matrix-valued loss follows the same layout: rows are classes (object
//! classes first, background last) and columns are proposals.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::labelling::PseudoLabelMatrix;
use crate::numerics::{log_sigmoid, log_softmax, sigmoid, softmax_unchecked};

/// Clamp bound for probabilities that enter a logarithm directly.
pub const PROB_EPS: f64 = 1e-12;

const COLUMN_SUM_TOL: f64 = 1e-9;

/// Pre-activation class scores, `(C+1) x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(Array2<f64>);

impl LogitMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidLogits(format!("non-finite entry {v}")));
        }
        Ok(LogitMatrix(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_proposals(&self) -> usize {
        self.0.ncols()
    }

    /// Column-wise softmax.
    pub fn probabilities(&self) -> ScoreMatrix {
        ScoreMatrix(column_softmax(&self.0))
    }
}

/// Column-stochastic probabilities, `(C+1) x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(Array2<f64>);

impl ScoreMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for (k, col) in values.axis_iter(Axis(1)).enumerate() {
            if col.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::InvalidScores(format!(
                    "column {k} has a negative or non-finite entry"
                )));
            }
            let total: f64 = col.sum();
            if (total - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(Error::InvalidScores(format!(
                    "column {k} sums to {total}, not 1"
                )));
            }
        }
        Ok(ScoreMatrix(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_proposals(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, class: usize, proposal: usize) -> f64 {
        self.0[[class, proposal]]
    }
}

pub(crate) fn column_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (k, col) in logits.axis_iter(Axis(1)).enumerate() {
        let p = softmax_unchecked(&col.to_vec());
        out.column_mut(k).assign(&Array1::from(p));
    }
    out
}

/// Backbone activations, `H x W x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid(Array3<f64>);

impl FeatureGrid {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, d) = values.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!("empty grid {h}x{w}x{d}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLogits("non-finite grid activation".into()));
        }
        Ok(FeatureGrid(values))
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }
}

/// Center of grid cell `(row, col)` in normalized coordinates, as `(x, y)`.
pub fn cell_center(row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
    (
        (col as f64 + 0.5) / width as f64,
        (row as f64 + 0.5) / height as f64,
    )
}

/// `true` marks a background cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackgroundMask(Array2<bool>);

impl BackgroundMask {
    pub fn cells(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn num_background(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Marks a cell as background iff its center lies in none of `gt_boxes`.
pub fn bd_mask(grid_height: usize, grid_width: usize, gt_boxes: &[BBox]) -> BackgroundMask {
    let cells = Array2::from_shape_fn((grid_height, grid_width), |(i, j)| {
        let (x, y) = cell_center(i, j, grid_height, grid_width);
        !gt_boxes.iter().any(|b| b.contains_point(x, y))
    });
    BackgroundMask(cells)
}

/// Background depression: sum of squared activations over background cells,
/// all channels. Gradient is `2 * activation` on background cells and zero
/// elsewhere.
pub fn bd_loss(grid: &FeatureGrid, mask: &BackgroundMask) -> Result<(f64, Array3<f64>)> {
    let (h, w, d) = grid.dim();
    if mask.0.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match grid {h}x{w}",
            mask.0.dim()
        )));
    }
    let mut grad = Array3::zeros((h, w, d));
    let mut loss = 0.0;
    for ((i, j), &bg) in mask.0.indexed_iter() {
        if !bg {
            continue;
        }
        for c in 0..d {
            let v = grid.0[[i, j, c]];
            loss += v * v;
            grad[[i, j, c]] = 2.0 * v;
        }
    }
    Ok((loss, grad))
}

/// `-sum_k sum_c targets(c,k) * log softmax(logits)(c,k)` and its gradient.
///
/// `targets` may be any nonnegative matrix; a zero column contributes nothing.
pub fn soft_cross_entropy(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for k in 0..logits.ncols() {
        let t = targets.column(k);
        let mass: f64 = t.sum();
        if mass == 0.0 {
            continue;
        }
        let z = logits.column(k).to_vec();
        let logp = log_softmax(&z);
        for c in 0..z.len() {
            let tc = t[c];
            if tc != 0.0 {
                loss -= tc * logp[c];
            }
            grad[[c, k]] = logp[c].exp() * mass - tc;
        }
    }
    Ok((loss, grad))
}

/// Source-detection-knowledge distillation loss.
///
/// Cross-entropy from teacher probabilities to the softmax of the student
/// logits. With `weighted`, each term is additionally scaled by the teacher
/// probability itself.
pub fn sdk_loss(
    teacher: &ScoreMatrix,
    student_logits: &LogitMatrix,
    weighted: bool,
) -> Result<(f64, Array2<f64>)> {
    let targets = if weighted {
        teacher.0.mapv(|t| t * t)
    } else {
        teacher.0.clone()
    };
    soft_cross_entropy(&student_logits.0, &targets)
}

/// Per-proposal cross-entropy against hard class indices.
pub fn hard_cross_entropy(logits: &LogitMatrix, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (classes, k) = logits.0.dim();
    if labels.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {k} proposals",
            labels.len()
        )));
    }
    let mut targets = Array2::zeros((classes, k));
    for (col, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::ShapeMismatch(format!(
                "label {c} out of range for {classes} classes"
            )));
        }
        targets[[c, col]] = 1.0;
    }
    soft_cross_entropy(&logits.0, &targets)
}

/// Binary per-class image label; excludes the background class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLabel(Vec<bool>);

impl ImageLabel {
    pub fn new(present: Vec<bool>) -> Self {
        ImageLabel(present)
    }

    pub fn from_classes(num_classes: usize, classes: impl IntoIterator<Item = usize>) -> Self {
        let mut v = vec![false; num_classes];
        for c in classes {
            v[c] = true;
        }
        ImageLabel(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.0[class]
    }

    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &p)| p).map(|(c, _)| c)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// Image-level class probabilities: sigmoid of each object row's logit sum.
pub fn image_score(classifier1_logits: &LogitMatrix) -> Result<Vec<f64>> {
    let (rows, k) = classifier1_logits.0.dim();
    if k == 0 {
        return Err(Error::NoProposals);
    }
    Ok((0..rows.saturating_sub(1))
        .map(|c| sigmoid(classifier1_logits.0.row(c).sum()))
        .collect())
}

/// Multi-label binary cross-entropy. Probabilities are clamped into
/// `[PROB_EPS, 1 - PROB_EPS]` before the logarithm.
pub fn multilabel_loss(p_img: &[f64], y_img: &ImageLabel) -> Result<(f64, Vec<f64>)> {
    if p_img.len() != y_img.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            p_img.len(),
            y_img.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p_img.len());
    for (&p, &y) in p_img.iter().zip(&y_img.0) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if y {
            loss -= p.ln();
            grad.push(-1.0 / p);
        } else {
            loss -= (1.0 - p).ln();
            grad.push(1.0 / (1.0 - p));
        }
    }
    Ok((loss, grad))
}

/// Classifier-1 loss: `multilabel_loss(image_score(logits), y)` differentiated
/// with respect to the logits. Computed in log-sigmoid form so that the
/// gradient never vanishes at saturated image scores.
pub fn image_level_loss(logits: &LogitMatrix, y_img: &ImageLabel) -> Result<(f64, Array2<f64>)> {
    let (rows, k) = logits.0.dim();
    if k == 0 {
        return Err(Error::NoProposals);
    }
    if rows != y_img.len() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{rows} logit rows for {} classes plus background",
            y_img.len()
        )));
    }
    let mut grad = Array2::zeros((rows, k));
    let mut loss = 0.0;
    for c in 0..y_img.len() {
        let s = logits.0.row(c).sum();
        let y = y_img.0[c];
        loss -= if y { log_sigmoid(s) } else { log_sigmoid(-s) };
        let g = sigmoid(s) - if y { 1.0 } else { 0.0 };
        grad.row_mut(c).fill(g);
    }
    Ok((loss, grad))
}

/// Refinement-classifier loss against mined pseudo labels.
pub fn rol_classifier_loss(
    student_logits: &LogitMatrix,
    pseudo: &PseudoLabelMatrix,
) -> Result<(f64, Array2<f64>)> {
    if pseudo.values().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidPseudoLabels("negative entry".into()));
    }
    soft_cross_entropy(&student_logits.0, pseudo.values())
}

pub fn rol_total(per_classifier_losses: &[f64]) -> f64 {
    per_classifier_losses.iter().sum()
}

/// Loss coefficients for both training stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_main: f64,
    pub lambda_bd: f64,
    pub lambda_sdk: f64,
    pub lambda_wstd_sdk: f64,
    pub lambda_wstd_rol: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_main: 1.0,
            lambda_bd: 0.5,
            lambda_sdk: 0.5,
            lambda_wstd_sdk: 150.0,
            lambda_wstd_rol: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_main", self.lambda_main),
            ("lambda_bd", self.lambda_bd),
            ("lambda_sdk", self.lambda_sdk),
            ("lambda_wstd_sdk", self.lambda_wstd_sdk),
            ("lambda_wstd_rol", self.lambda_wstd_rol),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

pub fn lstd_total(main: f64, bd: f64, sdk: f64, w: &LossWeights) -> f64 {
    w.lambda_main * main + w.lambda_bd * bd + w.lambda_sdk * sdk
}

pub fn wstd_total(sdk: f64, rol: f64, w: &LossWeights) -> f64 {
    w.lambda_wstd_sdk * sdk + w.lambda_wstd_rol * rol
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::LN_2;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn bd_mask_examples() {
        let full = bd_mask(2, 2, &[bx(0.0, 0.0, 1.0, 1.0)]);
        assert_eq!(full.num_background(), 0);
        let none = bd_mask(2, 2, &[]);
        assert_eq!(none.num_background(), 4);
        let half = bd_mask(2, 2, &[bx(0.0, 0.0, 0.5, 1.0)]);
        assert_eq!(half.cells(), &array![[false, true], [false, true]]);
    }

    #[test]
    fn bd_loss_examples() {
        let zeros = FeatureGrid::new(Array3::zeros((2, 2, 3))).unwrap();
        let (l, _) = bd_loss(&zeros, &bd_mask(2, 2, &[])).unwrap();
        assert_eq!(l, 0.0);

        let ones = FeatureGrid::new(Array3::ones((2, 2, 1))).unwrap();
        let fg = bd_mask(2, 2, &[bx(0.0, 0.0, 1.0, 1.0)]);
        let (l, g) = bd_loss(&ones, &fg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));

        let right = bd_mask(2, 2, &[bx(0.0, 0.0, 0.5, 1.0)]);
        let (l, g) = bd_loss(&ones, &right).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g[[0, 1, 0]], 2.0);
        assert_eq!(g[[0, 0, 0]], 0.0);

        assert!(bd_loss(&ones, &bd_mask(3, 2, &[])).is_err());
    }

    #[test]
    fn sdk_loss_examples() {
        let teacher = ScoreMatrix::new(array![[1.0], [0.0]]).unwrap();
        let student = LogitMatrix::new(array![[800.0], [0.0]]).unwrap();
        let (l, _) = sdk_loss(&teacher, &student, false).unwrap();
        assert!(l.abs() < 1e-12);

        let teacher = ScoreMatrix::new(array![[0.5], [0.5]]).unwrap();
        let student = LogitMatrix::new(array![[0.0], [0.0]]).unwrap();
        let (l, _) = sdk_loss(&teacher, &student, false).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
        let (l, _) = sdk_loss(&teacher, &student, true).unwrap();
        assert!((l - 0.5 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn teacher_columns_must_sum_to_one() {
        assert!(ScoreMatrix::new(array![[0.5], [0.4]]).is_err());
        assert!(ScoreMatrix::new(array![[1.2], [-0.2]]).is_err());
    }

    #[test]
    fn image_score_examples() {
        let z = LogitMatrix::new(Array2::zeros((3, 4))).unwrap();
        assert_eq!(image_score(&z).unwrap(), vec![0.5, 0.5]);
        let one = LogitMatrix::new(array![[0.0], [2.5], [0.0]]).unwrap();
        assert_eq!(image_score(&one).unwrap()[1], sigmoid(2.5));
        let two = LogitMatrix::new(array![[1.0, 2.0], [0.0, 0.0]]).unwrap();
        assert!((image_score(&two).unwrap()[0] - sigmoid(3.0)).abs() < 1e-15);
        let empty = LogitMatrix::new(Array2::zeros((3, 0))).unwrap();
        assert!(matches!(image_score(&empty), Err(Error::NoProposals)));
    }

    #[test]
    fn multilabel_examples() {
        let y = ImageLabel::new(vec![true, false]);
        let (l, _) = multilabel_loss(&[1.0, 0.0], &y).unwrap();
        assert!(l < 1e-11);
        let (l, _) = multilabel_loss(&[0.5; 20], &ImageLabel::new(vec![false; 20])).unwrap();
        assert!((l - 20.0 * LN_2).abs() < 1e-12);
        assert!((l - 13.863).abs() < 1e-3);
        let (l, _) = multilabel_loss(&[0.5], &ImageLabel::new(vec![true])).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
    }

    #[test]
    fn image_level_loss_matches_composition() {
        let z = LogitMatrix::new(array![[0.3, -0.2, 0.1], [-1.0, 0.4, 0.2], [0.0, 0.5, -0.5]])
            .unwrap();
        let y = ImageLabel::new(vec![true, false]);
        let (direct, _) = multilabel_loss(&image_score(&z).unwrap(), &y).unwrap();
        let (composite, _) = image_level_loss(&z, &y).unwrap();
        assert!((direct - composite).abs() < 1e-12);
    }

    #[test]
    fn rol_loss_examples() {
        let z = LogitMatrix::new(array![[0.0, 1.0], [0.0, 2.0]]).unwrap();
        let zero = PseudoLabelMatrix::new(Array2::zeros((2, 2))).unwrap();
        let (l, g) = rol_classifier_loss(&z, &zero).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));

        let z = LogitMatrix::new(array![[0.0], [0.0]]).unwrap();
        let pseudo = PseudoLabelMatrix::new(array![[0.8], [0.0]]).unwrap();
        let (l, _) = rol_classifier_loss(&z, &pseudo).unwrap();
        assert!((l - 0.8 * LN_2).abs() < 1e-12);

        let z = LogitMatrix::new(array![[900.0], [0.0]]).unwrap();
        let pseudo = PseudoLabelMatrix::new(array![[1.0], [0.0]]).unwrap();
        let (l, _) = rol_classifier_loss(&z, &pseudo).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn totals() {
        assert_eq!(rol_total(&[1.0]), 1.0);
        assert_eq!(rol_total(&[0.5, 0.25, 0.25]), 1.0);
        assert_eq!(rol_total(&[0.0, 0.0, 0.0]), 0.0);

        let w = LossWeights::default();
        assert_eq!(lstd_total(1.0, 2.0, 3.0, &w), 3.5);
        let zero = LossWeights {
            lambda_main: 0.0,
            lambda_bd: 0.0,
            lambda_sdk: 0.0,
            lambda_wstd_sdk: 0.0,
            lambda_wstd_rol: 0.0,
        };
        assert_eq!(lstd_total(1.0, 2.0, 3.0, &zero), 0.0);
        let ft = LossWeights {
            lambda_bd: 0.0,
            lambda_sdk: 0.0,
            ..w
        };
        assert_eq!(lstd_total(1.7, 2.0, 3.0, &ft), 1.7);

        assert_eq!(wstd_total(1.0, 1.0, &w), 200.0);
        let no_sdk = LossWeights {
            lambda_wstd_sdk: 0.0,
            ..w
        };
        assert_eq!(wstd_total(4.0, 0.3, &no_sdk), 50.0 * 0.3);
        assert_eq!(wstd_total(0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn negative_pseudo_label_rejected() {
        assert!(PseudoLabelMatrix::new(array![[-0.1], [0.0]]).is_err());
    }
}
