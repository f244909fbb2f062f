//! Pseudo-label mining for the refinement classifiers.
//!
//! Given the detached probabilities of classifier `i-1` on one weakly
//! annotated scene, each present class contributes its single most confident
//! proposal. Proposals overlapping it strongly become object supports,
//! proposals in a moderate overlap band become background supports, and
//! everything else is left unlabelled (a zero column).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::losses::{ImageLabel, ScoreMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolConfig {
    pub phi_obj: f64,
    pub phi_bg: f64,
    pub num_classifiers: usize,
}

impl Default for RolConfig {
    fn default() -> Self {
        RolConfig {
            phi_obj: 0.5,
            phi_bg: 0.3,
            num_classifiers: 3,
        }
    }
}

impl RolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.phi_bg && self.phi_bg < self.phi_obj && self.phi_obj <= 1.0) {
            return Err(Error::config(
                "rol.phi_obj/phi_bg",
                format!(
                    "need 0 <= phi_bg < phi_obj <= 1, got phi_bg={} phi_obj={}",
                    self.phi_bg, self.phi_obj
                ),
            ));
        }
        if self.num_classifiers < 2 {
            return Err(Error::config("rol.num_classifiers", "must be at least 2"));
        }
        Ok(())
    }
}

/// Which labeller produces pseudo labels for classifiers `i > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Labeller {
    Rol,
    Oicr,
}

impl std::fmt::Display for Labeller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Labeller::Rol => "rol",
            Labeller::Oicr => "oicr",
        })
    }
}

impl std::str::FromStr for Labeller {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rol" => Ok(Labeller::Rol),
            "oicr" => Ok(Labeller::Oicr),
            other => Err(Error::config("labeller", format!("`{other}` is not rol|oicr"))),
        }
    }
}

/// `(C_t+1) x K` soft labels; each column is zero or has a single entry in
/// `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMatrix(Array2<f64>);

impl PseudoLabelMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for (k, col) in values.columns().into_iter().enumerate() {
            let mut nonzero = 0;
            for &v in col {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidPseudoLabels(format!(
                        "column {k} has entry {v} outside [0, 1]"
                    )));
                }
                if v > 0.0 {
                    nonzero += 1;
                }
            }
            if nonzero > 1 {
                return Err(Error::InvalidPseudoLabels(format!(
                    "column {k} has {nonzero} nonzero entries"
                )));
            }
        }
        Ok(PseudoLabelMatrix(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    /// The `(class, weight)` label of proposal `k`, if any.
    pub fn label_of(&self, k: usize) -> Option<(usize, f64)> {
        self.0
            .column(k)
            .iter()
            .enumerate()
            .find(|(_, &v)| v > 0.0)
            .map(|(c, &v)| (c, v))
    }

    pub fn background_row(&self) -> usize {
        self.0.nrows() - 1
    }
}

/// Most confident proposal for object class `class_index`; ties go to the
/// lowest proposal index.
pub fn top_proposal(scores: &ScoreMatrix, class_index: usize) -> Result<usize> {
    let (rows, k) = scores.values().dim();
    if class_index + 1 >= rows {
        return Err(Error::BackgroundRow(class_index));
    }
    if k == 0 {
        return Err(Error::NoProposals);
    }
    let row = scores.values().row(class_index);
    let mut best = 0;
    for j in 1..k {
        if row[j] > row[best] {
            best = j;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy)]
struct Seed {
    class: usize,
    proposal: usize,
    score: f64,
}

fn seeds(scores: &ScoreMatrix, boxes: &[BBox], y_img: &ImageLabel) -> Result<Vec<Seed>> {
    let (rows, k) = scores.values().dim();
    if boxes.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} boxes for {k} score columns",
            boxes.len()
        )));
    }
    if y_img.len() + 1 != rows {
        return Err(Error::ShapeMismatch(format!(
            "image label has {} classes but scores have {rows} rows",
            y_img.len()
        )));
    }
    let seeds = y_img
        .present_classes()
        .map(|c| {
            let j = top_proposal(scores, c)?;
            Ok(Seed {
                class: c,
                proposal: j,
                score: scores.get(c, j),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(Error::InvalidPseudoLabels(
            "image label has no present class".into(),
        ));
    }
    Ok(seeds)
}

/// Strongest object seed whose top proposal overlaps `b` above `phi_obj`.
/// Seeds are in ascending class order, so strict `>` keeps the lower class on
/// ties.
fn object_label(b: &BBox, seeds: &[Seed], boxes: &[BBox], phi_obj: f64) -> Option<Seed> {
    let mut best: Option<Seed> = None;
    for s in seeds {
        if iou(b, &boxes[s.proposal]) > phi_obj && best.is_none_or(|cur| s.score > cur.score) {
            best = Some(*s);
        }
    }
    best
}

/// Support-proposal mining.
pub fn mine_support(
    prev_scores: &ScoreMatrix,
    boxes: &[BBox],
    y_img: &ImageLabel,
    cfg: &RolConfig,
) -> Result<PseudoLabelMatrix> {
    let seeds = seeds(prev_scores, boxes, y_img)?;
    let bg = prev_scores.num_classes() - 1;
    let mut out = Array2::zeros(prev_scores.values().raw_dim());
    for (k, b) in boxes.iter().enumerate() {
        if let Some(s) = object_label(b, &seeds, boxes, cfg.phi_obj) {
            out[[s.class, k]] = s.score;
            continue;
        }
        let mut weight: Option<f64> = None;
        for s in &seeds {
            let v = iou(b, &boxes[s.proposal]);
            if v > cfg.phi_bg && v < cfg.phi_obj && weight.is_none_or(|w| s.score > w) {
                weight = Some(s.score);
            }
        }
        if let Some(w) = weight {
            out[[bg, k]] = w;
        }
    }
    PseudoLabelMatrix::new(out)
}

/// Baseline labeller: identical object labels, but every other proposal is
/// background with the largest seed score as its weight.
pub fn oicr_label(
    prev_scores: &ScoreMatrix,
    boxes: &[BBox],
    y_img: &ImageLabel,
    cfg: &RolConfig,
) -> Result<PseudoLabelMatrix> {
    let seeds = seeds(prev_scores, boxes, y_img)?;
    let bg = prev_scores.num_classes() - 1;
    let bg_weight = seeds.iter().map(|s| s.score).fold(0.0, f64::max);
    let mut out = Array2::zeros(prev_scores.values().raw_dim());
    for (k, b) in boxes.iter().enumerate() {
        match object_label(b, &seeds, boxes, cfg.phi_obj) {
            Some(s) => out[[s.class, k]] = s.score,
            None => out[[bg, k]] = bg_weight,
        }
    }
    PseudoLabelMatrix::new(out)
}

pub fn label_with(
    labeller: Labeller,
    prev_scores: &ScoreMatrix,
    boxes: &[BBox],
    y_img: &ImageLabel,
    cfg: &RolConfig,
) -> Result<PseudoLabelMatrix> {
    match labeller {
        Labeller::Rol => mine_support(prev_scores, boxes, y_img, cfg),
        Labeller::Oicr => oicr_label(prev_scores, boxes, y_img, cfg),
    }
}
