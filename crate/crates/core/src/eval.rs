//! PASCAL VOC style detection evaluation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: usize,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    #[default]
    Voc07_11point,
    AllPoints,
}

impl std::str::FromStr for ApMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voc07_11point" => Ok(ApMethod::Voc07_11point),
            "all_points" => Ok(ApMethod::AllPoints),
            other => Err(Error::config(
                "ap_method",
                format!("`{other}` is not voc07_11point|all_points"),
            )),
        }
    }
}

impl std::fmt::Display for ApMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ApMethod::Voc07_11point => "voc07_11point",
            ApMethod::AllPoints => "all_points",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub ap_method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            ap_method: ApMethod::Voc07_11point,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::config("iou_threshold", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Ground-truth boxes of one class, keyed by scene id.
pub type GroundTruth = BTreeMap<usize, Vec<BBox>>;

/// Processing order for matching: descending score, insertion order on ties.
pub fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching of one class's detections. Returns TP flags aligned with
/// the input slice.
pub fn match_detections(dets: &[Detection], gts: &GroundTruth, cfg: &EvalConfig) -> Vec<bool> {
    let mut used: BTreeMap<usize, Vec<bool>> = gts
        .iter()
        .map(|(&scene, boxes)| (scene, vec![false; boxes.len()]))
        .collect();
    let mut tp = vec![false; dets.len()];
    for i in ranking(dets) {
        let d = &dets[i];
        let (Some(boxes), Some(flags)) = (gts.get(&d.scene_id), used.get_mut(&d.scene_id)) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in boxes.iter().enumerate() {
            if flags[g] {
                continue;
            }
            let v = iou(&d.bbox, b);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v > cfg.iou_threshold {
                flags[g] = true;
                tp[i] = true;
            }
        }
    }
    tp
}

/// Average precision from TP/FP flags already in ranked order. `None` when
/// the class has no ground truth and must be left out of the mean.
pub fn average_precision(flags: &[bool], total_gt: usize, cfg: &EvalConfig) -> Option<f64> {
    if total_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let ap = match cfg.ap_method {
        ApMethod::Voc07_11point => {
            let sum: f64 = (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(&r, _)| r >= t)
                        .map(|(_, &p)| p)
                        .fold(0.0, f64::max)
                })
                .sum();
            sum / 11.0
        }
        ApMethod::AllPoints => {
            let mut mrec = vec![0.0];
            mrec.extend(&recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend(&precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
    };
    Some(ap)
}

/// Mean over the classes that have ground truth.
pub fn mean_ap(per_class_aps: &[Option<f64>]) -> Result<f64> {
    let included: Vec<f64> = per_class_aps.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::NoIncludedClasses);
    }
    Ok(included.iter().sum::<f64>() / included.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Evaluates detections against per-scene `(class, box)` ground truth for
/// classes `0..num_classes`.
pub fn evaluate(
    dets: &[Detection],
    ground_truth: &BTreeMap<usize, Vec<(usize, BBox)>>,
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let per_class = (0..num_classes)
        .map(|c| {
            let class_dets: Vec<Detection> =
                dets.iter().filter(|d| d.class == c).copied().collect();
            let gts: GroundTruth = ground_truth
                .iter()
                .map(|(&s, objs)| {
                    (
                        s,
                        objs.iter().filter(|(k, _)| *k == c).map(|(_, b)| *b).collect(),
                    )
                })
                .collect();
            let total: usize = gts.values().map(Vec::len).sum();
            let tp = match_detections(&class_dets, &gts, cfg);
            let ranked: Vec<bool> = ranking(&class_dets).into_iter().map(|i| tp[i]).collect();
            average_precision(&ranked, total, cfg)
        })
        .collect::<Vec<_>>();
    let map = mean_ap(&per_class)?;
    Ok(EvalReport { per_class, map })
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRow {
    scene_id: usize,
    class: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
}

pub fn write_detections<W: Write>(out: W, dets: &[Detection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for d in dets {
        let [x1, y1, x2, y2] = d.bbox.corners();
        w.serialize(DetectionRow {
            scene_id: d.scene_id,
            class: d.class,
            x1,
            y1,
            x2,
            y2,
            score: d.score,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a detections CSV. Errors carry the 1-based line number of the
/// offending row.
pub fn read_detections<R: Read>(input: R) -> Result<Vec<Detection>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize::<DetectionRow>() {
        let row = row.map_err(csv_err)?;
        let line = out.len() + 2;
        let bbox = BBox::new(row.x1, row.y1, row.x2, row.y2)
            .map_err(|e| Error::parse(line, e.to_string()))?;
        if !row.score.is_finite() {
            return Err(Error::parse(line, "non-finite score"));
        }
        out.push(Detection {
            scene_id: row.scene_id,
            class: row.class,
            bbox,
            score: row.score,
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::parse(line, format!("{kind:?}")),
    }
}

/// `class,ap` rows (excluded classes are written as `excluded`) followed by a
/// `mAP,<value>` summary line.
pub fn write_report<W: Write>(mut out: W, report: &EvalReport) -> Result<()> {
    writeln!(out, "class,ap")?;
    for (c, ap) in report.per_class.iter().enumerate() {
        match ap {
            Some(v) => writeln!(out, "{c},{v}")?,
            None => writeln!(out, "{c},excluded")?,
        }
    }
    writeln!(out, "mAP,{}", report.map)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(scene: usize, b: BBox, score: f64) -> Detection {
        Detection {
            scene_id: scene,
            class: 0,
            bbox: b,
            score,
        }
    }

    fn one_gt() -> GroundTruth {
        BTreeMap::from([(0, vec![bx(0.0, 0.0, 0.5, 1.0)])])
    }

    #[test]
    fn match_examples() {
        let cfg = EvalConfig::default();
        // shift right by d: IoU = (0.5-d)/(0.5+d); d = 0.5/16 gives 0.88, d=0.125 gives 0.6
        let at_06 = bx(0.125, 0.0, 0.625, 1.0);
        assert_eq!(match_detections(&[det(0, at_06, 0.7)], &one_gt(), &cfg), vec![true]);

        let near = bx(0.025, 0.0, 0.525, 1.0);
        assert!(iou(&near, &one_gt()[&0][0]) > 0.9);
        let two = [det(0, near, 0.8), det(0, near, 0.9)];
        assert_eq!(match_detections(&two, &one_gt(), &cfg), vec![false, true]);

        let at_04 = bx(1.5 / 7.0, 0.0, 0.5 + 1.5 / 7.0, 1.0);
        assert_eq!(match_detections(&[det(0, at_04, 0.7)], &one_gt(), &cfg), vec![false]);
        // wrong scene
        assert_eq!(match_detections(&[det(3, at_06, 0.7)], &one_gt(), &cfg), vec![false]);
    }

    #[test]
    fn ap_examples() {
        let cfg = EvalConfig::default();
        assert_eq!(average_precision(&[true], 1, &cfg), Some(1.0));
        assert_eq!(average_precision(&[false], 1, &cfg), Some(0.0));
        let ap = average_precision(&[true, false, true], 2, &cfg).unwrap();
        assert!((ap - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
        assert!((ap - 0.8485).abs() < 1e-4);
        assert_eq!(average_precision(&[true], 0, &cfg), None);
        assert_eq!(average_precision(&[], 3, &cfg), Some(0.0));
    }

    #[test]
    fn all_points_ap() {
        let cfg = EvalConfig {
            ap_method: ApMethod::AllPoints,
            ..EvalConfig::default()
        };
        let ap = average_precision(&[true, false, true], 2, &cfg).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn map_examples() {
        assert_eq!(mean_ap(&[Some(0.7)]).unwrap(), 0.7);
        assert_eq!(mean_ap(&[Some(1.0), Some(0.0)]).unwrap(), 0.5);
        assert_eq!(mean_ap(&[Some(0.25); 20]).unwrap(), 0.25);
        assert_eq!(mean_ap(&[Some(1.0), None]).unwrap(), 1.0);
        assert!(matches!(mean_ap(&[None, None]), Err(Error::NoIncludedClasses)));
    }

    #[test]
    fn detections_csv_roundtrip_and_errors() {
        let dets = vec![
            Detection {
                scene_id: 3,
                class: 1,
                bbox: bx(0.1, 0.2, 0.30000000000000004, 0.4),
                score: 0.123456789012345,
            },
            det(0, bx(0.0, 0.0, 1.0, 1.0), 1.0 / 3.0),
        ];
        let mut buf = Vec::new();
        write_detections(&mut buf, &dets).unwrap();
        assert_eq!(read_detections(buf.as_slice()).unwrap(), dets);

        let bad = "scene_id,class,x1,y1,x2,y2,score\n0,0,0.1,0.1,0.2,0.2,0.5\n0,0,0.1,oops,0.2,0.2,0.5\n";
        match read_detections(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let degenerate = "scene_id,class,x1,y1,x2,y2,score\n0,0,0.3,0.1,0.2,0.2,0.5\n";
        match read_detections(degenerate.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
