//! Independent oracles and random instance generators shared by the
//! property tests and the acceptance target.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use potd_core::eval::{ApMethod, Detection};
use potd_core::geometry::{iou, BBox};
use potd_core::labelling::{Labeller, RolConfig};
use potd_core::losses::{ImageLabel, ScoreMatrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Area-based IoU written directly from corner coordinates.
pub fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

pub fn random_box(r: &mut TestRng) -> BBox {
    loop {
        let (a, b): (f64, f64) = (r.random(), r.random());
        let (c, d): (f64, f64) = (r.random(), r.random());
        if let Ok(bx) = BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)) {
            return bx;
        }
    }
}

/// Boxes on a 0.1 lattice: coincident boxes and exact-threshold overlaps are
/// common.
pub fn lattice_box(r: &mut TestRng) -> BBox {
    let x1 = r.random_range(0..9);
    let y1 = r.random_range(0..9);
    let x2 = r.random_range(x1 + 1..=10);
    let y2 = r.random_range(y1 + 1..=10);
    BBox::new(x1 as f64 / 10.0, y1 as f64 / 10.0, x2 as f64 / 10.0, y2 as f64 / 10.0).unwrap()
}

/// Brute-force greedy NMS: repeatedly take the best remaining box (highest
/// score, lowest index), keep it if it overlaps no kept box too much.
pub fn oracle_nms(boxes: &[BBox], scores: &[f64], threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut done = vec![false; boxes.len()];
    let mut kept: Vec<usize> = Vec::new();
    for _ in 0..boxes.len() {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if !done[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let i = best.unwrap();
        done[i] = true;
        if kept.len() < max_keep
            && kept
                .iter()
                .all(|&k| oracle_iou(boxes[i].corners(), boxes[k].corners()) <= threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Column-normalized scores with small integer weights, so ties within a
/// row are common.
pub fn random_scores(r: &mut TestRng, rows: usize, k: usize) -> ScoreMatrix {
    let mut m = Array2::from_shape_fn((rows, k), |_| r.random_range(1..5) as f64);
    for mut col in m.columns_mut() {
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    ScoreMatrix::new(m).unwrap()
}

pub fn random_image_label(r: &mut TestRng, classes: usize) -> ImageLabel {
    let mut present: Vec<bool> = (0..classes).map(|_| r.random_bool(0.5)).collect();
    if !present.iter().any(|p| *p) {
        present[r.random_range(0..classes)] = true;
    }
    ImageLabel::new(present)
}

#[derive(Debug, Clone)]
pub struct LabellingInstance {
    pub scores: ScoreMatrix,
    pub boxes: Vec<BBox>,
    pub label: ImageLabel,
    pub cfg: RolConfig,
}

pub fn random_labelling_instance(r: &mut TestRng) -> LabellingInstance {
    let classes = r.random_range(1..5);
    let k = r.random_range(1..9);
    let mut boxes: Vec<BBox> = (0..k).map(|_| lattice_box(r)).collect();
    // Force a few exact duplicates.
    if k > 1 && r.random_bool(0.3) {
        boxes[k - 1] = boxes[0];
    }
    let cfg = if r.random_bool(0.5) {
        RolConfig::default()
    } else {
        let phi_bg = r.random_range(0..5) as f64 / 10.0;
        let phi_obj = r.random_range(phi_bg * 10.0 + 1.0..=10.0).floor() / 10.0;
        RolConfig {
            phi_obj,
            phi_bg,
            ..RolConfig::default()
        }
    };
    LabellingInstance {
        scores: random_scores(r, classes + 1, k),
        boxes,
        label: random_image_label(r, classes),
        cfg,
    }
}

/// Support-proposal mining and the baseline labeller, written from the rule
/// text: seeds, object band, background band, conflict resolution.
pub fn reference_labels(inst: &LabellingInstance, labeller: Labeller) -> Array2<f64> {
    let s = inst.scores.values();
    let (rows, k) = s.dim();
    let bg = rows - 1;
    // (class, top proposal, top score) per present class.
    let seeds: Vec<(usize, usize, f64)> = (0..bg)
        .filter(|&c| inst.label.is_present(c))
        .map(|c| {
            let mut j = 0;
            for p in 0..k {
                if s[[c, p]] > s[[c, j]] {
                    j = p;
                }
            }
            (c, j, s[[c, j]])
        })
        .collect();
    let max_seed = seeds.iter().map(|x| x.2).fold(f64::MIN, f64::max);
    let mut out = Array2::zeros((rows, k));
    for p in 0..k {
        // Candidate labels as (priority, weight, -class) and target row.
        let mut cands: Vec<((u8, f64, i64), usize)> = Vec::new();
        for &(c, j, w) in &seeds {
            let v = iou(&inst.boxes[p], &inst.boxes[j]);
            if v > inst.cfg.phi_obj {
                cands.push(((1, w, -(c as i64)), c));
            } else if labeller == Labeller::Rol && v > inst.cfg.phi_bg && v < inst.cfg.phi_obj {
                cands.push(((0, w, 0), bg));
            }
        }
        if labeller == Labeller::Oicr && cands.is_empty() {
            cands.push(((0, max_seed, 0), bg));
        }
        if let Some((key, row)) = cands
            .into_iter()
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        {
            out[[row, p]] = key.1;
        }
    }
    out
}

/// Per-scene ground truth of one class.
pub type ClassGt = BTreeMap<usize, Vec<BBox>>;

/// VOC matching from first principles: detections visited best-first
/// (insertion order on ties), each claims the unmatched GT it overlaps most.
pub fn oracle_match(dets: &[Detection], gts: &ClassGt, threshold: f64) -> Vec<bool> {
    let mut claimed: BTreeMap<usize, Vec<bool>> =
        gts.iter().map(|(s, b)| (*s, vec![false; b.len()])).collect();
    let mut visited = vec![false; dets.len()];
    let mut tp = vec![false; dets.len()];
    for _ in 0..dets.len() {
        let mut i = usize::MAX;
        for d in 0..dets.len() {
            if !visited[d] && (i == usize::MAX || dets[d].score > dets[i].score) {
                i = d;
            }
        }
        visited[i] = true;
        let Some(boxes) = gts.get(&dets[i].scene_id) else { continue };
        let flags = claimed.get_mut(&dets[i].scene_id).unwrap();
        let mut best = (usize::MAX, -1.0);
        for (g, b) in boxes.iter().enumerate() {
            let v = oracle_iou(dets[i].bbox.corners(), b.corners());
            if !flags[g] && v > best.1 {
                best = (g, v);
            }
        }
        if best.0 != usize::MAX && best.1 > threshold {
            flags[best.0] = true;
            tp[i] = true;
        }
    }
    tp
}

/// AP from ranked flags. 11-point: max precision at recall >= t. All points:
/// for every recall step, the best precision achieved at that recall or later.
pub fn oracle_ap(ranked: &[bool], total_gt: usize, method: ApMethod) -> f64 {
    let mut pts = Vec::new();
    let mut tp = 0;
    for (n, &f) in ranked.iter().enumerate() {
        tp += f as usize;
        pts.push((tp as f64 / total_gt as f64, tp as f64 / (n + 1) as f64));
    }
    let best_from = |r: f64| {
        pts.iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max)
    };
    match method {
        ApMethod::Voc07_11point => (0..=10).map(|t| best_from(t as f64 / 10.0)).sum::<f64>() / 11.0,
        ApMethod::AllPoints => {
            let mut area = 0.0;
            let mut prev = 0.0;
            for (i, p) in pts.iter().enumerate() {
                if ranked[i] {
                    area += (p.0 - prev) * best_from(p.0);
                    prev = p.0;
                }
            }
            area
        }
    }
}

/// Tiny evaluation instance: at most 5 scenes, 4 detections each.
pub struct EvalInstance {
    pub dets: Vec<Detection>,
    pub gt: BTreeMap<usize, Vec<(usize, BBox)>>,
    pub classes: usize,
}

pub fn random_eval_instance(r: &mut TestRng) -> EvalInstance {
    let classes = r.random_range(1..4);
    let scenes = r.random_range(1..6);
    let mut gt = BTreeMap::new();
    let mut dets = Vec::new();
    for s in 0..scenes {
        let objs: Vec<(usize, BBox)> = (0..r.random_range(0..4))
            .map(|_| (r.random_range(0..classes), random_box(r)))
            .collect();
        for _ in 0..r.random_range(0..5) {
            let bbox = match objs.get(r.random_range(0..objs.len() + 1)) {
                // Near-duplicate of a GT box or a random box.
                Some((_, b)) => {
                    let c = b.corners();
                    let e = r.random_range(-0.08..0.08);
                    BBox::new(
                        (c[0] + e).clamp(0.0, 0.5 * (c[0] + c[2])),
                        c[1],
                        (c[2] + e).clamp(0.5 * (c[0] + c[2]) + 1e-3, 1.0),
                        c[3],
                    )
                    .unwrap()
                }
                None => random_box(r),
            };
            dets.push(Detection {
                scene_id: s,
                class: r.random_range(0..classes),
                bbox,
                // Coarse scores so ties occur.
                score: r.random_range(0..6) as f64 / 5.0,
            });
        }
        gt.insert(s, objs);
    }
    EvalInstance { dets, gt, classes }
}

/// Per-class AP and mAP computed entirely with the oracles above.
pub fn oracle_evaluate(inst: &EvalInstance, threshold: f64, method: ApMethod) -> (Vec<Option<f64>>, Option<f64>) {
    let per_class: Vec<Option<f64>> = (0..inst.classes)
        .map(|c| {
            let dets: Vec<Detection> = inst.dets.iter().filter(|d| d.class == c).copied().collect();
            let gts: ClassGt = inst
                .gt
                .iter()
                .map(|(s, o)| (*s, o.iter().filter(|x| x.0 == c).map(|x| x.1).collect()))
                .collect();
            let total: usize = gts.values().map(Vec::len).sum();
            if total == 0 {
                return None;
            }
            let tp = oracle_match(&dets, &gts, threshold);
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
            let ranked: Vec<bool> = order.iter().map(|&i| tp[i]).collect();
            Some(oracle_ap(&ranked, total, method))
        })
        .collect();
    let inc: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = (!inc.is_empty()).then(|| inc.iter().sum::<f64>() / inc.len() as f64);
    (per_class, map)
}

/// Every documented labelling invariant, checked by recomputation. Returns
/// the violated ones.
pub fn labelling_violations(inst: &LabellingInstance) -> Vec<String> {
    use potd_core::labelling::{mine_support, oicr_label, top_proposal};
    let rol = mine_support(&inst.scores, &inst.boxes, &inst.label, &inst.cfg).unwrap();
    let oicr = oicr_label(&inst.scores, &inst.boxes, &inst.label, &inst.cfg).unwrap();
    let seeds: Vec<(usize, usize, f64)> = inst
        .label
        .present_classes()
        .map(|c| {
            let j = top_proposal(&inst.scores, c).unwrap();
            (c, j, inst.scores.get(c, j))
        })
        .collect();
    let (phi_obj, phi_bg) = (inst.cfg.phi_obj, inst.cfg.phi_bg);
    let bg = rol.background_row();
    let mut bad = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            bad.push(what)
        }
    };
    for k in 0..inst.boxes.len() {
        let ov: Vec<(usize, f64, f64)> = seeds
            .iter()
            .map(|&(c, j, s)| (c, iou(&inst.boxes[k], &inst.boxes[j]), s))
            .collect();
        match rol.label_of(k) {
            Some((row, w)) if row == bg => {
                check(
                    ov.iter().any(|&(_, v, s)| v > phi_bg && v < phi_obj && s == w),
                    format!("background label on {k} outside every band"),
                );
                check(ov.iter().all(|&(_, v, _)| v <= phi_obj), format!("background label on object proposal {k}"));
            }
            Some((c, w)) => {
                let seed = seeds.iter().find(|x| x.0 == c);
                check(
                    seed.is_some_and(|&(_, j, s)| iou(&inst.boxes[k], &inst.boxes[j]) > phi_obj && s == w),
                    format!("object label on {k} without its seed"),
                );
            }
            None => check(
                ov.iter().all(|&(_, v, _)| v <= phi_bg || v == phi_obj),
                format!("zero column {k} inside a band"),
            ),
        }
        check(oicr.label_of(k).is_some(), format!("baseline left column {k} empty"));
        let obj = |l: Option<(usize, f64)>| l.filter(|x| x.0 != bg);
        check(obj(rol.label_of(k)) == obj(oicr.label_of(k)), format!("object labels differ at {k}"));
        for m in [&rol, &oicr] {
            if let Some((_, w)) = m.label_of(k) {
                check(seeds.iter().any(|x| x.2 == w), format!("weight at {k} is no seed score"));
            }
        }
    }
    for &(c, j, s) in &seeds {
        // Own class, unless a seed at least as strong claims the proposal.
        for m in [&rol, &oicr] {
            let ok = m.label_of(j).is_some_and(|(row, w)| row == c || (row != bg && w >= s));
            check(ok, format!("seed of class {c} at {j} lost its label"));
        }
    }
    bad
}
