//! Registered ablation experiments over seed lists.
//!
//! Every seed trains its own source detector (and warm-up detectors, shared by
//! the cells that need the same one). Seeds run in parallel; rows come back in
//! cell-major, seed-minor order whatever the completion order.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvtext::KvDoc;
use crate::labelling::Labeller;
use crate::model::DetectorModel;
use crate::pipeline::{lstd_finetune, train_source, wstd_train, RunReport, StageConfig};
use crate::synthworld::{make_world, World, WorldConfig};

pub const EXPERIMENTS: [&str; 5] = ["table3", "table5", "table6", "fig7", "fig9"];

/// Keys of a spec document that are not config overrides.
const SPEC_KEYS: [&str; 4] = ["experiment", "seeds", "shots", "scale_lstd_epochs"];

pub const FIG9_PHI_OBJ: [f64; 5] = [0.4, 0.5, 0.6, 0.7, 0.8];
pub const FIG9_PHI_BG: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
pub const FIG9_PROPOSALS: [usize; 4] = [8, 16, 24, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Shot counts for the experiments with a shots axis; the first entry is
    /// the warm-up for the others.
    pub shots: Vec<usize>,
    /// Keep the LSTD step budget fixed: epochs = ceil(lstd_epochs / shots).
    pub scale_lstd_epochs: bool,
    /// StageConfig keys and `world.*` keys.
    pub overrides: KvDoc,
}

impl ExperimentSpec {
    pub fn new(name: &str, seeds: Vec<u64>) -> Result<Self> {
        check_name(name)?;
        let shots = match name {
            "table3" | "table5" => vec![1, 2, 5, 10, 30],
            _ => vec![1],
        };
        Ok(ExperimentSpec {
            name: name.to_string(),
            seeds,
            shots,
            scale_lstd_epochs: true,
            overrides: KvDoc::default(),
        })
    }

    /// Reads `experiment`, `seeds` (`0,1,5` or `0..20`), optional `shots` and
    /// `scale_lstd_epochs`; every other key is an override.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let name = doc
            .get_str("experiment")
            .ok_or_else(|| Error::config("experiment", "missing"))?;
        let seeds = parse_seeds(
            doc.get_str("seeds")
                .ok_or_else(|| Error::config("seeds", "missing"))?,
        )?;
        let mut spec = ExperimentSpec::new(name, seeds)?;
        if let Some(s) = doc.get_str("shots") {
            spec.shots = parse_list("shots", s)?;
        }
        doc.apply("scale_lstd_epochs", &mut spec.scale_lstd_epochs)?;
        for key in doc.keys().filter(|k| !SPEC_KEYS.contains(k)) {
            spec.overrides.set(key, doc.get_str(key).unwrap_or_default());
        }
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::default();
        d.set("experiment", &self.name);
        d.set("seeds", join(&self.seeds));
        d.set("shots", join(&self.shots));
        d.set("scale_lstd_epochs", self.scale_lstd_epochs);
        d.merge(&self.overrides);
        d
    }

    /// Base world and stage configs with overrides applied.
    pub fn configs(&self) -> Result<(WorldConfig, StageConfig)> {
        let mut world = WorldConfig::default();
        let mut stage = StageConfig::default();
        let known_world = world.to_kv();
        let known_stage = stage.to_kv();
        for key in self.overrides.keys() {
            if known_world.get_str(key).is_none() && known_stage.get_str(key).is_none() {
                return Err(Error::config(key, "unknown override key"));
            }
        }
        world.apply_kv(&self.overrides)?;
        stage.apply_kv(&self.overrides)?;
        stage.validate()?;
        Ok((world, stage))
    }

    pub fn validate(&self) -> Result<()> {
        check_name(&self.name)?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::config("shots", "need at least one positive shot count"));
        }
        self.configs().map(|_| ())
    }
}

fn check_name(name: &str) -> Result<()> {
    if EXPERIMENTS.contains(&name) {
        Ok(())
    } else {
        Err(Error::UnknownExperiment {
            name: name.to_string(),
            registered: EXPERIMENTS.join(", "),
        })
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(field: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::config(field, format!("bad list entry `{}`", t.trim())))
        })
        .collect()
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    match s.split_once("..") {
        Some((a, b)) => {
            let bad = || Error::config("seeds", format!("bad range `{s}`"));
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            Ok((a..b).collect())
        }
        None => parse_list("seeds", s),
    }
}

/// One CSV row: one evaluated detector (or refinement classifier) for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub experiment: String,
    pub cell: String,
    pub seed: u64,
    pub stage: String,
    pub shots: usize,
    pub weak_scenes: usize,
    pub labeller: String,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub stage: String,
    pub shots: usize,
    pub weak_scenes: usize,
    pub labeller: String,
    pub seeds: usize,
    pub mean_map: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub sd_map: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub spec: ExperimentSpec,
    pub rows: Vec<ExperimentRow>,
    /// Every training run, seed-major in execution order.
    pub reports: Vec<RunReport>,
}

impl ExperimentOutcome {
    /// Per-cell mean and standard deviation, in cell order.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut out: Vec<(CellSummary, Vec<f64>)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(c, _)| c.cell == r.cell) {
                Some((_, v)) => v.push(r.map),
                None => out.push((
                    CellSummary {
                        cell: r.cell.clone(),
                        stage: r.stage.clone(),
                        shots: r.shots,
                        weak_scenes: r.weak_scenes,
                        labeller: r.labeller.clone(),
                        seeds: 0,
                        mean_map: 0.0,
                        sd_map: 0.0,
                    },
                    vec![r.map],
                )),
            }
        }
        out.into_iter()
            .map(|(mut c, v)| {
                let n = v.len() as f64;
                c.seeds = v.len();
                c.mean_map = v.iter().sum::<f64>() / n;
                c.sd_map = if v.len() > 1 {
                    (v.iter().map(|x| (x - c.mean_map).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                c
            })
            .collect()
    }

    /// mAP of `cell` for every seed, in seed order.
    pub fn cell_maps(&self, cell: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.cell == cell).map(|r| r.map).collect()
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_rows<W: Write>(rows: &[ExperimentRow], out: W) -> Result<()> {
    let classes = rows.iter().map(|r| r.per_class_ap.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["experiment", "cell", "seed", "stage", "shots", "weak_scenes", "labeller", "map"]
        .map(String::from)
        .to_vec();
    header.extend((0..classes).map(|c| format!("ap_class{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.experiment.clone(),
            r.cell.clone(),
            r.seed.to_string(),
            r.stage.clone(),
            r.shots.to_string(),
            r.weak_scenes.to_string(),
            r.labeller.clone(),
            fmt(r.map),
        ];
        rec.extend((0..classes).map(|c| r.per_class_ap.get(c).copied().flatten().map(fmt).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(cells: &[CellSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cell", "stage", "shots", "weak_scenes", "labeller", "seeds", "mean_map", "sd_map"])
        .map_err(csv_err)?;
    for c in cells {
        w.write_record([
            c.cell.clone(),
            c.stage.clone(),
            c.shots.to_string(),
            c.weak_scenes.to_string(),
            c.labeller.clone(),
            c.seeds.to_string(),
            fmt(c.mean_map),
            fmt(c.sd_map),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let (world_cfg, stage_cfg) = spec.configs()?;
    let per_seed = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut wc = world_cfg.clone();
            wc.seed = seed;
            let world = make_world(&wc)?;
            let cfg = StageConfig {
                seed,
                ..stage_cfg.clone()
            };
            SeedRun::new(spec, &world, cfg)?.run()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut tagged = Vec::new();
    let mut reports = Vec::new();
    for (rows, reps) in per_seed {
        tagged.extend(rows);
        reports.extend(reps);
    }
    // Stable: seeds stay in spec order within a cell.
    tagged.sort_by_key(|(cell, _)| *cell);
    Ok(ExperimentOutcome {
        spec: spec.clone(),
        rows: tagged.into_iter().map(|(_, r)| r).collect(),
        reports,
    })
}

struct SeedRun<'a> {
    spec: &'a ExperimentSpec,
    world: &'a World,
    cfg: StageConfig,
    source: DetectorModel,
    rows: Vec<(usize, ExperimentRow)>,
    reports: Vec<RunReport>,
}

impl<'a> SeedRun<'a> {
    fn new(spec: &'a ExperimentSpec, world: &'a World, cfg: StageConfig) -> Result<Self> {
        let (source, report) = train_source(world, &cfg)?;
        Ok(SeedRun {
            spec,
            world,
            cfg,
            source,
            rows: Vec::new(),
            reports: vec![report],
        })
    }

    fn lstd_cfg(&self, shots: usize) -> StageConfig {
        let mut c = self.cfg.clone();
        c.shots_per_class = shots;
        if self.spec.scale_lstd_epochs {
            c.lstd_epochs = c.lstd_epochs.div_ceil(shots);
        }
        c
    }

    fn lstd(&mut self, c: &StageConfig) -> Result<(DetectorModel, RunReport)> {
        let (m, r) = lstd_finetune(&self.source, self.world, c)?;
        self.reports.push(r.clone());
        Ok((m, r))
    }

    fn wstd(&mut self, warm: &DetectorModel, c: &StageConfig) -> Result<RunReport> {
        let (_, r) = wstd_train(warm, self.world, c)?;
        self.reports.push(r.clone());
        Ok(r)
    }

    fn push(&mut self, cell: String, c: &StageConfig, stage: &str, map: f64, aps: &[Option<f64>]) {
        let weak = if stage == "wstd" { c.weak_scenes_per_class } else { 0 };
        let labeller = if stage == "wstd" { c.labeller.to_string() } else { String::new() };
        let row = ExperimentRow {
            experiment: self.spec.name.clone(),
            cell,
            seed: c.seed,
            stage: stage.to_string(),
            shots: c.shots_per_class,
            weak_scenes: weak,
            labeller,
            map,
            per_class_ap: aps.to_vec(),
        };
        self.rows.push((self.rows.len(), row));
    }

    fn run(mut self) -> Result<(Vec<(usize, ExperimentRow)>, Vec<RunReport>)> {
        let shots = self.spec.shots.clone();
        match self.spec.name.as_str() {
            "table3" => {
                for &s in &shots {
                    for (variant, sdk, bd) in [("ft", false, false), ("ft_sdk", true, false), ("ft_sdk_bd", true, true)] {
                        let mut c = self.lstd_cfg(s);
                        c.enable_sdk = sdk;
                        c.enable_bd = bd;
                        let (_, r) = self.lstd(&c)?;
                        self.push(format!("{variant}.{s}shot"), &c, "lstd", r.map, &r.per_class_ap);
                    }
                }
            }
            "table5" => {
                for &s in &shots {
                    let c = self.lstd_cfg(s);
                    let (warm, r) = self.lstd(&c)?;
                    self.push(format!("lstd.{s}shot"), &c, "lstd", r.map, &r.per_class_ap);
                    let r = self.wstd(&warm, &c)?;
                    self.push(format!("wstd.{s}shot"), &c, "wstd", r.map, &r.per_class_ap);
                }
            }
            other => {
                let c = self.lstd_cfg(shots[0]);
                let (warm, _) = self.lstd(&c)?;
                match other {
                    "table6" => {
                        for lab in [Labeller::Rol, Labeller::Oicr] {
                            let c = StageConfig { labeller: lab, ..c.clone() };
                            let r = self.wstd(&warm, &c)?;
                            for (i, (m, aps)) in r.per_classifier_map.iter().zip(&r.per_classifier_ap).enumerate() {
                                self.push(format!("{lab}.cls{}", i + 1), &c, "wstd", *m, aps);
                            }
                        }
                    }
                    "fig7" => {
                        for (mode, on, weighted) in
                            [("sdk_without", false, false), ("sdk_unweighted", true, false), ("sdk_weighted", true, true)]
                        {
                            let c = StageConfig {
                                wstd_sdk: on,
                                sdk_weighted: weighted,
                                ..c.clone()
                            };
                            let r = self.wstd(&warm, &c)?;
                            self.push(mode.to_string(), &c, "wstd", r.map, &r.per_class_ap);
                        }
                    }
                    "fig9" => {
                        let mut points: Vec<(String, StageConfig)> = Vec::new();
                        for v in FIG9_PHI_OBJ.into_iter().filter(|v| *v > c.rol.phi_bg) {
                            let mut p = c.clone();
                            p.rol.phi_obj = v;
                            points.push((format!("phi_obj={v}"), p));
                        }
                        for v in FIG9_PHI_BG.into_iter().filter(|v| *v < c.rol.phi_obj) {
                            let mut p = c.clone();
                            p.rol.phi_bg = v;
                            points.push((format!("phi_bg={v}"), p));
                        }
                        for v in FIG9_PROPOSALS {
                            let mut p = c.clone();
                            p.wstd_proposals = v;
                            points.push((format!("proposals={v}"), p));
                        }
                        for (cell, p) in points {
                            let r = self.wstd(&warm, &p)?;
                            self.push(cell, &p, "wstd", r.map, &r.per_class_ap);
                        }
                    }
                    _ => unreachable!("registered names are checked by validate"),
                }
            }
        }
        Ok((self.rows, self.reports))
    }
}
