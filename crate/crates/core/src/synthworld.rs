//! Seeded synthetic detection scenes.
//!
//! A world owns one unit prototype vector per class (source classes, then
//! target classes, then background). A scene is an `H x W x D0` grid where
//! each cell holds the prototypes of the objects whose box contains the cell
//! center, background clutter elsewhere, plus isotropic Gaussian noise.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::kvtext::KvDoc;
use crate::losses::{cell_center, ImageLabel};
use crate::rng::{self, Stream};

/// Largest allowed inner product between two prototypes.
pub const MAX_PROTOTYPE_OVERLAP: f64 = 0.5;
/// Overlap at which generation re-orthogonalizes a pair.
const PROTOTYPE_DECORRELATE_AT: f64 = 0.45;
/// IoU above which a random background proposal duplicates an earlier one.
pub const PROPOSAL_DEDUP_IOU: f64 = 0.75;
/// Side-length range of object boxes.
pub const OBJECT_SIDE: (f64, f64) = (0.2, 0.5);
/// Side-length range of random background proposals.
pub const PROPOSAL_SIDE: (f64, f64) = (0.3, 0.8);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_source_classes: usize,
    pub num_target_classes: usize,
    pub raw_dim: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub noise_sigma: f64,
    pub clutter_sigma: f64,
    pub jitter: f64,
    pub proposals_per_scene: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_source_classes: 6,
            num_target_classes: 4,
            raw_dim: 16,
            grid_height: 8,
            grid_width: 8,
            noise_sigma: 0.3,
            clutter_sigma: 0.5,
            jitter: 0.15,
            proposals_per_scene: 32,
            objects_min: 1,
            objects_max: 3,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_source_classes < 1 {
            return Err(Error::config("num_source_classes", "must be at least 1"));
        }
        if self.num_target_classes < 1 {
            return Err(Error::config("num_target_classes", "must be at least 1"));
        }
        let classes = self.num_source_classes + self.num_target_classes + 1;
        if self.raw_dim < classes {
            return Err(Error::config(
                "raw_dim",
                format!("must be at least num_source_classes + num_target_classes + 1 = {classes}"),
            ));
        }
        if self.grid_height < 1 || self.grid_width < 1 {
            return Err(Error::config("grid_height/grid_width", "must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma", "must be finite and nonnegative"));
        }
        if !(self.clutter_sigma >= 0.0) || !self.clutter_sigma.is_finite() {
            return Err(Error::config("clutter_sigma", "must be finite and nonnegative"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::config("jitter", "must satisfy 0 <= jitter < 0.5"));
        }
        if self.objects_min < 1 || self.objects_min > self.objects_max {
            return Err(Error::config(
                "objects_min/objects_max",
                "need 1 <= objects_min <= objects_max",
            ));
        }
        if self.proposals_per_scene < self.objects_max {
            return Err(Error::config(
                "proposals_per_scene",
                "must be at least objects_max",
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::default();
        d.set("world.num_source_classes", self.num_source_classes);
        d.set("world.num_target_classes", self.num_target_classes);
        d.set("world.raw_dim", self.raw_dim);
        d.set("world.grid_height", self.grid_height);
        d.set("world.grid_width", self.grid_width);
        d.set("world.noise_sigma", self.noise_sigma);
        d.set("world.clutter_sigma", self.clutter_sigma);
        d.set("world.jitter", self.jitter);
        d.set("world.proposals_per_scene", self.proposals_per_scene);
        d.set("world.objects_min", self.objects_min);
        d.set("world.objects_max", self.objects_max);
        d.set("world.seed", self.seed);
        d
    }

    /// Applies any `world.*` keys present in `doc`.
    pub fn apply_kv(&mut self, doc: &KvDoc) -> Result<()> {
        doc.apply("world.num_source_classes", &mut self.num_source_classes)?;
        doc.apply("world.num_target_classes", &mut self.num_target_classes)?;
        doc.apply("world.raw_dim", &mut self.raw_dim)?;
        doc.apply("world.grid_height", &mut self.grid_height)?;
        doc.apply("world.grid_width", &mut self.grid_width)?;
        doc.apply("world.noise_sigma", &mut self.noise_sigma)?;
        doc.apply("world.clutter_sigma", &mut self.clutter_sigma)?;
        doc.apply("world.jitter", &mut self.jitter)?;
        doc.apply("world.proposals_per_scene", &mut self.proposals_per_scene)?;
        doc.apply("world.objects_min", &mut self.objects_min)?;
        doc.apply("world.objects_max", &mut self.objects_max)?;
        doc.apply("world.seed", &mut self.seed)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::config("domain", format!("`{other}` is not source|target"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationMode {
    Full,
    Weak,
}

impl std::fmt::Display for AnnotationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnnotationMode::Full => "full",
            AnnotationMode::Weak => "weak",
        })
    }
}

impl std::str::FromStr for AnnotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AnnotationMode::Full),
            "weak" => Ok(AnnotationMode::Weak),
            other => Err(Error::config("mode", format!("`{other}` is not full|weak"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    config: WorldConfig,
    /// `(C_s + C_t + 1) x D0`, one unit prototype per row.
    prototypes: Array2<f64>,
}

impl World {
    pub fn from_parts(config: WorldConfig, prototypes: Array2<f64>) -> Result<Self> {
        config.validate()?;
        let rows = config.num_source_classes + config.num_target_classes + 1;
        if prototypes.dim() != (rows, config.raw_dim) {
            return Err(Error::ShapeMismatch(format!(
                "prototypes {:?}, expected ({rows}, {})",
                prototypes.dim(),
                config.raw_dim
            )));
        }
        Ok(World { config, prototypes })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn prototypes(&self) -> &Array2<f64> {
        &self.prototypes
    }

    pub fn num_classes(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.config.num_source_classes,
            Domain::Target => self.config.num_target_classes,
        }
    }

    /// Prototype row of a domain-local class index.
    pub fn prototype_index(&self, domain: Domain, class: usize) -> usize {
        match domain {
            Domain::Source => class,
            Domain::Target => self.config.num_source_classes + class,
        }
    }

    pub fn background_index(&self) -> usize {
        self.config.num_source_classes + self.config.num_target_classes
    }

    pub fn prototype(&self, row: usize) -> ndarray::ArrayView1<'_, f64> {
        self.prototypes.row(row)
    }
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Samples the world's prototypes from the config seed.
pub fn make_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let rows = config.num_source_classes + config.num_target_classes + 1;
    let d = config.raw_dim;
    let mut rng = rng::stream(config.seed, "world.prototypes", 0);
    let mut protos: Vec<Array1<f64>> = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut v = unit(Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut rng)));
        // Remove just enough of each earlier direction to bring the overlap
        // under the limit; repeat until every pair is decorrelated.
        for _ in 0..64 {
            let mut changed = false;
            for p in &protos {
                let ip = v.dot(p);
                if ip >= PROTOTYPE_DECORRELATE_AT {
                    v = unit(&v - &(p * (ip - 0.5 * PROTOTYPE_DECORRELATE_AT)));
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        protos.push(v);
    }
    let mut prototypes = Array2::zeros((rows, d));
    for (i, p) in protos.iter().enumerate() {
        prototypes.row_mut(i).assign(p);
    }
    for i in 0..rows {
        for j in 0..i {
            if prototypes.row(i).dot(&prototypes.row(j)) >= MAX_PROTOTYPE_OVERLAP {
                return Err(Error::config(
                    "raw_dim",
                    "too small to separate the class prototypes",
                ));
            }
        }
    }
    World::from_parts(config.clone(), prototypes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub domain: Domain,
    pub mode: AnnotationMode,
    /// `H x W x D0` raw observations.
    pub raw_grid: Array3<f64>,
    /// Domain-local class index and box of each object.
    pub gt: Vec<(usize, BBox)>,
    pub proposals: Vec<BBox>,
    pub image_label: ImageLabel,
}

/// What a weakly supervised consumer is allowed to see.
#[derive(Debug, Clone, Copy)]
pub struct WeakView<'a> {
    pub raw_grid: &'a Array3<f64>,
    pub proposals: &'a [BBox],
    pub image_label: &'a ImageLabel,
}

impl Scene {
    pub fn weak_view(&self) -> WeakView<'_> {
        WeakView {
            raw_grid: &self.raw_grid,
            proposals: &self.proposals,
            image_label: &self.image_label,
        }
    }

    /// Ground truth, only for fully annotated scenes.
    pub fn full_annotation(&self) -> Option<&[(usize, BBox)]> {
        match self.mode {
            AnnotationMode::Full => Some(&self.gt),
            AnnotationMode::Weak => None,
        }
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gt.iter().map(|(_, b)| *b).collect()
    }
}

fn random_box(rng: &mut Stream, side: (f64, f64)) -> BBox {
    let w = rng.random_range(side.0..side.1);
    let h = rng.random_range(side.0..side.1);
    let x1 = rng.random_range(0.0..(1.0 - w));
    let y1 = rng.random_range(0.0..(1.0 - h));
    BBox::new(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0)).expect("sampled box is valid")
}

/// Perturbs each corner by up to `jitter` times the box side.
fn jitter_box(rng: &mut Stream, b: &BBox, jitter: f64) -> BBox {
    if jitter == 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    loop {
        let mut d = || rng.random_range(-jitter..=jitter);
        let x1 = (b.x1() + d() * w).clamp(0.0, 1.0);
        let y1 = (b.y1() + d() * h).clamp(0.0, 1.0);
        let x2 = (b.x2() + d() * w).clamp(0.0, 1.0);
        let y2 = (b.y2() + d() * h).clamp(0.0, 1.0);
        if let Ok(out) = BBox::new(x1, y1, x2, y2) {
            return out;
        }
    }
}

/// Renders the raw observation grid for the given objects.
pub fn render_grid(
    world: &World,
    domain: Domain,
    gt: &[(usize, BBox)],
    rng: &mut Stream,
) -> Array3<f64> {
    let cfg = &world.config;
    let (h, w, d) = (cfg.grid_height, cfg.grid_width, cfg.raw_dim);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    let bg = world.prototype(world.background_index());
    let mut raw_grid = Array3::zeros((h, w, d));
    for i in 0..h {
        for j in 0..w {
            let (x, y) = cell_center(i, j, h, w);
            let mut covered = false;
            let mut cell = Array1::<f64>::zeros(d);
            for (c, b) in gt {
                if b.contains_point(x, y) {
                    covered = true;
                    cell += &world.prototype(world.prototype_index(domain, *c));
                }
            }
            if !covered {
                cell.scaled_add(cfg.clutter_sigma, &bg);
            }
            for c in 0..d {
                let eps = if cfg.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                raw_grid[[i, j, c]] = cell[c] + eps;
            }
        }
    }
    raw_grid
}

/// Draws one scene from `rng`.
///
/// Proposals are the jittered ground-truth boxes (in object order) followed by
/// uniformly random boxes, each random box rejected when it overlaps an
/// already accepted proposal above [`PROPOSAL_DEDUP_IOU`], until exactly
/// `proposals_per_scene` remain.
pub fn sample_scene(world: &World, domain: Domain, mode: AnnotationMode, rng: &mut Stream) -> Scene {
    let cfg = &world.config;
    let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let classes = world.num_classes(domain);
    let gt: Vec<(usize, BBox)> = (0..n)
        .map(|_| (rng.random_range(0..classes), random_box(rng, OBJECT_SIDE)))
        .collect();

    let raw_grid = render_grid(world, domain, &gt, rng);

    let k = cfg.proposals_per_scene;
    let mut proposals: Vec<BBox> = gt.iter().map(|(_, b)| jitter_box(rng, b, cfg.jitter)).collect();
    proposals.truncate(k);
    while proposals.len() < k {
        let candidate = random_box(rng, PROPOSAL_SIDE);
        if proposals.iter().all(|p| iou(p, &candidate) <= PROPOSAL_DEDUP_IOU) {
            proposals.push(candidate);
        }
    }

    let image_label = ImageLabel::from_classes(classes, gt.iter().map(|(c, _)| *c));
    Scene {
        domain,
        mode,
        raw_grid,
        gt,
        proposals,
        image_label,
    }
}

/// `count` scenes whose `i`-th scene comes from stream `(seed, label, i)`.
pub fn sample_scenes(
    world: &World,
    domain: Domain,
    mode: AnnotationMode,
    seed: u64,
    label: &str,
    count: usize,
) -> Vec<Scene> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, label, i as u64);
            sample_scene(world, domain, mode, &mut r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_is_deterministic_and_decorrelated() {
        let cfg = WorldConfig {
            num_source_classes: 3,
            num_target_classes: 2,
            raw_dim: 8,
            seed: 11,
            ..WorldConfig::default()
        };
        let a = make_world(&cfg).unwrap();
        assert_eq!(a, make_world(&cfg).unwrap());
        assert_eq!(a.prototypes().nrows(), 6);
        for i in 0..6 {
            assert!((a.prototype(i).dot(&a.prototype(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(a.prototype(i).dot(&a.prototype(j)) < MAX_PROTOTYPE_OVERLAP);
            }
        }
    }

    #[test]
    fn world_rejects_small_raw_dim() {
        let cfg = WorldConfig {
            num_source_classes: 1,
            num_target_classes: 1,
            raw_dim: 2,
            ..WorldConfig::default()
        };
        assert!(make_world(&cfg).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(WorldConfig::default().validate().is_ok());
        let bad = WorldConfig {
            jitter: 0.9,
            ..WorldConfig::default()
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("jitter"), "{err}");
        let bad = WorldConfig {
            proposals_per_scene: 2,
            ..WorldConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scene_examples() {
        let world = make_world(&WorldConfig::default()).unwrap();
        let a = sample_scene(&world, Domain::Target, AnnotationMode::Full, &mut rng::stream(1, "s", 0));
        let b = sample_scene(&world, Domain::Target, AnnotationMode::Full, &mut rng::stream(1, "s", 0));
        assert_eq!(a, b);
        assert_eq!(a.proposals.len(), 32);
        let c = sample_scene(&world, Domain::Target, AnnotationMode::Full, &mut rng::stream(1, "s", 1));
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_full_cover_equals_prototype() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            clutter_sigma: 0.0,
            ..WorldConfig::default()
        };
        let world = make_world(&cfg).unwrap();
        let full = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let grid = render_grid(&world, Domain::Target, &[(2, full)], &mut rng::stream(3, "s", 0));
        let proto = world.prototype(world.prototype_index(Domain::Target, 2));
        for i in 0..cfg.grid_height {
            for j in 0..cfg.grid_width {
                for c in 0..cfg.raw_dim {
                    assert_eq!(grid[[i, j, c]], proto[c]);
                }
            }
        }
    }

    #[test]
    fn zero_jitter_keeps_gt_boxes() {
        let cfg = WorldConfig {
            jitter: 0.0,
            ..WorldConfig::default()
        };
        let world = make_world(&cfg).unwrap();
        for i in 0..20 {
            let s = sample_scene(&world, Domain::Target, AnnotationMode::Weak, &mut rng::stream(5, "s", i));
            for (n, (_, b)) in s.gt.iter().enumerate() {
                assert_eq!(iou(&s.proposals[n], b), 1.0);
            }
        }
    }
}
