//! Line-oriented text files for worlds, scene sets and model checkpoints.
//!
//! Floats are written in Rust's shortest round-trip form, so every file
//! reads back bit-exactly. Parse failures report the 1-based line number.

use std::io::{BufRead, Write};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::kvtext::KvDoc;
use crate::losses::ImageLabel;
use crate::model::{Backbone, DetectorModel, Head, HeadRole, ModelStage};
use crate::synthworld::{AnnotationMode, Domain, Scene, World, WorldConfig};

const WORLD_MAGIC: &str = "# potd-world v1";
const SCENES_MAGIC: &str = "# potd-scenes v1";
const CHECKPOINT_MAGIC: &str = "# potd-checkpoint v1";

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Numbered, trimmed, non-empty lines.
struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn new(r: R) -> Self {
        Lines {
            inner: r.lines(),
            line: 0,
        }
    }

    fn next_line(&mut self) -> Result<Option<(usize, String)>> {
        for l in self.inner.by_ref() {
            self.line += 1;
            let l = l?;
            let t = l.trim();
            if !t.is_empty() {
                return Ok(Some((self.line, t.to_string())));
            }
        }
        Ok(None)
    }

    fn expect_line(&mut self, what: &str) -> Result<(usize, String)> {
        self.next_line()?
            .ok_or_else(|| Error::parse(self.line + 1, format!("unexpected end of file, expected {what}")))
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("cannot parse {what} from `{tok}`")))
}

fn parse_floats(line: usize, toks: &[&str], expected: usize) -> Result<Vec<f64>> {
    if toks.len() != expected {
        return Err(Error::parse(
            line,
            format!("expected {expected} values, found {}", toks.len()),
        ));
    }
    toks.iter().map(|t| parse_num(line, t, "number")).collect()
}

fn parse_box(line: usize, toks: &[&str]) -> Result<BBox> {
    let v = parse_floats(line, toks, 4)?;
    BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(line, e.to_string()))
}

/// Reads `key = value` header lines up to the first line starting with
/// `stop`, returning the header and that line.
fn read_header<R: BufRead>(
    lines: &mut Lines<R>,
    magic: &str,
    stop: &[&str],
) -> Result<(KvDoc, Option<(usize, String)>)> {
    let (n, first) = lines.expect_line("file header")?;
    if first != magic {
        return Err(Error::parse(n, format!("expected `{magic}`")));
    }
    let mut text = String::new();
    let mut first_line = None;
    while let Some((n, l)) = lines.next_line()? {
        if stop.iter().any(|s| l.split_whitespace().next() == Some(s)) {
            first_line = Some((n, l));
            break;
        }
        if l.starts_with('#') {
            continue;
        }
        if !l.contains('=') {
            return Err(Error::parse(n, format!("expected `key = value`, got `{l}`")));
        }
        text.push_str(&l);
        text.push('\n');
    }
    Ok((KvDoc::parse(&text)?, first_line))
}

pub fn write_world<W: Write>(mut out: W, world: &World) -> Result<()> {
    writeln!(out, "{WORLD_MAGIC}")?;
    write!(out, "{}", world.config().to_kv().to_text())?;
    for (i, row) in world.prototypes().rows().into_iter().enumerate() {
        writeln!(out, "prototype {i} {}", join(row.iter().copied()))?;
    }
    Ok(())
}

pub fn read_world<R: BufRead>(input: R) -> Result<World> {
    let mut lines = Lines::new(input);
    let (doc, mut pending) = read_header(&mut lines, WORLD_MAGIC, &["prototype"])?;
    let mut cfg = WorldConfig::default();
    cfg.apply_kv(&doc)?;
    cfg.validate()?;
    let rows = cfg.num_source_classes + cfg.num_target_classes + 1;
    let mut protos = Array2::zeros((rows, cfg.raw_dim));
    for i in 0..rows {
        let (n, l) = match pending.take() {
            Some(p) => p,
            None => lines.expect_line("prototype row")?,
        };
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.first() != Some(&"prototype") || toks.get(1) != Some(&i.to_string().as_str()) {
            return Err(Error::parse(n, format!("expected `prototype {i} ...`")));
        }
        let v = parse_floats(n, &toks[2..], cfg.raw_dim)?;
        protos.row_mut(i).assign(&ndarray::Array1::from(v));
    }
    if let Some((n, _)) = lines.next_line()? {
        return Err(Error::parse(n, "trailing content after prototypes"));
    }
    World::from_parts(cfg, protos)
}

/// Header of a scene set: the seed and stream label it was drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSetInfo {
    pub seed: u64,
    pub label: String,
}

pub fn write_scenes<W: Write>(mut out: W, info: &SceneSetInfo, scenes: &[Scene]) -> Result<()> {
    writeln!(out, "{SCENES_MAGIC}")?;
    writeln!(out, "seed = {}", info.seed)?;
    writeln!(out, "label = {}", info.label)?;
    writeln!(out, "count = {}", scenes.len())?;
    for (idx, s) in scenes.iter().enumerate() {
        let (h, w, d) = s.raw_grid.dim();
        writeln!(
            out,
            "scene {idx} domain={} mode={} h={h} w={w} d={d} objects={} proposals={} classes={}",
            s.domain,
            s.mode,
            s.gt.len(),
            s.proposals.len(),
            s.image_label.len()
        )?;
        for i in 0..h {
            let row = (0..w).flat_map(|j| (0..d).map(move |c| (j, c)));
            writeln!(out, "grid {}", join(row.map(|(j, c)| s.raw_grid[[i, j, c]])))?;
        }
        for (c, b) in &s.gt {
            writeln!(out, "gt {c} {}", join([b.x1(), b.y1(), b.x2(), b.y2()]))?;
        }
        for b in &s.proposals {
            writeln!(out, "prop {}", join([b.x1(), b.y1(), b.x2(), b.y2()]))?;
        }
        let label: Vec<&str> = s
            .image_label
            .as_slice()
            .iter()
            .map(|&p| if p { "1" } else { "0" })
            .collect();
        writeln!(out, "label {}", label.join(" "))?;
        writeln!(out, "end")?;
    }
    Ok(())
}

fn field<'a>(n: usize, toks: &'a [&str], key: &str) -> Result<&'a str> {
    toks.iter()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::parse(n, format!("scene header lacks `{key}=`")))
}

fn expect_tag<'a>(n: usize, line: &'a str, tag: &str) -> Result<Vec<&'a str>> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some(tag) {
        return Err(Error::parse(n, format!("expected `{tag}` line")));
    }
    Ok(toks.collect())
}

fn read_scene<R: BufRead>(lines: &mut Lines<R>, n: usize, header: &str, idx: usize) -> Result<Scene> {
    let toks = expect_tag(n, header, "scene")?;
    if toks.first() != Some(&idx.to_string().as_str()) {
        return Err(Error::parse(n, format!("expected scene index {idx}")));
    }
    let domain: Domain = field(n, &toks, "domain")?
        .parse()
        .map_err(|e: Error| Error::parse(n, e.to_string()))?;
    let mode: AnnotationMode = field(n, &toks, "mode")?
        .parse()
        .map_err(|e: Error| Error::parse(n, e.to_string()))?;
    let h: usize = parse_num(n, field(n, &toks, "h")?, "h")?;
    let w: usize = parse_num(n, field(n, &toks, "w")?, "w")?;
    let d: usize = parse_num(n, field(n, &toks, "d")?, "d")?;
    let objects: usize = parse_num(n, field(n, &toks, "objects")?, "objects")?;
    let k: usize = parse_num(n, field(n, &toks, "proposals")?, "proposals")?;
    let classes: usize = parse_num(n, field(n, &toks, "classes")?, "classes")?;

    let mut raw_grid = Array3::zeros((h, w, d));
    for i in 0..h {
        let (n, l) = lines.expect_line("grid row")?;
        let vals = parse_floats(n, &expect_tag(n, &l, "grid")?, w * d)?;
        for (p, v) in vals.into_iter().enumerate() {
            raw_grid[[i, p / d, p % d]] = v;
        }
    }
    let mut gt = Vec::with_capacity(objects);
    for _ in 0..objects {
        let (n, l) = lines.expect_line("gt line")?;
        let toks = expect_tag(n, &l, "gt")?;
        let Some((c, rest)) = toks.split_first() else {
            return Err(Error::parse(n, "empty gt line"));
        };
        let c: usize = parse_num(n, c, "class")?;
        if c >= classes {
            return Err(Error::parse(n, format!("class {c} out of range for {classes} classes")));
        }
        gt.push((c, parse_box(n, rest)?));
    }
    let mut proposals = Vec::with_capacity(k);
    for _ in 0..k {
        let (n, l) = lines.expect_line("prop line")?;
        proposals.push(parse_box(n, &expect_tag(n, &l, "prop")?)?);
    }
    let (n, l) = lines.expect_line("label line")?;
    let toks = expect_tag(n, &l, "label")?;
    if toks.len() != classes {
        return Err(Error::parse(n, format!("expected {classes} label entries")));
    }
    let present = toks
        .iter()
        .map(|t| match *t {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::parse(n, format!("label entry `{other}` is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let image_label = ImageLabel::new(present);
    if image_label != ImageLabel::from_classes(classes, gt.iter().map(|(c, _)| *c)) {
        return Err(Error::parse(n, "image label disagrees with ground-truth classes"));
    }
    let (n, l) = lines.expect_line("end")?;
    if l != "end" {
        return Err(Error::parse(n, "expected `end`"));
    }
    Ok(Scene {
        domain,
        mode,
        raw_grid,
        gt,
        proposals,
        image_label,
    })
}

pub fn read_scenes<R: BufRead>(input: R) -> Result<(SceneSetInfo, Vec<Scene>)> {
    let mut lines = Lines::new(input);
    let (doc, mut pending) = read_header(&mut lines, SCENES_MAGIC, &["scene"])?;
    let info = SceneSetInfo {
        seed: doc.get("seed")?.ok_or_else(|| Error::parse(2, "missing `seed`"))?,
        label: doc.get_str("label").unwrap_or_default().to_string(),
    };
    let count: usize = doc.get("count")?.ok_or_else(|| Error::parse(2, "missing `count`"))?;
    let mut scenes = Vec::with_capacity(count);
    for idx in 0..count {
        let (n, l) = match pending.take() {
            Some(p) => p,
            None => lines.expect_line("scene header")?,
        };
        scenes.push(read_scene(&mut lines, n, &l, idx)?);
    }
    if let Some((n, _)) = lines.next_line()? {
        return Err(Error::parse(n, "trailing content after the last scene"));
    }
    Ok((info, scenes))
}

/// A model together with the seed and config echo it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DetectorModel,
    pub seed: u64,
    pub config: KvDoc,
}

pub fn write_checkpoint<W: Write>(mut out: W, ck: &Checkpoint) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "stage = {}", ck.model.stage)?;
    writeln!(out, "seed = {}", ck.seed)?;
    for line in ck.config.to_text().lines() {
        writeln!(out, "config.{line}")?;
    }
    for (name, b) in ck.model.blocks() {
        writeln!(out, "block {name} {} {}", b.nrows(), b.ncols())?;
        for row in b.rows() {
            writeln!(out, "{}", join(row.iter().copied()))?;
        }
    }
    Ok(())
}

fn role_of(n: usize, name: &str) -> Result<HeadRole> {
    match name {
        "main" => Ok(HeadRole::Main),
        "sdk" => Ok(HeadRole::SdkBranch),
        other => other
            .strip_prefix("rol.")
            .and_then(|i| i.parse().ok())
            .map(HeadRole::Rol)
            .ok_or_else(|| Error::parse(n, format!("unknown parameter block `{other}`"))),
    }
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Checkpoint> {
    let mut lines = Lines::new(input);
    let (doc, mut pending) = read_header(&mut lines, CHECKPOINT_MAGIC, &["block"])?;
    let stage: ModelStage = doc
        .get_str("stage")
        .ok_or_else(|| Error::parse(2, "missing `stage`"))?
        .parse()?;
    let seed: u64 = doc.get("seed")?.ok_or_else(|| Error::parse(2, "missing `seed`"))?;
    let mut config = KvDoc::default();
    for key in doc.keys() {
        if let Some(k) = key.strip_prefix("config.") {
            config.set(k, doc.get_str(key).unwrap_or_default());
        }
    }

    let mut backbone = None;
    let mut main = None;
    let mut sdk = None;
    let mut rol: Vec<Head> = Vec::new();
    while let Some((n, l)) = match pending.take() {
        Some(p) => Some(p),
        None => lines.next_line()?,
    } {
        let toks = expect_tag(n, &l, "block")?;
        if toks.len() != 3 {
            return Err(Error::parse(n, "expected `block <name> <rows> <cols>`"));
        }
        let rows: usize = parse_num(n, toks[1], "rows")?;
        let cols: usize = parse_num(n, toks[2], "cols")?;
        let mut values = Array2::zeros((rows, cols));
        for r in 0..rows {
            let (rn, rl) = lines.expect_line("parameter row")?;
            let toks: Vec<&str> = rl.split_whitespace().collect();
            let v = parse_floats(rn, &toks, cols)?;
            values.row_mut(r).assign(&ndarray::Array1::from(v));
        }
        if toks[0] == "backbone" {
            backbone = Some(Backbone { map: values });
            continue;
        }
        let role = role_of(n, toks[0])?;
        let head = Head { weights: values, role };
        match role {
            HeadRole::Main => main = Some(head),
            HeadRole::SdkBranch => sdk = Some(head),
            HeadRole::Rol(i) => {
                if i != rol.len() {
                    return Err(Error::parse(n, format!("expected block rol.{}", rol.len())));
                }
                rol.push(head);
            }
        }
    }
    let model = DetectorModel {
        stage,
        backbone: backbone.ok_or_else(|| Error::parse(lines.line, "missing backbone block"))?,
        main_head: main.ok_or_else(|| Error::parse(lines.line, "missing main block"))?,
        sdk_head: sdk,
        rol_heads: rol,
    };
    model.validate()?;
    Ok(Checkpoint { model, seed, config })
}
