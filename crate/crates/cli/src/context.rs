//! Effective configuration, output bookkeeping and the run manifest.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use potd_core::kvtext::KvDoc;
use potd_core::pipeline::StageConfig;
use potd_core::synthworld::WorldConfig;
use potd_core::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Keys understood by `experiment` besides stage and world keys.
const EXPERIMENT_KEYS: [&str; 4] = ["experiment", "seeds", "shots", "scale_lstd_epochs"];

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CONFIG: u8 = 2;
    pub const MISSING_INPUT: u8 = 3;
    pub const MALFORMED: u8 = 4;
    pub const UNKNOWN_EXPERIMENT: u8 = 5;
    pub const GRADCHECK: u8 = 6;

    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Failure::new(Self::CONFIG, message)
    }

    /// Like the `From` conversion, but naming the file involved.
    pub fn in_file(path: &Path, e: Error) -> Self {
        let f = Failure::from(e);
        Failure::new(f.code, format!("{}: {}", path.display(), f.message))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig { .. } => Self::CONFIG,
            Error::Parse { .. } => Self::MALFORMED,
            Error::UnknownExperiment { .. } => Self::UNKNOWN_EXPERIMENT,
            Error::MissingHead(_) => Self::MISSING_INPUT,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Self::MISSING_INPUT,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::from(Error::Io(e))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a [String],
    version: &'a str,
    config_file: Option<String>,
    config_file_sha256: Option<String>,
    effective_config: &'a str,
    effective_config_sha256: String,
    seeds: &'a [u64],
    outputs: Vec<String>,
    wall_clock_secs: f64,
}

pub struct Context {
    argv: Vec<String>,
    config_file: Option<(PathBuf, String)>,
    pub doc: KvDoc,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    outputs: Vec<PathBuf>,
    started: Instant,
    /// Failure to report after the manifest is written.
    pub deferred: Option<Failure>,
}

fn sha256(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Failure::new(Failure::MISSING_INPUT, format!("missing input {}", path.display()))
        } else {
            Failure::new(1, format!("{}: {e}", path.display()))
        }
    })
}

impl Context {
    pub fn new(config: Option<&Path>, overrides: &[String], seed: Option<u64>, out_dir: PathBuf) -> Result<Self, Failure> {
        let mut doc = KvDoc::default();
        let mut config_file = None;
        if let Some(path) = config {
            let bytes = fs::read(path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Failure::new(Failure::MISSING_INPUT, format!("missing config {}", path.display()))
                } else {
                    Failure::from(e)
                }
            })?;
            let text = String::from_utf8_lossy(&bytes).into_owned();
            doc = KvDoc::parse(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            config_file = Some((path.to_path_buf(), sha256(&bytes)));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got `{o}`")))?;
            doc.set(k.trim(), v.trim());
        }
        let seed = match seed {
            Some(s) => s,
            None => match doc.get::<u64>("seed")? {
                Some(s) => s,
                None => {
                    let s = rand::random::<u64>();
                    println!("seed = {s}");
                    s
                }
            },
        };
        doc.set("seed", seed);
        let known_stage = StageConfig::default().to_kv();
        let known_world = WorldConfig::default().to_kv();
        for key in doc.keys() {
            if known_stage.get_str(key).is_none() && known_world.get_str(key).is_none() && !EXPERIMENT_KEYS.contains(&key) {
                return Err(Failure::config(format!("unknown config key `{key}`")));
            }
        }
        Ok(Context {
            argv: std::env::args().collect(),
            config_file,
            doc,
            seed,
            seeds: vec![seed],
            out_dir,
            outputs: Vec::new(),
            started: Instant::now(),
            deferred: None,
        })
    }

    pub fn stage_config(&self) -> Result<StageConfig, Failure> {
        let mut c = StageConfig::default();
        c.apply_kv(&self.doc)?;
        c.seed = self.seed;
        c.validate()?;
        Ok(c)
    }

    /// World parameters; the world seed follows the master seed unless
    /// `world.seed` is set explicitly.
    pub fn world_config(&self) -> Result<WorldConfig, Failure> {
        let mut c = WorldConfig {
            seed: self.seed,
            ..WorldConfig::default()
        };
        c.apply_kv(&self.doc)?;
        c.validate()?;
        Ok(c)
    }

    /// Creates `name` in the output directory and records it in the manifest.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>, Failure> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(name);
        let f = File::create(&path).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?;
        self.outputs.push(path);
        Ok(BufWriter::new(f))
    }

    pub fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<(), Failure>) -> Result<(), Failure> {
        let mut w = self.create(name)?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), Failure> {
        let effective = self.doc.to_text();
        let outputs = self.outputs.iter().map(|p| p.display().to_string()).collect();
        let manifest = Manifest {
            command: &self.argv,
            version: env!("CARGO_PKG_VERSION"),
            config_file: self.config_file.as_ref().map(|(p, _)| p.display().to_string()),
            config_file_sha256: self.config_file.as_ref().map(|(_, d)| d.clone()),
            effective_config: &effective,
            effective_config_sha256: sha256(effective.as_bytes()),
            seeds: &self.seeds,
            outputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::new(1, e.to_string()))?;
        let mut w = self.create("manifest.json")?;
        writeln!(w, "{text}")?;
        w.flush()?;
        self.deferred.map_or(Ok(()), Err)
    }
}
