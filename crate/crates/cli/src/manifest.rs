use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowdepth::losses::{FrontEndConfig, LossConfig};
use flowdepth::optimizer::OptimConfig;
use flowdepth::synth::SceneSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Record attached to every command's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the canonical JSON of the effective configuration. Output
    /// locations are excluded so that a rerun elsewhere hashes the same.
    pub config_sha256: String,
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn new(command: &str, config: &serde_json::Value, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: sha256_hex(&serde_json::to_vec(config)?),
            seed,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A scene given inline or as a path to a scene JSON file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneRef {
    Path(PathBuf),
    Inline(Box<SceneSpec>),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub depth: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Everything needed to repeat a depth-recovery run. Relative paths are
/// resolved against the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub scene: SceneRef,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub front_end: FrontEndConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub unsupervised: bool,
    #[serde(default)]
    pub outputs: OutputPaths,
    /// Overrides the scene seed and the initialisation seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ExperimentManifest {
    /// Reads a manifest and checks that every input it names exists and every
    /// output directory is present.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: ExperimentManifest =
            flowdepth::io::read_json(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.resolve(base);
        m.check_paths()?;
        Ok(m)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let SceneRef::Path(p) = &mut self.scene {
            fix(p);
        }
        for p in [&mut self.outputs.depth, &mut self.outputs.trace, &mut self.outputs.report]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn check_paths(&self) -> Result<()> {
        if let SceneRef::Path(p) = &self.scene {
            if !p.is_file() {
                bail!("scene file {} does not exist", p.display());
            }
        }
        for p in [&self.outputs.depth, &self.outputs.trace, &self.outputs.report]
            .into_iter()
            .flatten()
        {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                if !dir.is_dir() {
                    bail!("output directory {} does not exist", dir.display());
                }
            }
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        match &self.scene {
            SceneRef::Inline(s) => Ok((**s).clone()),
            SceneRef::Path(p) => read_scene(p),
        }
    }
}

pub fn read_scene(path: &Path) -> Result<SceneSpec> {
    flowdepth::io::read_json(path).with_context(|| format!("reading scene {}", path.display()))
}

/// Content hashes of files written by a command, keyed by file name.
pub type FileHashes = BTreeMap<String, String>;
