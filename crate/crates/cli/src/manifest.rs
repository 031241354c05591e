use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{commands, Cli, Failure};

/// Record of one invocation. Re-running `args` in deterministic mode
/// reproduces every CSV artifact byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments as given, without the program name.
    pub args: Vec<String>,
    /// Every option after defaults were applied.
    pub options: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_sha256: Option<String>,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub threads: usize,
    pub deterministic: bool,
    pub version: String,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// What a command produced.
#[derive(Default)]
pub(crate) struct Artifacts {
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub model_sha256: Option<String>,
}

impl Artifacts {
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, bytes).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }
}

pub(crate) fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub(crate) fn execute(cli: &Cli, args: Vec<String>) -> Result<(), Failure> {
    let start = Instant::now();
    let mut art = Artifacts::default();
    commands::dispatch(&cli.command, &mut art)?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        args,
        options: serde_json::to_value(cli)?,
        seeds: art.seeds,
        model_sha256: art.model_sha256,
        outputs: art.outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
        deterministic: cli.deterministic,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let path = cli.manifest.clone().or_else(|| {
        manifest.outputs.first().map(|p| {
            let mut s = p.clone().into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        })
    });
    match path {
        Some(p) => std::fs::write(&p, json).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?,
        None => eprintln!("{json}"),
    }
    Ok(())
}
