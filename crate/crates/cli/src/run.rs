//! `runs/<timestamp>/` layout and the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ddad_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const REPORT: &str = "report.json";
pub const DETECTIONS: &str = "detections.json";
pub const ABLATION: &str = "ablation.json";
pub const DENOISER_CKPT: &str = "denoiser.ckpt";
pub const EXTRACTOR_CKPT: &str = "extractor.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    pub train: u64,
    pub adapt: u64,
    pub reconstruction: u64,
}

impl Seeds {
    pub fn of(cfg: &PipelineConfig) -> Self {
        Self { global: cfg.seed, train: cfg.train.seed, adapt: cfg.adapt.seed, reconstruction: cfg.reconstruction.seed }
    }
}

/// Everything needed to replay a run: the latest config, its hash and the
/// stages executed so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub created: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
}

pub struct RunDir {
    pub root: PathBuf,
    pub manifest: Manifest,
}

pub fn now() -> String {
    chrono::Local::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, false)
}

impl RunDir {
    /// `<runs_dir>/<timestamp>`, with a suffix if that already exists.
    pub fn fresh_path(runs_dir: &Path) -> PathBuf {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
        let mut root = runs_dir.join(&stamp);
        let mut k = 1;
        while root.exists() {
            root = runs_dir.join(format!("{stamp}-{k}"));
            k += 1;
        }
        root
    }

    pub fn create(root: &Path, cfg: &PipelineConfig) -> Result<Self> {
        let root = root.to_path_buf();
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        for sub in ["checkpoints", "heatmaps", "reconstructions"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            created: now(),
            config_hash: cfg.hash(),
            seeds: Seeds::of(cfg),
            config: cfg.clone(),
            stages: Vec::new(),
        };
        let run = Self { root, manifest };
        run.save_config(cfg)?;
        run.write_manifest()?;
        Ok(run)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("{} is not a run directory", root.display()))?;
        let manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn heatmaps(&self) -> PathBuf {
        self.root.join("heatmaps")
    }

    pub fn reconstructions(&self) -> PathBuf {
        self.root.join("reconstructions")
    }

    pub fn save_config(&self, cfg: &PipelineConfig) -> Result<()> {
        fs::write(self.root.join(CONFIG), toml::to_string_pretty(cfg)?)?;
        Ok(())
    }

    /// The single writer for `manifest.json`; written via a temporary file.
    pub fn write_manifest(&self) -> Result<()> {
        let tmp = self.root.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)?)?;
        fs::rename(&tmp, self.root.join(MANIFEST))?;
        Ok(())
    }

    pub fn record(&mut self, stage: &str, cfg: &PipelineConfig, started: String, outputs: Vec<String>) -> Result<()> {
        self.manifest.config_hash = cfg.hash();
        self.manifest.seeds = Seeds::of(cfg);
        self.manifest.config = cfg.clone();
        self.manifest.stages.push(StageRecord {
            stage: stage.into(),
            config_hash: cfg.hash(),
            seeds: Seeds::of(cfg),
            started,
            finished: now(),
            outputs,
        });
        self.save_config(cfg)?;
        self.write_manifest()
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: PipelineConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
    };
    Ok(cfg)
}

/// Fails unless every listed input exists, naming the stage that produces it.
pub fn require(inputs: &[(&Path, &str)]) -> Result<()> {
    for (path, producer) in inputs {
        if !path.exists() {
            bail!("missing {} (run `ddad {producer}` first)", path.display());
        }
    }
    Ok(())
}
