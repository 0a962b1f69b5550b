//! Run configuration: one TOML file, dotted-key overrides, and the resolved
//! snapshot written next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vpn_core::data::{SyntheticTaskSpec, SYNTHETIC_JOINTS};
use vpn_core::posegraph::PoseBackboneKind;
use vpn_core::embedding::EmbeddingLossKind;
use vpn_core::train::{find_variant, TrainConfig};

use crate::error::{Error, Result};

pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training split of the synthetic task.
    pub synthetic: SyntheticTaskSpec,
    pub test_samples_per_class: usize,
    /// First sample index of the test split; must not overlap the training range.
    pub test_first_index: u64,
    /// Load these manifests instead of generating in memory.
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticTaskSpec::default(),
            test_samples_per_class: 10,
            test_first_index: 1_000_000,
            train_manifest: None,
            test_manifest: None,
        }
    }
}

impl DataConfig {
    pub fn test_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            samples_per_class: self.test_samples_per_class,
            first_index: self.test_first_index,
            ..self.synthetic.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub dump_attention: bool,
    pub dump_embedding: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Variant names; empty runs the whole grid.
    pub variants: Vec<String>,
    /// Class pair whose accuracy is reported per cell.
    pub pair: (usize, usize),
}

impl Default for AblateConfig {
    fn default() -> Self {
        let (a, b) = vpn_core::data::REVERSED_PAIR;
        Self { seeds: vec![0, 1, 2, 3, 4], variants: Vec::new(), pair: (a, b) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Coordinates sampled per parameter; 0 checks every coordinate.
    pub max_coords: usize,
    pub batch: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub backbones: Vec<PoseBackboneKind>,
    pub losses: Vec<EmbeddingLossKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_coords: 0,
            batch: 2,
            seed: 0,
            tolerance: 1e-4,
            backbones: vec![PoseBackboneKind::Gcn, PoseBackboneKind::Recurrent],
            losses: EmbeddingLossKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicityConfig {
    /// Equal-count bins over the sorted dynamicity values.
    pub bins: usize,
}

impl Default for DynamicityConfig {
    fn default() -> Self {
        Self { bins: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Checkpoint whose parameters initialize `train`; off by default.
    pub warm_start: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradcheckConfig,
    pub dynamicity: DynamicityConfig,
}

impl RunConfig {
    /// Cross-section checks that the per-type validators cannot see.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let m = &self.train.model;
        let d = &self.data;
        if d.train_manifest.is_none() {
            let s = &d.synthetic;
            if (s.frames, s.height, s.width) != (m.video_frames, m.video_height, m.video_width) {
                return Err(Error::Config(format!(
                    "synthetic clips are {}x{}x{} but the model expects {}x{}x{}",
                    s.frames, s.height, s.width, m.video_frames, m.video_height, m.video_width
                )));
            }
            if s.classes != m.classes || m.joints != SYNTHETIC_JOINTS {
                return Err(Error::Config(format!(
                    "synthetic task has {} classes and {SYNTHETIC_JOINTS} joints, the model {} and {}",
                    s.classes, m.classes, m.joints
                )));
            }
            let train_end = s.first_index + (s.classes * s.samples_per_class) as u64;
            let test_end = d.test_first_index + (s.classes * d.test_samples_per_class) as u64;
            if d.test_first_index < train_end && s.first_index < test_end {
                return Err(Error::Config(format!(
                    "test indices {}..{test_end} overlap training indices {}..{train_end}",
                    d.test_first_index, s.first_index
                )));
            }
        }
        for name in &self.ablate.variants {
            if find_variant(name).is_none() {
                return Err(Error::Config(format!("unknown ablation variant {name:?}")));
            }
        }
        if self.ablate.pair.0 >= m.classes || self.ablate.pair.1 >= m.classes {
            return Err(Error::Config(format!("ablate.pair {:?} is out of range", self.ablate.pair)));
        }
        let g = &self.gradcheck;
        if !(g.step > 0.0 && g.step.is_finite()) || g.batch == 0 || !(g.tolerance > 0.0) {
            return Err(Error::Config("gradcheck.step, gradcheck.batch and gradcheck.tolerance must be positive".into()));
        }
        if self.dynamicity.bins == 0 {
            return Err(Error::Config("dynamicity.bins must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize the configuration: {e}")))
    }

    /// Writes the snapshot that reproduces this run on its own.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(SNAPSHOT_NAME);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Parses the right-hand side of an override as a TOML value; anything that
/// does not parse is taken as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to `root`, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let slot = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = slot.as_table_mut().ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (defaults when `None`), applies the overrides and validates.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let where_ = path.map_or("configuration".to_string(), |p| p.display().to_string());
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(format!("{where_}: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}
