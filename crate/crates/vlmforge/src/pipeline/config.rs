//! One TOML file configures an entire run. Every field has a default, so an
//! empty (or absent) file is a valid desk-scale configuration, and any field
//! can be overridden from the command line with `--set a.b.c=value`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::filter::BeamConfig;
use crate::generator::SamplingConfig;
use crate::model::ModelConfig;
use crate::objectives::TaskId;
use crate::rng::hash_str;
use crate::vocab::QuestionType;

use super::microworld::MicroWorldSpec;

/// Vocabulary-building knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    /// Location-token bins per coordinate.
    pub loc_bins: u32,
    /// Words rarer than this in the corpus become `[UNK]`.
    pub min_freq: u32,
}

impl Default for VocabConfig {
    fn default() -> VocabConfig {
        VocabConfig { loc_bins: 16, min_freq: 1 }
    }
}

/// World-synthesis knobs: the shape spec plus how many images to render.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicroWorldConfig {
    pub images: u64,
    pub image_size: u32,
    pub max_shapes: usize,
    pub min_half: u32,
    pub max_half: u32,
}

impl Default for MicroWorldConfig {
    fn default() -> MicroWorldConfig {
        let spec = MicroWorldSpec::default();
        MicroWorldConfig {
            images: 200,
            image_size: spec.image_size,
            max_shapes: spec.max_shapes,
            min_half: spec.min_half,
            max_half: spec.max_half,
        }
    }
}

impl MicroWorldConfig {
    pub fn spec(&self) -> MicroWorldSpec {
        MicroWorldSpec {
            image_size: self.image_size,
            max_shapes: self.max_shapes,
            min_half: self.min_half,
            max_half: self.max_half,
        }
    }
}

/// Supervised training loop knobs (generator and filter each get one).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Mask probability for caption spans (region-caption loss).
    pub caption_mask_p: f64,
    /// Mask probability for question spans.
    pub question_mask_p: f64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 400,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
            caption_mask_p: 0.6,
            question_mask_p: 0.6,
            log_every: 25,
        }
    }
}

/// Generation-job knobs (the decode widths live in `[sampling]`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Question types to prompt for, by name.
    pub qtypes: Vec<String>,
    pub max_boxes_per_image: usize,
}

impl Default for GenerateConfig {
    fn default() -> GenerateConfig {
        GenerateConfig {
            qtypes: vec!["what".into(), "where".into(), "which".into(), "binary".into()],
            max_boxes_per_image: 3,
        }
    }
}

impl GenerateConfig {
    pub fn parsed_qtypes(&self) -> Result<Vec<QuestionType>> {
        self.qtypes
            .iter()
            .map(|name| {
                QuestionType::from_name(name)
                    .ok_or_else(|| anyhow!("unknown question type {name:?}"))
            })
            .collect()
    }
}

/// Filter-job knobs (the beam width lives in `[beam]`).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Compare raw strings instead of normalized ones.
    pub strict: bool,
}

/// Pre-training loop knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub mask_p: f64,
    /// Enabled task names (see [`TaskId`]); understanding tasks are
    /// `itc`/`itm`/`ic`/`imlm`, generation tasks are `vqa`/`dc`.
    pub tasks: Vec<String>,
    /// Draw a separate batch per pass instead of sharing one.
    pub two_pass: bool,
    pub log_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> PretrainConfig {
        PretrainConfig {
            steps: 300,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
            mask_p: 0.6,
            tasks: vec![
                "itc".into(),
                "itm".into(),
                "ic".into(),
                "imlm".into(),
                "vqa".into(),
                "dc".into(),
            ],
            two_pass: true,
            log_every: 25,
        }
    }
}

impl PretrainConfig {
    pub fn parsed_tasks(&self) -> Result<BTreeSet<TaskId>> {
        self.tasks
            .iter()
            .map(|name| {
                TaskId::ALL
                    .into_iter()
                    .find(|t| t.name() == name)
                    .ok_or_else(|| anyhow!("unknown task {name:?}"))
            })
            .collect()
    }
}

/// The whole run configuration. Sections mirror the pipeline stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub vocab: VocabConfig,
    pub microworld: MicroWorldConfig,
    pub train: TrainConfig,
    pub train_filter: TrainConfig,
    pub sampling: SamplingConfig,
    pub beam: BeamConfig,
    pub generate: GenerateConfig,
    pub filter: FilterConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            // vocab_size stays 0 here; it is set from the built vocabulary
            model: ModelConfig {
                image_size: 64,
                patch_size: 8,
                channels: 48,
                vision_layers: 2,
                text_layers: 2,
                heads: 4,
                vocab_size: 0,
                max_seq: 64,
                ffn_mult: 2,
            },
            vocab: VocabConfig::default(),
            microworld: MicroWorldConfig::default(),
            train: TrainConfig::default(),
            train_filter: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            beam: BeamConfig::default(),
            generate: GenerateConfig::default(),
            filter: FilterConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Stable digest of the effective configuration (defaults materialized),
    /// recorded in the dataset manifest.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("RunConfig always serializes");
        format!("{:016x}", hash_str(&canonical))
    }
}

/// Parses a `--set key.path=value` override: the key is a dotted path of TOML
/// tables; the value is parsed as TOML (so `7`, `1.5`, `true`, `"text"`, and
/// `["a","b"]` all work) with a fallback to a bare string.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| anyhow!("override {raw:?} is not of the form key.path=value"))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.is_empty() || path.iter().any(|s| s.is_empty()) {
        bail!("override {raw:?} has an empty key segment");
    }
    let value = value.trim();
    let parsed = match toml::Value::from_str(&format!("v = {value}")) {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(value.to_string()),
    };
    Ok((path, parsed))
}

fn apply_override(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let mut node = root;
    for seg in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("override path {} crosses a non-table value", path.join(".")))?;
        node = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| anyhow!("override path {} crosses a non-table value", path.join(".")))?;
    table.insert(path.last().unwrap().clone(), value);
    Ok(())
}

fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Loads a run configuration by layering: built-in defaults, then the TOML
/// file at `path` (if any), then `--set` overrides in order. A value missing
/// from a layer keeps the one below it; unknown keys are rejected.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree =
        toml::Value::try_from(RunConfig::default()).expect("defaults always serialize");
    if let Some(p) = path {
        let body = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let user: toml::Value =
            toml::from_str(&body).context("configuration file is not valid TOML")?;
        deep_merge(&mut tree, user);
    }
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        apply_override(&mut tree, &path, value)?;
    }
    let cfg: RunConfig = tree.try_into().context("configuration does not match the schema")?;
    Ok(cfg)
}
