//! Run configuration: one flat TOML document of dotted keys, merged over
//! an optional named preset and overridden by `--key value` flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::classifier::ClassifierTrainConfig;
use crate::detector::DetectorTrainConfig;
use crate::error::{Error, Result};
use crate::eval::PipelineConfig;
use crate::synth::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name of a built-in preset applied beneath the file and flags.
    pub preset: Option<String>,
    /// When set, replaces the seed of every stage.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub output: OutputSection,
    pub gen: GenSection,
    pub scene: SceneConfig,
    pub split: SplitSection,
    pub detector: DetectorTrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub crops: CropSection,
    pub pipeline: PipelineConfig,
    pub checkpoints: CheckpointSection,
    pub eval: EvalSection,
    pub infer: InferSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            seed: None,
            data: DataSection::default(),
            output: OutputSection::default(),
            gen: GenSection::default(),
            scene: SceneConfig::default(),
            split: SplitSection::default(),
            detector: DetectorTrainConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            crops: CropSection::default(),
            pipeline: PipelineConfig::default(),
            checkpoints: CheckpointSection::default(),
            eval: EvalSection::default(),
            infer: InferSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory (holding `manifest.jsonl`) or manifest file.
    pub dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dir: "data".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub count: u64,
}

impl Default for GenSection {
    fn default() -> Self {
        Self { count: 800 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Split file; defaults to `split.json` in the output directory.
    pub file: Option<PathBuf>,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratios: [0.625, 0.1875, 0.1875],
            seed: 0,
            file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropSource {
    /// Crops around annotated boxes.
    #[default]
    GroundTruth,
    /// Crops around detector outputs, labelled by their best-matching box.
    Detections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSection {
    pub source: CropSource,
    /// Also train the whole-image baseline classifier.
    pub full_image_baseline: bool,
}

impl Default for CropSection {
    fn default() -> Self {
        Self {
            source: CropSource::GroundTruth,
            full_image_baseline: true,
        }
    }
}

/// Checkpoint locations; unset paths default to files in the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointSection {
    pub detector: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub full_image: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Validation,
    #[default]
    Test,
    /// The whole dataset, ignoring any split file.
    All,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub part: SplitPart,
    /// Detections file (JSON lines) evaluated instead of running a detector.
    pub detections: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    /// A PNG file or a directory of PNG files.
    pub input: Option<PathBuf>,
    /// Enlargement factor of the annotated images.
    pub scale: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        Self { input: None, scale: 4 }
    }
}

const BENCHMARK: &str = r#"
seed = 17
gen.count = 800
detector.iterations = 3000
detector.base_lr = 0.01
detector.eval_interval = 500
classifier.input_size = [32, 32]
classifier.epochs = 12
"#;

const SMOKE: &str = r#"
gen.count = 24
scene.image_size = [96, 96]
detector.iterations = 30
detector.batch_size = 2
detector.eval_interval = 15
classifier.backbone = "small"
classifier.input_size = [32, 32]
classifier.epochs = 2
classifier.batch_size = 8
"#;

/// Names of the built-in run presets.
pub const PRESETS: [&str; 2] = ["benchmark", "smoke"];

fn preset_table(name: &str) -> Result<Table> {
    let text = match name {
        "benchmark" => BENCHMARK,
        "smoke" => SMOKE,
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(text.parse::<Table>().expect("built-in preset parses"))
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a flag value as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn insert_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed configuration key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Turns `--key value` / `--key=value` pairs into a nested table.
pub fn parse_overrides(args: &[String]) -> Result<Table> {
    let mut table = Table::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("expected `--key value`, got `{arg}`")));
        };
        let (key, raw) = match flag.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag `--{flag}` needs a value")))?;
                (flag, v.clone())
            }
        };
        insert_dotted(&mut table, key, parse_value(&raw))?;
    }
    Ok(table)
}

impl RunConfig {
    /// Defaults, then the preset (named by file or flags), then the file,
    /// then the flags.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut merged = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
            }
            None => Table::new(),
        };
        merge(&mut merged, parse_overrides(overrides)?);
        let mut table = match merged.get("preset") {
            Some(Value::String(name)) => preset_table(name)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => Table::new(),
        };
        merge(&mut table, merged);
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.apply_seed();
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.scene.seed = s;
            self.split.seed = s;
            self.detector.seed = s;
            self.classifier.seed = s;
        }
    }

    pub fn split_file(&self) -> PathBuf {
        self.split.file.clone().unwrap_or_else(|| self.output.dir.join("split.json"))
    }

    pub fn detector_checkpoint(&self) -> PathBuf {
        self.checkpoints
            .detector
            .clone()
            .unwrap_or_else(|| self.output.dir.join("detector.json"))
    }

    pub fn classifier_checkpoint(&self) -> PathBuf {
        self.checkpoints
            .classifier
            .clone()
            .unwrap_or_else(|| self.output.dir.join("classifier.json"))
    }

    pub fn full_image_checkpoint(&self) -> PathBuf {
        self.checkpoints
            .full_image
            .clone()
            .unwrap_or_else(|| self.output.dir.join("classifier_full_image.json"))
    }

    /// The resolved configuration as flat `dotted.key = value` lines, sorted.
    pub fn to_flat_toml(&self) -> Result<String> {
        let table = Table::try_from(self).map_err(|e| Error::Config(format!("serialising config: {e}")))?;
        let mut lines = Vec::new();
        flatten("", &table, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        Ok(out)
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push(format!("{key} = {other}")),
        }
    }
}
