use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use condeepmod::autodiff::CyclicalLrSchedule;
use condeepmod::dsp::{DEFAULT_FRAME_LEN, DEFAULT_GAIN_DB_RANGE, DEFAULT_HOP, DEFAULT_OVERLAP_FRACTION};
use condeepmod::encoder::{EncoderConfig, PretrainConfig};
use condeepmod::head::HeadConfig;
use condeepmod::pipeline::{Method, SeparatorConfig};

use crate::error::{CliError, Result};

/// Synthetic speaker corpus used for pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub utterances: usize,
    pub utterance_s: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 8,
            utterances: 2,
            utterance_s: 4.0,
        }
    }
}

/// Evaluation mixtures drawn from the corpus speakers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub count: usize,
    pub speakers: usize,
    pub duration_s: f64,
    pub overlap_fraction: f64,
    pub gain_db: (f64, f64),
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            count: 10,
            speakers: 2,
            duration_s: 3.0,
            overlap_fraction: DEFAULT_OVERLAP_FRACTION,
            gain_db: DEFAULT_GAIN_DB_RANGE,
        }
    }
}

/// Encoder width; the layer stack follows the fixed six-stage layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub base_filters: usize,
    pub embed_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            base_filters: 32,
            embed_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub schedule: CyclicalLrSchedule,
    /// Snapshot interval for `trend-report`; 0 keeps only the final encoder.
    pub checkpoint_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            temperature: d.temperature,
            schedule: d.schedule,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

/// Subdirectories of the work directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: String,
    pub mixtures: String,
    pub checkpoints: String,
    pub graphs: String,
    pub heads: String,
    pub outputs: String,
    pub reports: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            mixtures: "mix".into(),
            checkpoints: "checkpoints".into(),
            graphs: "graphs".into(),
            heads: "heads".into(),
            outputs: "out".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root seed; every random draw of every stage derives from it.
    pub seed: u64,
    pub frame_len: usize,
    pub hop: usize,
    pub theta: f64,
    pub method: Method,
    pub corpus: CorpusConfig,
    pub mixtures: MixtureConfig,
    pub encoder: EncoderSection,
    pub pretrain: PretrainSection,
    pub head: HeadConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frame_len: DEFAULT_FRAME_LEN,
            hop: DEFAULT_HOP,
            theta: 0.5,
            method: Method::ContrastiveMlp,
            corpus: CorpusConfig::default(),
            mixtures: MixtureConfig::default(),
            encoder: EncoderSection::default(),
            pretrain: PretrainSection::default(),
            head: HeadConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl PipelineConfig {
    /// Reads an optional JSON document, applies `key=value` overrides and
    /// validates the result.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingInput {
                    stage: "config".into(),
                    path: path.display().to_string(),
                    detail: e.to_string(),
                })?;
                serde_json::from_str(&text).map_err(|e| invalid("", e.to_string()))?
            }
            None => Value::Object(Map::new()),
        };
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        let config: Self = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path == "." { "" } else { &path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.separator()
            .validate()
            .map_err(|e| invalid("separator", e.to_string()))?;
        self.encoder_config()
            .validate()
            .map_err(|e| invalid("encoder", e.to_string()))?;
        self.pretrain_config(0)
            .validate()
            .map_err(|e| invalid("pretrain", e.to_string()))?;
        if self.corpus.speakers < 2 {
            return Err(invalid("corpus.speakers", "need at least 2 speakers"));
        }
        if self.corpus.utterances == 0 || !(self.corpus.utterance_s > 0.0) {
            return Err(invalid("corpus", "need at least one utterance of positive length"));
        }
        let m = &self.mixtures;
        if !(2..=5).contains(&m.speakers) || m.speakers > self.corpus.speakers {
            return Err(invalid(
                "mixtures.speakers",
                format!("{} speakers per mixture, need 2..=5 and at most corpus.speakers", m.speakers),
            ));
        }
        if !(m.duration_s > 0.0) {
            return Err(invalid("mixtures.duration_s", "must be positive"));
        }
        if !(0.0..=1.0).contains(&m.overlap_fraction) {
            return Err(invalid("mixtures.overlap_fraction", "must lie in [0, 1]"));
        }
        if !(m.gain_db.0 <= m.gain_db.1) {
            return Err(invalid("mixtures.gain_db", "need lo <= hi"));
        }
        Ok(())
    }

    pub fn separator(&self) -> SeparatorConfig {
        SeparatorConfig {
            frame_len: self.frame_len,
            hop: self.hop,
            theta: self.theta,
            method: self.method,
            head: self.head.clone(),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            frame_len: self.frame_len,
            embed_dim: self.encoder.embed_dim,
            ..EncoderConfig::with_base_filters(self.encoder.base_filters)
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch_size: p.batch_size,
            temperature: p.temperature,
            schedule: p.schedule,
            seed,
            checkpoint_every: p.checkpoint_every,
        }
    }
}

/// Sets `a.b.c=value` inside `doc`, creating intermediate objects. The value
/// is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("override `{item}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let mut walked = String::new();
    for segment in key.split('.') {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(segment);
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let map = node
            .as_object_mut()
            .ok_or_else(|| invalid(&walked, "cannot set a field inside a non-object value"))?;
        node = map.entry(segment.to_string()).or_insert(Value::Null);
    }
    *node = value;
    Ok(())
}
