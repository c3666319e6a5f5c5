//! Experiment configuration: a `wbh-config v1` header line followed by a TOML
//! document.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::detector::TrainConfig;
use crate::error::{io_err, PipelineError};
use crate::evaluation::EvalConfig;
use crate::imaging::CorruptionChain;
use crate::scenegen::SceneSpec;

pub const CONFIG_HEADER: &str = "wbh-config v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageId {
    Stage1,
    Stage2,
    Stage3,
    Stage4,
    Tech1,
    Tech2,
}

impl StageId {
    pub const ALL: [StageId; 6] =
        [StageId::Stage1, StageId::Stage2, StageId::Stage3, StageId::Stage4, StageId::Tech1, StageId::Tech2];

    pub fn name(self) -> &'static str {
        match self {
            StageId::Stage1 => "stage1",
            StageId::Stage2 => "stage2",
            StageId::Stage3 => "stage3",
            StageId::Stage4 => "stage4",
            StageId::Tech1 => "tech1",
            StageId::Tech2 => "tech2",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageId::ALL
            .into_iter()
            .find(|id| id.name() == s.trim())
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

/// Parses a comma-separated stage list such as `stage1,stage2,tech2`.
pub fn parse_stage_list(s: &str) -> Result<Vec<StageId>, PipelineError> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

mod chain_text {
    use super::*;

    pub fn serialize<S: Serializer>(c: &CorruptionChain, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&c.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CorruptionChain, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSizes {
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenes {
    pub clean_a: SceneSpec,
    pub clean_b: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruptions {
    /// Condition the detector is tested under.
    #[serde(with = "chain_text")]
    pub target: CorruptionChain,
    /// Synthetic corruption used to train the technique-2 model.
    #[serde(with = "chain_text")]
    pub technique2: CorruptionChain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    /// Defaults to a tenth of the training learning rate.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    pub steps: u64,
}

/// Pass/fail thresholds reported in the summary and reflected in the exit code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bounds {
    pub stage1_min_map: f64,
    pub stage2_max_fraction: f64,
    pub tech2_min_ratio: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { stage1_min_map: 50.0, stage2_max_fraction: 0.5, tech2_min_ratio: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub stages: Vec<StageId>,
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub cache: bool,
    /// Defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub mix_fraction: f64,
    pub data: DataSizes,
    pub scenes: Scenes,
    pub corruption: Corruptions,
    pub train: TrainConfig,
    pub fine_tune: FineTuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub bounds: Bounds,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.stages.is_empty() {
            return bad("stage list is empty".into());
        }
        if !(0.0..=1.0).contains(&self.mix_fraction) {
            return bad(format!("mix_fraction {} outside [0, 1]", self.mix_fraction));
        }
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return bad("train_size and test_size must be positive".into());
        }
        self.scenes.clean_a.validate()?;
        self.scenes.clean_b.validate()?;
        self.corruption.target.validate()?;
        self.corruption.technique2.validate()?;
        self.train.validate()?;
        self.fine_tune_config().validate()?;
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return bad(format!("iou_threshold {} outside (0, 1]", self.eval.iou_threshold));
        }
        if self.corruption.target == self.corruption.technique2 {
            return bad("technique 2 must not train on the target condition".into());
        }
        Ok(())
    }

    pub fn fine_tune_config(&self) -> TrainConfig {
        let base = self.train.fine_tune_default();
        TrainConfig {
            learning_rate: self.fine_tune.learning_rate.unwrap_or(base.learning_rate),
            steps: self.fine_tune.steps,
            ..base
        }
    }

    pub fn cache_root(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    /// Hash of every setting that can change a result; output and cache
    /// locations are left out.
    pub fn result_id(&self) -> String {
        let placed = ExperimentConfig { output_dir: PathBuf::new(), cache: true, cache_dir: None, ..self.clone() };
        crate::rng::sha256_hex(placed.to_text().as_bytes())[..16].to_string()
    }

    pub fn to_text(&self) -> String {
        format!("{CONFIG_HEADER}\n{}", toml::to_string(self).expect("config serializes"))
    }
}

impl FromStr for ExperimentConfig {
    type Err = PipelineError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut lines = text.lines();
        let header = lines.by_ref().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#'));
        match header {
            Some(CONFIG_HEADER) => {}
            Some(other) => {
                return Err(PipelineError::Config(format!("unsupported config header {other:?}, expected {CONFIG_HEADER:?}")))
            }
            None => return Err(PipelineError::Config("empty config".into())),
        }
        let body: String = lines.map(|l| format!("{l}\n")).collect();
        let cfg: ExperimentConfig = toml::from_str(&body).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig, PipelineError> {
    fs::read_to_string(path).map_err(io_err::<PipelineError>(path))?.parse()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            stages: StageId::ALL.to_vec(),
            output_dir: "out".into(),
            cache: true,
            cache_dir: None,
            mix_fraction: 0.1,
            data: DataSizes { train_size: 10, test_size: 5 },
            scenes: Scenes { clean_a: SceneSpec::voc_like(1), clean_b: SceneSpec::coco_like(2) },
            corruption: Corruptions {
                target: "fog:density=0.5,airlight=0.7+rain:streaks=40,length=6,alpha=0.5".parse().unwrap(),
                technique2: "double_gaussian:sigma1=1,sigma2=2".parse().unwrap(),
            },
            train: TrainConfig::default(),
            fine_tune: FineTuneConfig { learning_rate: None, steps: 10 },
            eval: EvalConfig::default(),
            bounds: Bounds::default(),
        }
    }

    #[test]
    fn text_round_trip() {
        let cfg = sample();
        let back: ExperimentConfig = cfg.to_text().parse().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn header_is_required() {
        let text = sample().to_text();
        let body = text.split_once('\n').unwrap().1;
        assert!(matches!(body.parse::<ExperimentConfig>(), Err(PipelineError::Config(_))));
        let v2 = format!("wbh-config v2\n{body}");
        assert!(v2.parse::<ExperimentConfig>().unwrap_err().to_string().contains("v2"));
        let commented = format!("# experiment\n\n{text}");
        commented.parse::<ExperimentConfig>().unwrap();
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = sample();
        cfg.mix_fraction = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = sample();
        cfg.corruption.technique2 = cfg.corruption.target.clone();
        assert!(cfg.validate().is_err());
        let text = sample().to_text().replace("mix_fraction", "mix_fractoin");
        assert!(text.parse::<ExperimentConfig>().is_err());
        assert!(parse_stage_list("stage1,stage9").is_err());
        assert_eq!(parse_stage_list("stage1, tech2").unwrap(), vec![StageId::Stage1, StageId::Tech2]);
    }

    #[test]
    fn result_id_ignores_locations() {
        let a = sample();
        let mut b = sample();
        b.output_dir = "elsewhere".into();
        b.cache = false;
        b.cache_dir = Some("/tmp/c".into());
        assert_eq!(a.result_id(), b.result_id());
        b.seed += 1;
        assert_ne!(a.result_id(), b.result_id());
    }

    #[test]
    fn fine_tune_defaults_to_a_tenth_of_the_rate() {
        let mut cfg = sample();
        cfg.train.learning_rate = 0.1;
        assert!((cfg.fine_tune_config().learning_rate - 0.01).abs() < 1e-15);
        assert_eq!(cfg.fine_tune_config().steps, 10);
        cfg.fine_tune.learning_rate = Some(0.05);
        assert_eq!(cfg.fine_tune_config().learning_rate, 0.05);
    }
}
