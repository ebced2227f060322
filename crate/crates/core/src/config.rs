//! Experiment configuration: a flat set of fields read from JSON or
//! `key = value` lines, with defaults for everything.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::compression::DgcConfig;
use crate::control::{DropoutController, MultiModelController, SingleModelController};
use crate::data::{DataConfig, Partition};
use crate::federation::{AggregateMode, CodecConfig, TrainingConfig};
use crate::model::Architecture;
use crate::netsim::{NetworkModel, RateSampling};
use crate::submodel::FdrConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Field {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain FedAvg on the full model.
    #[default]
    None,
    /// Federated dropout with uniformly random sub-models.
    Fd,
    AfdMulti,
    AfdSingle,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Fd => "fd",
            Mode::AfdMulti => "afd_multi",
            Mode::AfdSingle => "afd_single",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| ConfigError::field("mode", format!("unknown mode {s:?} (none, fd, afd_multi, afd_single)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    #[default]
    Mlp,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchKind,
    /// Hidden units of the MLP, or of the dense layer after the conv block.
    pub hidden: usize,
    pub cnn_filters: usize,

    pub n_clients: usize,
    pub n_per_client: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub partition: Partition,
    pub separation: f64,
    pub classes_per_client: usize,

    pub mode: Mode,
    pub fdr: f64,
    pub quant8_downlink: bool,
    pub dgc_uplink: bool,
    pub dgc_ratio: f64,
    pub dgc_clip: f64,
    pub dgc_momentum: f64,
    pub aggregate: AggregateMode,

    pub rounds: usize,
    pub client_fraction: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,

    pub target_accuracy: f64,
    pub eval_every: usize,
    pub seeds: Vec<u64>,

    pub down_mbps_min: f64,
    pub down_mbps_max: f64,
    pub up_mbps_min: f64,
    pub up_mbps_max: f64,
    pub rate_sampling: RateSampling,
    pub compute_seconds: f64,

    pub out: PathBuf,
    pub run_id: Option<String>,
    /// Run seeds concurrently; outputs are identical either way.
    pub parallel_seeds: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let net = NetworkModel::default();
        let dgc = DgcConfig::default();
        let training = TrainingConfig::default();
        Self {
            arch: ArchKind::Mlp,
            hidden: 64,
            cnn_filters: 4,
            n_clients: data.n_clients,
            n_per_client: data.n_per_client,
            n_classes: data.n_classes,
            dim: data.dim,
            partition: data.partition,
            separation: data.separation,
            classes_per_client: data.classes_per_client,
            mode: Mode::None,
            fdr: 0.25,
            quant8_downlink: false,
            dgc_uplink: false,
            dgc_ratio: dgc.ratio,
            dgc_clip: dgc.clip_norm,
            dgc_momentum: dgc.momentum,
            aggregate: training.aggregate,
            rounds: 300,
            client_fraction: training.client_fraction,
            lr: training.lr,
            epochs: training.epochs,
            batch_size: training.batch_size,
            target_accuracy: 0.85,
            eval_every: 1,
            seeds: vec![1],
            down_mbps_min: net.down_mbps.0,
            down_mbps_max: net.down_mbps.1,
            up_mbps_min: net.up_mbps.0,
            up_mbps_max: net.up_mbps.1,
            rate_sampling: net.sampling,
            compute_seconds: net.compute_seconds,
            out: PathBuf::from("runs"),
            run_id: None,
            parallel_seeds: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses a JSON object or `key = value` lines (`#` starts a comment).
    /// Values in the line format are read as JSON when possible and as bare
    /// strings otherwise.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            let de = &mut serde_json::Deserializer::from_str(text);
            return serde_path_to_error::deserialize(de).map_err(path_error);
        }
        let mut map = Map::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            map.insert(k.trim().to_string(), scalar_value(v.trim()));
        }
        Self::from_map(map)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn from_map(map: Map<String, Value>) -> Result<Self, ConfigError> {
        serde_path_to_error::deserialize(Value::Object(map)).map_err(path_error)
    }

    /// Overrides one field from a command-line style `value`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let mut current = match serde_json::to_value(&*self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if !current.contains_key(key) {
            return Err(ConfigError::field(key, "unknown field"));
        }
        current.insert(key.to_string(), scalar_value(value));
        *self = Self::from_map(current)?;
        Ok(())
    }

    /// Checks every constraint; returns advisory warnings on success.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let mut warnings = Vec::new();
        let fdr = FdrConfig::new(self.fdr).map_err(|_| ConfigError::field("fdr", format!("fdr must be in [0,1), got {}", self.fdr)))?;
        if self.mode != Mode::None {
            warnings.extend(fdr.warning());
        }
        if self.mode == Mode::AfdSingle && self.partition == Partition::NonIid {
            warnings.push(
                "afd_single shares one score map across clients; with non-IID data afd_multi is the better fit".to_string(),
            );
        }
        let positive = [
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::field(name, "must be positive"));
            }
        }
        if self.arch == ArchKind::Cnn {
            if self.cnn_filters == 0 {
                return Err(ConfigError::field("cnn_filters", "must be positive"));
            }
            if image_side(self.dim).is_none() {
                return Err(ConfigError::field("dim", format!("cnn needs a square image of side >= 4, got dim {}", self.dim)));
            }
        }
        self.data_config()
            .validate()
            .map_err(|e| ConfigError::field(data_field(&e), e.to_string()))?;
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(ConfigError::field("client_fraction", format!("must be in (0, 1], got {}", self.client_fraction)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::field("lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(ConfigError::field("target_accuracy", "must be in [0, 1]"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::field("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(ConfigError::field("seeds", "seeds must be distinct"));
        }
        if self.dgc_uplink {
            let d = self.dgc_config();
            if !(d.ratio > 0.0 && d.ratio <= 1.0) {
                return Err(ConfigError::field("dgc_ratio", format!("must be in (0, 1], got {}", d.ratio)));
            }
            if !(d.clip_norm > 0.0) {
                return Err(ConfigError::field("dgc_clip", "must be positive"));
            }
            if !(0.0..1.0).contains(&d.momentum) {
                return Err(ConfigError::field("dgc_momentum", "must be in [0, 1)"));
            }
        }
        let net = self.network();
        if net.validate().is_err() {
            let field = if !(net.down_mbps.0 > 0.0 && net.down_mbps.0 <= net.down_mbps.1) {
                "down_mbps_min"
            } else if !(net.up_mbps.0 > 0.0 && net.up_mbps.0 <= net.up_mbps.1) {
                "up_mbps_min"
            } else {
                "compute_seconds"
            };
            return Err(ConfigError::field(field, "invalid network parameters"));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(ConfigError::field("run_id", "must be a plain directory name"));
            }
        }
        Ok(warnings)
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| self.mode.name().to_string())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            n_clients: self.n_clients,
            n_per_client: self.n_per_client,
            n_classes: self.n_classes,
            dim: self.dim,
            partition: self.partition,
            separation: self.separation,
            classes_per_client: self.classes_per_client,
        }
    }

    pub fn architecture(&self) -> Result<Architecture, ConfigError> {
        let arch = match self.arch {
            ArchKind::Mlp => Architecture::mlp(self.dim, &[self.hidden], self.n_classes),
            ArchKind::Cnn => {
                let side = image_side(self.dim).ok_or_else(|| ConfigError::field("dim", "not a square image"))?;
                Architecture::cnn(side, self.cnn_filters, self.hidden, self.n_classes)
            }
        };
        arch.map_err(|e| ConfigError::field("arch", e.to_string()))
    }

    pub fn controller(&self, arch: &Architecture) -> DropoutController {
        match self.mode {
            Mode::None => DropoutController::None,
            Mode::Fd => DropoutController::Random {
                arch: arch.clone(),
                fdr: self.fdr,
            },
            Mode::AfdMulti => DropoutController::MultiModel(MultiModelController::new(arch, self.n_clients, self.fdr)),
            Mode::AfdSingle => DropoutController::SingleModel(SingleModelController::new(arch, self.fdr)),
        }
    }

    pub fn dgc_config(&self) -> DgcConfig {
        DgcConfig {
            ratio: self.dgc_ratio,
            clip_norm: self.dgc_clip,
            momentum: self.dgc_momentum,
        }
    }

    pub fn codecs(&self) -> CodecConfig {
        CodecConfig {
            quant8_downlink: self.quant8_downlink,
            dgc_uplink: self.dgc_uplink.then(|| self.dgc_config()),
        }
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            client_fraction: self.client_fraction,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            aggregate: self.aggregate,
        }
    }

    pub fn network(&self) -> NetworkModel {
        NetworkModel {
            down_mbps: (self.down_mbps_min, self.down_mbps_max),
            up_mbps: (self.up_mbps_min, self.up_mbps_max),
            sampling: self.rate_sampling,
            compute_seconds: self.compute_seconds,
        }
    }
}

fn image_side(dim: usize) -> Option<usize> {
    let side = (dim as f64).sqrt().round() as usize;
    (side >= 4 && side * side == dim).then_some(side)
}

fn data_field(e: &crate::data::DataError) -> &'static str {
    use crate::data::DataError;
    match e {
        DataError::InvalidCount(f) => f,
        DataError::TooFewClasses { .. } => "n_classes",
        DataError::InvalidSeparation(_) => "separation",
        _ => "data",
    }
}

fn scalar_value(v: &str) -> Value {
    let v = v.trim();
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.trim_matches('"').to_string()))
}

fn path_error(e: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let path = e.path().to_string();
    let inner = e.into_inner().to_string();
    let field = if path == "." {
        // Unknown keys are reported on the enclosing object.
        inner
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| "config".to_string())
    } else {
        path
    };
    ConfigError::Field { field, message: inner }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_gives_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.mode, Mode::None);
        assert_eq!(c.fdr, 0.25);
        assert_eq!(c.client_fraction, 0.3);
        assert_eq!(c.lr, 0.05);
        assert_eq!(c.epochs, 1);
        assert_eq!(c.batch_size, 10);
        assert_eq!(ExperimentConfig::parse("{}").unwrap(), c);
    }

    #[test]
    fn key_value_and_json_agree() {
        let kv = ExperimentConfig::parse("mode = afd_multi\nfdr=0.3 # comment\nseeds = [1,2]\nquant8_downlink = true\n").unwrap();
        let js = ExperimentConfig::parse(r#"{"mode":"afd_multi","fdr":0.3,"seeds":[1,2],"quant8_downlink":true}"#).unwrap();
        assert_eq!(kv, js);
        assert_eq!(kv.mode, Mode::AfdMulti);
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::parse("bogus = 1").unwrap_err();
        assert!(matches!(&e, ConfigError::Field { field, .. } if field == "bogus"), "{e}");
        let e = ExperimentConfig::parse("lr = fast").unwrap_err();
        assert!(matches!(&e, ConfigError::Field { field, .. } if field == "lr"), "{e}");
        let e = ExperimentConfig::parse(r#"{"mode": "other"}"#).unwrap_err();
        assert!(matches!(&e, ConfigError::Field { field, .. } if field == "mode"), "{e}");
        assert!(matches!(ExperimentConfig::parse("no equals sign"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn fdr_bounds() {
        let mut c = ExperimentConfig {
            fdr: 1.0,
            ..Default::default()
        };
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("fdr must be in [0,1)"), "{e}");
        c.fdr = 0.6;
        c.mode = Mode::Fd;
        let w = c.validate().unwrap();
        assert!(w.iter().any(|s| s.contains("10%-50%")), "{w:?}");
    }

    #[test]
    fn single_model_non_iid_warns() {
        let c = ExperimentConfig {
            mode: Mode::AfdSingle,
            ..Default::default()
        };
        assert!(c.validate().unwrap().iter().any(|w| w.contains("non-IID")));
    }

    #[test]
    fn set_overrides_and_checks() {
        let mut c = ExperimentConfig::default();
        c.set("rounds", "7").unwrap();
        c.set("mode", "fd").unwrap();
        c.set("out", "somewhere").unwrap();
        assert_eq!((c.rounds, c.mode, c.out.clone()), (7, Mode::Fd, PathBuf::from("somewhere")));
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("rounds", "-1").is_err());
    }

    #[test]
    fn other_constraints() {
        for (k, v, field) in [
            ("client_fraction", "0", "client_fraction"),
            ("seeds", "[]", "seeds"),
            ("n_clients", "0", "n_clients"),
            ("down_mbps_min", "20", "down_mbps_min"),
        ] {
            let mut c = ExperimentConfig::default();
            c.set(k, v).unwrap();
            let e = c.validate().unwrap_err();
            assert!(matches!(&e, ConfigError::Field { field: f, .. } if f == field), "{k}: {e}");
        }
        let c = ExperimentConfig {
            arch: ArchKind::Cnn,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            arch: ArchKind::Cnn,
            dim: 64,
            ..Default::default()
        };
        c.validate().unwrap();
        assert_eq!(c.architecture().unwrap().input_shape(), &[1, 8, 8]);
    }
}
