//! Checkpoint bundles: a directory holding `params.mmlp`, `prototypes.mmlm`
//! (prototype modality), `config.txt` (`key=value` lines) and `loss.csv`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::integration::{self, IntegrationParams};
use crate::prototypes::{self, PrototypeSet};
use crate::trainer::{self, EpochStats, TrainConfig};

pub const PARAMS_FILE: &str = "params.mmlp";
pub const PROTOTYPES_FILE: &str = "prototypes.mmlm";
pub const CONFIG_FILE: &str = "config.txt";
pub const CURVE_FILE: &str = "loss.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: IntegrationParams,
    pub prototypes: PrototypeSet,
    pub config: TrainConfig,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &IntegrationParams,
    prototypes: &PrototypeSet,
    config: &TrainConfig,
    curve: &[EpochStats],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    integration::save_params(params, dir.join(PARAMS_FILE))?;
    prototypes::save_prototypes(prototypes, dir.join(PROTOTYPES_FILE))?;
    fs::write(dir.join(CONFIG_FILE), config.to_kv())?;
    fs::write(dir.join(CURVE_FILE), trainer::curve_csv(curve))?;
    Ok(())
}

/// Parses `key=value` lines into `config`; unknown keys are errors.
pub fn apply_config_text(config: &mut TrainConfig, text: &str) -> Result<()> {
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected key=value".into() })?;
        if !config.set(k, v)? {
            return Err(Error::Parse { line: i + 1, msg: format!("unknown key {:?}", k.trim()) });
        }
    }
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let params = integration::load_params(dir.join(PARAMS_FILE))?;
    let prototypes = prototypes::load_prototypes(dir.join(PROTOTYPES_FILE))?;
    let mut config = TrainConfig::default();
    apply_config_text(&mut config, &fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    Ok(Checkpoint { params, prototypes, config })
}
