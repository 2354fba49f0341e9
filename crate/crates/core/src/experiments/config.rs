//! INI experiment configuration.
//!
//! Three sections control a study:
//!
//! ```ini
//! [units]
//! flow = veh_per_5min      ; or veh_per_hour
//! speed = mph              ; or km_per_hour
//!
//! [train]
//! iterations = 500
//! lr = 0.01
//! m = 10
//! phi_f = 0.01
//! phi_g = 0.01
//!
//! [metanet]
//! T = 0.002777778          ; simulation step in hours
//! v_f = 120
//! rho_cr = 36.85
//! alpha = 1.4324
//! nu = 35
//! delta = 1.4
//! tau = 0.05
//! kappa = 13
//! lanes = 4
//! seg_len = 0.5
//! I = 20
//! ```
//!
//! Every key is optional and defaults to the calibrated corridor values.
//! Unknown sections or keys are rejected so typos fail loudly instead of
//! silently running with defaults.

use std::path::Path;

use configparser::ini::Ini;

use crate::data::{FlowUnit, SpeedUnit, UnitSpec};
use crate::experiments::ExperimentError;
use crate::metanet::MetanetParams;

/// Optimization settings shared by the GP and physics-regularized trainers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Pseudo-input batch size for the physics term.
    pub m: usize,
    pub phi_f: f64,
    pub phi_g: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { iterations: 500, learning_rate: 0.01, m: 10, phi_f: 0.01, phi_g: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub units: UnitSpec,
    pub train: TrainSettings,
    pub metanet: MetanetParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            units: UnitSpec::internal(),
            train: TrainSettings::default(),
            metanet: MetanetParams::default(),
        }
    }
}

const UNIT_KEYS: [&str; 2] = ["flow", "speed"];
const TRAIN_KEYS: [&str; 5] = ["iterations", "lr", "m", "phi_f", "phi_g"];
const METANET_KEYS: [&str; 11] =
    ["t", "v_f", "rho_cr", "alpha", "nu", "delta", "tau", "kappa", "lanes", "seg_len", "i"];

fn config_err(key: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config { key: key.to_string(), message: message.into() }
}

fn get_f64(ini: &Ini, section: &str, key: &str) -> Result<Option<f64>, ExperimentError> {
    match ini.get(section, key) {
        None => Ok(None),
        Some(raw) => {
            let value: f64 = raw
                .trim()
                .parse()
                .map_err(|_| config_err(&format!("{section}.{key}"), format!("invalid number '{raw}'")))?;
            if !value.is_finite() {
                return Err(config_err(&format!("{section}.{key}"), "must be finite"));
            }
            Ok(Some(value))
        }
    }
}

fn get_usize(ini: &Ini, section: &str, key: &str) -> Result<Option<usize>, ExperimentError> {
    match ini.get(section, key) {
        None => Ok(None),
        Some(raw) => raw
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| config_err(&format!("{section}.{key}"), format!("invalid count '{raw}'"))),
    }
}

fn check_known_keys(ini: &Ini) -> Result<(), ExperimentError> {
    let allowed: [(&str, &[&str]); 3] =
        [("units", &UNIT_KEYS), ("train", &TRAIN_KEYS), ("metanet", &METANET_KEYS)];
    for section in ini.sections() {
        let Some((_, keys)) = allowed.iter().find(|(name, _)| *name == section) else {
            return Err(config_err(&section, "unknown section"));
        };
        if let Some(map) = ini.get_map_ref().get(&section) {
            for key in map.keys() {
                if !keys.contains(&key.as_str()) {
                    return Err(config_err(&format!("{section}.{key}"), "unknown key"));
                }
            }
        }
    }
    Ok(())
}

/// Parse INI text into a configuration, starting from the defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let mut ini = Ini::new();
    ini.read(text.to_string())
        .map_err(|e| ExperimentError::InvalidArgument(format!("config parse: {e}")))?;
    check_known_keys(&ini)?;

    let mut config = ExperimentConfig::default();

    if let Some(raw) = ini.get("units", "flow") {
        config.units.flow = match raw.trim() {
            "veh_per_hour" => FlowUnit::VehPerHour,
            "veh_per_5min" => FlowUnit::VehPer5Min,
            other => {
                return Err(config_err(
                    "units.flow",
                    format!("expected veh_per_hour or veh_per_5min, got '{other}'"),
                ))
            }
        };
    }
    if let Some(raw) = ini.get("units", "speed") {
        config.units.speed = match raw.trim() {
            "km_per_hour" => SpeedUnit::KmPerHour,
            "mph" => SpeedUnit::MilesPerHour,
            other => {
                return Err(config_err(
                    "units.speed",
                    format!("expected km_per_hour or mph, got '{other}'"),
                ))
            }
        };
    }

    if let Some(v) = get_usize(&ini, "train", "iterations")? {
        config.train.iterations = v;
    }
    if let Some(v) = get_f64(&ini, "train", "lr")? {
        config.train.learning_rate = v;
    }
    if let Some(v) = get_usize(&ini, "train", "m")? {
        config.train.m = v;
    }
    if let Some(v) = get_f64(&ini, "train", "phi_f")? {
        config.train.phi_f = v;
    }
    if let Some(v) = get_f64(&ini, "train", "phi_g")? {
        config.train.phi_g = v;
    }

    // Geometry first: scalar lanes and seg_len expand over I segments.
    let n_segments = get_usize(&ini, "metanet", "i")?.unwrap_or(config.metanet.n_segments);
    let seg_len = get_f64(&ini, "metanet", "seg_len")?.unwrap_or(config.metanet.seg_len[0]);
    let lanes = get_f64(&ini, "metanet", "lanes")?.unwrap_or(config.metanet.lanes[0]);
    let mut p = MetanetParams::with_uniform_geometry(n_segments, seg_len, lanes);
    if let Some(v) = get_f64(&ini, "metanet", "t")? {
        p.t_step = v;
    }
    if let Some(v) = get_f64(&ini, "metanet", "v_f")? {
        p.free_speed = v;
    }
    if let Some(v) = get_f64(&ini, "metanet", "rho_cr")? {
        p.rho_crit = v;
    }
    if let Some(v) = get_f64(&ini, "metanet", "alpha")? {
        p.alpha = v;
    }
    if let Some(v) = get_f64(&ini, "metanet", "nu")? {
        p.nu = v;
    }
    if let Some(v) = get_f64(&ini, "metanet", "delta")? {
        p.delta_ramp = v;
    }
    if let Some(v) = get_f64(&ini, "metanet", "tau")? {
        p.tau = v;
    }
    if let Some(v) = get_f64(&ini, "metanet", "kappa")? {
        p.kappa = v;
    }
    p.validate()?;
    config.metanet = p;

    for (key, value) in [
        ("train.lr", config.train.learning_rate),
        ("train.phi_f", config.train.phi_f),
        ("train.phi_g", config.train.phi_g),
    ] {
        if !(value.is_finite() && value >= 0.0) {
            return Err(config_err(key, format!("must be nonnegative, got {value}")));
        }
    }
    if config.train.iterations == 0 {
        return Err(config_err("train.iterations", "must be positive"));
    }
    if config.train.m == 0 {
        return Err(config_err("train.m", "must be positive"));
    }

    Ok(config)
}

/// Read an INI configuration file. A missing `path` of `None` yields the
/// defaults, so every CLI entry point treats `--config` as optional.
pub fn load_config<P: AsRef<Path>>(path: Option<P>) -> Result<ExperimentConfig, ExperimentError> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let p = p.as_ref();
            let text = std::fs::read_to_string(p).map_err(|e| super::io_err(p, e))?;
            parse_config(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let config = parse_config("").unwrap();
        assert_eq!(config, ExperimentConfig::default());
        assert_eq!(config.metanet.n_segments, 20);
        assert_eq!(config.train.iterations, 500);
    }

    #[test]
    fn full_config_parses_every_section() {
        let text = "\
[units]
flow = veh_per_5min
speed = mph

[train]
iterations = 200
lr = 0.02
m = 8
phi_f = 0.005
phi_g = 0.015

[metanet]
T = 0.01
v_f = 110
rho_cr = 33
alpha = 1.5
nu = 30
delta = 1.2
tau = 0.06
kappa = 10
lanes = 3
seg_len = 0.4
I = 12
";
        let config = parse_config(text).unwrap();
        assert_eq!(config.units.flow, FlowUnit::VehPer5Min);
        assert_eq!(config.units.speed, SpeedUnit::MilesPerHour);
        assert_eq!(config.train.iterations, 200);
        assert_eq!(config.train.m, 8);
        assert_eq!(config.train.phi_g, 0.015);
        assert_eq!(config.metanet.n_segments, 12);
        assert_eq!(config.metanet.t_step, 0.01);
        assert_eq!(config.metanet.free_speed, 110.0);
        assert_eq!(config.metanet.lanes, vec![3.0; 12]);
        assert_eq!(config.metanet.seg_len, vec![0.4; 12]);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let err = parse_config("[train]\nsteps = 100\n").unwrap_err();
        assert_eq!(err.to_string(), "config key train.steps: unknown key");
        let err = parse_config("[solver]\nx = 1\n").unwrap_err();
        assert_eq!(err.to_string(), "config key solver: unknown section");
    }

    #[test]
    fn bad_values_are_rejected_with_key_names() {
        let err = parse_config("[metanet]\nv_f = fast\n").unwrap_err();
        assert_eq!(err.to_string(), "config key metanet.v_f: invalid number 'fast'");
        let err = parse_config("[units]\nflow = veh_per_min\n").unwrap_err();
        assert!(err.to_string().starts_with("config key units.flow"));
        let err = parse_config("[train]\niterations = 0\n").unwrap_err();
        assert!(err.to_string().contains("must be positive"));
        assert!(parse_config("[metanet]\ntau = -1\n").is_err());
    }

    #[test]
    fn uppercase_keys_match_case_insensitively() {
        let config = parse_config("[metanet]\nT = 0.005\nI = 6\n").unwrap();
        assert_eq!(config.metanet.t_step, 0.005);
        assert_eq!(config.metanet.n_segments, 6);
    }
}
