//! Run configuration: an optional JSON file overridden by flags.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::Args;
use gsc::scenario::{ScenarioSpec, Setting, CLASS_ORDER_PRESETS};
use gsc::trainer::{MethodSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Contents of a `--config` file. Every field is optional; a run manifest
/// is accepted too, in which case its resolved configuration is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `4-1`, `3-1x3` or `custom`.
    pub scenario: Option<String>,
    pub setting: Option<Setting>,
    pub seed: Option<u64>,
    /// Preset letter `A`..`E` or a comma-separated permutation.
    pub class_order: Option<String>,
    /// Group sizes for the `custom` scenario.
    pub custom_groups: Option<Vec<usize>>,
    pub images_per_step: Option<usize>,
    pub test_images_per_step: Option<usize>,
    /// `[height, width]`.
    pub image_size: Option<[usize; 2]>,
    /// A complete scenario; takes precedence over all scenario fields above.
    pub spec: Option<ScenarioSpec>,
    pub methods: Option<Vec<MethodSpec>>,
    pub train: TrainConfig,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => return Err(CliError::MissingFile(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    let bad = |e: serde_json::Error| CliError::Usage(format!("{}: {e}", path.display()));
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    if let Some(inner) = value.get_mut("config").filter(|_| value_is_manifest(&text)) {
        return serde_json::from_value(inner.take()).map_err(bad);
    }
    serde_json::from_value(value).map_err(bad)
}

fn value_is_manifest(text: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(text)
        .ok()
        .and_then(|v| v.get("tool").map(|t| t == "gsc"))
        .unwrap_or(false)
}

/// Scenario selection flags shared by several commands.
#[derive(Args, Clone, Debug, Default)]
pub struct ScenarioArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// 4-1, 3-1x3 or custom.
    #[arg(long)]
    pub scenario: Option<String>,
    /// disjoint or overlapped.
    #[arg(long)]
    pub setting: Option<Setting>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Preset letter A-E or a comma-separated permutation of class positions.
    #[arg(long = "class_order")]
    pub class_order: Option<String>,
}

/// Everything a run needs, after defaults and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub spec: ScenarioSpec,
    pub train: TrainConfig,
    pub methods: Vec<MethodSpec>,
}

impl Resolved {
    /// The configuration file that reproduces this run.
    pub fn to_config(&self) -> RunConfig {
        RunConfig {
            seed: Some(self.train.seed),
            spec: Some(self.spec.clone()),
            methods: Some(self.methods.clone()),
            train: self.train.clone(),
            ..RunConfig::default()
        }
    }
}

fn parse_order(s: &str) -> Result<Vec<u8>, CliError> {
    if let Some((_, order)) = CLASS_ORDER_PRESETS
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(s))
    {
        return Ok(order.to_vec());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u8>()
                .map_err(|_| CliError::Usage(format!("class order {s:?} is neither a preset nor a list of positions")))
        })
        .collect()
}

impl ScenarioArgs {
    /// Loads the config file (if any) and applies the flags on top.
    pub fn resolve(&self, methods: Option<Vec<MethodSpec>>) -> Result<Resolved, CliError> {
        let cfg = load_config(self.config.as_deref())?;
        let seed = self.seed.or(cfg.seed).unwrap_or(0);
        let usage = |e: gsc::GscError| CliError::Usage(e.to_string());

        let mut spec = match (&cfg.spec, &self.scenario) {
            (Some(spec), None) => spec.clone(),
            _ => {
                let name = self
                    .scenario
                    .clone()
                    .or(cfg.scenario.clone())
                    .unwrap_or_else(|| "4-1".into());
                let setting = self.setting.or(cfg.setting).unwrap_or(Setting::Overlapped);
                if name == "custom" {
                    let sizes = cfg
                        .custom_groups
                        .as_ref()
                        .ok_or_else(|| CliError::Usage("custom scenario needs custom_groups in the config".into()))?;
                    ScenarioSpec::from_group_sizes("custom", sizes, setting, seed).map_err(usage)?
                } else {
                    ScenarioSpec::preset(&name, setting, seed).map_err(usage)?
                }
            }
        };
        if let Some(setting) = self.setting {
            spec.setting = setting;
        }
        if self.seed.is_some() || cfg.spec.is_none() {
            spec.seed = seed;
        }
        if let Some(n) = cfg.images_per_step {
            spec.images_per_step = n;
        }
        if let Some(n) = cfg.test_images_per_step {
            spec.test_images_per_step = n;
        }
        if let Some([h, w]) = cfg.image_size {
            spec.image_size = (h, w);
        }
        if let Some(order) = self.class_order.as_ref().or(cfg.class_order.as_ref()) {
            spec = spec.permute_classes(&parse_order(order)?).map_err(usage)?;
        }
        spec.validate().map_err(usage)?;

        let mut train = cfg.train.clone();
        train.seed = seed;
        train.validate().map_err(usage)?;

        let methods = methods
            .or(cfg.methods.clone())
            .unwrap_or_else(|| vec![MethodSpec::plain(gsc::trainer::Method::Gsc)]);
        if methods.is_empty() {
            return Err(CliError::Usage("no methods given".into()));
        }
        Ok(Resolved { spec, train, methods })
    }
}

/// Parses `gsc,ft,...` into method specs.
pub fn parse_methods(s: &str) -> Result<Vec<MethodSpec>, CliError> {
    let mut out: Vec<MethodSpec> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m = part
            .parse()
            .map_err(|e: gsc::GscError| CliError::Usage(e.to_string()))?;
        let spec = MethodSpec::plain(m);
        if out.iter().any(|o| o.label == spec.label) {
            return Err(CliError::Usage(format!("method {part} given twice")));
        }
        out.push(spec);
    }
    if out.is_empty() {
        return Err(CliError::Usage("no methods given".into()));
    }
    Ok(out)
}
