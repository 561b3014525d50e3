//! Run configuration: preset flags, JSON config files and their merge rules.
//!
//! A config file looks like
//!
//! ```json
//! {
//!   "preset": "micro",
//!   "model": { "drop_path_rate": 0.2, "layout": "channel_first" },
//!   "train": { "epochs": 10, "peak_lr": 0.002 },
//!   "data":  { "noise": 0.2, "train_per_class": 32 },
//!   "seed": 7
//! }
//! ```
//!
//! `model` keys are `ModelConfig` field names and override the preset's
//! values. Without a preset, `model` must be a complete config. A value given
//! both on the command line and in the file must agree; disagreement is an
//! error rather than a silent merge.

use std::path::Path;

use davit_core::attention::ScaleMode;
use davit_core::model::{BlockLayout, ModelConfig};
use davit_core::training::{ToySpec, TrainConfig};
use davit_core::{DavitError, Result};
use serde::Deserialize;
use serde_json::{Map, Value};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub model: Option<Map<String, Value>>,
    pub train: Option<Map<String, Value>>,
    pub data: Option<ToySpec>,
    pub seed: Option<u64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            DavitError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| DavitError::Config(format!("config {}: {e}", path.display())))
    }
}

/// Model-shaping command-line flags.
#[derive(Debug, Clone, Default)]
pub struct ModelFlags {
    pub preset: Option<String>,
    pub layout: Option<BlockLayout>,
    pub scale_mode: Option<ScaleMode>,
    pub ffn: Option<bool>,
}

fn conflict(what: &str, flag: impl std::fmt::Debug, file: impl std::fmt::Debug) -> DavitError {
    DavitError::Config(format!(
        "conflicting {what}: command line says {flag:?}, config file says {file:?}"
    ))
}

/// Agrees a command-line value with a config-file value.
pub fn merge_value<T: PartialEq + Clone + std::fmt::Debug>(
    what: &str,
    flag: Option<T>,
    file: Option<T>,
) -> Result<Option<T>> {
    match (flag, file) {
        (Some(a), Some(b)) if a != b => Err(conflict(what, a, b)),
        (a, b) => Ok(a.or(b)),
    }
}

/// Resolves the model config from flags, an optional config file and the
/// input resolution (which may adapt a preset's window).
pub fn resolve_model(
    flags: &ModelFlags,
    file: Option<&ConfigFile>,
    resolution: Option<usize>,
    default_preset: Option<&str>,
) -> Result<ModelConfig> {
    let file_preset = file.and_then(|f| f.preset.clone());
    let preset = merge_value("preset", flags.preset.clone(), file_preset)?;
    let overrides = file.and_then(|f| f.model.clone()).unwrap_or_default();
    let mut value = match preset.as_deref().or(if overrides.is_empty() {
        default_preset
    } else {
        None
    }) {
        Some(name) => {
            let cfg = match resolution {
                Some(r) => ModelConfig::preset_for_resolution(name, r)?,
                None => ModelConfig::preset(name)?,
            };
            serde_json::to_value(cfg).expect("config serializes")
        }
        None if !overrides.is_empty() => Value::Object(Map::new()),
        None => {
            return Err(DavitError::Config(
                "no model given: pass --preset or --config".into(),
            ))
        }
    };
    let obj = value.as_object_mut().expect("config is an object");
    for (k, v) in &overrides {
        obj.insert(k.clone(), v.clone());
    }
    let set_flag = |obj: &mut Map<String, Value>, key: &str, flag: Option<Value>| -> Result<()> {
        if let Some(v) = flag {
            if let Some(existing) = overrides.get(key) {
                if *existing != v {
                    return Err(conflict(key, &v, existing));
                }
            }
            obj.insert(key.to_string(), v);
        }
        Ok(())
    };
    set_flag(
        obj,
        "layout",
        flags.layout.map(|l| serde_json::to_value(l).unwrap()),
    )?;
    set_flag(
        obj,
        "scale_mode",
        flags.scale_mode.map(|s| serde_json::to_value(s).unwrap()),
    )?;
    set_flag(obj, "ffn_enabled", flags.ffn.map(Value::Bool))?;
    let cfg: ModelConfig = serde_json::from_value(value)
        .map_err(|e| DavitError::Config(format!("model config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Training hyperparameters: defaults, then the file's `train` keys, then
/// `--epochs`. The run seed drives initialization and the training streams,
/// so `train.seed` must agree with it when present.
pub fn resolve_train(
    file: Option<&ConfigFile>,
    epochs: Option<usize>,
    seed: u64,
) -> Result<TrainConfig> {
    let keys = file.and_then(|f| f.train.clone()).unwrap_or_default();
    let file_epochs = keys.get("epochs").map(|v| v.as_u64().map(|e| e as usize));
    let file_seed = keys.get("seed").map(|v| v.as_u64());
    merge_value("epochs", epochs, file_epochs.flatten())?;
    merge_value("seed", Some(seed), file_seed.flatten())?;
    let mut value = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let obj = value.as_object_mut().expect("config is an object");
    obj.extend(keys);
    if let Some(e) = epochs {
        obj.insert("epochs".into(), Value::from(e));
    }
    obj.insert("seed".into(), Value::from(seed));
    let cfg: TrainConfig = serde_json::from_value(value)
        .map_err(|e| DavitError::Config(format!("train config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(json: &str) -> ConfigFile {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn file_overrides_preset_fields() {
        let f = file(r#"{"preset": "micro", "model": {"drop_path_rate": 0.3}}"#);
        let cfg = resolve_model(&ModelFlags::default(), Some(&f), None, None).unwrap();
        assert_eq!(cfg.drop_path_rate, 0.3);
        assert_eq!(cfg.base_dim, 32);
    }

    #[test]
    fn conflicts_are_errors() {
        let f = file(r#"{"preset": "micro"}"#);
        let flags = ModelFlags {
            preset: Some("tiny".into()),
            ..Default::default()
        };
        assert!(matches!(
            resolve_model(&flags, Some(&f), None, None),
            Err(DavitError::Config(_))
        ));
        let f = file(r#"{"preset": "micro", "model": {"layout": "parallel"}}"#);
        let flags = ModelFlags {
            layout: Some(BlockLayout::ChannelFirst),
            ..Default::default()
        };
        assert!(resolve_model(&flags, Some(&f), None, None).is_err());
        let flags = ModelFlags {
            layout: Some(BlockLayout::Parallel),
            ..Default::default()
        };
        assert_eq!(
            resolve_model(&flags, Some(&f), None, None).unwrap().layout,
            BlockLayout::Parallel
        );
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let f = file(r#"{"preset": "micro", "model": {"widht": 3}}"#);
        assert!(resolve_model(&ModelFlags::default(), Some(&f), None, None).is_err());
        assert!(serde_json::from_str::<ConfigFile>(r#"{"presett": "micro"}"#).is_err());
    }

    #[test]
    fn preset_window_adapts_to_resolution() {
        let flags = ModelFlags {
            preset: Some("base".into()),
            ..Default::default()
        };
        let cfg = resolve_model(&flags, None, Some(384), None).unwrap();
        assert_eq!(cfg.window, davit_core::model::WindowSize::Side(12));
    }

    #[test]
    fn train_section_merges() {
        let f = file(r#"{"train": {"epochs": 3, "peak_lr": 0.01}}"#);
        let t = resolve_train(Some(&f), None, 4).unwrap();
        assert_eq!(
            (t.epochs, t.peak_lr, t.seed, t.batch_size),
            (3, 0.01, 4, 32)
        );
        assert!(resolve_train(Some(&f), Some(5), 4).is_err());
        assert_eq!(resolve_train(None, Some(5), 4).unwrap().epochs, 5);
        let f = file(r#"{"train": {"epoch": 3}}"#);
        assert!(resolve_train(Some(&f), None, 0).is_err());
    }

    #[test]
    fn merge_value_rules() {
        assert_eq!(merge_value("seed", Some(1), None).unwrap(), Some(1));
        assert_eq!(merge_value("seed", Some(1), Some(1)).unwrap(), Some(1));
        assert!(merge_value("seed", Some(1), Some(2)).is_err());
    }
}
