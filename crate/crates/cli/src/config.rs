//! Run configuration: JSON file, seed fallback and `--section.key=value`
//! overrides, resolved in that order.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context};
use scunetpp_core::data::DataConfig;
use scunetpp_core::model::ModelConfig;
use scunetpp_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

pub const SEED_ENV: &str = "SCUNETPP_SEED";
pub const RESOLVED: &str = "config.json";
const SECTIONS: [&str; 3] = ["model", "train", "data"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

/// Pulls `--model.x=…`, `--train.x=…` and `--data.x=…` out of `args`.
pub fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<Override>), UsageError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let Some(body) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        let key = body.split('=').next().unwrap_or_default();
        let section = key.split('.').next().unwrap_or_default();
        if !key.contains('.') || !SECTIONS.contains(&section) {
            rest.push(arg);
            continue;
        }
        let Some((key, raw)) = body.split_once('=') else {
            return Err(UsageError(format!("override --{key} needs a value: --{key}=VALUE")));
        };
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        overrides.push(Override { path: key.split('.').map(str::to_string).collect(), value });
    }
    Ok((rest, overrides))
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

fn set(root: &mut Value, path: &[String], value: Value) {
    let mut node = root;
    for key in &path[..path.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node.as_object_mut().expect("object").entry(key.clone()).or_insert(Value::Object(Map::new()));
    }
    if !node.is_object() {
        *node = Value::Object(Map::new());
    }
    node.as_object_mut().expect("object").insert(path[path.len() - 1].clone(), value);
}

fn has_seed(file: &Value, section: &str) -> bool {
    file.get(section).and_then(|s| s.get("seed")).is_some()
}

/// File values over defaults, then `SCUNETPP_SEED` for seeds the file leaves
/// unset, then `--seed` for every section, then dotted overrides.
pub fn resolve(
    file: Option<&Path>,
    seed: Option<u64>,
    env_seed: Option<&str>,
    overrides: &[Override],
) -> anyhow::Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    let file_value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let f: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            if !f.is_object() {
                bail!("config {} must hold a JSON object", p.display());
            }
            f
        }
        None => Value::Object(Map::new()),
    };
    merge(&mut v, file_value.clone());
    serde_json::from_value::<RunConfig>(v.clone())
        .with_context(|| format!("invalid config {}", file.map_or("<defaults>".into(), |p| p.display().to_string())))?;
    if let Some(s) = env_seed {
        let s: u64 = s.trim().parse().map_err(|_| UsageError(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        for section in SECTIONS.iter().filter(|sec| !has_seed(&file_value, sec)) {
            set(&mut v, &[section.to_string(), "seed".into()], s.into());
        }
    }
    if let Some(s) = seed {
        for section in SECTIONS {
            set(&mut v, &[section.to_string(), "seed".into()], s.into());
        }
    }
    for o in overrides {
        set(&mut v, &o.path, o.value.clone());
    }
    let run: RunConfig = serde_json::from_value(v).map_err(|e| UsageError(format!("bad override: {e}")))?;
    run.model.validate()?;
    run.train.validate()?;
    run.data.phantom.validate()?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, o) = split_overrides(os(&["scunetpp", "train", "--model.base_dim=8", "--out", "x", "--data.phantom.noise=5"])).unwrap();
        assert_eq!(rest, os(&["scunetpp", "train", "--out", "x"]));
        assert_eq!(o[0].path, ["model", "base_dim"]);
        assert_eq!(o[0].value, Value::from(8));
        assert_eq!(o[1].path, ["data", "phantom", "noise"]);
        assert!(split_overrides(os(&["--train.lr"])).is_err());
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"model": {"seed": 3, "base_dim": 8, "heads": [1, 2, 4, 8], "img_size": 32}, "train": {"lr": 0.01}}"#).unwrap();
        let run = resolve(Some(&path), None, Some("11"), &[]).unwrap();
        assert_eq!((run.model.seed, run.train.seed, run.data.seed), (3, 11, 11));
        assert_eq!(run.train.lr, 0.01);
        let o = Override { path: vec!["train".into(), "lr".into()], value: Value::from(0.5) };
        let run = resolve(Some(&path), Some(4), Some("11"), &[o]).unwrap();
        assert_eq!((run.model.seed, run.train.seed, run.train.lr), (4, 4, 0.5));
    }

    #[test]
    fn unknown_override_is_a_usage_error() {
        let o = Override { path: vec!["model".into(), "depth".into()], value: Value::from(3) };
        let e = resolve(None, None, None, &[o]).unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
    }
}
