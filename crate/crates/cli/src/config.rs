//! Run configuration: defaults, JSON config files and dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use ordcon::error::{Error, Result};
use ordcon::synth::SyntheticSpec;
use ordcon::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Fraction of the dataset held out from training and used for metrics.
    pub holdout_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Dataset CSV; generated from `data` when absent.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub export_features: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths {
                out_dir: PathBuf::from("runs"),
                ..Paths::default()
            },
        }
    }
}

impl RunConfig {
    pub fn aifr() -> Self {
        RunConfig {
            train: TrainConfig::aifr(),
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.eval.holdout_fraction) {
            return Err(Error::InvalidConfig {
                field: "eval.holdout_fraction".into(),
                msg: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: field.into(),
        msg: msg.into(),
    }
}

/// Recursively overlays `top` onto `base`, rejecting keys `base` lacks.
fn merge(base: &mut Value, top: Value, prefix: &str) -> Result<()> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| invalid(&key, "unknown config key"))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        (b, t) => {
            *b = t;
            Ok(())
        }
    }
}

/// Sets `key` (dotted) to `raw`, read as JSON when it parses and as a plain
/// string otherwise.
pub fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut slot = root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| invalid(key, "unknown config key"))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn decode(v: Value) -> Result<RunConfig> {
    serde_json::from_value(v).map_err(|e| invalid("config", e.to_string()))
}

/// Base config, then the config file, then `edit` (flag-level settings),
/// then dotted overrides.
pub fn resolve(
    base: RunConfig,
    file: Option<&Path>,
    edit: impl FnOnce(&mut RunConfig),
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    let mut v = serde_json::to_value(&base).expect("config serializes");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let top: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        merge(&mut v, top, "")?;
    }
    let mut cfg = decode(v)?;
    edit(&mut cfg);
    let mut v = serde_json::to_value(&cfg).expect("config serializes");
    for (k, raw) in overrides {
        set_dotted(&mut v, k, raw)?;
    }
    decode(v)
}

/// Pulls `--a.b value` and `--a.b=value` pairs out of `args`.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| invalid(&name, "missing value"))?,
        };
        pairs.push((name, value));
    }
    Ok((rest, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, pairs) =
            split_overrides(args(&["ordcon", "pretrain", "--train.lr", "0.01", "--seed", "3", "--data.n_samples=10"]))
                .unwrap();
        assert_eq!(rest, args(&["ordcon", "pretrain", "--seed", "3"]));
        assert_eq!(
            pairs,
            vec![
                ("train.lr".to_string(), "0.01".to_string()),
                ("data.n_samples".to_string(), "10".to_string())
            ]
        );
        assert!(split_overrides(args(&["--train.lr"])).is_err());
    }

    #[test]
    fn dotted_override_reaches_nested_fields() {
        let over = vec![
            ("train.loss.tau".to_string(), "0.5".to_string()),
            ("train.mode".to_string(), "aifr".to_string()),
            ("train.model.hidden_dims".to_string(), "[8, 4]".to_string()),
        ];
        let cfg = resolve(RunConfig::default(), None, |_| {}, &over).unwrap();
        assert_eq!(cfg.train.loss.tau, 0.5);
        assert_eq!(cfg.train.mode, ordcon::train::Mode::Aifr);
        assert_eq!(cfg.train.model.hidden_dims, vec![8, 4]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let over = vec![("train.lrr".to_string(), "1".to_string())];
        let err = resolve(RunConfig::default(), None, |_| {}, &over).unwrap_err();
        assert!(err.to_string().contains("train.lrr"));

        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        let top = serde_json::json!({"train": {"nope": 1}});
        assert!(merge(&mut v, top, "").unwrap_err().to_string().contains("train.nope"));
    }

    #[test]
    fn echoed_config_resolves_to_itself() {
        let mut cfg = RunConfig::aifr();
        cfg.train.seed = 9;
        cfg.paths.data = Some("d.csv".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.json");
        fs::write(&p, cfg.to_json()).unwrap();
        let back = resolve(RunConfig::default(), Some(&p), |_| {}, &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flags_apply_before_dotted_overrides() {
        let over = vec![("train.seed".to_string(), "4".to_string())];
        let cfg = resolve(RunConfig::default(), None, |c| c.train.seed = 1, &over).unwrap();
        assert_eq!(cfg.train.seed, 4);
    }
}
