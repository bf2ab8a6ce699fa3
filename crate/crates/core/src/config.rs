//! JSON configuration documents for the command-line tool.
//!
//! A document names its kind in `"command"` (`experiment` or `sweep`), holds
//! an [`ExperimentConfig`] under `"experiment"` and, for sweeps, the swept
//! axis under `"sweep"`. Relative paths inside the document resolve against
//! `"workdir"`, which itself resolves against the document's directory.
//!
//! ```
//! use shiftcal::config::CliConfig;
//!
//! let text = r#"{
//!     "command": "experiment",
//!     "experiment": {
//!         "generator": {"kind": "mixture_shift", "source_ratio": [1, 4], "target_ratio": [4, 1]}
//!     }
//! }"#;
//! let config = CliConfig::from_str_with_overrides(text, &["experiment.n_replications=3".into()]).unwrap();
//! assert_eq!(config.experiment.n_replications, 3);
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::harness::{ExperimentConfig, GeneratorConfig, SweepAxis, SweepSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentKind {
    Experiment,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub command: DocumentKind,
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub sweep: Option<SweepAxis>,
}

impl CliConfig {
    /// Reads a document, applies `path=value` overrides, validates, and
    /// resolves relative paths.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_str_with_overrides(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let workdir = match &config.workdir {
            Some(dir) => base.join(dir),
            None => base.to_path_buf(),
        };
        config.resolve_paths(&workdir);
        config.workdir = Some(workdir);
        Ok(config)
    }

    pub fn from_str_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if !overrides.is_empty() {
            // fill defaults first so overrides can target fields the document omits
            if let Ok(full) = serde_json::from_value::<CliConfig>(value.clone()) {
                value = serde_json::to_value(full)?;
            }
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let config: CliConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate("experiment")?;
        match (self.command, &self.sweep) {
            (DocumentKind::Sweep, None) => {
                Err(Error::config("sweep", "required when command is \"sweep\""))
            }
            (DocumentKind::Experiment, Some(_)) => Err(Error::config(
                "sweep",
                "only allowed when command is \"sweep\"",
            )),
            (DocumentKind::Sweep, Some(_)) => {
                self.sweep_spec()?.grid()?;
                Ok(())
            }
            (DocumentKind::Experiment, None) => Ok(()),
        }
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let axis = self
            .sweep
            .clone()
            .ok_or_else(|| Error::config("sweep", "this document has no sweep axis"))?;
        Ok(SweepSpec {
            axis,
            base: self.experiment.clone(),
        })
    }

    fn resolve_paths(&mut self, workdir: &Path) {
        if let GeneratorConfig::Files {
            source,
            target,
            weights,
        } = &mut self.experiment.generator
        {
            for p in [Some(source), Some(target), weights.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = workdir.join(&*p);
                }
            }
        }
    }
}

/// Sets the leaf at a dotted path (`a.b.0.c=value`). The value is parsed as
/// JSON when possible and taken as a string otherwise. Missing object keys are
/// created; numeric segments index arrays.
pub fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("expected path=value, got {item:?}")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::config("--set", format!("malformed path {path:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for segment in path.split('.') {
        node = match node {
            Value::Object(map) => map.entry(segment).or_insert(Value::Null),
            Value::Array(items) => {
                let index: usize = segment.parse().map_err(|_| {
                    Error::config(path, format!("{segment:?} is not an array index"))
                })?;
                let len = items.len();
                items.get_mut(index).ok_or_else(|| {
                    Error::config(path, format!("index {index} out of range for length {len}"))
                })?
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                let Value::Object(map) = node else {
                    unreachable!()
                };
                map.entry(segment).or_insert(Value::Null)
            }
            _ => {
                return Err(Error::config(
                    path,
                    format!("cannot descend into a scalar at {segment:?}"),
                ))
            }
        };
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const MIXTURE: &str = r#"{
        "command": "experiment",
        "experiment": {
            "generator": {"kind": "mixture_shift", "source_ratio": [1, 4], "target_ratio": [4, 1]}
        }
    }"#;

    #[test]
    fn overrides_set_nested_leaves() {
        let mut v = json!({"a": {"b": 1}, "list": [1, 2]});
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "a.c.d=true").unwrap();
        apply_override(&mut v, "list.1=\"x\"").unwrap();
        apply_override(&mut v, "name=plain").unwrap();
        assert_eq!(
            v,
            json!({"a": {"b": 2.5, "c": {"d": true}}, "list": [1, "x"], "name": "plain"})
        );
        assert!(apply_override(&mut v, "list.5=1").is_err());
        assert!(apply_override(&mut v, "a.b.c=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn negative_learning_rate_names_the_field() {
        let err = CliConfig::from_str_with_overrides(
            MIXTURE,
            &["experiment.classifier.learning_rate=-1".into()],
        )
        .unwrap_err();
        assert!(err.is_validation());
        assert!(
            err.to_string()
                .contains("experiment.classifier.learning_rate"),
            "{err}"
        );
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = CliConfig::from_str_with_overrides(MIXTURE, &["experiment.bogus=1".into()])
            .unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = CliConfig::from_str_with_overrides(MIXTURE, &["extra=1".into()]).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn sweep_documents_need_an_axis() {
        let err =
            CliConfig::from_str_with_overrides(MIXTURE, &["command=sweep".into()]).unwrap_err();
        assert!(err.to_string().contains("sweep"), "{err}");
        let ok = CliConfig::from_str_with_overrides(
            MIXTURE,
            &[
                "command=sweep".into(),
                r#"sweep={"kind": "weight_noise", "sigmas": [0, 1]}"#.into(),
            ],
        )
        .unwrap();
        assert_eq!(ok.sweep_spec().unwrap().grid().unwrap().len(), 2);
    }

    #[test]
    fn malformed_json_reports_a_line() {
        let err = CliConfig::from_str_with_overrides("{\n\"command\": ,\n}", &[]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
