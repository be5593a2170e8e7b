// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration from a JSON file, overridden field by field by flags.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use tfdecomp_core::Precision;

use crate::CliError;

/// Every field is optional; a flag given on the command line wins over the
/// file, and the command supplies the default when both are absent.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub model_b: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub name_map: Option<PathBuf>,
    pub precision: Option<Precision>,
    pub tolerance: Option<f64>,
    pub corpus: Option<PathBuf>,
    pub segments: Option<PathBuf>,
    pub cuts: Option<String>,
    pub selectors: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub records: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub mode: Option<String>,
    pub metric: Option<String>,
    pub method: Option<String>,
    pub task: Option<String>,
    pub k: Option<usize>,
    pub mask_token: Option<u32>,
    pub drop_monosemous: Option<bool>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("--config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("--config {}: {e}", path.display())))
    }
}

/// Flag, then file, then nothing.
pub fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| file.clone())
}

/// Which cut indices a command should visit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CutSpec {
    All,
    Last,
    List(Vec<usize>),
}

impl CutSpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s.trim() {
            "all" => Ok(CutSpec::All),
            "last" => Ok(CutSpec::Last),
            list => list
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::usage(format!("--cuts: `{p}` is not a cut index, `all` or `last`")))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(CutSpec::List),
        }
    }

    /// Expands against the largest valid index.
    pub fn resolve(&self, max: usize) -> Result<Vec<usize>, CliError> {
        match self {
            CutSpec::All => Ok((0..=max).collect()),
            CutSpec::Last => Ok(vec![max]),
            CutSpec::List(v) => {
                if let Some(bad) = v.iter().find(|&&c| c > max) {
                    return Err(CliError::usage(format!("--cuts: {bad} is out of range 0..={max}")));
                }
                Ok(v.clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file = Some(3u64);
        assert_eq!(pick(&Some(5), &file), Some(5));
        assert_eq!(pick(&None, &file), Some(3));
        assert_eq!(pick::<u64>(&None, &None), None);
    }

    #[test]
    fn cut_specs() {
        assert_eq!(CutSpec::parse("all").unwrap().resolve(2).unwrap(), vec![0, 1, 2]);
        assert_eq!(CutSpec::parse("last").unwrap().resolve(4).unwrap(), vec![4]);
        assert_eq!(CutSpec::parse("1, 3").unwrap().resolve(4).unwrap(), vec![1, 3]);
        assert!(CutSpec::parse("1,x").is_err());
        assert!(CutSpec::parse("5").unwrap().resolve(4).is_err());
    }

    #[test]
    fn unknown_config_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 3, "precision": "32"}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.precision, Some(Precision::F32));
        std::fs::write(&path, r#"{"sead": 3}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
