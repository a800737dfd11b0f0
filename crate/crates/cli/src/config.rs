use std::fs;
use std::path::Path;

use abc_core::eval::{Direction, CLASSIFY_TEMPLATE};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Parses a JSON config; errors name the offending field path.
pub fn read_config<T: DeserializeOwned>(stage: &'static str, path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::run(stage, format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError::config(stage, format!("{}: at `{field}`: {}", path.display(), e.inner()))
    })
}

/// The file config if given, else `fallback`.
pub fn load_or<T: DeserializeOwned>(
    stage: &'static str,
    path: Option<&Path>,
    fallback: impl FnOnce() -> T,
) -> Result<T, CliError> {
    match path {
        Some(p) => read_config(stage, p),
        None => Ok(fallback()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSet {
    Train,
    Bench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub direction: Direction,
    pub ks: Vec<usize>,
    pub images: ImageSet,
    /// Evaluate only the first `max_images` of the set.
    pub max_images: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            direction: Direction::ImageToText,
            ks: vec![1, 5, 10],
            images: ImageSet::Bench,
            max_images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub aspect: usize,
    pub template: String,
    pub images: ImageSet,
    pub max_images: Option<usize>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            aspect: 0,
            template: CLASSIFY_TEMPLATE.into(),
            images: ImageSet::Bench,
            max_images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtrlBenchConfig {
    pub ks: Vec<usize>,
}

impl Default for CtrlBenchConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10] }
    }
}
