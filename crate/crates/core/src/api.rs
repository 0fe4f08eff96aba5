//! Request and response bodies shared by the HTTP service and its client.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{FragmentReport, Source};
use crate::synthscene::GroundTruthScene;

/// Input frames of a session, resolved on the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSpec {
    /// Name of a built-in scene.
    Builtin(String),
    /// Contents of a scene file.
    Scene(String),
    /// Dataset directory as seen by the server.
    Dataset(PathBuf),
}

impl SourceSpec {
    pub fn resolve(&self) -> Result<Source> {
        match self {
            SourceSpec::Builtin(name) => GroundTruthScene::builtin(name)
                .map(Source::Scene)
                .ok_or_else(|| Error::InvalidInput(format!("no built-in scene `{name}`"))),
            SourceSpec::Scene(text) => GroundTruthScene::parse(text).map(Source::Scene),
            SourceSpec::Dataset(dir) => Ok(Source::Dataset(dir.clone())),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    /// Config file text; empty means defaults.
    #[serde(default)]
    pub config: String,
    /// `key = value` overrides applied after the config text.
    #[serde(default)]
    pub overrides: Vec<(String, String)>,
    pub source: SourceSpec,
    /// Server-side directory for kept-voxel dumps.
    #[serde(default)]
    pub dump_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub fragments: usize,
    pub integrated: usize,
    pub done: bool,
    /// Effective configuration in config-file form.
    pub config: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResponse {
    pub session: SessionInfo,
    /// Reports of the fragments integrated by this call.
    pub reports: Vec<FragmentReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// Base64 of a PLY file.
    Ply(String),
    /// Contents of a scene file.
    Scene(String),
    Builtin(String),
}

fn default_threshold() -> f64 {
    5.0
}

fn default_density() -> f64 {
    10_000.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluateRequest {
    /// Base64 of the predicted PLY mesh.
    pub pred: String,
    pub reference: ReferenceSpec,
    #[serde(default = "default_threshold")]
    pub threshold_cm: f64,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default)]
    pub seed: u64,
    /// Keep only scene samples the scene's cameras see within this depth.
    #[serde(default)]
    pub cull_d_max: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub config: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateRequest {
    pub runs: Vec<AblationRun>,
    pub source: SourceSpec,
}

/// Body of every non-2xx response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl From<&Error> for ApiError {
    fn from(e: &Error) -> Self {
        let (kind, field) = match e {
            Error::InvalidInput(_) => ("invalid_input", None),
            Error::OutOfBounds { .. } => ("out_of_bounds", None),
            Error::Config { field, .. } => ("config", Some(field.clone())),
            Error::EmptyResult(_) => ("empty_result", None),
            Error::Format { .. } => ("format", None),
            Error::Io { .. } => ("io", None),
        };
        ApiError {
            kind: kind.into(),
            field,
            message: e.to_string(),
        }
    }
}

/// Parses config text and applies overrides in order.
pub fn build_config(text: &str, overrides: &[(String, String)]) -> Result<crate::config::PipelineConfig> {
    let mut cfg = crate::config::PipelineConfig::parse(text)?;
    cfg.apply_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources_resolve() {
        assert!(matches!(
            SourceSpec::Builtin("room".into()).resolve().unwrap(),
            Source::Scene(_)
        ));
        assert!(SourceSpec::Builtin("attic".into()).resolve().is_err());
        let text = GroundTruthScene::two_planes().to_text();
        assert!(matches!(SourceSpec::Scene(text).resolve().unwrap(), Source::Scene(s) if s.name == "two-planes"));
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = build_config("window = 5\n", &[("seed".into(), "7".into())]).unwrap();
        assert_eq!((cfg.window, cfg.seed), (5, 7));
        let err = build_config("", &[("tau_vis".into(), "x".into())]).unwrap_err();
        let api = ApiError::from(&err);
        assert_eq!((api.kind.as_str(), api.field.as_deref()), ("config", Some("tau_vis")));
        let json = serde_json::to_string(&SourceSpec::Dataset("/d".into())).unwrap();
        assert_eq!(json, r#"{"dataset":"/d"}"#);
    }
}
