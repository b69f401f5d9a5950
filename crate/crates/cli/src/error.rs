use std::path::PathBuf;

use selfreeze_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config:\n{}", bullet_list(.0))]
    Config(Vec<String>),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: CoreError,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write metrics: {0}")]
    Csv(#[from] csv::Error),

    #[error("cannot serialise record: {0}")]
    Json(#[from] serde_json::Error),
}

fn bullet_list(items: &[String]) -> String {
    items.iter().map(|s| format!("  - {s}")).collect::<Vec<_>>().join("\n")
}

fn core_exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) => 2,
        CoreError::Data(_) | CoreError::Input(_) | CoreError::Index { .. } | CoreError::Dimension { .. } => 3,
        CoreError::Training { .. } => 4,
        CoreError::Checkpoint(_) => 5,
        CoreError::Contract(_) | CoreError::Io { .. } => 1,
    }
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 2 config, 3 data, 4 training, 5 checkpoint, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { source, .. } | CliError::Core(source) => core_exit_code(source),
            CliError::Io { .. } | CliError::Csv(_) | CliError::Json(_) => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Tags a core error with the pipeline stage it came from.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for selfreeze_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::config("x").exit_code(), 2);
        let stage = |e| CliError::Stage { stage: "general", source: e };
        assert_eq!(stage(CoreError::Data("d".into())).exit_code(), 3);
        assert_eq!(
            stage(CoreError::Training {
                step: 3,
                reason: "nan".into()
            })
            .exit_code(),
            4
        );
        assert_eq!(CliError::Core(CoreError::Checkpoint("c".into())).exit_code(), 5);
        assert_eq!(CliError::Core(CoreError::Config("c".into())).exit_code(), 2);
    }

    #[test]
    fn config_errors_are_listed() {
        let msg = CliError::Config(vec!["a".into(), "b".into()]).to_string();
        assert!(msg.contains("  - a\n  - b"));
    }
}
