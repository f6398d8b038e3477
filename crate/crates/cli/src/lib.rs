//! Stage commands and the end-to-end pipeline behind the `instyle` binary.
//!
//! Every stage reads and writes plain files (IEMB embeddings, JSON Lines pair
//! lists, CSV logs), so stages can be run one at a time or chained by
//! [`pipeline::run`].

pub mod commands;
pub mod config;
pub mod pipeline;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

pub use config::PipelineConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl CliError {
    pub fn stage(
        stage: &'static str,
        source: impl std::error::Error + Send + Sync + 'static,
    ) -> Self {
        Self::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// 2 for usage, configuration and missing inputs; 1 for failures inside
    /// a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::MissingInput(_) => 2,
            Self::Stage { .. } => 1,
        }
    }

    /// Name of the underlying module error, e.g. `PoolExhausted`.
    pub fn error_name(&self) -> String {
        match self {
            Self::Usage(msg) => leading_name(msg).unwrap_or("Usage").into(),
            Self::MissingInput(_) => "MissingInput".into(),
            Self::Stage { source, .. } => {
                leading_name(&source.to_string()).unwrap_or("Error").into()
            }
        }
    }
}

/// `Name` from messages of the form `Name: detail` or a bare `Name`.
fn leading_name(text: &str) -> Option<&str> {
    let end = text
        .find(|c: char| !c.is_ascii_alphanumeric())
        .unwrap_or(text.len());
    let (head, rest) = text.split_at(end);
    let named = head.starts_with(|c: char| c.is_ascii_uppercase())
        && (rest.is_empty() || rest.starts_with(':'));
    named.then_some(head)
}

static QUIET: AtomicBool = AtomicBool::new(false);

/// Silences [`log`] for library callers that only want the results.
pub fn set_quiet(quiet: bool) {
    QUIET.store(quiet, Ordering::Relaxed);
}

/// One `key=value` line on stderr.
pub fn log(stage: &str, fields: &[(&str, String)]) {
    if QUIET.load(Ordering::Relaxed) {
        return;
    }
    let mut line = format!("stage={stage}");
    for (key, value) in fields {
        line.push(' ');
        line.push_str(key);
        line.push('=');
        line.push_str(value);
    }
    eprintln!("{line}");
}
