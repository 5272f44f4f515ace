use std::path::PathBuf;

use crate::trainer::Checkpoint;

pub type Result<T, E = VdtError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum VdtError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("label {label} out of range for {num_labels} labels")]
    Label { label: usize, num_labels: usize },

    /// Non-finite state or gradient during training.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged {
        iteration: usize,
        detail: String,
        /// Checkpoint of the last iteration that completed with finite values.
        last_good: Option<Box<Checkpoint>>,
    },

    /// Non-finite state during generation.
    #[error("generation produced a non-finite state at step {step} (sample {sample})")]
    Generation { step: usize, sample: usize },

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: parse error: {detail}", path.display())]
    Parse { path: PathBuf, detail: String },
}

impl VdtError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VdtError::Io { path: path.into(), source }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, VdtError::Diverged { .. } | VdtError::Generation { .. })
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(VdtError::Dimension { what, expected, got });
    }
    Ok(())
}
