use std::fmt;
use std::path::Path;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Invalid = 1,
    Provenance = 2,
    Io = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
    pub hint: Option<String>,
}

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Invalid,
            message: msg.into(),
            hint: None,
        }
    }

    pub fn provenance(msg: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Provenance,
            message: msg.into(),
            hint: None,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            kind: ExitKind::Io,
            message: format!("{}: {err}", path.display()),
            hint: None,
        }
    }

    pub fn with_hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)?;
        if let Some(h) = &self.hint {
            write!(f, "\nhint: {h}")?;
        }
        Ok(())
    }
}

impl std::error::Error for CliError {}

impl From<skoplab::Error> for CliError {
    fn from(e: skoplab::Error) -> Self {
        let kind = match &e {
            skoplab::Error::InvalidInput(_) | skoplab::Error::Format(_) => ExitKind::Invalid,
            skoplab::Error::Provenance(_) => ExitKind::Provenance,
            skoplab::Error::Io { .. } => ExitKind::Io,
        };
        Self {
            kind,
            message: e.to_string(),
            hint: None,
        }
    }
}
