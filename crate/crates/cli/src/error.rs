use std::fmt;

use tdcn_core::Error;

/// Coarse failure classes reported on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Runtime,
    Config,
    Data,
    Checkpoint,
    Io,
}

impl Category {
    pub fn of(err: &Error) -> Self {
        match err {
            Error::Config(_)
            | Error::Toml { .. }
            | Error::InvalidShape(_)
            | Error::ShapeMismatch { .. }
            | Error::SequenceTooShort { .. } => Category::Config,
            Error::MissingBranch(_)
            | Error::MissingColumns { .. }
            | Error::MalformedNumber { .. }
            | Error::NoFrames(_)
            | Error::EmptyDataset(_)
            | Error::Csv(_) => Category::Data,
            Error::Subject { source, .. } => Category::of(source),
            Error::Checkpoint(_) | Error::CheckpointMismatch(_) => Category::Checkpoint,
            Error::Io { .. } => Category::Io,
            _ => Category::Runtime,
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Runtime => 1,
            Category::Config => 2,
            Category::Data => 3,
            Category::Checkpoint => 4,
            Category::Io => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Runtime => "runtime",
            Category::Config => "config",
            Category::Data => "data",
            Category::Checkpoint => "checkpoint",
            Category::Io => "io",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The one-line diagnostic printed before exiting.
pub fn diagnostic(err: &Error) -> String {
    let line = err.to_string().replace('\n', " ");
    format!("error[{}]: {line}", Category::of(err))
}
