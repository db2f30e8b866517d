//! Crate-wide error type and the process exit codes derived from it.
//!
//! Every fallible operation in the library returns [`Error`]. The CLI maps an
//! error to an exit code with [`Error::exit_code`]: `2` for malformed or
//! missing input, `3` for a violated invariant in otherwise well-formed data,
//! and `4` for configuration problems. `0` is reserved for success.

use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A single field of an input record could not be parsed.
    #[error("field `{field}`: {reason}")]
    Parse { field: &'static str, reason: String },

    /// Wraps another error with the file and 1-based line it occurred on.
    #[error("{path}:{line}: {source}")]
    At {
        path: String,
        line: usize,
        #[source]
        source: Box<Error>,
    },

    /// An expected input file or section is absent.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// A domain name without a registrable part (e.g. a bare TLD).
    #[error("domain `{0}` has no registrable part")]
    UnparsableDomain(String),

    /// A rule or device label that does not exist in the dictionary.
    #[error("unknown rule label `{0}`")]
    UnknownLabel(String),

    /// An operation that needs at least one record got none.
    #[error("no input events")]
    EmptyInput,

    /// Certificate expansion was asked to start from a non-matching record.
    #[error("certificate record is not an anchor for `{0}`")]
    NoAnchor(String),

    /// The dictionary holds no endpoint sets for the requested day.
    #[error("dictionary has no endpoints for {0}")]
    MissingDay(NaiveDate),

    /// A subscriber identifier without a prefix mapping.
    #[error("no prefix mapping for subscriber {0}")]
    MissingPrefix(String),

    /// A detection event without an ASN annotation where one is required.
    #[error("detection event for subscriber {0} carries no ASN annotation")]
    MissingAsn(String),

    /// Two streams that must cover the same time window do not.
    #[error("streams cover different windows: {0}")]
    WindowMismatch(String),

    /// The rule hierarchy contains a parent cycle.
    #[error("hierarchy cycle through label `{0}`")]
    HierarchyCycle(String),

    /// A non-inheriting child rule whose domains do not contain its parent's.
    #[error("rule `{child}` does not cover all domains of its parent `{parent}`")]
    ChildNotSuperset { child: String, parent: String },

    /// A detection rule ended up with zero monitored domains.
    #[error("rule has zero monitored domains")]
    DomainCountZero,

    /// The anonymization salt must not be empty.
    #[error("anonymization salt is empty")]
    EmptySalt,

    /// A semantically invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach file/line context to an error (used by the line-oriented readers).
    pub fn at(self, path: &str, line: usize) -> Error {
        Error::At {
            path: path.to_string(),
            line,
            source: Box::new(self),
        }
    }

    /// Process exit code for this error: 2 input, 3 invariant, 4 config.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::MissingInput(_)
            | Error::UnparsableDomain(_)
            | Error::UnknownLabel(_)
            | Error::EmptyInput
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::At { source, .. } => source.exit_code(),
            Error::NoAnchor(_)
            | Error::MissingDay(_)
            | Error::MissingPrefix(_)
            | Error::MissingAsn(_)
            | Error::WindowMismatch(_)
            | Error::HierarchyCycle(_)
            | Error::ChildNotSuperset { .. }
            | Error::DomainCountZero => 3,
            Error::Config(_) | Error::EmptySalt => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(
            Error::Parse {
                field: "packets",
                reason: "x".into()
            }
            .exit_code(),
            2
        );
        assert_eq!(Error::HierarchyCycle("a".into()).exit_code(), 3);
        assert_eq!(Error::EmptySalt.exit_code(), 4);
        assert_eq!(Error::Config("bad".into()).exit_code(), 4);
    }

    #[test]
    fn at_wrapper_keeps_inner_code() {
        let inner = Error::Parse {
            field: "timestamp",
            reason: "not a number".into(),
        };
        let wrapped = inner.at("flows.csv", 17);
        assert_eq!(wrapped.exit_code(), 2);
        let text = wrapped.to_string();
        assert!(text.starts_with("flows.csv:17:"), "{text}");
    }
}
