use std::fmt;

use thiserror::Error;

use crate::config::Origin;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{msg}")]
    Config {
        key: String,
        origin: Origin,
        msg: String,
    },

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] deepblur_core::Error),
}

impl CliError {
    pub fn config(key: impl Into<String>, origin: Origin, msg: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            origin,
            msg: msg.into(),
        }
    }

    /// Stable snake-case tag for the error class.
    pub fn kind(&self) -> &'static str {
        use deepblur_core::Error as E;
        match self {
            CliError::Config { .. } => "config",
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Core(e) => match e {
                E::Io { .. } => "io",
                E::PngDecode(_) | E::UnsupportedPng(_) => "png_decode",
                E::PngEncode(_) => "png_encode",
                E::Shape(_) => "shape",
                E::InvalidParameter(_) => "invalid_parameter",
                E::NonFinite(_) => "non_finite",
                E::InsufficientSamples(_) => "insufficient_samples",
                E::NegativeEigenvalue(_) => "negative_eigenvalue",
                E::InversionAborted { .. } => "inversion_aborted",
                E::Untrained => "untrained",
                E::DegenerateData(_) => "degenerate_data",
                E::BadMagic(_) => "bad_magic",
                E::VersionMismatch(_) => "version_mismatch",
                E::TruncatedPayload { .. } => "truncated_payload",
                E::Transport(_) => "transport",
                E::Unenrolled => "unenrolled",
                E::MalformedResponse(_) => "malformed_response",
                E::Remote(_) => "remote",
            },
        }
    }

    /// The single stderr line printed before a nonzero exit:
    /// `error kind=<kind> [key=<key> line=<line>] msg="<message>"`.
    pub fn line(&self) -> String {
        ErrorLine(self).to_string()
    }
}

struct ErrorLine<'a>(&'a CliError);

impl fmt::Display for ErrorLine<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error kind={}", self.0.kind())?;
        if let CliError::Config { key, origin, .. } = self.0 {
            write!(f, " key={key} line={origin}")?;
        }
        let msg: String = self
            .0
            .to_string()
            .chars()
            .map(|c| if c.is_control() { ' ' } else { c })
            .collect();
        write!(f, " msg={msg:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_line_with_key_and_line() {
        let e = CliError::config("split.seed", Origin::Line(4), "bad\nvalue");
        assert_eq!(e.line(), "error kind=config key=split.seed line=4 msg=\"bad value\"");
    }

    #[test]
    fn core_errors_keep_their_class() {
        let e = CliError::from(deepblur_core::Error::VersionMismatch(3));
        assert!(e.line().starts_with("error kind=version_mismatch msg="));
        assert!(!e.line().contains('\n'));
    }
}
