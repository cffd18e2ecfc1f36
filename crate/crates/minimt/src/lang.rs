//! Language identifiers.

use std::fmt;

/// A short language code such as `"it"` or `"en"`.
///
/// The corresponding target-forcing flag token is `"<code>"` with angle
/// brackets, e.g. `<it>`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LangId(String);

impl LangId {
    pub fn new(code: impl Into<String>) -> Self {
        LangId(code.into())
    }

    pub fn code(&self) -> &str {
        &self.0
    }

    /// The target-forcing token for this language.
    pub fn flag_token(&self) -> String {
        format!("<{}>", self.0)
    }
}

impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LangId {
    fn from(s: &str) -> Self {
        LangId::new(s)
    }
}
