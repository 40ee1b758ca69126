use std::fmt;

use serde::Serialize;

/// Failure of a CLI stage, reported as one line of JSON on stderr.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    /// Offending configuration field, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { kind: "usage", message: message.into(), field: None }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        let field = field.into();
        CliError { kind: "config", message: format!("invalid `{field}`: {}", message.into()), field: Some(field) }
    }

    /// Prefixes the field with the name of the enclosing config section.
    pub fn in_section(mut self, section: &str) -> Self {
        if let Some(f) = &self.field {
            let full = format!("{section}.{f}");
            self.message = self.message.replacen(&format!("`{f}`"), &format!("`{full}`"), 1);
            self.field = Some(full);
        }
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&serde_json::json!({ "error": self })).expect("plain data serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<tagflow_core::Error> for CliError {
    fn from(e: tagflow_core::Error) -> Self {
        use tagflow_core::Error as E;
        match &e {
            E::InvalidParameter { name, reason } => CliError::config(*name, reason.clone()),
            E::Io(_) => CliError { kind: "io", message: e.to_string(), field: None },
            E::Json(j) => json_error(j),
            E::Format(_) => CliError { kind: "format", message: e.to_string(), field: None },
            _ => CliError { kind: "numerical", message: e.to_string(), field: None },
        }
    }
}

fn json_error(e: &serde_json::Error) -> CliError {
    let message = e.to_string();
    // serde names the key in backticks for unknown or missing fields
    let field = message.split('`').nth(1).filter(|_| message.contains("field")).map(str::to_string);
    CliError { kind: "config", message, field }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        json_error(&e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { kind: "io", message: e.to_string(), field: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_prefix_and_json() {
        let e = CliError::from(
            tagflow_core::phantom::PhantomConfig { tag_wavelength: -8.0, ..Default::default() }.validate().unwrap_err(),
        )
        .in_section("phantom");
        assert_eq!(e.field.as_deref(), Some("phantom.tag_wavelength"));
        let line = e.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"]["field"], "phantom.tag_wavelength");
        assert!(v["error"]["message"].as_str().unwrap().contains("phantom.tag_wavelength"));
    }

    #[test]
    fn unknown_key_names_field() {
        #[derive(serde::Deserialize, Debug)]
        #[serde(deny_unknown_fields)]
        #[allow(dead_code)]
        struct S {
            a: u32,
        }
        let e: CliError = serde_json::from_str::<S>(r#"{"a": 1, "bogus": 2}"#).unwrap_err().into();
        assert_eq!(e.field.as_deref(), Some("bogus"));
    }
}
