//! Versioned file formats.

use thiserror::Error;

pub const TESS_SCHEMA: &str = "twinlab-tess/1";
pub const ELEM_SCHEMA: &str = "twinlab-elem/1";
pub const TSED_SCHEMA: &str = "twinlab-tsed/1";
pub const LAMELLA_SCHEMA: &str = "twinlab-lamellae/1";
pub const CONFIG_SCHEMA: &str = "twinlab-config/1";
pub const MARKS_SCHEMA: &str = "twinlab-marks/1";
pub const TWIN_SCHEMA: &str = "twinlab-twin/1";
pub const SUBCELL_SCHEMA: &str = "twinlab-subcells/1";
pub const SUMMARY_SCHEMA: &str = "twinlab-summary/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("expected schema {expected}, found {found}")]
    Mismatch { expected: String, found: String },
    #[error("missing schema line (expected {0})")]
    Missing(String),
    #[error("parse error: {0}")]
    Parse(String),
}

/// First line of a schema-tagged CSV file.
pub fn csv_header_line(schema: &str) -> String {
    format!("#schema={schema}\n")
}

/// Splits off and checks the schema line, returning the CSV body.
pub fn strip_csv_schema<'a>(text: &'a str, expected: &str) -> Result<&'a str, SchemaError> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let Some(found) = first.trim_end_matches('\r').strip_prefix("#schema=") else {
        return Err(SchemaError::Missing(expected.to_string()));
    };
    if found != expected {
        return Err(SchemaError::Mismatch { expected: expected.to_string(), found: found.to_string() });
    }
    Ok(rest)
}

pub fn check(found: &str, expected: &str) -> Result<(), SchemaError> {
    if found != expected {
        return Err(SchemaError::Mismatch { expected: expected.to_string(), found: found.to_string() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_line() {
        let text = format!("{}a,b\n1,2\n", csv_header_line(ELEM_SCHEMA));
        assert_eq!(strip_csv_schema(&text, ELEM_SCHEMA).unwrap(), "a,b\n1,2\n");
        assert!(matches!(strip_csv_schema(&text, TSED_SCHEMA), Err(SchemaError::Mismatch { .. })));
        assert!(matches!(strip_csv_schema("a,b\n", TSED_SCHEMA), Err(SchemaError::Missing(_))));
    }
}
