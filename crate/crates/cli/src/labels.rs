//! Capture-file label maps.
//!
//! One rule per line: `<file-name glob> <class name>`. Blank lines and `#`
//! comments are ignored. Classes are numbered in order of first appearance and
//! the first matching rule wins.

use glob::Pattern;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct LabelMap {
    rules: Vec<(Pattern, u16)>,
    pub classes: Vec<String>,
}

impl LabelMap {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut rules = Vec::new();
        let mut classes: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(pat), Some(class), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(CliError::Parse(format!(
                    "label map line {}: expected `<pattern> <class>`",
                    i + 1
                )));
            };
            let pattern = Pattern::new(pat).map_err(|e| CliError::Parse(format!("label map line {}: {e}", i + 1)))?;
            let id = match classes.iter().position(|c| c == class) {
                Some(id) => id,
                None => {
                    classes.push(class.to_string());
                    classes.len() - 1
                }
            };
            rules.push((pattern, id as u16));
        }
        if classes.is_empty() {
            return Err(CliError::Config("label map has no rules".into()));
        }
        Ok(Self { rules, classes })
    }

    pub fn label(&self, file_name: &str) -> Option<u16> {
        self.rules.iter().find(|(p, _)| p.matches(file_name)).map(|(_, id)| *id)
    }
}
