//! Prompt templates with named placeholders. Templates ship as editable text
//! files; the built-in set is compiled in as the fallback.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Verify,
    Cot,
    Judge,
}

impl TemplateName {
    fn as_str(self) -> &'static str {
        match self {
            TemplateName::Verify => "verify",
            TemplateName::Cot => "cot",
            TemplateName::Judge => "judge",
        }
    }
}

/// A template string with `{placeholder}` slots. Placeholders are lowercase
/// identifiers; any other brace content is left verbatim (JSON examples in
/// the judge prompt stay intact).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub template: String,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, template: impl Into<String>) -> Self {
        Self {
            name,
            template: template.into(),
        }
    }

    /// Substitute placeholders. Errors if the template references a
    /// placeholder missing from `fills`.
    pub fn render(&self, fills: &BTreeMap<&str, String>) -> Result<String> {
        let mut out = String::with_capacity(self.template.len());
        let bytes = self.template.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'{' {
                if let Some(end) = self.template[i + 1..].find('}') {
                    let key = &self.template[i + 1..i + 1 + end];
                    if !key.is_empty()
                        && key.chars().all(|c| c.is_ascii_lowercase() || c == '_')
                    {
                        let value = fills.get(key).ok_or_else(|| Error::MissingPlaceholder {
                            name: self.name.as_str().to_string(),
                            placeholder: key.to_string(),
                        })?;
                        out.push_str(value);
                        i += key.len() + 2;
                        continue;
                    }
                }
            }
            let ch = self.template[i..].chars().next().expect("in bounds");
            out.push(ch);
            i += ch.len_utf8();
        }
        Ok(out)
    }
}

/// The three prompting functions used by the reasoning pipeline.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub verify: PromptTemplate,
    pub cot: PromptTemplate,
    pub judge: PromptTemplate,
}

impl TemplateSet {
    /// Templates compiled into the binary (mirrors the `prompts/` directory).
    pub fn builtin() -> Self {
        Self {
            verify: PromptTemplate::new(
                TemplateName::Verify,
                include_str!("../../prompts/verify.txt"),
            ),
            cot: PromptTemplate::new(TemplateName::Cot, include_str!("../../prompts/cot.txt")),
            judge: PromptTemplate::new(
                TemplateName::Judge,
                include_str!("../../prompts/judge.txt"),
            ),
        }
    }

    /// Load `verify.txt`, `cot.txt`, `judge.txt` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            verify: PromptTemplate::new(
                TemplateName::Verify,
                std::fs::read_to_string(dir.join("verify.txt"))?,
            ),
            cot: PromptTemplate::new(
                TemplateName::Cot,
                std::fs::read_to_string(dir.join("cot.txt"))?,
            ),
            judge: PromptTemplate::new(
                TemplateName::Judge,
                std::fs::read_to_string(dir.join("judge.txt"))?,
            ),
        })
    }
}
