use serde::{Deserialize, Serialize};

use super::LabelError;
use crate::catalog::ObjectRecord;

/// Default token budget: the text tower's context length.
pub const DEFAULT_MAX_TOKENS: usize = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    DesignPurpose,
    Structure,
    Template,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::DesignPurpose, PromptKind::Structure, PromptKind::Template];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::DesignPurpose => "design_purpose",
            PromptKind::Structure => "structure",
            PromptKind::Template => "template",
        }
    }
}

impl std::str::FromStr for PromptKind {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LabelError::Template(format!("unknown prompt kind {s:?}")))
    }
}

impl std::fmt::Display for PromptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Prompt sent with each image. `{category}` in the body is replaced by the
/// record's category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub body: String,
    #[serde(default = "default_max_tokens")]
    pub max_description_tokens: usize,
}

fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

impl PromptTemplate {
    pub fn new(kind: PromptKind, body: impl Into<String>) -> Result<Self, LabelError> {
        let t = Self {
            kind,
            body: body.into(),
            max_description_tokens: DEFAULT_MAX_TOKENS,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        if self.body.trim().is_empty() {
            return Err(LabelError::Template("template body is empty".into()));
        }
        if self.max_description_tokens == 0 {
            return Err(LabelError::Template("max_description_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn render(&self, record: &ObjectRecord) -> String {
        let category = if record.category.trim().is_empty() { "object" } else { &record.category };
        self.body.replace("{category}", category)
    }
}

const DESIGN_PURPOSE: &str = "Please describe the provided {category} within 5 sentences. \
Start with its intended purpose and the type of user and setting it is designed for. \
Then explain which features of the design serve that purpose. \
The texture, material, shadowing and color are not important.";

const STRUCTURE: &str = "Please describe the provided object within 5 sentences. \
Please focus on the SHAPE, PROPORTION, and UNIQUENESS of the object.";

const TEMPLATE: &str = "Describe the provided {category} in under 60 words by filling in this template: \
\"A [style] {category} for [intended use and user]. It has [backrest shape], [seat shape and proportion], \
[legs or base] and [armrests, if any]. It is unique because [most distinctive feature].\" \
The texture, material, shadowing and color are not important.";

/// The three shipped prompt designs. Edit or replace them through config;
/// only the structure prompt is fixed text.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    [
        (PromptKind::DesignPurpose, DESIGN_PURPOSE),
        (PromptKind::Structure, STRUCTURE),
        (PromptKind::Template, TEMPLATE),
    ]
    .into_iter()
    .map(|(kind, body)| PromptTemplate::new(kind, body).expect("builtin template is valid"))
    .collect()
}

pub fn builtin_template(kind: PromptKind) -> PromptTemplate {
    builtin_templates()
        .into_iter()
        .find(|t| t.kind == kind)
        .expect("every kind has a builtin")
}
